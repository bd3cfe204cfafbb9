//! The run config: one JSON document shared by every subcommand.

use std::path::Path;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use scenesynth::environment::{Camera, DomainConfig};
use scenesynth::hash::sha256_hex;
use scenesynth::model::ModelConfig;
use scenesynth::scenegraph::CategoryRegistry;
use scenesynth::synthesis::ReconstructionConfig;
use scenesynth::trainer::TrainConfig;

pub const CONFIG_VERSION: u32 = 1;

/// A config problem; maps to exit code 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSection {
    /// Shared by both domains; overrides any camera inside them.
    pub camera: Camera,
    pub source: DomainConfig,
    pub target: DomainConfig,
}

impl Default for EnvSection {
    fn default() -> Self {
        EnvSection {
            camera: Camera::default(),
            source: DomainConfig::clevr_source(),
            target: DomainConfig::clevr_target(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub classes: Vec<String>,
    pub net: ModelConfig,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { classes: CategoryRegistry::clevr().names().to_vec(), net: ModelConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default)]
    pub env: EnvSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    /// Defaults to the source domain's palette and assets.
    #[serde(default)]
    pub recon: Option<ReconstructionConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { version: CONFIG_VERSION, env: EnvSection::default(), model: ModelSection::default(), train: TrainConfig::default(), recon: None }
    }
}

/// A validated config with the cross-section plumbing done.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub doc: RunConfig,
    pub source: DomainConfig,
    pub target: DomainConfig,
    pub recon: ReconstructionConfig,
    pub registry: CategoryRegistry,
    pub train: TrainConfig,
    pub hash: String,
}

impl RunConfig {
    pub fn parse(text: &str) -> anyhow::Result<RunConfig> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| ConfigError(format!("config is not valid JSON: {e}")))?;
        match value.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == CONFIG_VERSION as u64 => {}
            Some(v) => bail!(ConfigError(format!("config version {v} is not supported (expected {CONFIG_VERSION})"))),
            None => bail!(ConfigError("config has no \"version\" field".into())),
        }
        serde_json::from_value(value).map_err(|e| ConfigError(format!("config: {e}")).into())
    }

    pub fn load(path: Option<&Path>) -> anyhow::Result<Resolved> {
        let doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                RunConfig::parse(&text)?
            }
            None => RunConfig::default(),
        };
        doc.resolve()
    }

    pub fn resolve(mut self) -> anyhow::Result<Resolved> {
        let err = |m: String| ConfigError(m);
        let registry = CategoryRegistry::new(self.model.classes.iter().cloned()).map_err(|e| err(format!("model.classes: {e}")))?;
        if registry.len() != self.model.net.num_classes {
            bail!(err(format!("model.classes lists {} names but model.net.num_classes is {}", registry.len(), self.model.net.num_classes)));
        }
        let mut source = self.env.source.clone();
        let mut target = self.env.target.clone();
        source.camera = self.env.camera;
        target.camera = self.env.camera;
        source.validate().map_err(|e| err(format!("env.source: {e}")))?;
        target.validate().map_err(|e| err(format!("env.target: {e}")))?;
        for (name, d) in [("source", &source), ("target", &target)] {
            if d.classes.iter().any(|&c| c >= registry.len()) {
                bail!(err(format!("env.{name} uses a class outside model.classes")));
            }
        }
        let recon = self.recon.clone().unwrap_or_else(|| ReconstructionConfig::for_domain(&source));
        recon.validate().map_err(|e| err(format!("recon: {e}")))?;
        self.recon = Some(recon.clone());

        let mut train = self.train.clone();
        train.source = source.clone();
        train.recon = recon.clone();
        train.model = self.model.net.clone();
        train.validate().map_err(|e| err(format!("train: {e}")))?;

        let hash = sha256_hex(serde_json::to_string(&self).expect("config serializes").as_bytes());
        Ok(Resolved { doc: self, source, target, recon, registry, train, hash })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_resolves() {
        let r = RunConfig::default().resolve().unwrap();
        assert_eq!(r.registry.len(), 3);
        assert_eq!(r.train.source.camera, r.doc.env.camera);
    }

    #[test]
    fn default_round_trips_with_same_hash() {
        let a = RunConfig::default().resolve().unwrap();
        let b = RunConfig::parse(&a.doc.to_json()).unwrap().resolve().unwrap();
        assert_eq!(a.hash, b.hash);
    }

    #[test]
    fn minimal_document_is_default() {
        let r = RunConfig::parse(r#"{"version":1}"#).unwrap().resolve().unwrap();
        assert_eq!(r.hash, RunConfig::default().resolve().unwrap().hash);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::parse(r#"{"version":1,"bogus":2}"#).is_err());
        assert!(RunConfig::parse(r#"{"version":1,"train":{"epochz":2}}"#).is_err());
    }

    #[test]
    fn other_versions_rejected() {
        let e = RunConfig::parse(r#"{"version":2}"#).unwrap_err();
        assert!(e.to_string().contains("version 2"));
        assert!(RunConfig::parse("{}").is_err());
    }

    #[test]
    fn camera_model_mismatch_rejected() {
        let mut c = RunConfig::default();
        c.env.camera.width = 32;
        c.env.camera.height = 32;
        assert!(c.resolve().is_err());
    }

    #[test]
    fn class_count_mismatch_rejected() {
        let mut c = RunConfig::default();
        c.model.classes.pop();
        assert!(c.resolve().is_err());
    }
}
