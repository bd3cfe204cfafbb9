//! On-disk datasets: a manifest plus numbered PPM images, graphs and scenes.
//!
//! ```text
//! DIR/manifest.json
//! DIR/images/000000.ppm
//! DIR/graphs/000000.json   (labeled datasets only)
//! DIR/scenes/000000.json   (labeled datasets only)
//! ```
//!
//! Every file read goes through [`read_file`]. When the environment variable
//! `SCENESYNTH_ACCESS_LOG` names a file, each read path is appended to it, so
//! tests can check which files a command touched.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::environment::{mix_seed, Camera, DomainTag, EnvError, Image, Scene3D, SEED_MIXING};
use crate::hash::sha256_hex;
use crate::scenegraph::{CategoryRegistry, GraphError, SceneGraph};

pub const MANIFEST_VERSION: u32 = 1;
pub const ACCESS_LOG_ENV: &str = "SCENESYNTH_ACCESS_LOG";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("I/O error on {path}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("{path}: checksum {actual} does not match manifest {expected}")]
    Checksum { path: PathBuf, expected: String, actual: String },
    #[error("manifest version {0} is not supported (expected {MANIFEST_VERSION})")]
    Version(u32),
    #[error("dataset at {0} has no labels")]
    Unlabeled(PathBuf),
    #[error("manifest lists {listed} samples but count is {count}")]
    Count { listed: usize, count: usize },
}

pub type Result<T> = std::result::Result<T, DatasetError>;

/// Reads a file, recording the access when instrumentation is enabled.
pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    if let Some(log) = std::env::var_os(ACCESS_LOG_ENV) {
        let line = format!("{}\n", path.display());
        let _ = fs::OpenOptions::new().create(true).append(true).open(log).and_then(|mut f| f.write_all(line.as_bytes()));
    }
    fs::read(path).map_err(|source| DatasetError::Io { path: path.to_path_buf(), source })
}

pub fn read_text(path: &Path) -> Result<String> {
    String::from_utf8(read_file(path)?).map_err(|e| DatasetError::Format { path: path.to_path_buf(), msg: e.to_string() })
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|source| DatasetError::Io { path: parent.to_path_buf(), source })?;
    }
    fs::write(path, bytes).map_err(|source| DatasetError::Io { path: path.to_path_buf(), source })
}

pub fn stem(index: usize) -> String {
    format!("{index:06}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub index: usize,
    pub seed: u64,
    pub image_sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub graph_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene_sha256: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub generator: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recon_threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decode_threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub domain: DomainTag,
    pub camera: Camera,
    pub count: usize,
    pub master_seed: u64,
    pub seed_mixing: String,
    pub labeled: bool,
    pub registry: Vec<String>,
    pub provenance: Provenance,
    pub samples: Vec<SampleEntry>,
}

/// One sample about to be written.
#[derive(Debug, Clone)]
pub struct SampleData {
    pub seed: u64,
    pub image: Image,
    pub graph: Option<SceneGraph>,
    pub scene: Option<Scene3D>,
}

/// Where a dataset came from; fills the manifest header.
#[derive(Debug, Clone)]
pub struct DatasetInfo {
    pub domain: DomainTag,
    pub camera: Camera,
    pub master_seed: u64,
    pub provenance: Provenance,
}

impl DatasetManifest {
    pub fn path(dir: &Path) -> PathBuf {
        dir.join("manifest.json")
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }
}

/// Writes samples and the manifest. Samples are labeled only if every one
/// carries a graph.
pub fn write_dataset(dir: &Path, info: &DatasetInfo, registry: &CategoryRegistry, samples: &[SampleData]) -> Result<DatasetManifest> {
    let labeled = !samples.is_empty() && samples.iter().all(|s| s.graph.is_some());
    let mut entries = Vec::with_capacity(samples.len());
    let fmt_err = |path: PathBuf, msg: String| DatasetError::Format { path, msg };
    for (i, s) in samples.iter().enumerate() {
        let name = stem(i);
        let img = s.image.to_ppm();
        write_file(&dir.join("images").join(format!("{name}.ppm")), &img)?;
        let mut entry = SampleEntry { index: i, seed: s.seed, image_sha256: sha256_hex(&img), graph_sha256: None, scene_sha256: None };
        if labeled {
            let path = dir.join("graphs").join(format!("{name}.json"));
            let g = s.graph.as_ref().expect("labeled").encode(registry).map_err(|e: GraphError| fmt_err(path.clone(), e.to_string()))?;
            write_file(&path, g.as_bytes())?;
            entry.graph_sha256 = Some(sha256_hex(g.as_bytes()));
            if let Some(scene) = &s.scene {
                let path = dir.join("scenes").join(format!("{name}.json"));
                let text = scene.to_json(registry).map_err(|e: EnvError| fmt_err(path.clone(), e.to_string()))?;
                write_file(&path, text.as_bytes())?;
                entry.scene_sha256 = Some(sha256_hex(text.as_bytes()));
            }
        }
        entries.push(entry);
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        domain: info.domain,
        camera: info.camera,
        count: samples.len(),
        master_seed: info.master_seed,
        seed_mixing: SEED_MIXING.to_string(),
        labeled,
        registry: registry.names().to_vec(),
        provenance: info.provenance.clone(),
        samples: entries,
    };
    write_file(&DatasetManifest::path(dir), manifest.to_json().as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = DatasetManifest::path(dir);
    let text = read_text(&path)?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| DatasetError::Format { path: path.clone(), msg: e.to_string() })?;
    if let Some(v) = value.get("version").and_then(|v| v.as_u64()) {
        if v != MANIFEST_VERSION as u64 {
            return Err(DatasetError::Version(v as u32));
        }
    }
    let m: DatasetManifest = serde_json::from_value(value).map_err(|e| DatasetError::Format { path, msg: e.to_string() })?;
    if m.samples.len() != m.count {
        return Err(DatasetError::Count { listed: m.samples.len(), count: m.count });
    }
    Ok(m)
}

fn verified(path: &Path, expected: &str) -> Result<Vec<u8>> {
    let bytes = read_file(path)?;
    let actual = sha256_hex(&bytes);
    if actual != expected {
        return Err(DatasetError::Checksum { path: path.to_path_buf(), expected: expected.to_string(), actual });
    }
    Ok(bytes)
}

/// Loads every image, checking checksums. Never touches labels.
pub fn read_images(dir: &Path, manifest: &DatasetManifest) -> Result<Vec<Image>> {
    manifest
        .samples
        .iter()
        .map(|e| {
            let path = dir.join("images").join(format!("{}.ppm", stem(e.index)));
            let bytes = verified(&path, &e.image_sha256)?;
            Image::read_ppm(&bytes[..]).map_err(|err| DatasetError::Format { path, msg: err.to_string() })
        })
        .collect()
}

/// Loads every label graph, checking checksums.
pub fn read_labels(dir: &Path, manifest: &DatasetManifest) -> Result<Vec<SceneGraph>> {
    if !manifest.labeled {
        return Err(DatasetError::Unlabeled(dir.to_path_buf()));
    }
    let registry = registry_of(dir, manifest)?;
    manifest
        .samples
        .iter()
        .map(|e| {
            let path = dir.join("graphs").join(format!("{}.json", stem(e.index)));
            let expected = e.graph_sha256.as_deref().ok_or_else(|| DatasetError::Unlabeled(dir.to_path_buf()))?;
            let bytes = verified(&path, expected)?;
            let text = String::from_utf8(bytes).map_err(|err| DatasetError::Format { path: path.clone(), msg: err.to_string() })?;
            SceneGraph::decode(&text, &registry).map_err(|err| DatasetError::Format { path, msg: err.to_string() })
        })
        .collect()
}

pub fn registry_of(dir: &Path, manifest: &DatasetManifest) -> Result<CategoryRegistry> {
    CategoryRegistry::new(manifest.registry.iter().cloned())
        .map_err(|e| DatasetError::Format { path: DatasetManifest::path(dir), msg: e.to_string() })
}

/// Per-sample seed used by dataset generation.
pub fn sample_seed(master: u64, index: usize) -> u64 {
    mix_seed(master, index as u64)
}
