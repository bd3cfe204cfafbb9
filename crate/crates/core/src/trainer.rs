//! The synthesis-by-analysis training loop.

use std::cell::Cell;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{grad_enabled, no_grad, AutodiffError, Sgd, Tape};
use crate::environment::{
    ground_truth_graph, mix_seed, rasterize, sample_scene_with_retries, DomainConfig, EnvError, Image,
};
use crate::metrics::{evaluate, EvalReport, MetricsError};
use crate::model::{assign_targets, DecodeConfig, Model, ModelConfig, ModelError, TrainingTargets};
use crate::scenegraph::{CategoryRegistry, SceneGraph};
use crate::synthesis::{generate_labeled_dataset, ReconstructionConfig, SynthesisError};


/// Placement retries per SDR sample before giving up.
const SAMPLE_RETRIES: u32 = 20;

// Seed streams derived from the master seed.
const STREAM_MODEL: u64 = 1;
const STREAM_SDR: u64 = 2;
const STREAM_LOOP: u64 = 3;
const STREAM_SYNTH: u64 = 4;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("numeric failure at epoch {epoch}, iteration {iter}")]
    Numeric { epoch: usize, iter: usize, source: ModelError },
    #[error("target labels were requested while gradients are being recorded")]
    LabelLeak,
    #[error("no target images given")]
    NoTargets,
    #[error("synthetic dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Synthesis(#[from] SynthesisError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub task: f64,
    pub appearance: f64,
    pub content: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { task: 1.0, appearance: 1.0, content: 1.0 }
    }
}

/// Which alignment mechanisms are active; turning all off gives the SDR baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Alignment {
    /// Regenerate the synthetic set from inferred target graphs.
    pub label: bool,
    /// Adversarial alignment of the latent grid.
    pub appearance: bool,
    /// Adversarial alignment of the prediction maps.
    pub content: bool,
}

impl Alignment {
    pub const NONE: Alignment = Alignment { label: false, appearance: false, content: false };
    pub const ALL: Alignment = Alignment { label: true, appearance: true, content: true };
}

impl Default for Alignment {
    fn default() -> Self {
        Alignment::ALL
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub iters_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Appearance and content losses are off for epochs before this one.
    pub warmup_epochs: usize,
    /// Epochs trained on the SDR set before the first synthesis step.
    pub sdr_epochs: usize,
    /// Number of SDR samples drawn at init.
    pub sdr_count: usize,
    pub weights: LossWeights,
    pub grl_lambda: f64,
    pub seed: u64,
    pub align: Alignment,
    /// Evaluate on the labeled split every this many epochs; 0 disables.
    pub eval_every: usize,
    pub recall_ks: Vec<usize>,
    pub decode: DecodeConfig,
    /// The SDR domain, reconstruction settings and network shape are set by
    /// the caller, not read from the training section of a config file.
    #[serde(skip)]
    pub source: DomainConfig,
    #[serde(skip)]
    pub recon: ReconstructionConfig,
    #[serde(skip)]
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let source = DomainConfig::clevr_source();
        TrainConfig {
            epochs: 6,
            iters_per_epoch: 1000,
            batch_size: 4,
            lr: 1e-4,
            momentum: 0.9,
            warmup_epochs: 3,
            sdr_epochs: 1,
            sdr_count: 500,
            weights: LossWeights::default(),
            grl_lambda: 4.0,
            seed: 0,
            align: Alignment::ALL,
            eval_every: 1,
            recall_ks: vec![20, 50],
            recon: ReconstructionConfig::for_domain(&source),
            source,
            decode: DecodeConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.warmup_epochs > self.epochs {
            return bad(format!("warm-up {} exceeds {} epochs", self.warmup_epochs, self.epochs));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        let w = self.weights;
        if ![w.task, w.appearance, w.content].iter().all(|&x| x >= 0.0 && x.is_finite()) {
            return bad("loss weights must be finite and non-negative".into());
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("lr {} must be positive and momentum {} in [0, 1)", self.lr, self.momentum));
        }
        if !(self.grl_lambda > 0.0) {
            return bad(format!("GRL lambda {} must be positive", self.grl_lambda));
        }
        if self.sdr_count == 0 {
            return bad("SDR dataset must be nonempty".into());
        }
        if self.source.camera.width as usize != self.model.image_size || self.source.camera.height as usize != self.model.image_size {
            return bad(format!(
                "camera renders {}x{} but the model expects {}",
                self.source.camera.width, self.source.camera.height, self.model.image_size
            ));
        }
        if self.source.classes.iter().any(|&c| c >= self.model.num_classes) {
            return bad("source classes exceed the model's class count".into());
        }
        self.source.validate()?;
        self.recon.validate()?;
        self.model.validate()?;
        Ok(())
    }
}

/// One labeled training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub graph: SceneGraph,
    pub seed: u64,
}

/// One optimizer step, as logged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub epoch: usize,
    pub iter: usize,
    pub task: f64,
    pub app: f64,
    pub content: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct EpochLog {
    pub epoch: usize,
    pub records: Vec<IterRecord>,
    pub report: Option<EvalReport>,
    /// Hash of the synthetic set trained on during this epoch.
    pub dataset_hash: String,
    pub dataset_size: usize,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    pub sgd: Sgd,
    pub dataset: Vec<Sample>,
    pub dataset_hash: String,
    /// Next epoch to run.
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub iteration: usize,
    /// Every record so far, kept for flushing on abort.
    pub records: Vec<IterRecord>,
    rng: ChaCha8Rng,
}

/// Hash over a dataset's sample seeds, pixels and labels.
pub fn dataset_hash(samples: &[Sample]) -> String {
    let mut h = Sha256::new();
    h.update((samples.len() as u64).to_le_bytes());
    for s in samples {
        h.update(s.seed.to_le_bytes());
        h.update(s.image.width.to_le_bytes());
        h.update(s.image.height.to_le_bytes());
        h.update(&s.image.data);
        let g = &s.graph;
        h.update((g.nodes.len() as u64).to_le_bytes());
        for n in &g.nodes {
            h.update(n.id.to_le_bytes());
            h.update((n.category as u64).to_le_bytes());
            for v in [n.bbox.u, n.bbox.v, n.bbox.w, n.bbox.h, n.score] {
                h.update(v.to_le_bytes());
            }
        }
        h.update((g.edges.len() as u64).to_le_bytes());
        for e in &g.edges {
            h.update(e.subject.to_le_bytes());
            h.update((e.predicate.index() as u64).to_le_bytes());
            h.update(e.object.to_le_bytes());
            h.update(e.score.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Renders `count` domain-randomized samples from `cfg`.
pub fn sample_dataset(cfg: &DomainConfig, count: usize, seed: u64, margin: f64) -> Result<Vec<Sample>> {
    (0..count as u64)
        .map(|i| {
            let (scene, used) = sample_scene_with_retries(cfg, mix_seed(seed, i), SAMPLE_RETRIES)?;
            Ok(Sample {
                image: rasterize(&scene, &cfg.camera, cfg, used),
                graph: ground_truth_graph(&scene, &cfg.camera, margin),
                seed: used,
            })
        })
        .collect()
}

/// A labeled target split used only for reporting. Its labels cannot be read
/// while gradients are being recorded, and every read is counted.
#[derive(Debug)]
pub struct EvalSplit {
    images: Vec<Image>,
    labels: Vec<SceneGraph>,
    reads: Cell<usize>,
}

impl EvalSplit {
    pub fn new(images: Vec<Image>, labels: Vec<SceneGraph>) -> Result<EvalSplit> {
        if images.len() != labels.len() {
            return Err(TrainError::Config(format!("{} eval images but {} label files", images.len(), labels.len())));
        }
        Ok(EvalSplit { images, labels, reads: Cell::new(0) })
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn labels(&self) -> Result<&[SceneGraph]> {
        if grad_enabled() {
            return Err(TrainError::LabelLeak);
        }
        self.reads.set(self.reads.get() + 1);
        Ok(&self.labels)
    }

    /// Number of successful label reads so far.
    pub fn label_reads(&self) -> usize {
        self.reads.get()
    }
}

/// Evaluates `model` on a labeled split without recording gradients.
pub fn evaluate_split(model: &Model, split: &EvalSplit, registry: &CategoryRegistry, ks: &[usize], decode: &DecodeConfig) -> Result<EvalReport> {
    no_grad(|| {
        let decode = DecodeConfig { topk: decode.topk.max(ks.iter().copied().max().unwrap_or(0)), ..*decode };
        let images: Vec<&Image> = split.images().iter().collect();
        let mut preds = Vec::with_capacity(images.len());
        for chunk in images.chunks(32) {
            preds.extend(model.infer(chunk, &decode)?);
        }
        Ok(evaluate(&preds, split.labels()?, registry, ks)?)
    })
}

fn numeric(epoch: usize, iter: usize) -> impl Fn(ModelError) -> TrainError {
    move |e| match e {
        ModelError::Autodiff(AutodiffError::NumericFailure { .. }) => TrainError::Numeric { epoch, iter, source: e },
        other => TrainError::Model(other),
    }
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub registry: CategoryRegistry,
    pub state: TrainState,
}

impl Trainer {
    /// Random model plus an SDR dataset from the source config.
    pub fn init(cfg: TrainConfig, registry: CategoryRegistry) -> Result<Trainer> {
        cfg.validate()?;
        if registry.len() != cfg.model.num_classes {
            return Err(TrainError::Config(format!(
                "registry has {} classes, model {}",
                registry.len(),
                cfg.model.num_classes
            )));
        }
        let model = Model::new(cfg.model.clone(), mix_seed(cfg.seed, STREAM_MODEL))?;
        let dataset = sample_dataset(&cfg.source, cfg.sdr_count, mix_seed(cfg.seed, STREAM_SDR), cfg.recon.predicate_margin)?;
        let state = TrainState {
            model,
            sgd: Sgd::new(cfg.lr, cfg.momentum),
            dataset_hash: dataset_hash(&dataset),
            dataset,
            epoch: 0,
            iteration: 0,
            records: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, STREAM_LOOP)),
        };
        Ok(Trainer { cfg, registry, state })
    }

    /// Replaces the synthetic set with reconstructions of the model's current
    /// reading of `targets`. Model weights are not touched.
    pub fn synthesis_step(&mut self, targets: &[&Image]) -> Result<()> {
        if targets.is_empty() {
            return Err(TrainError::NoTargets);
        }
        let base = mix_seed(mix_seed(self.cfg.seed, STREAM_SYNTH), self.state.epoch as u64);
        let seeds: Vec<u64> = (0..targets.len() as u64).map(|i| mix_seed(base, i)).collect();
        let cam = self.cfg.source.camera;
        let out = no_grad(|| {
            generate_labeled_dataset(&self.state.model, targets, &cam, &self.cfg.recon, &self.cfg.source, &self.cfg.decode, &seeds)
        })?;
        if !out.skipped.is_empty() {
            log::warn!("synthesis skipped {} of {} target images", out.skipped.len(), targets.len());
        }
        self.state.dataset = out
            .samples
            .into_iter()
            .map(|s| Sample { image: s.image, graph: s.graph, seed: s.seed })
            .collect();
        self.state.dataset_hash = dataset_hash(&self.state.dataset);
        Ok(())
    }

    fn aligned(&self) -> bool {
        self.state.epoch >= self.cfg.warmup_epochs && (self.cfg.align.appearance || self.cfg.align.content)
    }

    /// One epoch of SGD on (synthetic, real) batch pairs. Both lists are
    /// shuffled once per epoch and cycled.
    pub fn analysis_step(&mut self, reals: &[&Image]) -> Result<Vec<IterRecord>> {
        let n = self.state.dataset.len();
        if n == 0 {
            return Err(TrainError::EmptyDataset);
        }
        let aligned = self.aligned();
        if aligned && reals.is_empty() {
            return Err(TrainError::NoTargets);
        }
        let b = self.cfg.batch_size;
        let grid = self.cfg.model.grid();
        let w = self.cfg.weights;
        let epoch = self.state.epoch;
        let mut syn_order: Vec<usize> = (0..n).collect();
        syn_order.shuffle(&mut self.state.rng);
        let mut real_order: Vec<usize> = (0..reals.len()).collect();
        real_order.shuffle(&mut self.state.rng);

        let mut out = Vec::with_capacity(self.cfg.iters_per_epoch);
        for it in 0..self.cfg.iters_per_epoch {
            let iter = self.state.iteration;
            let to_err = numeric(epoch, iter);
            let idx: Vec<usize> = (0..b).map(|j| syn_order[(it * b + j) % n]).collect();
            let images: Vec<&Image> = idx.iter().map(|&i| &self.state.dataset[i].image).collect();
            let targets: Vec<TrainingTargets> =
                idx.iter().map(|&i| assign_targets(&self.state.dataset[i].graph, grid, &mut self.state.rng)).collect();

            let model = &self.state.model;
            let mut tape = Tape::new();
            let x = model.input(&mut tape, &images).map_err(&to_err)?;
            let fwd = model.forward(&mut tape, x).map_err(&to_err)?;
            let task = model.task_loss(&mut tape, &fwd, &targets).map_err(&to_err)?;
            let mut loss = tape.scale(task.total, w.task).map_err(|e| to_err(e.into()))?;
            let (mut app, mut content) = (0.0, 0.0);
            if aligned {
                let real: Vec<&Image> = (0..b).map(|j| reals[real_order[(it * b + j) % reals.len()]]).collect();
                let xr = model.input(&mut tape, &real).map_err(&to_err)?;
                let fr = model.forward(&mut tape, xr).map_err(&to_err)?;
                if self.cfg.align.appearance {
                    let a = model.appearance_loss(&mut tape, fwd.z, fr.z, self.cfg.grl_lambda).map_err(&to_err)?;
                    app = tape.value(a).item();
                    let a = tape.scale(a, w.appearance).map_err(|e| to_err(e.into()))?;
                    loss = tape.add(loss, a).map_err(|e| to_err(e.into()))?;
                }
                if self.cfg.align.content {
                    let c = model.content_loss(&mut tape, fwd.maps, fr.maps, self.cfg.grl_lambda).map_err(&to_err)?;
                    content = tape.value(c).item();
                    let c = tape.scale(c, w.content).map_err(|e| to_err(e.into()))?;
                    loss = tape.add(loss, c).map_err(|e| to_err(e.into()))?;
                }
            }
            let task_value = tape.value(task.total).item();
            let grads = tape.backward(loss).map_err(|e| to_err(e.into()))?;
            if !grads.squared_norm().is_finite() {
                return Err(TrainError::Numeric {
                    epoch,
                    iter,
                    source: ModelError::Autodiff(AutodiffError::NumericFailure { op: "backward" }),
                });
            }
            self.state.sgd.step(&mut self.state.model.params, &grads).map_err(|e| to_err(e.into()))?;
            let rec = IterRecord { epoch, iter, task: task_value, app, content, lr: self.cfg.lr };
            self.state.records.push(rec);
            out.push(rec);
            self.state.iteration += 1;
        }
        Ok(out)
    }

    /// Synthesis (when label alignment is on and the SDR phase is over),
    /// then analysis, then an optional evaluation snapshot.
    pub fn run_epoch(&mut self, targets: &[&Image], eval: Option<&EvalSplit>) -> Result<EpochLog> {
        let epoch = self.state.epoch;
        if self.cfg.align.label && epoch >= self.cfg.sdr_epochs {
            self.synthesis_step(targets)?;
        }
        let records = self.analysis_step(targets)?;
        self.state.epoch += 1;
        let due = self.cfg.eval_every > 0 && (self.state.epoch % self.cfg.eval_every == 0 || self.state.epoch == self.cfg.epochs);
        let report = match eval {
            Some(split) if due && !split.is_empty() => Some(self.evaluate(split)?),
            _ => None,
        };
        Ok(EpochLog {
            epoch,
            records,
            report,
            dataset_hash: self.state.dataset_hash.clone(),
            dataset_size: self.state.dataset.len(),
        })
    }

    pub fn evaluate(&self, split: &EvalSplit) -> Result<EvalReport> {
        evaluate_split(&self.state.model, split, &self.registry, &self.cfg.recall_ks, &self.cfg.decode)
    }

    /// Runs the remaining epochs up to `cfg.epochs`.
    pub fn run(&mut self, targets: &[&Image], eval: Option<&EvalSplit>, mut on_epoch: impl FnMut(&Trainer, &EpochLog) -> Result<()>) -> Result<Vec<EpochLog>> {
        let mut logs = Vec::new();
        while self.state.epoch < self.cfg.epochs {
            let log = self.run_epoch(targets, eval)?;
            on_epoch(self, &log)?;
            logs.push(log);
        }
        Ok(logs)
    }
}

/// Trains from scratch and returns the final model with all epoch logs.
pub fn train(cfg: TrainConfig, registry: CategoryRegistry, targets: &[&Image], eval: Option<&EvalSplit>) -> Result<(Model, Vec<EpochLog>)> {
    if targets.is_empty() {
        return Err(TrainError::NoTargets);
    }
    let mut trainer = Trainer::init(cfg, registry)?;
    let logs = trainer.run(targets, eval, |_, _| Ok(()))?;
    Ok((trainer.state.model, logs))
}

/// Held-out accuracy of a logistic-regression probe that tells synthetic from
/// real images by their globally pooled latent features. Half of each set
/// trains the probe, the other half scores it.
pub fn domain_probe_accuracy(model: &Model, synthetic: &[&Image], real: &[&Image], seed: u64) -> Result<f64> {
    let feats = |imgs: &[&Image]| -> Result<Vec<Vec<f64>>> {
        no_grad(|| {
            let mut out = Vec::new();
            for chunk in imgs.chunks(32) {
                let mut tape = Tape::new();
                let x = model.input(&mut tape, chunk)?;
                let z = model.encode(&mut tape, x)?;
                let pooled = tape.global_avg_pool(z).map_err(ModelError::from)?;
                let c = tape.shape(pooled)[1];
                out.extend(tape.value(pooled).data().chunks(c).map(<[f64]>::to_vec));
            }
            Ok(out)
        })
    };
    let mut rows: Vec<(Vec<f64>, f64)> = feats(synthetic)?.into_iter().map(|f| (f, 0.0)).collect();
    rows.extend(feats(real)?.into_iter().map(|f| (f, 1.0)));
    if rows.len() < 4 {
        return Err(TrainError::Config("probe needs at least two images per domain".into()));
    }
    rows.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (fit, held) = rows.split_at(rows.len() / 2);
    let dim = fit[0].0.len();
    // Standardize with training statistics so one step size suits any model.
    let mean: Vec<f64> = (0..dim).map(|k| fit.iter().map(|r| r.0[k]).sum::<f64>() / fit.len() as f64).collect();
    let std: Vec<f64> = (0..dim)
        .map(|k| (fit.iter().map(|r| (r.0[k] - mean[k]).powi(2)).sum::<f64>() / fit.len() as f64).sqrt().max(1e-8))
        .collect();
    let norm = |f: &[f64]| -> Vec<f64> { f.iter().enumerate().map(|(k, v)| (v - mean[k]) / std[k]).collect() };
    let fit: Vec<(Vec<f64>, f64)> = fit.iter().map(|(f, y)| (norm(f), *y)).collect();
    let mut w = vec![0.0; dim];
    let mut bias = 0.0;
    for _ in 0..500 {
        let mut gw = vec![0.0; dim];
        let mut gb = 0.0;
        for (f, y) in &fit {
            let p = 1.0 / (1.0 + (-(f.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + bias)).exp());
            for k in 0..dim {
                gw[k] += (p - y) * f[k];
            }
            gb += p - y;
        }
        let scale = 0.5 / fit.len() as f64;
        for k in 0..dim {
            w[k] -= scale * gw[k] + 1e-3 * w[k];
        }
        bias -= scale * gb;
    }
    let correct = held
        .iter()
        .filter(|(f, y)| {
            let s: f64 = norm(f).iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + bias;
            (s > 0.0) == (*y > 0.5)
        })
        .count();
    Ok(correct as f64 / held.len() as f64)
}
