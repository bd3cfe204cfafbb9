//! Encoder, grid scene-graph head, relation head, domain discriminators and
//! the loss terms that train them.

mod decode;
mod targets;

pub use decode::{decode, DecodeConfig, PairLogits, RawPredictions};
pub use targets::{assign_targets, cell_box, cell_of, geo_features, CellTarget, PairTarget, TrainingTargets, NO_RELATION};

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Params, Tape, Tensor, Var};
use crate::environment::Image;
use crate::scenegraph::{CategoryRegistry, Predicate, SceneGraph};

/// Version of the JSON sidecar written next to model checkpoints.
pub const SIDECAR_VERSION: u32 = 1;

/// Stride product of the encoder: the grid is `image_size / ENCODER_STRIDE`.
pub const ENCODER_STRIDE: usize = 8;

/// Dimension of the geometric pair descriptor.
pub const GEO_DIM: usize = 6;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("image is {got_w}x{got_h}, model expects {expected}x{expected}")]
    ImageSize { expected: usize, got_w: u32, got_h: u32 },
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("checkpoint hash {checkpoint} does not match sidecar hash {sidecar}")]
    HashMismatch { checkpoint: String, sidecar: String },
    #[error("sidecar: {0}")]
    Sidecar(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub num_classes: usize,
    /// Output channels of the three stride-2 encoder stages.
    pub channels: [usize; 3],
    pub head_hidden: usize,
    pub relation_hidden: usize,
    pub disc_a_channels: usize,
    pub disc_c_hidden: usize,
    /// Cells considered as relation candidates at inference, highest objectness first.
    pub max_candidates: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            num_classes: 3,
            channels: [16, 32, 32],
            head_hidden: 32,
            relation_hidden: 32,
            disc_a_channels: 16,
            disc_c_hidden: 16,
            max_candidates: 16,
        }
    }
}

impl ModelConfig {
    pub fn grid(&self) -> usize {
        self.image_size / ENCODER_STRIDE
    }

    /// Channels of the prediction map: objectness, class logits, box offsets.
    pub fn map_channels(&self) -> usize {
        1 + self.num_classes + 4
    }

    pub fn latent_channels(&self) -> usize {
        self.channels[2]
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % ENCODER_STRIDE != 0 {
            return Err(ModelError::Config(format!(
                "image_size {} must be a positive multiple of {ENCODER_STRIDE}",
                self.image_size
            )));
        }
        let widths = [
            self.num_classes,
            self.channels[0],
            self.channels[1],
            self.channels[2],
            self.head_hidden,
            self.relation_hidden,
            self.disc_a_channels,
            self.disc_c_hidden,
        ];
        if widths.contains(&0) {
            return Err(ModelError::Config("layer widths and class count must be positive".into()));
        }
        Ok(())
    }
}

/// Forward pass outputs for a batch.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    /// Latent grid `[N, C, G, G]`.
    pub z: Var,
    /// Prediction maps `[N, 1 + K + 4, G, G]`.
    pub maps: Var,
}

/// A pair of cells whose relation is scored by the relation head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairQuery {
    pub image: usize,
    pub subject_cell: usize,
    pub object_cell: usize,
    pub geo: [f64; GEO_DIM],
}

/// Task loss split into its four summed terms.
#[derive(Debug, Clone, Copy)]
pub struct TaskLoss {
    pub total: Var,
    pub objectness: Var,
    pub class: Var,
    pub boxes: Var,
    pub relations: Var,
}

/// Sidecar describing a checkpoint, validated on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSidecar {
    pub version: u32,
    pub config: ModelConfig,
    pub registry: Vec<String>,
    pub registry_hash: String,
    pub checkpoint_sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
}

/// Converts images to a `[N, 3, S, S]` tensor scaled to `[-0.5, 0.5]`.
pub fn images_to_tensor(images: &[&Image], size: usize) -> Result<Tensor> {
    let plane = size * size;
    let mut data = vec![0.0; images.len() * 3 * plane];
    for (n, img) in images.iter().enumerate() {
        if img.width as usize != size || img.height as usize != size {
            return Err(ModelError::ImageSize { expected: size, got_w: img.width, got_h: img.height });
        }
        let base = n * 3 * plane;
        for (p, rgb) in img.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[base + c * plane + p] = rgb[c] as f64 / 255.0 - 0.5;
            }
        }
    }
    Ok(Tensor::new(&[images.len(), 3, size, size], data)?)
}

impl Model {
    /// A freshly initialized model; parameters depend only on `config` and `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::new();
        let mut conv = |p: &mut Params, name: &str, cin: usize, cout: usize, k: usize| -> Result<()> {
            p.init_xavier(&format!("{name}.w"), &[cout, cin, k, k], cin * k * k, cout * k * k, &mut rng)?;
            p.init_zeros(&format!("{name}.b"), &[cout])?;
            Ok(())
        };
        let [c1, c2, c3] = config.channels;
        conv(&mut p, "enc.conv1", 3, c1, 3)?;
        conv(&mut p, "enc.conv2", c1, c2, 3)?;
        conv(&mut p, "enc.conv3", c2, c3, 3)?;
        conv(&mut p, "head.conv", c3, config.head_hidden, 3)?;
        conv(&mut p, "head.out", config.head_hidden, config.map_channels(), 1)?;
        conv(&mut p, "da.conv1", c3, config.disc_a_channels, 3)?;
        conv(&mut p, "da.conv2", config.disc_a_channels, config.disc_a_channels, 3)?;
        let mut linear = |p: &mut Params, name: &str, din: usize, dout: usize| -> Result<()> {
            p.init_xavier(&format!("{name}.w"), &[dout, din], din, dout, &mut rng)?;
            p.init_zeros(&format!("{name}.b"), &[dout])?;
            Ok(())
        };
        linear(&mut p, "rel.fc1", 2 * c3 + GEO_DIM, config.relation_hidden)?;
        linear(&mut p, "rel.fc2", config.relation_hidden, Predicate::COUNT + 1)?;
        linear(&mut p, "da.fc", config.disc_a_channels, 1)?;
        linear(&mut p, "dc.fc1", config.map_channels(), config.disc_c_hidden)?;
        linear(&mut p, "dc.fc2", config.disc_c_hidden, 1)?;
        Ok(Model { config, params: p })
    }

    fn conv(&self, tape: &mut Tape, x: Var, name: &str, stride: usize, pad: usize) -> Result<Var> {
        let w = tape.param(&self.params, &format!("{name}.w"))?;
        let b = tape.param(&self.params, &format!("{name}.b"))?;
        Ok(tape.conv2d(x, w, b, stride, pad)?)
    }

    fn linear(&self, tape: &mut Tape, x: Var, name: &str) -> Result<Var> {
        let w = tape.param(&self.params, &format!("{name}.w"))?;
        let b = tape.param(&self.params, &format!("{name}.b"))?;
        Ok(tape.linear(x, w, b)?)
    }

    /// Puts a batch of images on the tape.
    pub fn input(&self, tape: &mut Tape, images: &[&Image]) -> Result<Var> {
        Ok(tape.constant(images_to_tensor(images, self.config.image_size)?)?)
    }

    /// Encoder: three stride-2 3x3 convolutions with ReLU.
    pub fn encode(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let s = self.config.image_size;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
            return Err(ModelError::Config(format!("encoder input shape {shape:?}, expected [N, 3, {s}, {s}]")));
        }
        let mut h = x;
        for name in ["enc.conv1", "enc.conv2", "enc.conv3"] {
            let c = self.conv(tape, h, name, 2, 1)?;
            h = tape.relu(c)?;
        }
        Ok(h)
    }

    /// Prediction head: raw maps `[N, 1 + K + 4, G, G]` from a latent grid.
    pub fn head(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let hidden = self.conv(tape, z, "head.conv", 1, 1)?;
        let hidden = tape.relu(hidden)?;
        self.conv(tape, hidden, "head.out", 1, 0)
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Forward> {
        let z = self.encode(tape, x)?;
        let maps = self.head(tape, z)?;
        Ok(Forward { z, maps })
    }

    /// Predicate logits `[M, P + 1]` for ordered cell pairs; the last column
    /// is "no relation".
    pub fn relation_logits(&self, tape: &mut Tape, z: Var, pairs: &[PairQuery]) -> Result<Var> {
        let subj: Vec<(usize, usize)> = pairs.iter().map(|p| (p.image, p.subject_cell)).collect();
        let obj: Vec<(usize, usize)> = pairs.iter().map(|p| (p.image, p.object_cell)).collect();
        let fs = tape.gather_cells(z, &subj)?;
        let fo = tape.gather_cells(z, &obj)?;
        let geo = Tensor::new(&[pairs.len(), GEO_DIM], pairs.iter().flat_map(|p| p.geo).collect())?;
        let geo = tape.constant(geo)?;
        let input = tape.concat_cols(&[fs, fo, geo])?;
        let h = self.linear(tape, input, "rel.fc1")?;
        let h = tape.relu(h)?;
        self.linear(tape, h, "rel.fc2")
    }

    /// Appearance discriminator logits `[N, 1]` on a latent grid.
    pub fn disc_a(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let h = self.conv(tape, z, "da.conv1", 1, 1)?;
        let h = tape.relu(h)?;
        let h = self.conv(tape, h, "da.conv2", 1, 1)?;
        let h = tape.relu(h)?;
        let pooled = tape.global_avg_pool(h)?;
        self.linear(tape, pooled, "da.fc")
    }

    /// Content discriminator logits `[N, 1]` on prediction maps.
    pub fn disc_c(&self, tape: &mut Tape, maps: Var) -> Result<Var> {
        let pooled = tape.global_avg_pool(maps)?;
        let h = self.linear(tape, pooled, "dc.fc1")?;
        let h = tape.relu(h)?;
        self.linear(tape, h, "dc.fc2")
    }

    /// Objectness BCE over all cells, class cross-entropy and box L1 on
    /// positive cells (each summed over the batch), plus the predicate
    /// cross-entropy averaged over the sampled pairs; the four terms are added
    /// with unit weights.
    ///
    /// The relation term is a mean because an image contributes dozens of
    /// pairs whose labels overlap (a pair is often both "left" and "behind"),
    /// and the summed version swamps the detection gradients in the encoder.
    pub fn task_loss(&self, tape: &mut Tape, fwd: &Forward, targets: &[TrainingTargets]) -> Result<TaskLoss> {
        let k = self.config.num_classes;
        let shape = tape.shape(fwd.maps).to_vec();
        if shape[0] != targets.len() {
            return Err(ModelError::Config(format!("{} target sets for a batch of {}", targets.len(), shape[0])));
        }
        let g2 = shape[2] * shape[3];
        if let Some(t) = targets.iter().find(|t| t.objectness.len() != g2) {
            return Err(ModelError::Config(format!("targets for grid {} on a {}x{} map", t.grid, shape[2], shape[3])));
        }

        let obj_map = tape.slice_channels(fwd.maps, 0, 1)?;
        let labels: Vec<f64> = targets.iter().flat_map(|t| t.objectness.iter().copied()).collect();
        let objectness = tape.bce_logits(obj_map, &labels, None)?;

        let cells: Vec<(usize, usize)> = targets
            .iter()
            .enumerate()
            .flat_map(|(n, t)| t.positives.iter().map(move |p| (n, p.cell)))
            .collect();
        let (class, boxes) = if cells.is_empty() {
            (tape.constant(Tensor::scalar(0.0))?, tape.constant(Tensor::scalar(0.0))?)
        } else {
            let rows = tape.gather_cells(fwd.maps, &cells)?;
            let logits = tape.slice_cols(rows, 1, k)?;
            let classes: Vec<usize> = targets.iter().flat_map(|t| t.positives.iter().map(|p| p.class)).collect();
            let class = tape.softmax_ce(logits, &classes)?;
            let xy = tape.slice_cols(rows, 1 + k, 2)?;
            let xy = tape.sigmoid(xy)?;
            let wh = tape.slice_cols(rows, 3 + k, 2)?;
            let pred = tape.concat_cols(&[xy, wh])?;
            let target: Vec<f64> = targets.iter().flat_map(|t| t.positives.iter().flat_map(|p| p.bbox)).collect();
            let boxes = tape.l1(pred, &Tensor::new(&[cells.len(), 4], target)?)?;
            (class, boxes)
        };

        let queries: Vec<PairQuery> = targets
            .iter()
            .enumerate()
            .flat_map(|(n, t)| {
                t.pairs.iter().map(move |p| PairQuery {
                    image: n,
                    subject_cell: p.subject_cell,
                    object_cell: p.object_cell,
                    geo: p.geo,
                })
            })
            .collect();
        let relations = if queries.is_empty() {
            tape.constant(Tensor::scalar(0.0))?
        } else {
            let logits = self.relation_logits(tape, fwd.z, &queries)?;
            let labels: Vec<usize> = targets.iter().flat_map(|t| t.pairs.iter().map(|p| p.label)).collect();
            let ce = tape.softmax_ce(logits, &labels)?;
            tape.scale(ce, 1.0 / labels.len() as f64)?
        };

        let total = tape.add(objectness, class)?;
        let total = tape.add(total, boxes)?;
        let total = tape.add(total, relations)?;
        Ok(TaskLoss { total, objectness, class, boxes, relations })
    }

    /// Domain BCE of the appearance discriminator behind a gradient reversal
    /// layer: label 0 for synthetic latents, 1 for real ones.
    pub fn appearance_loss(&self, tape: &mut Tape, z_syn: Var, z_real: Var, lambda: f64) -> Result<Var> {
        let zs = tape.grl(z_syn, lambda)?;
        let zr = tape.grl(z_real, lambda)?;
        let ls = self.disc_a(tape, zs)?;
        let lr = self.disc_a(tape, zr)?;
        self.domain_bce(tape, ls, lr)
    }

    /// Domain BCE of the content discriminator on pooled prediction maps,
    /// behind a gradient reversal layer.
    pub fn content_loss(&self, tape: &mut Tape, maps_syn: Var, maps_real: Var, lambda: f64) -> Result<Var> {
        let ms = tape.grl(maps_syn, lambda)?;
        let mr = tape.grl(maps_real, lambda)?;
        let ls = self.disc_c(tape, ms)?;
        let lr = self.disc_c(tape, mr)?;
        self.domain_bce(tape, ls, lr)
    }

    fn domain_bce(&self, tape: &mut Tape, syn_logits: Var, real_logits: Var) -> Result<Var> {
        let ns = tape.value(syn_logits).len();
        let nr = tape.value(real_logits).len();
        let a = tape.bce_logits(syn_logits, &vec![0.0; ns], None)?;
        let b = tape.bce_logits(real_logits, &vec![1.0; nr], None)?;
        Ok(tape.add(a, b)?)
    }

    /// Raw predictions for each image, computed without recording gradients.
    /// Relation logits are produced for every ordered pair among the
    /// `max_candidates` cells of highest objectness probability at or above
    /// `pair_floor`.
    pub fn predict_raw(&self, images: &[&Image], pair_floor: f64) -> Result<Vec<RawPredictions>> {
        crate::autodiff::no_grad(|| {
            let mut tape = Tape::new();
            let x = self.input(&mut tape, images)?;
            let fwd = self.forward(&mut tape, x)?;
            let maps = tape.value(fwd.maps).clone();
            let c = self.config.map_channels();
            let g = self.config.grid();
            let size = self.config.image_size as f64;
            let mut raws: Vec<RawPredictions> = (0..images.len())
                .map(|n| RawPredictions {
                    width: self.config.image_size as u32,
                    height: self.config.image_size as u32,
                    grid: g,
                    num_classes: self.config.num_classes,
                    maps: maps.data()[n * c * g * g..(n + 1) * c * g * g].to_vec(),
                    pairs: Vec::new(),
                })
                .collect();
            let mut queries = Vec::new();
            for (n, raw) in raws.iter().enumerate() {
                let mut cands: Vec<usize> = (0..g * g).filter(|&cell| raw.objectness(cell) >= pair_floor).collect();
                cands.sort_by(|&a, &b| raw.objectness(b).total_cmp(&raw.objectness(a)).then(a.cmp(&b)));
                cands.truncate(self.config.max_candidates);
                for &a in &cands {
                    for &b in &cands {
                        if a != b {
                            let geo = geo_features(&raw.cell_bbox(a), &raw.cell_bbox(b), size, size);
                            queries.push(PairQuery { image: n, subject_cell: a, object_cell: b, geo });
                        }
                    }
                }
            }
            if !queries.is_empty() {
                let logits = self.relation_logits(&mut tape, fwd.z, &queries)?;
                let width = Predicate::COUNT + 1;
                for (q, row) in queries.iter().zip(tape.value(logits).data().chunks(width)) {
                    raws[q.image].pairs.push(PairLogits {
                        subject_cell: q.subject_cell,
                        object_cell: q.object_cell,
                        logits: row.to_vec(),
                    });
                }
            }
            Ok(raws)
        })
    }

    /// Predicted scene graphs, one per image.
    pub fn infer(&self, images: &[&Image], cfg: &DecodeConfig) -> Result<Vec<SceneGraph>> {
        Ok(self.predict_raw(images, cfg.obj_threshold)?.iter().map(|r| decode(r, cfg)).collect())
    }

    /// Mean per-image task loss, evaluated without recording gradients.
    pub fn mean_task_loss(&self, images: &[&Image], graphs: &[&SceneGraph], batch: usize, seed: u64) -> Result<f64> {
        if images.is_empty() {
            return Ok(0.0);
        }
        crate::autodiff::no_grad(|| {
            let mut total = 0.0;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for (imgs, gts) in images.chunks(batch.max(1)).zip(graphs.chunks(batch.max(1))) {
                let mut tape = Tape::new();
                let x = self.input(&mut tape, imgs)?;
                let fwd = self.forward(&mut tape, x)?;
                let targets: Vec<TrainingTargets> =
                    gts.iter().map(|g| assign_targets(g, self.config.grid(), &mut rng)).collect();
                let loss = self.task_loss(&mut tape, &fwd, &targets)?;
                total += tape.value(loss.total).item();
            }
            Ok(total / images.len() as f64)
        })
    }

    pub fn sidecar(&self, registry: &CategoryRegistry) -> ModelSidecar {
        ModelSidecar {
            version: SIDECAR_VERSION,
            config: self.config.clone(),
            registry: registry.names().to_vec(),
            registry_hash: registry.hash_hex(),
            checkpoint_sha256: self.params.hash_hex(),
        }
    }

    /// Writes the parameter checkpoint and its JSON sidecar.
    pub fn save(&self, checkpoint: &Path, sidecar: &Path, registry: &CategoryRegistry) -> Result<()> {
        std::fs::write(checkpoint, self.params.to_checkpoint_bytes())?;
        let doc = serde_json::to_string_pretty(&self.sidecar(registry)).expect("sidecar serializes");
        std::fs::write(sidecar, doc + "\n")?;
        Ok(())
    }

    /// Loads a checkpoint, checking it against its sidecar: hash, registry and
    /// parameter shapes must all agree.
    pub fn load(checkpoint: &Path, sidecar: &Path) -> Result<(Model, CategoryRegistry)> {
        let bytes = std::fs::read(checkpoint)?;
        let side: ModelSidecar = serde_json::from_str(&std::fs::read_to_string(sidecar)?)
            .map_err(|e| ModelError::Sidecar(e.to_string()))?;
        if side.version != SIDECAR_VERSION {
            return Err(ModelError::Sidecar(format!("unsupported version {}", side.version)));
        }
        let actual = crate::hash::sha256_hex(&bytes);
        if actual != side.checkpoint_sha256 {
            return Err(ModelError::HashMismatch { checkpoint: actual, sidecar: side.checkpoint_sha256 });
        }
        let registry = CategoryRegistry::new(side.registry.iter().cloned())
            .map_err(|e| ModelError::Sidecar(e.to_string()))?;
        if registry.hash_hex() != side.registry_hash {
            return Err(ModelError::Sidecar("registry hash does not match registry".into()));
        }
        if registry.len() != side.config.num_classes {
            return Err(ModelError::Sidecar("registry size does not match num_classes".into()));
        }
        let params = Params::read_checkpoint(&bytes[..])?;
        let template = Model::new(side.config.clone(), 0)?;
        let expected: Vec<(&str, &[usize])> = template.params.iter().map(|(n, t)| (n, t.shape())).collect();
        let got: Vec<(&str, &[usize])> = params.iter().map(|(n, t)| (n, t.shape())).collect();
        if expected != got {
            return Err(ModelError::Sidecar("checkpoint parameters do not match the architecture".into()));
        }
        Ok((Model { config: side.config, params }, registry))
    }
}
