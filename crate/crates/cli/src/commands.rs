use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use scenesynth::autodiff::no_grad;
use scenesynth::dataset::{self, DatasetInfo, DatasetManifest, Provenance, SampleData};
use scenesynth::environment::{ground_truth_graph, rasterize, sample_scene_with_retries, DomainTag, Image, Scene3D};
use scenesynth::metrics::{evaluate, gap_diagnostics};
use scenesynth::model::Model;
use scenesynth::scenegraph::{CategoryRegistry, SceneGraph};
use scenesynth::synthesis::reconstruct_scene;
use scenesynth::trainer::{EpochLog, EvalSplit, IterRecord, Trainer};

use crate::config::{ConfigError, Resolved, RunConfig};

/// Bad command-line usage detected after parsing; maps to exit code 1.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

pub const LOG_VERSION: u32 = 1;
pub const REPORT_VERSION: u32 = 1;
const SAMPLE_RETRIES: u32 = 20;
const RISK_BATCH: usize = 16;
const INFER_BATCH: usize = 32;

fn generator(cmd: &str) -> String {
    format!("scenesynth {cmd} {}", env!("CARGO_PKG_VERSION"))
}

/// Serializes `value` with a leading `"version"` key.
fn versioned<T: Serialize>(version: u32, value: &T) -> String {
    let mut map = serde_json::Map::new();
    map.insert("version".into(), version.into());
    match serde_json::to_value(value).expect("serializes") {
        serde_json::Value::Object(m) => map.extend(m),
        other => {
            map.insert("value".into(), other);
        }
    }
    serde_json::to_string_pretty(&serde_json::Value::Object(map)).expect("serializes") + "\n"
}

fn write(path: &Path, text: &str) -> Result<()> {
    dataset::write_file(path, text.as_bytes())?;
    Ok(())
}

fn load_model(model: &Path, sidecar: Option<&Path>) -> Result<(Model, CategoryRegistry)> {
    let sidecar = sidecar.map(Path::to_path_buf).unwrap_or_else(|| model.with_extension("json"));
    Ok(Model::load(model, &sidecar).with_context(|| format!("loading model {}", model.display()))?)
}

fn load_images(dir: &Path) -> Result<(DatasetManifest, Vec<Image>)> {
    let manifest = dataset::read_manifest(dir)?;
    let images = dataset::read_images(dir, &manifest)?;
    Ok((manifest, images))
}

fn load_labeled(dir: &Path) -> Result<(DatasetManifest, Vec<Image>, Vec<SceneGraph>)> {
    let (manifest, images) = load_images(dir)?;
    let graphs = dataset::read_labels(dir, &manifest)?;
    Ok((manifest, images, graphs))
}

fn check_registry(what: &str, dir: &Path, manifest: &DatasetManifest, registry: &CategoryRegistry) -> Result<()> {
    let theirs = dataset::registry_of(dir, manifest)?;
    if theirs.hash_hex() != registry.hash_hex() {
        bail!(ConfigError(format!(
            "{what} {} uses registry {} ({:?}) but expected {} ({:?})",
            dir.display(),
            theirs.hash_hex(),
            theirs.names(),
            registry.hash_hex(),
            registry.names()
        )));
    }
    Ok(())
}

pub struct GenArgs<'a> {
    pub domain: DomainTag,
    pub config: Option<&'a Path>,
    pub out: &'a Path,
    pub count: usize,
    pub seed: u64,
    pub with_labels: bool,
}

pub fn gen(a: GenArgs) -> Result<()> {
    let cfg = RunConfig::load(a.config)?;
    let domain = match a.domain {
        DomainTag::Source => &cfg.source,
        DomainTag::Target => &cfg.target,
        DomainTag::Reconstructed => bail!(UsageError("gen only produces source or target datasets".into())),
    };
    let labeled = a.domain == DomainTag::Source || a.with_labels;
    let margin = cfg.recon.predicate_margin;
    let make = |i: usize| -> Result<SampleData> {
        let (mut scene, used) = sample_scene_with_retries(domain, dataset::sample_seed(a.seed, i), SAMPLE_RETRIES)
            .with_context(|| format!("sample {i}"))?;
        scene.domain = a.domain;
        let image = rasterize(&scene, &domain.camera, domain, used);
        let graph = labeled.then(|| ground_truth_graph(&scene, &domain.camera, margin));
        Ok(SampleData { seed: used, image, graph, scene: labeled.then_some(scene) })
    };
    let samples = parallel_map(a.count, make)?;
    let info = DatasetInfo {
        domain: a.domain,
        camera: domain.camera,
        master_seed: a.seed,
        provenance: Provenance { generator: generator("gen"), config_sha256: Some(cfg.hash.clone()), ..Provenance::default() },
    };
    let m = dataset::write_dataset(a.out, &info, &cfg.registry, &samples)?;
    log::info!("wrote {} {} samples to {} (labeled: {})", m.count, a.domain, a.out.display(), m.labeled);
    Ok(())
}

/// Runs `f(0..n)` over the available cores, keeping index order.
fn parallel_map<T: Send>(n: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let workers = std::thread::available_parallelism().map_or(1, |p| p.get()).min(n.max(1));
    if workers <= 1 {
        return (0..n).map(&f).collect();
    }
    let chunk = n.div_ceil(workers);
    let parts: Vec<Result<Vec<T>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let f = &f;
                s.spawn(move || (w * chunk..((w + 1) * chunk).min(n)).map(f).collect::<Result<Vec<T>>>())
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

pub struct TrainArgs<'a> {
    pub config: Option<&'a Path>,
    pub target_dir: &'a Path,
    pub eval_dir: Option<&'a Path>,
    pub out: &'a Path,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum LogLine<'a> {
    Header { version: u32, config_sha256: &'a str, target_count: usize, eval_count: usize },
    Iter(&'a IterRecord),
    Epoch { epoch: usize, dataset_hash: &'a str, dataset_size: usize, checkpoint_sha256: &'a str },
    Error { message: String },
}

struct Log(fs::File);

impl Log {
    fn line(&mut self, l: &LogLine) -> Result<()> {
        let mut s = serde_json::to_string(l).expect("log line serializes");
        s.push('\n');
        self.0.write_all(s.as_bytes())?;
        Ok(())
    }
}

fn save_checkpoint(trainer: &Trainer, dir: &Path, stem: &str) -> Result<String> {
    fs::create_dir_all(dir)?;
    trainer.state.model.save(&dir.join(format!("{stem}.ckpt")), &dir.join(format!("{stem}.json")), &trainer.registry)?;
    Ok(trainer.state.model.params.hash_hex())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let cfg: Resolved = RunConfig::load(a.config)?;
    let (target_manifest, targets) = load_images(a.target_dir)?;
    check_registry("target dataset", a.target_dir, &target_manifest, &cfg.registry)?;
    if targets.is_empty() {
        bail!(ConfigError(format!("target dataset {} is empty", a.target_dir.display())));
    }
    let eval = match a.eval_dir {
        Some(dir) => {
            let same = fs::canonicalize(dir).ok().zip(fs::canonicalize(a.target_dir).ok()).is_some_and(|(x, y)| x == y);
            if same {
                bail!(UsageError("--eval-dir must differ from --target-dir; the training targets stay unlabeled".into()));
            }
            let (m, images, labels) = load_labeled(dir)?;
            check_registry("eval dataset", dir, &m, &cfg.registry)?;
            Some(EvalSplit::new(images, labels)?)
        }
        None => None,
    };

    fs::create_dir_all(a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write(&a.out.join("config.json"), &cfg.doc.to_json())?;
    let ckpt_dir = a.out.join("checkpoints");
    let report_dir = a.out.join("reports");
    let mut log = Log(fs::File::create(a.out.join("log.ndjson"))?);
    log.line(&LogLine::Header {
        version: LOG_VERSION,
        config_sha256: &cfg.hash,
        target_count: targets.len(),
        eval_count: eval.as_ref().map_or(0, |e| e.len()),
    })?;

    let mut trainer = Trainer::init(cfg.train.clone(), cfg.registry.clone())?;
    save_checkpoint(&trainer, &ckpt_dir, "epoch_000")?;
    let target_refs: Vec<&Image> = targets.iter().collect();
    let mut written = 0;
    let mut last_report = None;
    while trainer.state.epoch < trainer.cfg.epochs {
        let result = trainer.run_epoch(&target_refs, eval.as_ref());
        for r in &trainer.state.records[written..] {
            log.line(&LogLine::Iter(r))?;
        }
        written = trainer.state.records.len();
        let epoch_log: EpochLog = match result {
            Ok(l) => l,
            Err(e) => {
                log.line(&LogLine::Error { message: e.to_string() })?;
                return Err(e.into());
            }
        };
        let stem = format!("epoch_{:03}", trainer.state.epoch);
        let hash = save_checkpoint(&trainer, &ckpt_dir, &stem)?;
        log.line(&LogLine::Epoch {
            epoch: epoch_log.epoch,
            dataset_hash: &epoch_log.dataset_hash,
            dataset_size: epoch_log.dataset_size,
            checkpoint_sha256: &hash,
        })?;
        if let Some(report) = &epoch_log.report {
            write(&report_dir.join(format!("{stem}.json")), &versioned(REPORT_VERSION, report))?;
            eprintln!("epoch {}:\n{}", trainer.state.epoch, report.to_table());
            last_report = Some(report.clone());
        }
        let last = epoch_log.records.last();
        log::info!(
            "epoch {} done: task {:.4} app {:.4} content {:.4}, {} synthetic samples",
            epoch_log.epoch,
            last.map_or(f64::NAN, |r| r.task),
            last.map_or(f64::NAN, |r| r.app),
            last.map_or(f64::NAN, |r| r.content),
            epoch_log.dataset_size
        );
    }
    trainer.state.model.save(&a.out.join("model.ckpt"), &a.out.join("model.json"), &trainer.registry)?;
    if let Some(split) = &eval {
        let report = match last_report {
            Some(r) if trainer.cfg.epochs > 0 => r,
            _ => trainer.evaluate(split)?,
        };
        write(&a.out.join("report.json"), &versioned(REPORT_VERSION, &report))?;
    }
    Ok(())
}

pub struct InferArgs<'a> {
    pub model: &'a Path,
    pub sidecar: Option<&'a Path>,
    pub config: Option<&'a Path>,
    pub images: &'a Path,
    pub out: &'a Path,
}

/// Writes a labeled dataset whose graphs are the model's predictions, so it
/// can be passed to `eval --pred` or `reconstruct --graphs`.
pub fn infer(a: InferArgs) -> Result<()> {
    let cfg = RunConfig::load(a.config)?;
    let (model, registry) = load_model(a.model, a.sidecar)?;
    let (manifest, images) = load_images(a.images)?;
    check_registry("image dataset", a.images, &manifest, &registry)?;
    let decode = &cfg.train.decode;
    let mut graphs = Vec::with_capacity(images.len());
    for chunk in images.chunks(INFER_BATCH) {
        let refs: Vec<&Image> = chunk.iter().collect();
        graphs.extend(no_grad(|| model.infer(&refs, decode))?);
    }
    let samples: Vec<SampleData> = manifest
        .samples
        .iter()
        .zip(images.into_iter().zip(graphs))
        .map(|(e, (image, graph))| SampleData { seed: e.seed, image, graph: Some(graph), scene: None })
        .collect();
    let info = DatasetInfo {
        domain: manifest.domain,
        camera: manifest.camera,
        master_seed: manifest.master_seed,
        provenance: Provenance {
            generator: generator("infer"),
            config_sha256: Some(cfg.hash.clone()),
            model_sha256: Some(model.params.hash_hex()),
            decode_threshold: Some(decode.obj_threshold),
            ..Provenance::default()
        },
    };
    dataset::write_dataset(a.out, &info, &registry, &samples)?;
    log::info!("wrote {} predicted graphs to {}", samples.len(), a.out.display());
    Ok(())
}

pub struct ReconstructArgs<'a> {
    pub graphs: &'a Path,
    pub config: Option<&'a Path>,
    pub out: &'a Path,
    pub seed: u64,
}

/// Lifts every graph of a labeled dataset to 3D, renders it with the source
/// appearance and labels the render with its exact ground truth.
pub fn reconstruct(a: ReconstructArgs) -> Result<()> {
    let cfg = RunConfig::load(a.config)?;
    let manifest = dataset::read_manifest(a.graphs)?;
    check_registry("graph dataset", a.graphs, &manifest, &cfg.registry)?;
    let graphs = dataset::read_labels(a.graphs, &manifest)?;
    let cam = cfg.source.camera;
    let mut samples = Vec::with_capacity(graphs.len());
    let mut warnings = 0;
    for (i, g) in graphs.iter().enumerate() {
        let seed = dataset::sample_seed(a.seed, i);
        let rec = reconstruct_scene(g, &cam, &cfg.recon, seed).with_context(|| format!("graph {i}"))?;
        warnings += rec.fit_warnings;
        if rec.scene.collision_unresolved {
            log::warn!("graph {i}: collisions left unresolved");
        }
        let scene: Scene3D = rec.scene;
        let image = rasterize(&scene, &cam, &cfg.source, scenesynth::environment::mix_seed(seed, 1));
        let graph = ground_truth_graph(&scene, &cam, cfg.recon.predicate_margin);
        samples.push(SampleData { seed, image, graph: Some(graph), scene: Some(scene) });
    }
    if warnings > 0 {
        log::warn!("{warnings} objects fit outside the scale tolerance");
    }
    let info = DatasetInfo {
        domain: DomainTag::Reconstructed,
        camera: cam,
        master_seed: a.seed,
        provenance: Provenance {
            generator: generator("reconstruct"),
            config_sha256: Some(cfg.hash.clone()),
            recon_threshold: Some(cfg.recon.threshold),
            ..Provenance::default()
        },
    };
    dataset::write_dataset(a.out, &info, &cfg.registry, &samples)?;
    log::info!("wrote {} reconstructions to {}", samples.len(), a.out.display());
    Ok(())
}

pub struct EvalArgs<'a> {
    pub pred: &'a Path,
    pub gt: &'a Path,
    pub out: &'a Path,
    pub ks: &'a [usize],
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let pm = dataset::read_manifest(a.pred)?;
    let gm = dataset::read_manifest(a.gt)?;
    let registry = dataset::registry_of(a.gt, &gm)?;
    check_registry("prediction dataset", a.pred, &pm, &registry)?;
    let preds = dataset::read_labels(a.pred, &pm)?;
    let gts = dataset::read_labels(a.gt, &gm)?;
    if preds.len() != gts.len() {
        bail!(ConfigError(format!("{} predictions for {} ground-truth graphs", preds.len(), gts.len())));
    }
    let report = evaluate(&preds, &gts, &registry, a.ks)?;
    write(a.out, &versioned(REPORT_VERSION, &report))?;
    println!("{}", report.to_table());
    Ok(())
}

pub struct DiagnoseArgs<'a> {
    pub model: &'a Path,
    pub sidecar: Option<&'a Path>,
    pub source: &'a Path,
    pub target: &'a Path,
    pub out: &'a Path,
}

pub fn diagnose(a: DiagnoseArgs) -> Result<()> {
    let (model, registry) = load_model(a.model, a.sidecar)?;
    let (sm, s_img, s_lab) = load_labeled(a.source)?;
    let (tm, t_img, t_lab) = load_labeled(a.target)?;
    check_registry("source dataset", a.source, &sm, &registry)?;
    check_registry("target dataset", a.target, &tm, &registry)?;
    let si: Vec<&Image> = s_img.iter().collect();
    let sl: Vec<&SceneGraph> = s_lab.iter().collect();
    let ti: Vec<&Image> = t_img.iter().collect();
    let tl: Vec<&SceneGraph> = t_lab.iter().collect();
    let report = gap_diagnostics(&model, (&si, &sl), (&ti, &tl), RISK_BATCH)?;
    write(a.out, &versioned(REPORT_VERSION, &report))?;
    println!(
        "eps_s {:.6}  eps_r {:.6}  gap {:.6}  label_gap {:.4}  (model {})",
        report.eps_s,
        report.eps_r,
        report.gap,
        report.label_gap,
        &model.params.hash_hex()[..12]
    );
    Ok(())
}

pub fn print_config(config: Option<&Path>) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    print!("{}", cfg.doc.to_json());
    eprintln!("config sha256 {}", cfg.hash);
    Ok(())
}

pub fn default_ks() -> Vec<usize> {
    vec![20, 50]
}
