//! Real-to-sim: predicted scene graphs back to labeled 3D scenes.

use std::collections::{HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::environment::{
    ground_truth_graph, mix_seed, project_bbox, rasterize, AssetRegistry, Camera, DomainConfig, DomainTag, Image,
    Object3D, Scene3D, Vec3, DEFAULT_PREDICATE_MARGIN,
};
use crate::model::DecodeConfig;
use crate::model::{Model, ModelError};
use crate::scenegraph::{BBox, NodeId, Predicate, SceneGraph};

#[cfg(test)]
mod tests;

/// Upper bound on collision nudges per scene.
pub const MAX_NUDGES: usize = 50;

const FIT_ITERATIONS: usize = 40;
const INFER_BATCH: usize = 16;

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error("invalid reconstruction config: {0}")]
    Config(String),
    #[error("invalid scene graph: {0}")]
    InvalidGraph(String),
    #[error("no target images given")]
    EmptyInput,
    #[error("{images} images but {seeds} seeds")]
    SeedCount { images: usize, seeds: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, SynthesisError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconstructionConfig {
    /// Nodes scoring below this are not placed.
    pub threshold: f64,
    pub assets: AssetRegistry,
    /// Half-open yaw interval in degrees, inside [0, 360).
    pub yaw_range: [f64; 2],
    /// Allowed relative error of the refitted box height before a warning.
    pub scale_tolerance: f64,
    /// Collision nudge length, meters.
    pub nudge_step: f64,
    /// Appearance of reconstructed objects; drawn per object from these lists.
    pub colors: Vec<usize>,
    pub materials: Vec<usize>,
    pub background: Vec<usize>,
    pub light_jitter: f64,
    /// Margin used to label reconstructed scenes.
    pub predicate_margin: f64,
}

impl Default for ReconstructionConfig {
    fn default() -> Self {
        Self::for_domain(&DomainConfig::clevr_source())
    }
}

impl ReconstructionConfig {
    /// Reconstruction that renders objects with the look of `domain`.
    pub fn for_domain(domain: &DomainConfig) -> Self {
        ReconstructionConfig {
            threshold: 0.5,
            assets: domain.assets.clone(),
            yaw_range: [0.0, 360.0],
            scale_tolerance: 0.2,
            nudge_step: 0.1,
            colors: domain.colors.clone(),
            materials: domain.materials.clone(),
            background: domain.appearance.background.clone(),
            light_jitter: domain.appearance.light_jitter,
            predicate_margin: DEFAULT_PREDICATE_MARGIN,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SynthesisError::Config(m));
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad(format!("threshold {} outside [0, 1]", self.threshold));
        }
        let [lo, hi] = self.yaw_range;
        if !(0.0 <= lo && lo < hi && hi <= 360.0) {
            return bad(format!("yaw range {:?} must lie within [0, 360)", self.yaw_range));
        }
        if !(self.scale_tolerance > 0.0) || !(self.nudge_step > 0.0) {
            return bad("scale tolerance and nudge step must be positive".into());
        }
        if self.colors.is_empty() || self.materials.is_empty() || self.background.is_empty() {
            return bad("colors, materials and background must be nonempty".into());
        }
        if !(self.predicate_margin >= 0.0) {
            return bad(format!("predicate margin {} must be non-negative", self.predicate_margin));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
}

impl Ray {
    pub fn at(&self, s: f64) -> Vec3 {
        self.origin + self.direction.scale(s)
    }
}

/// Ray from the camera center through pixel coordinate `(u, v)`.
pub fn pixel_ray(cam: &Camera, u: f64, v: f64) -> Ray {
    let f = cam.focal();
    let (cx, cy) = cam.principal_point();
    let d = Vec3::new((u - cx) / f, -(v - cy) / f, 1.0);
    Ray { origin: cam.center(), direction: cam.direction_to_world(d).normalized() }
}

/// First point where the ray meets the ground plane `y = 0`.
pub fn ray_ground_intersect(r: &Ray) -> Option<Vec3> {
    ray_plane_intersect(r, 0.0)
}

fn ray_plane_intersect(r: &Ray, elevation: f64) -> Option<Vec3> {
    if r.direction.y >= 0.0 {
        return None;
    }
    let s = (elevation - r.origin.y) / r.direction.y;
    if s < 0.0 {
        return None;
    }
    let mut p = r.at(s);
    p.y = elevation;
    Some(p)
}

/// A reconstructed scene plus bookkeeping about what was dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub scene: Scene3D,
    /// Graph node id behind each scene object, in object order.
    pub sources: Vec<NodeId>,
    /// Nodes above threshold whose ray misses their support plane.
    pub dropped: Vec<NodeId>,
    /// Objects whose refitted box height missed the tolerance.
    pub fit_warnings: usize,
}

fn check_graph(g: &SceneGraph, assets: &AssetRegistry) -> Result<()> {
    let mut ids = HashSet::new();
    for n in &g.nodes {
        if !ids.insert(n.id) {
            return Err(SynthesisError::InvalidGraph(format!("duplicate node id {}", n.id)));
        }
        if assets.get(n.category).is_none() {
            return Err(SynthesisError::InvalidGraph(format!("node {} has class {} without an asset", n.id, n.category)));
        }
        if !(0.0..=1.0).contains(&n.score) {
            return Err(SynthesisError::InvalidGraph(format!("node {} score {} outside [0, 1]", n.id, n.score)));
        }
    }
    for e in &g.edges {
        if e.subject == e.object || !ids.contains(&e.subject) || !ids.contains(&e.object) {
            return Err(SynthesisError::InvalidGraph(format!("edge {} -> {} is dangling or a self-loop", e.subject, e.object)));
        }
    }
    Ok(())
}

fn corners(b: &BBox) -> [f64; 4] {
    [b.u - 0.5 * b.w, b.v - 0.5 * b.h, b.u + 0.5 * b.w, b.v + 0.5 * b.h]
}

/// Squared corner residual of the object's clamped projection against `target`.
fn residual(cam: &Camera, obj: &Object3D, target: &[f64; 4]) -> Option<[f64; 4]> {
    let c = corners(&project_bbox(cam, obj)?);
    Some([c[0] - target[0], c[1] - target[1], c[2] - target[2], c[3] - target[3]])
}

fn cost(r: &[f64; 4]) -> f64 {
    r.iter().map(|x| x * x).sum()
}

/// Solves a 3x3 system by Gaussian elimination with partial pivoting.
fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let pivot = (col..3).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..3 {
            let f = a[row][col] / a[col][col];
            for k in col..3 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for row in (0..3).rev() {
        let s: f64 = (row + 1..3).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Some(x)
}

/// Levenberg-Marquardt over (x, z, scale) with the elevation held fixed, so
/// the object's clamped projection matches the observed box corners.
fn fit_object(cam: &Camera, obj: &mut Object3D, target: &BBox, scale_bounds: (f64, f64)) {
    let target = corners(target);
    let apply = |o: &Object3D, p: [f64; 3]| {
        let mut o = *o;
        o.position.x = p[0];
        o.position.z = p[1];
        o.scale = p[2].clamp(scale_bounds.0, scale_bounds.1);
        o
    };
    let mut p = [obj.position.x, obj.position.z, obj.scale];
    let Some(mut r) = residual(cam, obj, &target) else { return };
    let mut c = cost(&r);
    let mut mu = 1e-3;
    for _ in 0..FIT_ITERATIONS {
        if c < 1e-10 {
            break;
        }
        let h = 1e-5;
        let mut jac = [[0.0; 3]; 4];
        for k in 0..3 {
            let mut q = p;
            q[k] += h;
            let Some(rq) = residual(cam, &apply(obj, q), &target) else { return };
            for (i, row) in jac.iter_mut().enumerate() {
                row[k] = (rq[i] - r[i]) / h;
            }
        }
        let mut jtj = [[0.0; 3]; 3];
        let mut jtr = [0.0; 3];
        for (i, row) in jac.iter().enumerate() {
            for a in 0..3 {
                jtr[a] -= row[a] * r[i];
                for b in 0..3 {
                    jtj[a][b] += row[a] * row[b];
                }
            }
        }
        let mut improved = false;
        for _ in 0..8 {
            let mut damped = jtj;
            for (k, row) in damped.iter_mut().enumerate() {
                row[k] += mu * (jtj[k][k] + 1e-9);
            }
            let Some(step) = solve3(damped, jtr) else { break };
            let mut q = [p[0] + step[0], p[1] + step[1], p[2] + step[2]];
            q[2] = q[2].clamp(scale_bounds.0, scale_bounds.1);
            if let Some(rq) = residual(cam, &apply(obj, q), &target) {
                let cq = cost(&rq);
                if cq < c {
                    p = q;
                    r = rq;
                    c = cq;
                    mu = (mu * 0.3).max(1e-9);
                    improved = true;
                    break;
                }
            }
            mu *= 10.0;
        }
        if !improved {
            break;
        }
    }
    *obj = apply(obj, p);
}

/// Places each node above `cfg.threshold` into a 3D scene.
///
/// A node starts at the intersection of the ray through its box bottom-center
/// with its support plane (the ground, or the top of the object it is `on`).
/// Position and scale are then refitted so the projected box matches the
/// observed one; yaw is drawn from `cfg.yaw_range`. Overlapping footprints
/// are pushed apart by nudging the farther object away from the camera.
pub fn reconstruct_scene(g: &SceneGraph, cam: &Camera, cfg: &ReconstructionConfig, seed: u64) -> Result<Reconstruction> {
    cfg.validate()?;
    check_graph(g, &cfg.assets)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scene = Scene3D::empty(DomainTag::Reconstructed);
    scene.ground_color = cfg.background[rng.gen_range(0..cfg.background.len())];
    scene.light = 1.0 + cfg.light_jitter * rng.gen_range(-1.0..=1.0);

    let kept: Vec<_> = g.nodes.iter().filter(|n| n.score >= cfg.threshold).collect();
    let kept_ids: HashSet<NodeId> = kept.iter().map(|n| n.id).collect();

    // First surviving support per node; cycles and chains are cut by
    // requiring the support itself to rest on the ground.
    let mut support: HashMap<NodeId, NodeId> = HashMap::new();
    for e in &g.edges {
        if e.predicate == Predicate::On && kept_ids.contains(&e.subject) && kept_ids.contains(&e.object) {
            support.entry(e.subject).or_insert(e.object);
        }
    }
    let grounded: HashSet<NodeId> = kept.iter().map(|n| n.id).filter(|id| !support.contains_key(id)).collect();
    support.retain(|_, s| grounded.contains(s));

    // Per-node appearance draws happen in graph order so they do not depend
    // on which nodes were dropped later.
    let draws: HashMap<NodeId, (f64, usize, usize)> = kept
        .iter()
        .map(|n| {
            let yaw = rng.gen_range(cfg.yaw_range[0]..cfg.yaw_range[1]);
            let color = cfg.colors[rng.gen_range(0..cfg.colors.len())];
            let material = cfg.materials[rng.gen_range(0..cfg.materials.len())];
            (n.id, (yaw, color, material))
        })
        .collect();

    let mut placed: HashMap<NodeId, usize> = HashMap::new();
    let mut sources = Vec::new();
    let mut dropped = Vec::new();
    let mut fit_warnings = 0;
    let ground_first = kept.iter().filter(|n| !support.contains_key(&n.id)).chain(kept.iter().filter(|n| support.contains_key(&n.id)));
    for node in ground_first {
        let asset = cfg.assets.get(node.category).expect("checked");
        let base = match support.get(&node.id) {
            Some(s) => match placed.get(s) {
                Some(&j) => Some(j),
                None => None,
            },
            None => None,
        };
        if support.contains_key(&node.id) && base.is_none() {
            log::warn!("node {} dropped: its support was not placed", node.id);
            dropped.push(node.id);
            continue;
        }
        let elevation = base.map_or(0.0, |j| scene.objects[j].top());
        let (u, v) = node.bbox.bottom_center();
        let ray = pixel_ray(cam, u.clamp(0.0, cam.width as f64), v.clamp(0.0, cam.height as f64));
        let Some(hit) = ray_plane_intersect(&ray, elevation) else {
            log::warn!("node {} dropped: ray through its box bottom misses the support plane", node.id);
            dropped.push(node.id);
            continue;
        };
        let depth = cam.to_camera(hit).z.max(1e-3);
        let s0 = (node.bbox.h * depth / cam.focal()).clamp(asset.min_scale, asset.max_scale);
        let (yaw, color, material) = draws[&node.id];
        let mut obj = Object3D {
            class: node.category,
            shape: asset.shape,
            position: hit,
            yaw,
            scale: s0,
            color,
            material,
        };
        // The box bottom is the front edge of the footprint; start from its center.
        let horizontal = Vec3::new(ray.direction.x, 0.0, ray.direction.z);
        if horizontal.norm() > 1e-9 {
            let step = horizontal.normalized().scale(0.5 * s0);
            obj.position = Vec3::new(hit.x + step.x, elevation, hit.z + step.z);
        }
        fit_object(cam, &mut obj, &node.bbox, (asset.min_scale, asset.max_scale));
        if let Some(j) = base {
            let s = scene.objects[j];
            if !s.footprint_contains(obj.position.x, obj.position.z) {
                obj.position.x = s.position.x;
                obj.position.z = s.position.z;
            }
        }
        if let Some(b) = project_bbox(cam, &obj) {
            if (b.h - node.bbox.h).abs() > cfg.scale_tolerance * node.bbox.h {
                fit_warnings += 1;
                log::debug!("node {}: refitted box height {:.2} vs observed {:.2}", node.id, b.h, node.bbox.h);
            }
        }
        placed.insert(node.id, scene.objects.len());
        sources.push(node.id);
        scene.objects.push(obj);
    }

    let on_pairs: HashSet<(usize, usize)> = support
        .iter()
        .filter_map(|(a, b)| Some((*placed.get(a)?, *placed.get(b)?)))
        .collect();
    scene.collision_unresolved = !resolve_collisions(&mut scene.objects, &on_pairs, cam, cfg.nudge_step);
    if scene.collision_unresolved {
        log::warn!("reconstruction left overlapping objects after {MAX_NUDGES} nudges");
    }
    Ok(Reconstruction { scene, sources, dropped, fit_warnings })
}

fn overlapping(a: &Object3D, b: &Object3D) -> bool {
    let vertical = a.position.y < b.top() && b.position.y < a.top();
    let d = ((a.position.x - b.position.x).powi(2) + (a.position.z - b.position.z).powi(2)).sqrt();
    vertical && d < a.footprint_radius() + b.footprint_radius()
}

/// Nudges the farther object of the first overlapping pair until none remain.
/// Objects resting on a nudged object move with it. Returns false if overlaps
/// persist after [`MAX_NUDGES`] steps.
fn resolve_collisions(objects: &mut [Object3D], on_pairs: &HashSet<(usize, usize)>, cam: &Camera, step: f64) -> bool {
    let related = |i: usize, j: usize| on_pairs.contains(&(i, j)) || on_pairs.contains(&(j, i));
    let riders_of = |j: usize| on_pairs.iter().filter(move |&&(_, s)| s == j).map(|&(a, _)| a);
    let root = |i: usize| on_pairs.iter().find(|&&(a, _)| a == i).map_or(i, |&(_, s)| s);
    for _ in 0..MAX_NUDGES {
        let mut pair = None;
        'find: for i in 0..objects.len() {
            for j in i + 1..objects.len() {
                if !related(i, j) && root(i) != root(j) && overlapping(&objects[i], &objects[j]) {
                    pair = Some((i, j));
                    break 'find;
                }
            }
        }
        let Some((i, j)) = pair else { return true };
        let depth = |k: usize| cam.to_camera(objects[k].ground_anchor()).z;
        let far = root(if depth(j) >= depth(i) { j } else { i });
        let c = cam.center();
        let anchor = objects[far].ground_anchor();
        let mut dir = Vec3::new(anchor.x - c.x, 0.0, anchor.z - c.z);
        if dir.norm() < 1e-9 {
            dir = Vec3::new(0.0, 0.0, 1.0);
        }
        let delta = dir.normalized().scale(step);
        let movers: Vec<usize> = std::iter::once(far).chain(riders_of(far)).collect();
        for k in movers {
            objects[k].position.x += delta.x;
            objects[k].position.z += delta.z;
        }
    }
    !(0..objects.len()).any(|i| {
        (i + 1..objects.len()).any(|j| !related(i, j) && root(i) != root(j) && overlapping(&objects[i], &objects[j]))
    })
}

/// One generated training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub image: Image,
    pub graph: SceneGraph,
    pub scene: Scene3D,
    /// Index of the target image this sample was reconstructed from.
    pub source_index: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Default)]
pub struct SynthesizedDataset {
    pub samples: Vec<LabeledSample>,
    /// Target image index and reason for each image that produced no sample.
    pub skipped: Vec<(usize, String)>,
}

/// Infers a graph for each target image with the frozen model, reconstructs
/// it, renders it with `render`'s appearance and labels it with the exact
/// ground truth of the reconstructed scene.
pub fn generate_labeled_dataset(
    model: &Model,
    targets: &[&Image],
    cam: &Camera,
    cfg: &ReconstructionConfig,
    render: &DomainConfig,
    decode: &DecodeConfig,
    seeds: &[u64],
) -> Result<SynthesizedDataset> {
    if targets.is_empty() {
        return Err(SynthesisError::EmptyInput);
    }
    if seeds.len() != targets.len() {
        return Err(SynthesisError::SeedCount { images: targets.len(), seeds: seeds.len() });
    }
    cfg.validate()?;
    let mut out = SynthesizedDataset::default();
    for (chunk_index, chunk) in targets.chunks(INFER_BATCH).enumerate() {
        let graphs = model.infer(chunk, decode)?;
        for (k, graph) in graphs.iter().enumerate() {
            let index = chunk_index * INFER_BATCH + k;
            let seed = seeds[index];
            match reconstruct_scene(graph, cam, cfg, seed) {
                Ok(rec) => {
                    let image = rasterize(&rec.scene, cam, render, mix_seed(seed, 1));
                    let graph = ground_truth_graph(&rec.scene, cam, cfg.predicate_margin);
                    out.samples.push(LabeledSample { image, graph, scene: rec.scene, source_index: index, seed });
                }
                Err(e) => {
                    log::warn!("target image {index} skipped: {e}");
                    out.skipped.push((index, e.to_string()));
                }
            }
        }
    }
    Ok(out)
}
