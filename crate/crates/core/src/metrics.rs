//! Detection AP, triplet recall and domain-gap diagnostics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::environment::Image;
use crate::model::{Model, ModelError};
use crate::scenegraph::{iou, BBox, CategoryRegistry, SceneGraph, Triplet};

/// Seed of the pair sampling used when evaluating task risk.
pub const RISK_SEED: u64 = 0x5EED_0F_715C;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("{predictions} predicted graphs for {ground_truth} ground-truth graphs")]
    Pairing { predictions: usize, ground_truth: usize },
    #[error("empty split: {0}")]
    EmptySplit(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub image: usize,
    pub class: usize,
    pub score: f64,
    pub bbox: BBox,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBox {
    pub image: usize,
    pub class: usize,
    pub bbox: BBox,
}

/// Outcome of matching one prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchRecord {
    /// Index into the prediction list.
    pub prediction: usize,
    /// Index into the ground-truth list.
    pub matched: Option<usize>,
    pub iou: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApResult {
    /// AP per class; `None` for classes without ground truth.
    pub per_class: Vec<Option<f64>>,
    /// Mean over classes with ground truth; `None` if there are none.
    pub map: Option<f64>,
    pub matches: Vec<MatchRecord>,
}

/// Area under the precision envelope of a ranked list of hit flags.
fn all_point_ap(hits: &[bool], n_gt: usize) -> f64 {
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(hits.len());
    for (i, &h) in hits.iter().enumerate() {
        tp += h as usize;
        points.push((tp as f64 / n_gt as f64, tp as f64 / (i + 1) as f64));
    }
    for i in (0..points.len().saturating_sub(1)).rev() {
        points[i].1 = points[i].1.max(points[i + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (recall, precision) in points {
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

/// Per-class average precision. Within a class, predictions are ranked by
/// score (input order on ties) and each is matched to the unmatched
/// ground-truth box of the same image with the highest IoU, if that IoU is at
/// least `iou_thr`.
pub fn average_precision(preds: &[ScoredBox], gts: &[GtBox], num_classes: usize, iou_thr: f64) -> ApResult {
    let mut per_class = vec![None; num_classes];
    let mut matches = Vec::with_capacity(preds.len());
    for (class, slot) in per_class.iter_mut().enumerate() {
        let gt_idx: Vec<usize> = (0..gts.len()).filter(|&i| gts[i].class == class).collect();
        let mut order: Vec<usize> = (0..preds.len()).filter(|&i| preds[i].class == class).collect();
        order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score).then(a.cmp(&b)));
        let mut used = vec![false; gts.len()];
        let mut hits = Vec::with_capacity(order.len());
        for &p in &order {
            let pred = &preds[p];
            let mut best: Option<(usize, f64)> = None;
            for &g in &gt_idx {
                if used[g] || gts[g].image != pred.image {
                    continue;
                }
                let o = iou(&pred.bbox, &gts[g].bbox);
                if best.is_none_or(|(_, b)| o > b) {
                    best = Some((g, o));
                }
            }
            let hit = best.filter(|&(_, o)| o >= iou_thr);
            if let Some((g, _)) = hit {
                used[g] = true;
            }
            hits.push(hit.is_some());
            matches.push(MatchRecord {
                prediction: p,
                matched: hit.map(|(g, _)| g),
                iou: best.map_or(0.0, |(_, o)| o),
                score: pred.score,
            });
        }
        if !gt_idx.is_empty() {
            *slot = Some(all_point_ap(&hits, gt_idx.len()));
        }
    }
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    let map = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    matches.sort_by_key(|m| m.prediction);
    ApResult { per_class, map, matches }
}

/// Flattens per-image graphs into the box lists used by [`average_precision`].
pub fn boxes_from_graphs(preds: &[SceneGraph], gts: &[SceneGraph]) -> (Vec<ScoredBox>, Vec<GtBox>) {
    let p = preds
        .iter()
        .enumerate()
        .flat_map(|(i, g)| g.nodes.iter().map(move |n| ScoredBox { image: i, class: n.category, score: n.score, bbox: n.bbox }))
        .collect();
    let g = gts
        .iter()
        .enumerate()
        .flat_map(|(i, g)| g.nodes.iter().map(move |n| GtBox { image: i, class: n.category, bbox: n.bbox }))
        .collect();
    (p, g)
}

fn triplet_matches(p: &Triplet, g: &Triplet) -> bool {
    p.predicate == g.predicate
        && p.subject_class == g.subject_class
        && p.object_class == g.object_class
        && iou(&p.subject_box, &g.subject_box) >= 0.5
        && iou(&p.object_box, &g.object_box) >= 0.5
}

/// Size of a maximum bipartite matching (augmenting paths).
fn max_matching(adj: &[Vec<usize>], right: usize) -> usize {
    fn augment(u: usize, adj: &[Vec<usize>], seen: &mut [bool], owner: &mut [Option<usize>]) -> bool {
        for &v in &adj[u] {
            if seen[v] {
                continue;
            }
            seen[v] = true;
            if owner[v].is_none_or(|w| augment(w, adj, seen, owner)) {
                owner[v] = Some(u);
                return true;
            }
        }
        false
    }
    let mut owner = vec![None; right];
    let mut count = 0;
    for u in 0..adj.len() {
        let mut seen = vec![false; right];
        if augment(u, adj, &mut seen, &mut owner) {
            count += 1;
        }
    }
    count
}

/// Number of ground-truth triplets of one image recalled by the `k`
/// best-scored predicted triplets (input order on ties). Each predicted
/// triplet can recall at most one ground-truth triplet and vice versa; the
/// count is the largest such assignment.
pub fn recalled_triplets(pred: &SceneGraph, gt: &SceneGraph, k: usize) -> usize {
    let mut ranked = pred.triplets();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score));
    ranked.truncate(k);
    let gts = gt.triplets();
    let adj: Vec<Vec<usize>> = gts
        .iter()
        .map(|g| (0..ranked.len()).filter(|&j| triplet_matches(&ranked[j], g)).collect())
        .collect();
    max_matching(&adj, ranked.len())
}

/// Triplet recall@K over a dataset: recalled ground-truth triplets over all
/// ground-truth triplets. A dataset without ground-truth triplets has recall 0.
pub fn triplet_recall(preds: &[SceneGraph], gts: &[SceneGraph], k: usize) -> Result<f64, MetricsError> {
    if preds.len() != gts.len() {
        return Err(MetricsError::Pairing { predictions: preds.len(), ground_truth: gts.len() });
    }
    let total: usize = gts.iter().map(|g| g.edges.len()).sum();
    if total == 0 {
        return Ok(0.0);
    }
    let hit: usize = preds.iter().zip(gts).map(|(p, g)| recalled_triplets(p, g, k)).sum();
    Ok(hit as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub gt_objects: usize,
    pub gt_triplets: usize,
    pub predictions: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub eps_s: f64,
    pub eps_r: f64,
    pub gap: f64,
    pub label_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map50: Option<f64>,
    pub per_class: BTreeMap<String, Option<f64>>,
    pub recall: BTreeMap<String, f64>,
    pub counts: Counts,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub gap: Option<GapReport>,
}

/// Detection mAP@0.5 and triplet recall at each `k`.
pub fn evaluate(
    preds: &[SceneGraph],
    gts: &[SceneGraph],
    registry: &CategoryRegistry,
    ks: &[usize],
) -> Result<EvalReport, MetricsError> {
    if preds.len() != gts.len() {
        return Err(MetricsError::Pairing { predictions: preds.len(), ground_truth: gts.len() });
    }
    let (pb, gb) = boxes_from_graphs(preds, gts);
    let ap = average_precision(&pb, &gb, registry.len(), 0.5);
    let per_class = ap
        .per_class
        .iter()
        .enumerate()
        .map(|(c, v)| (registry.name(c).unwrap_or("?").to_string(), *v))
        .collect();
    let mut recall = BTreeMap::new();
    for &k in ks {
        recall.insert(k.to_string(), triplet_recall(preds, gts, k)?);
    }
    Ok(EvalReport {
        map50: ap.map,
        per_class,
        recall,
        counts: Counts {
            gt_objects: gb.len(),
            gt_triplets: gts.iter().map(|g| g.edges.len()).sum(),
            predictions: pb.len(),
        },
        gap: None,
    })
}

/// Mean over classes of the total-variation distance between the two
/// splits' distributions of per-image instance counts of that class.
pub fn label_gap(a: &[&SceneGraph], b: &[&SceneGraph], num_classes: usize) -> f64 {
    if a.is_empty() || b.is_empty() || num_classes == 0 {
        return 0.0;
    }
    let hist = |graphs: &[&SceneGraph], class: usize| {
        let mut h: BTreeMap<usize, f64> = BTreeMap::new();
        for g in graphs {
            let n = g.nodes.iter().filter(|n| n.category == class).count();
            *h.entry(n).or_default() += 1.0 / graphs.len() as f64;
        }
        h
    };
    let mut total = 0.0;
    for c in 0..num_classes {
        let (ha, hb) = (hist(a, c), hist(b, c));
        let keys: std::collections::BTreeSet<usize> = ha.keys().chain(hb.keys()).copied().collect();
        let tv: f64 = keys
            .iter()
            .map(|k| (ha.get(k).unwrap_or(&0.0) - hb.get(k).unwrap_or(&0.0)).abs())
            .sum::<f64>()
            / 2.0;
        total += tv.min(1.0);
    }
    total / num_classes as f64
}

/// Empirical risks on a labeled source and target split (mean per-image task
/// loss, no gradients recorded) and the label gap between the splits.
pub fn gap_diagnostics(
    model: &Model,
    source: (&[&Image], &[&SceneGraph]),
    target: (&[&Image], &[&SceneGraph]),
    batch: usize,
) -> Result<GapReport, MetricsError> {
    if source.0.is_empty() {
        return Err(MetricsError::EmptySplit("source"));
    }
    if target.0.is_empty() {
        return Err(MetricsError::EmptySplit("target"));
    }
    let eps_s = model.mean_task_loss(source.0, source.1, batch, RISK_SEED)?;
    let eps_r = model.mean_task_loss(target.0, target.1, batch, RISK_SEED)?;
    Ok(GapReport {
        eps_s,
        eps_r,
        gap: eps_r - eps_s,
        label_gap: label_gap(source.1, target.1, model.config.num_classes),
    })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned plain-text rendering for terminals.
    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |v| format!("{v:.4}"));
        let mut rows: Vec<(String, String)> = vec![("mAP@0.5".into(), fmt(self.map50))];
        for (name, ap) in &self.per_class {
            rows.push((format!("AP[{name}]"), fmt(*ap)));
        }
        let mut recall: Vec<(&String, &f64)> = self.recall.iter().collect();
        recall.sort_by_key(|(k, _)| k.parse::<usize>().unwrap_or(usize::MAX));
        for (k, r) in recall {
            rows.push((format!("Recall@{k}"), format!("{r:.4}")));
        }
        rows.push(("GT objects".into(), self.counts.gt_objects.to_string()));
        rows.push(("GT triplets".into(), self.counts.gt_triplets.to_string()));
        rows.push(("predictions".into(), self.counts.predictions.to_string()));
        if let Some(g) = &self.gap {
            rows.push(("eps_s".into(), format!("{:.4}", g.eps_s)));
            rows.push(("eps_r".into(), format!("{:.4}", g.eps_r)));
            rows.push(("gap".into(), format!("{:.4}", g.gap)));
            rows.push(("label_gap".into(), format!("{:.4}", g.label_gap)));
        }
        let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k:<width$}  {v:>10}");
        }
        out
    }
}
