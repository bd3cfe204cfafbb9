use serde::{Deserialize, Serialize};

use crate::scenegraph::{iou, BBox, Edge, Node, NodeId, Predicate, SceneGraph};

/// Largest decoded box side, as a multiple of the image size.
const MAX_BOX_SCALE: f64 = 4.0;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Relation logits for one ordered pair of candidate cells.
#[derive(Debug, Clone, PartialEq)]
pub struct PairLogits {
    pub subject_cell: usize,
    pub object_cell: usize,
    /// `P + 1` logits; the last is "no relation".
    pub logits: Vec<f64>,
}

/// Network output for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct RawPredictions {
    pub width: u32,
    pub height: u32,
    pub grid: usize,
    pub num_classes: usize,
    /// `[1 + K + 4, G, G]` row-major: objectness logit, class logits,
    /// box offsets `(tx, ty, tw, th)`.
    pub maps: Vec<f64>,
    pub pairs: Vec<PairLogits>,
}

impl RawPredictions {
    fn channel(&self, c: usize, cell: usize) -> f64 {
        self.maps[c * self.grid * self.grid + cell]
    }

    /// Objectness probability of a cell.
    pub fn objectness(&self, cell: usize) -> f64 {
        sigmoid(self.channel(0, cell))
    }

    pub fn class_logits(&self, cell: usize) -> Vec<f64> {
        (0..self.num_classes).map(|k| self.channel(1 + k, cell)).collect()
    }

    /// Argmax class, lowest index on ties.
    pub fn class(&self, cell: usize) -> usize {
        let logits = self.class_logits(cell);
        let mut best = 0;
        for (k, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = k;
            }
        }
        best
    }

    /// Decoded box: center at `(cell + sigmoid(t)) * cell_size`, size
    /// `exp(t) * image_size`.
    pub fn cell_bbox(&self, cell: usize) -> BBox {
        let k = self.num_classes;
        let (w, h) = (self.width as f64, self.height as f64);
        let (cw, ch) = (w / self.grid as f64, h / self.grid as f64);
        let (gx, gy) = ((cell % self.grid) as f64, (cell / self.grid) as f64);
        let max = MAX_BOX_SCALE.ln();
        BBox {
            u: (gx + sigmoid(self.channel(1 + k, cell))) * cw,
            v: (gy + sigmoid(self.channel(2 + k, cell))) * ch,
            w: self.channel(3 + k, cell).min(max).exp() * w,
            h: self.channel(4 + k, cell).min(max).exp() * h,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    pub obj_threshold: f64,
    pub nms_iou: f64,
    pub topk: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { obj_threshold: 0.5, nms_iou: 0.5, topk: 20 }
    }
}

/// Turns raw maps into a scene graph. Cells with objectness at or above the
/// threshold become candidates (ordered by score, then cell index); greedy
/// per-class NMS removes candidates overlapping a kept one by more than
/// `nms_iou`. Every ordered pair of survivors with relation logits yields
/// one triplet per predicate scored `s_subj * p(pred) * s_obj`; the `topk`
/// best (score, then subject cell, object cell, predicate) become edges.
pub fn decode(raw: &RawPredictions, cfg: &DecodeConfig) -> SceneGraph {
    let g2 = raw.grid * raw.grid;
    let mut cands: Vec<(usize, f64)> = (0..g2)
        .map(|c| (c, raw.objectness(c)))
        .filter(|&(_, s)| s >= cfg.obj_threshold)
        .collect();
    cands.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));

    let mut kept: Vec<(usize, f64, usize, BBox)> = Vec::new();
    for (cell, score) in cands {
        let class = raw.class(cell);
        let bbox = raw.cell_bbox(cell);
        if kept.iter().all(|k| k.2 != class || iou(&k.3, &bbox) <= cfg.nms_iou) {
            kept.push((cell, score, class, bbox));
        }
    }

    let mut graph = SceneGraph::empty(raw.width, raw.height);
    let mut node_of_cell = std::collections::HashMap::new();
    for (i, &(cell, score, class, bbox)) in kept.iter().enumerate() {
        graph.nodes.push(Node { id: i as NodeId, category: class, bbox, score });
        node_of_cell.insert(cell, (i as NodeId, score));
    }

    let mut triplets: Vec<(f64, usize, usize, usize, NodeId, NodeId)> = Vec::new();
    for pair in &raw.pairs {
        let (Some(&(si, ss)), Some(&(oi, os))) = (node_of_cell.get(&pair.subject_cell), node_of_cell.get(&pair.object_cell))
        else {
            continue;
        };
        let max = pair.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = pair.logits.iter().map(|l| (l - max).exp()).sum();
        for p in 0..Predicate::COUNT {
            let prob = (pair.logits[p] - max).exp() / z;
            triplets.push((ss * prob * os, pair.subject_cell, pair.object_cell, p, si, oi));
        }
    }
    triplets.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2, a.3).cmp(&(b.1, b.2, b.3))));
    triplets.truncate(cfg.topk);
    graph.edges = triplets
        .into_iter()
        .map(|(score, _, _, p, s, o)| Edge {
            subject: s,
            predicate: Predicate::from_index(p).expect("predicate index in range"),
            object: o,
            score,
        })
        .collect();
    graph
}
