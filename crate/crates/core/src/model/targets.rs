use rand::seq::SliceRandom;
use rand::Rng;

use crate::scenegraph::{iou, BBox, NodeId, Predicate, SceneGraph};

/// Label index used for "no relation" in pair samples.
pub const NO_RELATION: usize = Predicate::COUNT;

/// Geometric pair descriptor fed to the relation head, for subject `a` and
/// object `b`: center offset (normalized by image size), log size ratios, IoU
/// and center distance over the image diagonal.
pub fn geo_features(a: &BBox, b: &BBox, width: f64, height: f64) -> [f64; 6] {
    let du = b.u - a.u;
    let dv = b.v - a.v;
    [
        du / width,
        dv / height,
        (a.w / b.w).ln(),
        (a.h / b.h).ln(),
        iou(a, b),
        (du * du + dv * dv).sqrt() / (width * width + height * height).sqrt(),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellTarget {
    pub cell: usize,
    pub node: NodeId,
    pub class: usize,
    /// `[fx, fy, ln(w / W), ln(h / H)]`: center offset inside the cell in
    /// `[0, 1)` and log box size relative to the image.
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairTarget {
    pub subject_cell: usize,
    pub object_cell: usize,
    pub geo: [f64; 6],
    /// Predicate index, or [`NO_RELATION`].
    pub label: usize,
}

/// Supervision for one image on a `grid x grid` detector.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTargets {
    pub grid: usize,
    /// Per-cell objectness label, row-major.
    pub objectness: Vec<f64>,
    pub positives: Vec<CellTarget>,
    pub pairs: Vec<PairTarget>,
}

/// Grid cell containing `(u, v)` in an image of the given size.
pub fn cell_of(u: f64, v: f64, width: f64, height: f64, grid: usize) -> usize {
    let gx = ((u / width * grid as f64).floor().max(0.0) as usize).min(grid - 1);
    let gy = ((v / height * grid as f64).floor().max(0.0) as usize).min(grid - 1);
    gy * grid + gx
}

/// Box of a grid cell, used as the stand-in geometry of background cells.
pub fn cell_box(cell: usize, width: f64, height: f64, grid: usize) -> BBox {
    let (cw, ch) = (width / grid as f64, height / grid as f64);
    let (gx, gy) = ((cell % grid) as f64, (cell / grid) as f64);
    BBox { u: (gx + 0.5) * cw, v: (gy + 0.5) * ch, w: cw, h: ch }
}

/// Assigns every ground-truth node to the cell containing its box center.
/// When several centers share a cell the owner is the one nearest the cell
/// center, then the lowest class index, then the lowest node id. Every
/// relation between owned nodes becomes a positive pair sample; the same
/// number of negatives is drawn, first from unrelated node pairs, then from
/// pairs between a node and a background cell.
pub fn assign_targets<R: Rng>(gt: &SceneGraph, grid: usize, rng: &mut R) -> TrainingTargets {
    let (w, h) = (gt.width as f64, gt.height as f64);
    let (cw, ch) = (w / grid as f64, h / grid as f64);
    let mut owner: Vec<Option<usize>> = vec![None; grid * grid];
    let rank = |idx: usize| {
        let n = &gt.nodes[idx];
        let cell = cell_of(n.bbox.u, n.bbox.v, w, h, grid);
        let c = cell_box(cell, w, h, grid);
        let d = (n.bbox.u - c.u).hypot(n.bbox.v - c.v);
        (d, n.category, n.id)
    };
    for (idx, node) in gt.nodes.iter().enumerate() {
        let cell = cell_of(node.bbox.u, node.bbox.v, w, h, grid);
        let better = match owner[cell] {
            None => true,
            Some(cur) => {
                let (a, b) = (rank(idx), rank(cur));
                a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)).is_lt()
            }
        };
        if better {
            owner[cell] = Some(idx);
        }
    }

    let mut objectness = vec![0.0; grid * grid];
    let mut positives = Vec::new();
    let mut cell_of_node = std::collections::HashMap::new();
    for (cell, idx) in owner.iter().enumerate() {
        let Some(idx) = *idx else { continue };
        let node = &gt.nodes[idx];
        objectness[cell] = 1.0;
        let (gx, gy) = ((cell % grid) as f64, (cell / grid) as f64);
        let b = &node.bbox;
        positives.push(CellTarget {
            cell,
            node: node.id,
            class: node.category,
            bbox: [b.u / cw - gx, b.v / ch - gy, (b.w / w).ln(), (b.h / h).ln()],
        });
        cell_of_node.insert(node.id, (cell, node.bbox));
    }

    let mut pairs = Vec::new();
    let mut related = std::collections::HashSet::new();
    for e in &gt.edges {
        let (Some(&(sc, sb)), Some(&(oc, ob))) = (cell_of_node.get(&e.subject), cell_of_node.get(&e.object)) else {
            continue;
        };
        related.insert((sc, oc));
        pairs.push(PairTarget {
            subject_cell: sc,
            object_cell: oc,
            geo: geo_features(&sb, &ob, w, h),
            label: e.predicate.index(),
        });
    }

    let wanted = pairs.len();
    if wanted > 0 {
        let owned: Vec<(usize, BBox)> = positives.iter().map(|p| cell_of_node[&p.node]).collect();
        let mut unrelated: Vec<((usize, BBox), (usize, BBox))> = Vec::new();
        for &a in &owned {
            for &b in &owned {
                if a.0 != b.0 && !related.contains(&(a.0, b.0)) {
                    unrelated.push((a, b));
                }
            }
        }
        unrelated.shuffle(rng);
        let background: Vec<usize> = (0..grid * grid).filter(|&c| owner[c].is_none()).collect();
        let mut negatives = unrelated;
        negatives.truncate(wanted);
        while negatives.len() < wanted && !background.is_empty() {
            let node = owned[rng.gen_range(0..owned.len())];
            let cell = background[rng.gen_range(0..background.len())];
            let bg = (cell, cell_box(cell, w, h, grid));
            negatives.push(if rng.gen_bool(0.5) { (node, bg) } else { (bg, node) });
        }
        for ((sc, sb), (oc, ob)) in negatives {
            pairs.push(PairTarget {
                subject_cell: sc,
                object_cell: oc,
                geo: geo_features(&sb, &ob, w, h),
                label: NO_RELATION,
            });
        }
    }

    TrainingTargets { grid, objectness, positives, pairs }
}
