//! Scene-graph data model: boxes, categories, predicates and the JSON
//! interchange format shared by inference, reconstruction and evaluation.

use std::collections::{BTreeSet, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Major version of the scene-graph document format.
pub const GRAPH_FORMAT_VERSION: u32 = 1;

/// Center-parameterized 2D box in pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub u: f64,
    pub v: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(u: f64, v: f64, w: f64, h: f64) -> Result<Self, GraphError> {
        let b = BBox { u, v, w, h };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(GraphError::InvalidBox(b))
        }
    }

    /// Box from corner coordinates `[x0, x1) x [y0, y1)`.
    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self, GraphError> {
        Self::new(0.5 * (x0 + x1), 0.5 * (y0 + y1), x1 - x0, y1 - y0)
    }

    pub fn is_valid(&self) -> bool {
        [self.u, self.v, self.w, self.h].iter().all(|x| x.is_finite()) && self.w > 0.0 && self.h > 0.0
    }

    pub fn x0(&self) -> f64 {
        self.u - 0.5 * self.w
    }
    pub fn x1(&self) -> f64 {
        self.u + 0.5 * self.w
    }
    pub fn y0(&self) -> f64 {
        self.v - 0.5 * self.h
    }
    pub fn y1(&self) -> f64 {
        self.v + 0.5 * self.h
    }

    /// Area from the corner coordinates, so that `iou(a, a)` is exactly 1.
    pub fn area(&self) -> f64 {
        (self.x1() - self.x0()) * (self.y1() - self.y0())
    }

    /// Bottom-center point, where an object standing on the ground touches it.
    pub fn bottom_center(&self) -> (f64, f64) {
        (self.u, self.y1())
    }
}

/// Intersection over union of two boxes, computed on the continuous boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x1().min(b.x1()) - a.x0().max(b.x0())).max(0.0);
    let iy = (a.y1().min(b.y1()) - a.y0().max(b.y0())).max(0.0);
    let inter = ix * iy;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Ordered, environment-specific list of object class names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct CategoryRegistry {
    names: Vec<String>,
}

impl CategoryRegistry {
    pub fn new<I, S>(names: I) -> Result<Self, GraphError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        let mut seen = HashSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(GraphError::DuplicateClass(n.clone()));
            }
        }
        Ok(CategoryRegistry { names })
    }

    /// The three CLEVR-style classes.
    pub fn clevr() -> Self {
        Self::new(["cube", "sphere", "cylinder"]).expect("static names are unique")
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.names.get(index).map(String::as_str)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Stable content hash, used to validate checkpoints against configs.
    pub fn hash_hex(&self) -> String {
        let mut hasher = Sha256::new();
        for n in &self.names {
            hasher.update(n.as_bytes());
            hasher.update([0u8]);
        }
        hex::encode(hasher.finalize())
    }
}

impl TryFrom<Vec<String>> for CategoryRegistry {
    type Error = GraphError;
    fn try_from(v: Vec<String>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<CategoryRegistry> for Vec<String> {
    fn from(r: CategoryRegistry) -> Self {
        r.names
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Predicate {
    Left,
    Right,
    Front,
    Behind,
    On,
}

impl Predicate {
    pub const ALL: [Predicate; 5] = [
        Predicate::Left,
        Predicate::Right,
        Predicate::Front,
        Predicate::Behind,
        Predicate::On,
    ];

    pub const COUNT: usize = 5;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Predicate> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Predicate::Left => "left",
            Predicate::Right => "right",
            Predicate::Front => "front",
            Predicate::Behind => "behind",
            Predicate::On => "on",
        }
    }

    pub fn from_name(name: &str) -> Option<Predicate> {
        Self::ALL.iter().copied().find(|p| p.name() == name)
    }

    /// The predicate that holds for the swapped pair, if there is one.
    pub fn invert(self) -> Option<Predicate> {
        match self {
            Predicate::Left => Some(Predicate::Right),
            Predicate::Right => Some(Predicate::Left),
            Predicate::Front => Some(Predicate::Behind),
            Predicate::Behind => Some(Predicate::Front),
            Predicate::On => None,
        }
    }

    /// Left/right/front/behind, the predicates realized by placement alone.
    pub fn is_spatial(self) -> bool {
        self != Predicate::On
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub type NodeId = u32;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Node {
    pub id: NodeId,
    pub category: usize,
    pub bbox: BBox,
    /// Confidence in [0, 1]; 1.0 for ground truth.
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub subject: NodeId,
    pub predicate: Predicate,
    pub object: NodeId,
    pub score: f64,
}

impl Edge {
    pub fn triple(&self) -> (NodeId, Predicate, NodeId) {
        (self.subject, self.predicate, self.object)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneGraph {
    pub width: u32,
    pub height: u32,
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
}

impl SceneGraph {
    pub fn empty(width: u32, height: u32) -> Self {
        SceneGraph {
            width,
            height,
            nodes: Vec::new(),
            edges: Vec::new(),
        }
    }

    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.nodes.iter().find(|n| n.id == id)
    }

    /// Edges as (subject class, predicate, object class) with both boxes.
    pub fn triplets(&self) -> Vec<Triplet> {
        self.edges
            .iter()
            .filter_map(|e| {
                let s = self.node(e.subject)?;
                let o = self.node(e.object)?;
                Some(Triplet {
                    subject_class: s.category,
                    subject_box: s.bbox,
                    predicate: e.predicate,
                    object_class: o.category,
                    object_box: o.bbox,
                    score: s.score * e.score * o.score,
                })
            })
            .collect()
    }

    /// Returns every invariant violation; an empty list means the graph is valid.
    pub fn validate(&self, registry: &CategoryRegistry) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut ids = HashSet::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if !ids.insert(n.id) {
                out.push(Violation::DuplicateNodeId(n.id));
            }
            if n.category >= registry.len() {
                out.push(Violation::UnknownCategory { node: n.id, category: n.category });
            }
            if !n.bbox.is_valid() {
                out.push(Violation::InvalidBox { node: n.id });
            }
            if !(0.0..=1.0).contains(&n.score) {
                out.push(Violation::ScoreOutOfRange { what: format!("nodes[{i}]"), score: n.score });
            }
        }
        let mut triples = BTreeSet::new();
        for (i, e) in self.edges.iter().enumerate() {
            if e.subject == e.object {
                out.push(Violation::SelfEdge { edge: i, node: e.subject });
            }
            let endpoints: &[NodeId] = if e.subject == e.object { &[e.subject] } else { &[e.subject, e.object] };
            for &id in endpoints {
                if !ids.contains(&id) {
                    out.push(Violation::MissingNode { edge: i, node: id });
                }
            }
            if !(0.0..=1.0).contains(&e.score) {
                out.push(Violation::ScoreOutOfRange { what: format!("edges[{i}]"), score: e.score });
            }
            if !triples.insert(e.triple()) {
                out.push(Violation::DuplicateTriple { edge: i });
            }
        }
        out
    }

    pub fn encode(&self, registry: &CategoryRegistry) -> Result<String, GraphError> {
        let doc = GraphDoc {
            version: GRAPH_FORMAT_VERSION,
            width: self.width,
            height: self.height,
            nodes: self
                .nodes
                .iter()
                .map(|n| {
                    let class = registry
                        .name(n.category)
                        .ok_or(GraphError::UnknownCategoryIndex(n.category))?;
                    Ok(NodeDoc {
                        id: n.id,
                        class: class.to_string(),
                        bbox: [n.bbox.u, n.bbox.v, n.bbox.w, n.bbox.h],
                        score: n.score,
                    })
                })
                .collect::<Result<_, GraphError>>()?,
            edges: self
                .edges
                .iter()
                .map(|e| EdgeDoc {
                    sub: e.subject,
                    pred: e.predicate.name().to_string(),
                    obj: e.object,
                    score: e.score,
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&doc).expect("graph documents always serialize"))
    }

    pub fn decode(text: &str, registry: &CategoryRegistry) -> Result<SceneGraph, GraphError> {
        let doc: GraphDoc = serde_json::from_str(text).map_err(|e| GraphError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        if doc.version != GRAPH_FORMAT_VERSION {
            return Err(GraphError::UnsupportedVersion(doc.version));
        }
        let field = |path: String, message: String| GraphError::Field { path, message };
        let mut nodes = Vec::with_capacity(doc.nodes.len());
        for (i, n) in doc.nodes.into_iter().enumerate() {
            let category = registry
                .index_of(&n.class)
                .ok_or_else(|| field(format!("nodes[{i}].class"), format!("unknown class {:?}", n.class)))?;
            let [u, v, w, h] = n.bbox;
            let bbox = BBox::new(u, v, w, h)
                .map_err(|e| field(format!("nodes[{i}].bbox"), e.to_string()))?;
            nodes.push(Node { id: n.id, category, bbox, score: n.score });
        }
        let mut edges = Vec::with_capacity(doc.edges.len());
        for (i, e) in doc.edges.into_iter().enumerate() {
            let predicate = Predicate::from_name(&e.pred)
                .ok_or_else(|| field(format!("edges[{i}].pred"), format!("unknown predicate {:?}", e.pred)))?;
            edges.push(Edge { subject: e.sub, predicate, object: e.obj, score: e.score });
        }
        Ok(SceneGraph { width: doc.width, height: doc.height, nodes, edges })
    }
}

/// A scored relationship with resolved classes and boxes, as used for recall.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triplet {
    pub subject_class: usize,
    pub subject_box: BBox,
    pub predicate: Predicate,
    pub object_class: usize,
    pub object_box: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    DuplicateNodeId(NodeId),
    UnknownCategory { node: NodeId, category: usize },
    InvalidBox { node: NodeId },
    ScoreOutOfRange { what: String, score: f64 },
    SelfEdge { edge: usize, node: NodeId },
    MissingNode { edge: usize, node: NodeId },
    DuplicateTriple { edge: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateNodeId(id) => write!(f, "node id {id} appears more than once"),
            Violation::UnknownCategory { node, category } => {
                write!(f, "node {node} has category {category} outside the registry")
            }
            Violation::InvalidBox { node } => write!(f, "node {node} has a degenerate or non-finite box"),
            Violation::ScoreOutOfRange { what, score } => write!(f, "{what} has score {score} outside [0, 1]"),
            Violation::SelfEdge { edge, node } => write!(f, "edge {edge} relates node {node} to itself"),
            Violation::MissingNode { edge, node } => write!(f, "edge {edge} references missing node {node}"),
            Violation::DuplicateTriple { edge } => write!(f, "edge {edge} duplicates an earlier triple"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("invalid box {0:?}: width and height must be positive and all fields finite")]
    InvalidBox(BBox),
    #[error("duplicate class name {0:?} in registry")]
    DuplicateClass(String),
    #[error("category index {0} is not in the registry")]
    UnknownCategoryIndex(usize),
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("{path}: {message}")]
    Field { path: String, message: String },
    #[error("unsupported scene-graph format version {0}")]
    UnsupportedVersion(u32),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphDoc {
    version: u32,
    width: u32,
    height: u32,
    nodes: Vec<NodeDoc>,
    edges: Vec<EdgeDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeDoc {
    id: NodeId,
    class: String,
    bbox: [f64; 4],
    score: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EdgeDoc {
    sub: NodeId,
    pred: String,
    obj: NodeId,
    score: f64,
}
