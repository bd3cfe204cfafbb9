//! Procedural CLEVR-like toy world: pinhole camera, scene sampler, the
//! geometric predicate oracle and a deterministic painter's-algorithm renderer.
//!
//! World frame: x to the right, y up, z forward. The ground is the plane y = 0.
//! Objects are positioned by the center of their base footprint, so `y` is the
//! elevation of the object's bottom.

use std::fmt;
use std::io::{self, BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::scenegraph::{BBox, CategoryRegistry, Edge, Node, Predicate, SceneGraph};

/// Major version of the scene document format.
pub const SCENE_FORMAT_VERSION: u32 = 1;

/// Ground-truth nodes need at least this much projected box area (px^2).
pub const MIN_VISIBLE_AREA: f64 = 9.0;

/// Vertical tolerance of the "on" predicate, in meters.
pub const ON_TOLERANCE: f64 = 0.02;

/// Default left/right and front/behind margin, in meters.
pub const DEFAULT_PREDICATE_MARGIN: f64 = 0.25;

const NEAR_PLANE: f64 = 1e-3;
const CYLINDER_SEGMENTS: usize = 32;
const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }
    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }
    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }
    pub fn scale(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
    pub fn normalized(self) -> Vec3 {
        self.scale(1.0 / self.norm())
    }
}

impl std::ops::Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl std::ops::Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

/// Pinhole camera with zero roll and yaw, pitched down by `pitch` degrees.
///
/// Pixel coordinates are continuous: pixel `(i, j)` covers `[i, i+1) x [j, j+1)`
/// and the principal point is the image center `(W/2, H/2)`. Pixels are square
/// and `fov` is the vertical field of view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Camera {
    pub position: [f64; 3],
    pub pitch: f64,
    pub fov: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for Camera {
    fn default() -> Self {
        Camera {
            position: [0.0, 6.0, 0.0],
            pitch: 60.0,
            fov: 40.0,
            width: 64,
            height: 64,
        }
    }
}

impl Camera {
    pub fn validate(&self) -> Result<(), EnvError> {
        if !(self.fov > 0.0 && self.fov < 180.0) {
            return Err(EnvError::Config(format!("camera fov {} must lie in (0, 180)", self.fov)));
        }
        if self.width < 16 || self.height < 16 {
            return Err(EnvError::Config(format!(
                "camera image {}x{} is smaller than 16x16",
                self.width, self.height
            )));
        }
        if !self.position.iter().chain([&self.pitch]).all(|v| v.is_finite()) {
            return Err(EnvError::Config("camera pose must be finite".into()));
        }
        Ok(())
    }

    pub fn center(&self) -> Vec3 {
        Vec3::new(self.position[0], self.position[1], self.position[2])
    }

    /// Focal length in pixels.
    pub fn focal(&self) -> f64 {
        0.5 * self.height as f64 / (0.5 * self.fov.to_radians()).tan()
    }

    pub fn principal_point(&self) -> (f64, f64) {
        (0.5 * self.width as f64, 0.5 * self.height as f64)
    }

    /// Right, up and forward unit vectors of the camera frame in world coordinates.
    pub fn basis(&self) -> (Vec3, Vec3, Vec3) {
        let (s, c) = self.pitch.to_radians().sin_cos();
        (Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, c, s), Vec3::new(0.0, -s, c))
    }

    /// World point to camera frame (x right, y up, z along the optical axis).
    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        let (r, u, f) = self.basis();
        let d = p - self.center();
        Vec3::new(d.dot(r), d.dot(u), d.dot(f))
    }

    /// Camera-frame direction to world-frame direction.
    pub fn direction_to_world(&self, d: Vec3) -> Vec3 {
        let (r, u, f) = self.basis();
        r.scale(d.x) + u.scale(d.y) + f.scale(d.z)
    }

    /// Projects a world point; `None` when it is not in front of the camera.
    pub fn project(&self, p: Vec3) -> Option<(f64, f64)> {
        let c = self.to_camera(p);
        if c.z <= NEAR_PLANE {
            return None;
        }
        let f = self.focal();
        let (cx, cy) = self.principal_point();
        Some((cx + f * c.x / c.z, cy - f * c.y / c.z))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Box,
    Sphere,
    Cylinder,
}

impl Shape {
    pub fn name(self) -> &'static str {
        match self {
            Shape::Box => "box",
            Shape::Sphere => "sphere",
            Shape::Cylinder => "cylinder",
        }
    }

    pub fn has_flat_top(self) -> bool {
        !matches!(self, Shape::Sphere)
    }
}

/// Per-class primitive and admissible scale range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Asset {
    pub shape: Shape,
    pub min_scale: f64,
    pub max_scale: f64,
}

/// Class index to asset; shared by every domain of one world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AssetRegistry {
    pub assets: Vec<Asset>,
}

impl AssetRegistry {
    /// Assets matching [`CategoryRegistry::clevr`].
    pub fn clevr() -> Self {
        let a = |shape| Asset { shape, min_scale: 0.3, max_scale: 1.2 };
        AssetRegistry {
            assets: vec![a(Shape::Box), a(Shape::Sphere), a(Shape::Cylinder)],
        }
    }

    pub fn get(&self, class: usize) -> Option<&Asset> {
        self.assets.get(class)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Object3D {
    pub class: usize,
    pub shape: Shape,
    /// Base-footprint center; `y` is the elevation of the object's bottom.
    pub position: Vec3,
    /// Rotation about the vertical axis, degrees.
    pub yaw: f64,
    /// Edge length (box), diameter (sphere, cylinder); also the height.
    pub scale: f64,
    pub color: usize,
    pub material: usize,
}

impl Object3D {
    pub fn height(&self) -> f64 {
        self.scale
    }

    pub fn top(&self) -> f64 {
        self.position.y + self.height()
    }

    /// Radius of a circle containing the footprint.
    pub fn footprint_radius(&self) -> f64 {
        match self.shape {
            Shape::Box => self.scale * std::f64::consts::FRAC_1_SQRT_2,
            Shape::Sphere | Shape::Cylinder => 0.5 * self.scale,
        }
    }

    /// Whether the ground-plane point `(x, z)` lies inside this object's footprint.
    pub fn footprint_contains(&self, x: f64, z: f64) -> bool {
        let (dx, dz) = (x - self.position.x, z - self.position.z);
        let half = 0.5 * self.scale;
        match self.shape {
            Shape::Box => {
                let (s, c) = self.yaw.to_radians().sin_cos();
                let lx = c * dx + s * dz;
                let lz = -s * dx + c * dz;
                lx.abs() <= half + 1e-12 && lz.abs() <= half + 1e-12
            }
            Shape::Sphere | Shape::Cylinder => dx * dx + dz * dz <= half * half + 1e-12,
        }
    }

    /// Center of the bounding volume, used for painter's ordering.
    pub fn centroid(&self) -> Vec3 {
        Vec3::new(self.position.x, self.position.y + 0.5 * self.height(), self.position.z)
    }

    /// The footprint center on the ground plane; predicates compare these.
    pub fn ground_anchor(&self) -> Vec3 {
        Vec3::new(self.position.x, 0.0, self.position.z)
    }

    /// Silhouette sample points for polyhedral-hull shapes.
    fn hull_points(&self) -> Vec<Vec3> {
        let p = self.position;
        let half = 0.5 * self.scale;
        let (s, c) = self.yaw.to_radians().sin_cos();
        let rotate = |lx: f64, lz: f64| (c * lx - s * lz, s * lx + c * lz);
        let ring: Vec<(f64, f64)> = match self.shape {
            Shape::Box => [(-half, -half), (half, -half), (half, half), (-half, half)]
                .into_iter()
                .map(|(x, z)| rotate(x, z))
                .collect(),
            Shape::Cylinder => (0..CYLINDER_SEGMENTS)
                .map(|k| {
                    let a = std::f64::consts::TAU * k as f64 / CYLINDER_SEGMENTS as f64;
                    (half * a.cos(), half * a.sin())
                })
                .collect(),
            Shape::Sphere => Vec::new(),
        };
        let mut out = Vec::with_capacity(ring.len() * 2);
        for y in [p.y, p.y + self.height()] {
            out.extend(ring.iter().map(|&(dx, dz)| Vec3::new(p.x + dx, y, p.z + dz)));
        }
        out
    }

    fn top_ring(&self) -> Vec<Vec3> {
        let pts = self.hull_points();
        let n = pts.len() / 2;
        pts[n..].to_vec()
    }
}

/// Projected 2D silhouette of one primitive.
#[derive(Debug, Clone)]
enum Silhouette {
    Polygon(Vec<(f64, f64)>),
    Disk { cu: f64, cv: f64, radius: f64 },
}

impl Silhouette {
    fn of(obj: &Object3D, cam: &Camera) -> Option<Silhouette> {
        match obj.shape {
            Shape::Sphere => {
                let center = obj.centroid();
                let c = cam.to_camera(center);
                if c.z <= NEAR_PLANE {
                    return None;
                }
                let (cu, cv) = cam.project(center)?;
                Some(Silhouette::Disk { cu, cv, radius: cam.focal() * 0.5 * obj.scale / c.z })
            }
            Shape::Box | Shape::Cylinder => {
                let pts: Vec<(f64, f64)> = obj.hull_points().into_iter().filter_map(|p| cam.project(p)).collect();
                if pts.is_empty() {
                    return None;
                }
                Some(Silhouette::Polygon(convex_hull(pts)))
            }
        }
    }

    fn extent(&self) -> (f64, f64, f64, f64) {
        match self {
            Silhouette::Disk { cu, cv, radius } => (cu - radius, cv - radius, cu + radius, cv + radius),
            Silhouette::Polygon(pts) => pts.iter().fold(
                (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
                |(x0, y0, x1, y1), &(x, y)| (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
            ),
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            Silhouette::Disk { cu, cv, radius } => (x - cu).powi(2) + (y - cv).powi(2) <= radius * radius,
            Silhouette::Polygon(pts) => polygon_contains(pts, x, y),
        }
    }
}

/// Andrew's monotone chain; returns the hull counter-clockwise in pixel axes.
fn convex_hull(mut pts: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0);
    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(pts.len() * 2);
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &(f64, f64)>> =
            if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

fn polygon_contains(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
    if poly.len() < 3 {
        return false;
    }
    let n = poly.len();
    (0..n).all(|i| {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0) >= 0.0
    })
}

/// Tight clamped center-format box around an object's projected silhouette.
///
/// Returns `None` when the object is entirely behind the camera or outside
/// the frame.
pub fn project_bbox(cam: &Camera, obj: &Object3D) -> Option<BBox> {
    let sil = Silhouette::of(obj, cam)?;
    let (x0, y0, x1, y1) = sil.extent();
    let (w, h) = (cam.width as f64, cam.height as f64);
    let (x0, x1) = (x0.clamp(0.0, w), x1.clamp(0.0, w));
    let (y0, y1) = (y0.clamp(0.0, h), y1.clamp(0.0, h));
    if x1 - x0 <= 0.0 || y1 - y0 <= 0.0 {
        return None;
    }
    BBox::from_corners(x0, y0, x1, y1).ok()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainTag {
    Source,
    Target,
    Reconstructed,
}

impl fmt::Display for DomainTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DomainTag::Source => "source",
            DomainTag::Target => "target",
            DomainTag::Reconstructed => "reconstructed",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene3D {
    pub objects: Vec<Object3D>,
    pub ground_color: usize,
    /// Global light intensity multiplier (1.0 nominal).
    pub light: f64,
    pub domain: DomainTag,
    /// Set when reconstruction could not separate every overlapping pair.
    pub collision_unresolved: bool,
}

impl Scene3D {
    pub fn empty(domain: DomainTag) -> Self {
        Scene3D {
            objects: Vec::new(),
            ground_color: 11,
            light: 1.0,
            domain,
            collision_unresolved: false,
        }
    }

    pub fn to_json(&self, registry: &CategoryRegistry) -> Result<String, EnvError> {
        let doc = SceneDoc {
            version: SCENE_FORMAT_VERSION,
            objects: self
                .objects
                .iter()
                .map(|o| {
                    Ok(ObjectDoc {
                        class: registry
                            .name(o.class)
                            .ok_or_else(|| EnvError::Format(format!("class index {} not in registry", o.class)))?
                            .to_string(),
                        shape: o.shape,
                        pos: [o.position.x, o.position.y, o.position.z],
                        yaw: o.yaw,
                        scale: o.scale,
                        color: o.color,
                        material: o.material,
                    })
                })
                .collect::<Result<_, EnvError>>()?,
            light: self.light,
            ground: self.ground_color,
            domain: self.domain,
            collision_unresolved: self.collision_unresolved,
        };
        Ok(serde_json::to_string_pretty(&doc).expect("scene documents always serialize"))
    }

    pub fn from_json(text: &str, registry: &CategoryRegistry) -> Result<Scene3D, EnvError> {
        let doc: SceneDoc = serde_json::from_str(text).map_err(|e| EnvError::Format(e.to_string()))?;
        if doc.version != SCENE_FORMAT_VERSION {
            return Err(EnvError::Format(format!("unsupported scene format version {}", doc.version)));
        }
        let objects = doc
            .objects
            .into_iter()
            .enumerate()
            .map(|(i, o)| {
                let class = registry
                    .index_of(&o.class)
                    .ok_or_else(|| EnvError::Format(format!("objects[{i}].class: unknown class {:?}", o.class)))?;
                Ok(Object3D {
                    class,
                    shape: o.shape,
                    position: Vec3::new(o.pos[0], o.pos[1], o.pos[2]),
                    yaw: o.yaw,
                    scale: o.scale,
                    color: o.color,
                    material: o.material,
                })
            })
            .collect::<Result<_, EnvError>>()?;
        Ok(Scene3D {
            objects,
            ground_color: doc.ground,
            light: doc.light,
            domain: doc.domain,
            collision_unresolved: doc.collision_unresolved,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneDoc {
    version: u32,
    objects: Vec<ObjectDoc>,
    light: f64,
    ground: usize,
    domain: DomainTag,
    #[serde(default)]
    collision_unresolved: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObjectDoc {
    class: String,
    shape: Shape,
    pos: [f64; 3],
    yaw: f64,
    scale: f64,
    color: usize,
    material: usize,
}

/// Fixed RGB palette indexed by color id; components in [0, 1].
pub const PALETTE: [(&str, [f64; 3]); 14] = [
    ("gray", [0.50, 0.50, 0.50]),
    ("red", [0.80, 0.15, 0.15]),
    ("blue", [0.15, 0.30, 0.85]),
    ("green", [0.15, 0.70, 0.20]),
    ("brown", [0.55, 0.35, 0.15]),
    ("purple", [0.50, 0.20, 0.70]),
    ("cyan", [0.10, 0.75, 0.80]),
    ("yellow", [0.90, 0.85, 0.15]),
    ("magenta", [0.85, 0.15, 0.75]),
    ("pink", [1.00, 0.60, 0.70]),
    ("white", [0.95, 0.95, 0.95]),
    ("slate", [0.25, 0.25, 0.27]),
    ("sand", [0.70, 0.65, 0.50]),
    ("olive", [0.40, 0.42, 0.20]),
];

pub const MATERIAL_RUBBER: usize = 0;
pub const MATERIAL_METAL: usize = 1;

/// Knobs controlling the look of a domain, independent of its content.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Appearance {
    /// Amplitude of the seeded texture noise added to every pixel.
    pub noise_amplitude: f64,
    /// Cell size (pixels) of the coarse value-noise layer; 0 disables it.
    pub noise_cell: u32,
    /// Ground colors a scene may draw from.
    pub background: Vec<usize>,
    /// Relative light jitter; intensity is drawn from `1 ± jitter`.
    pub light_jitter: f64,
    /// Global tint multiplied into every color.
    #[serde(default = "unit_tint")]
    pub tint: [f64; 3],
}

fn unit_tint() -> [f64; 3] {
    [1.0, 1.0, 1.0]
}

impl Default for Appearance {
    fn default() -> Self {
        Appearance {
            noise_amplitude: 0.03,
            noise_cell: 0,
            background: vec![11],
            light_jitter: 0.2,
            tint: unit_tint(),
        }
    }
}

/// Ground-plane rectangle where object footprints may be centered.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Region {
    pub x: [f64; 2],
    pub z: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub classes: Vec<usize>,
    pub colors: Vec<usize>,
    pub materials: Vec<usize>,
    /// Inclusive object count range.
    pub count: [usize; 2],
    pub region: Region,
    /// Minimum gap between footprint bounding circles, meters.
    pub margin: f64,
    /// Object scales, drawn with equal probability.
    pub sizes: Vec<f64>,
    /// Probability that an object is stacked on a flat-topped one.
    #[serde(default)]
    pub stack_prob: f64,
    pub appearance: Appearance,
    pub assets: AssetRegistry,
    #[serde(default)]
    pub camera: Camera,
}

impl DomainConfig {
    /// Four metal objects in blue/green/magenta/yellow, widely spaced.
    pub fn clevr_source() -> Self {
        DomainConfig {
            classes: vec![0, 1, 2],
            colors: vec![2, 3, 8, 7],
            materials: vec![MATERIAL_METAL],
            count: [4, 4],
            region: Region { x: [-1.2, 1.2], z: [2.1, 4.4] },
            margin: 0.3,
            sizes: vec![0.6, 0.75, 0.9],
            stack_prob: 0.0,
            appearance: Appearance::default(),
            assets: AssetRegistry::clevr(),
            camera: Camera::default(),
        }
    }

    /// Two to three textured rubber objects in pink/brown/white, tighter spacing.
    pub fn clevr_target() -> Self {
        DomainConfig {
            colors: vec![9, 4, 10],
            materials: vec![MATERIAL_RUBBER],
            count: [2, 3],
            margin: 0.15,
            appearance: Appearance {
                noise_amplitude: 0.12,
                noise_cell: 4,
                background: vec![12],
                light_jitter: 0.2,
                tint: unit_tint(),
            },
            ..Self::clevr_source()
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: String| Err(EnvError::Config(m));
        self.camera.validate()?;
        if self.count[0] > self.count[1] {
            return bad(format!("empty object count range {:?}", self.count));
        }
        if !(self.margin >= 0.0) {
            return bad(format!("separation margin {} must be non-negative", self.margin));
        }
        if self.count[1] > 0 && (self.classes.is_empty() || self.colors.is_empty() || self.materials.is_empty() || self.sizes.is_empty()) {
            return bad("classes, colors, materials and sizes must be nonempty".into());
        }
        for &c in &self.classes {
            let Some(asset) = self.assets.get(c) else {
                return bad(format!("class {c} has no asset"));
            };
            if let Some(s) = self.sizes.iter().find(|&&s| s < asset.min_scale || s > asset.max_scale) {
                return bad(format!("size {s} outside asset bounds for class {c}"));
            }
        }
        if let Some(c) = self.colors.iter().chain(&self.appearance.background).find(|&&c| c >= PALETTE.len()) {
            return bad(format!("color id {c} is not in the palette"));
        }
        if self.appearance.background.is_empty() {
            return bad("background palette must be nonempty".into());
        }
        if !(0.0..=1.0).contains(&self.stack_prob) {
            return bad(format!("stack probability {} outside [0, 1]", self.stack_prob));
        }
        if self.region.x[0] > self.region.x[1] || self.region.z[0] > self.region.z[1] {
            return bad("placement region is empty".into());
        }
        Ok(())
    }
}

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-item seed derivation: `splitmix64(master ^ splitmix64(index))`.
pub fn mix_seed(master: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(index))
}

/// Name of the seed derivation, recorded in manifests.
pub const SEED_MIXING: &str = "splitmix64(master ^ splitmix64(index))";

/// Samples a domain-randomized scene. Pure function of `(cfg, seed)`.
pub fn sample_scene(cfg: &DomainConfig, seed: u64) -> Result<Scene3D, EnvError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(cfg.count[0]..=cfg.count[1]);
    let mut objects: Vec<Object3D> = Vec::with_capacity(n);
    let mut supports_used = vec![false; n];

    for index in 0..n {
        let class = cfg.classes[rng.gen_range(0..cfg.classes.len())];
        let color = cfg.colors[rng.gen_range(0..cfg.colors.len())];
        let material = cfg.materials[rng.gen_range(0..cfg.materials.len())];
        let scale = cfg.sizes[rng.gen_range(0..cfg.sizes.len())];
        let yaw = rng.gen_range(0.0..360.0);
        let shape = cfg.assets.get(class).expect("validated").shape;
        let stack: f64 = rng.gen();

        let mut obj = Object3D {
            class,
            shape,
            position: Vec3::default(),
            yaw,
            scale,
            color,
            material,
        };

        if stack < cfg.stack_prob {
            let support = objects.iter().enumerate().position(|(j, o)| {
                !supports_used[j] && o.position.y == 0.0 && o.shape.has_flat_top() && o.scale >= scale
            });
            if let Some(j) = support {
                supports_used[j] = true;
                let s = objects[j];
                obj.position = Vec3::new(s.position.x, s.top(), s.position.z);
                objects.push(obj);
                continue;
            }
        }

        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let x = rng.gen_range(cfg.region.x[0]..=cfg.region.x[1]);
            let z = rng.gen_range(cfg.region.z[0]..=cfg.region.z[1]);
            obj.position = Vec3::new(x, 0.0, z);
            let clear = objects.iter().filter(|o| o.position.y == 0.0).all(|o| {
                let d = ((o.position.x - x).powi(2) + (o.position.z - z).powi(2)).sqrt();
                d - o.footprint_radius() - obj.footprint_radius() >= cfg.margin
            });
            if clear {
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(EnvError::PlacementFailure { object: index, attempts: MAX_PLACEMENT_ATTEMPTS });
        }
        objects.push(obj);
    }

    let light = 1.0 + cfg.appearance.light_jitter * rng.gen_range(-1.0..=1.0);
    let ground_color = cfg.appearance.background[rng.gen_range(0..cfg.appearance.background.len())];
    Ok(Scene3D {
        objects,
        ground_color,
        light,
        domain: DomainTag::Source,
        collision_unresolved: false,
    })
}

/// Like [`sample_scene`], but on placement failure retries with derived seeds
/// `mix_seed(seed, k)` for `k = 1..=retries`. Returns the scene and the seed
/// that produced it, so the sample stays reproducible from its recorded seed.
pub fn sample_scene_with_retries(cfg: &DomainConfig, seed: u64, retries: u32) -> Result<(Scene3D, u64), EnvError> {
    let mut last = None;
    for k in 0..=retries {
        let s = if k == 0 { seed } else { mix_seed(seed, k as u64) };
        match sample_scene(cfg, s) {
            Ok(scene) => return Ok((scene, s)),
            Err(e @ EnvError::PlacementFailure { .. }) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt was made"))
}

/// Pairwise predicates between two objects, in `Predicate` order.
pub fn pair_predicates(a: &Object3D, b: &Object3D, cam: &Camera, margin: f64) -> Vec<Predicate> {
    let pa = cam.to_camera(a.ground_anchor());
    let pb = cam.to_camera(b.ground_anchor());
    let mut out = Vec::new();
    if pa.x < pb.x - margin {
        out.push(Predicate::Left);
    }
    if pa.x > pb.x + margin {
        out.push(Predicate::Right);
    }
    if pa.z < pb.z - margin {
        out.push(Predicate::Front);
    }
    if pa.z > pb.z + margin {
        out.push(Predicate::Behind);
    }
    if is_on(a, b) {
        out.push(Predicate::On);
    }
    out
}

/// `a` rests on `b`: bottom within tolerance of b's top and footprint center inside b.
pub fn is_on(a: &Object3D, b: &Object3D) -> bool {
    (a.position.y - b.top()).abs() <= ON_TOLERANCE && b.footprint_contains(a.position.x, a.position.z)
}

/// Exact ground-truth scene graph; node ids are object indices.
pub fn ground_truth_graph(scene: &Scene3D, cam: &Camera, margin: f64) -> SceneGraph {
    let mut g = SceneGraph::empty(cam.width, cam.height);
    for (i, obj) in scene.objects.iter().enumerate() {
        if let Some(bbox) = project_bbox(cam, obj) {
            if bbox.area() >= MIN_VISIBLE_AREA {
                g.nodes.push(Node { id: i as u32, category: obj.class, bbox, score: 1.0 });
            }
        }
    }
    for a in &g.nodes {
        for b in &g.nodes {
            if a.id == b.id {
                continue;
            }
            let (oa, ob) = (&scene.objects[a.id as usize], &scene.objects[b.id as usize]);
            for p in pair_predicates(oa, ob, cam, margin) {
                g.edges.push(Edge { subject: a.id, predicate: p, object: b.id, score: 1.0 });
            }
        }
    }
    g
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    /// Row-major RGB triplets.
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: u32, height: u32) -> Self {
        Image { width, height, data: vec![0; 3 * width as usize * height as usize] }
    }

    pub fn from_raw(width: u32, height: u32, data: Vec<u8>) -> Result<Self, EnvError> {
        if data.len() != 3 * width as usize * height as usize {
            return Err(EnvError::Format(format!(
                "buffer of {} bytes does not match {width}x{height} RGB",
                data.len()
            )));
        }
        Ok(Image { width, height, data })
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = 3 * (y as usize * self.width as usize + x as usize);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = 3 * (y as usize * self.width as usize + x as usize);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Binary PPM (P6, maxval 255).
    pub fn write_ppm<W: Write>(&self, mut w: W) -> io::Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.data)
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() + 16);
        self.write_ppm(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_ppm<R: BufRead>(mut r: R) -> Result<Image, EnvError> {
        let mut fields = Vec::new();
        let mut token = Vec::new();
        // header: magic, width, height, maxval, separated by whitespace; '#' comments
        while fields.len() < 4 {
            let mut byte = [0u8];
            if r.read(&mut byte).map_err(|e| EnvError::Format(e.to_string()))? == 0 {
                return Err(EnvError::Format("truncated PPM header".into()));
            }
            match byte[0] {
                b'#' => {
                    let mut skip = String::new();
                    r.read_line(&mut skip).map_err(|e| EnvError::Format(e.to_string()))?;
                }
                c if c.is_ascii_whitespace() => {
                    if !token.is_empty() {
                        fields.push(String::from_utf8_lossy(&token).into_owned());
                        token.clear();
                    }
                }
                c => token.push(c),
            }
        }
        if fields[0] != "P6" {
            return Err(EnvError::Format(format!("unsupported PPM magic {:?}", fields[0])));
        }
        let parse = |s: &str| s.parse::<u32>().map_err(|_| EnvError::Format(format!("bad PPM header field {s:?}")));
        let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
        if maxval != 255 {
            return Err(EnvError::Format(format!("unsupported PPM maxval {maxval}")));
        }
        let mut data = vec![0u8; 3 * width as usize * height as usize];
        r.read_exact(&mut data).map_err(|_| EnvError::Format("truncated PPM pixel data".into()))?;
        Image::from_raw(width, height, data)
    }
}

fn hash_unit(seed: u64, a: u64, b: u64, c: u64) -> f64 {
    let h = splitmix64(seed ^ splitmix64(a ^ splitmix64(b.wrapping_mul(0x1000_0193) ^ splitmix64(c))));
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

/// Seeded texture noise in [-1, 1] per channel: fine per-pixel grain plus
/// an optional bilinear value-noise layer.
fn texture_noise(seed: u64, appearance: &Appearance, x: u32, y: u32, ch: u64) -> f64 {
    let fine = hash_unit(seed, x as u64, y as u64, ch);
    if appearance.noise_cell == 0 {
        return fine;
    }
    let cell = appearance.noise_cell as f64;
    let (fx, fy) = (x as f64 / cell, y as f64 / cell);
    let (ix, iy) = (fx.floor(), fy.floor());
    let (tx, ty) = (fx - ix, fy - iy);
    let corner = |dx: f64, dy: f64| hash_unit(seed ^ 0xC0FF_EE00, (ix + dx) as u64, (iy + dy) as u64, ch + 7);
    let top = corner(0.0, 0.0) * (1.0 - tx) + corner(1.0, 0.0) * tx;
    let bottom = corner(0.0, 1.0) * (1.0 - tx) + corner(1.0, 1.0) * tx;
    0.5 * fine + (top * (1.0 - ty) + bottom * ty)
}

/// Painter's order: indices sorted far-to-near by camera depth of the centroid.
pub fn paint_order(scene: &Scene3D, cam: &Camera) -> Vec<usize> {
    let depth: Vec<f64> = scene.objects.iter().map(|o| cam.to_camera(o.centroid()).z).collect();
    let mut order: Vec<usize> = (0..scene.objects.len()).collect();
    order.sort_by(|&a, &b| depth[b].total_cmp(&depth[a]).then(a.cmp(&b)));
    order
}

/// Which object owns each pixel after painting (row-major), `None` for background.
pub fn object_id_buffer(scene: &Scene3D, cam: &Camera) -> Vec<Option<usize>> {
    let (w, h) = (cam.width, cam.height);
    let mut ids = vec![None; (w * h) as usize];
    for i in paint_order(scene, cam) {
        let Some(sil) = Silhouette::of(&scene.objects[i], cam) else { continue };
        for_each_covered_pixel(&sil, w, h, |x, y| ids[(y * w + x) as usize] = Some(i));
    }
    ids
}

fn for_each_covered_pixel(sil: &Silhouette, w: u32, h: u32, mut f: impl FnMut(u32, u32)) {
    let (x0, y0, x1, y1) = sil.extent();
    let xs = x0.floor().max(0.0) as u32;
    let ys = y0.floor().max(0.0) as u32;
    let xe = (x1.ceil().min(w as f64)).max(0.0) as u32;
    let ye = (y1.ceil().min(h as f64)).max(0.0) as u32;
    for y in ys..ye {
        for x in xs..xe {
            if sil.contains(x as f64 + 0.5, y as f64 + 0.5) {
                f(x, y);
            }
        }
    }
}

/// Deterministic render of `scene` with the domain's appearance.
pub fn rasterize(scene: &Scene3D, cam: &Camera, cfg: &DomainConfig, seed: u64) -> Image {
    let (w, h) = (cam.width, cam.height);
    let app = &cfg.appearance;
    let light = scene.light;
    let mut canvas = vec![[0.0f64; 3]; (w * h) as usize];

    let ground = PALETTE[scene.ground_color.min(PALETTE.len() - 1)].1;
    for y in 0..h {
        // slightly darker toward the top of the frame (farther ground)
        let fade = 0.8 + 0.2 * (y as f64 / h as f64);
        for x in 0..w {
            canvas[(y * w + x) as usize] = [ground[0] * fade, ground[1] * fade, ground[2] * fade];
        }
    }

    for i in paint_order(scene, cam) {
        let obj = &scene.objects[i];
        let Some(sil) = Silhouette::of(obj, cam) else { continue };
        let base = PALETTE[obj.color.min(PALETTE.len() - 1)].1;
        let top_face = match obj.shape {
            Shape::Sphere => None,
            Shape::Box | Shape::Cylinder => {
                let pts: Vec<(f64, f64)> = obj.top_ring().into_iter().filter_map(|p| cam.project(p)).collect();
                Some(convex_hull(pts))
            }
        };
        let (ex0, ey0, ex1, ey1) = sil.extent();
        let cu = 0.5 * (ex0 + ex1);
        let (rw, rh) = (0.5 * (ex1 - ex0), 0.5 * (ey1 - ey0));
        let highlight = (cu - 0.3 * rw, ey0 + 0.45 * rh, 0.3 * rw.min(rh));
        for_each_covered_pixel(&sil, w, h, |x, y| {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut shade = match (&sil, &top_face) {
                (Silhouette::Disk { cu, cv, radius }, _) => {
                    let d2 = ((px - cu).powi(2) + (py - cv).powi(2)) / (radius * radius);
                    0.55 + 0.45 * (1.0 - d2.min(1.0)).sqrt()
                }
                (_, Some(top)) if polygon_contains(top, px, py) => 1.0,
                _ => 0.72,
            };
            if obj.material == MATERIAL_METAL {
                let d2 = (px - highlight.0).powi(2) + (py - highlight.1).powi(2);
                if d2 <= highlight.2 * highlight.2 {
                    shade += 0.35;
                }
            }
            canvas[(y * w + x) as usize] = [base[0] * shade, base[1] * shade, base[2] * shade];
        });
    }

    let mut img = Image::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let c = canvas[(y * w + x) as usize];
            let mut rgb = [0u8; 3];
            for ch in 0..3 {
                let noise = app.noise_amplitude * texture_noise(seed, app, x, y, ch as u64);
                let v = c[ch] * light * app.tint[ch] + noise;
                rgb[ch] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
            img.set_pixel(x, y, rgb);
        }
    }
    img
}

#[derive(Debug, thiserror::Error)]
pub enum EnvError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("could not place object {object} after {attempts} attempts")]
    PlacementFailure { object: usize, attempts: usize },
    #[error("format error: {0}")]
    Format(String),
}
