//! Seeded synthetic scenes: object blobs on a ground plane, labeled with raw
//! class ids so they pass through the same vocabulary mapping as real scans.
//!
//! Objects sit on a square grid whose pitch is the centroid separation. A box
//! is a jittered lattice; a gaussian blob is grown point by point toward
//! gaussian targets, each new point within `spacing` of an existing one, so
//! both shapes are connected at any eps `>= spacing`.

use serde::{Deserialize, Serialize};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::clustering::UnionFind;
use crate::error::{Error, Result};
use crate::lidar_io::{LabelMap, LabelSpace, Point, PointCloud};
use crate::segtree::{validate_schedule, DEFAULT_SCHEDULE};
use crate::spatial::dist2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BlobShape {
    #[default]
    Box,
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ObjectKind {
    #[default]
    Thing,
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceSpec {
    pub count: usize,
    pub points: usize,
    /// Largest distance from any point to its nearest neighbor in the blob.
    pub spacing: f64,
    /// Raw semantic id written to the label file.
    pub class_id: u32,
    #[serde(default)]
    pub kind: ObjectKind,
    #[serde(default)]
    pub shape: BlobShape,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StuffSpec {
    pub class_id: u32,
    /// Plane size in meters along x and y, centered under the objects.
    pub extent: [f64; 2],
    /// Points per square meter.
    pub density: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    #[serde(default)]
    pub instances: Vec<InstanceSpec>,
    #[serde(default)]
    pub stuff: Vec<StuffSpec>,
    /// Distance between neighboring object centroids.
    pub separation: f64,
    #[serde(default)]
    pub seed: u64,
    /// Number of scans in a corpus generated from this spec.
    #[serde(default = "one")]
    pub scans: usize,
    /// Require every blob to be connected at the finest eps.
    #[serde(default = "yes")]
    pub connected: bool,
    /// Require blobs to be farther apart than the coarsest eps.
    #[serde(default = "yes")]
    pub separable: bool,
    #[serde(default = "default_schedule")]
    pub schedule: Vec<f64>,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

fn default_schedule() -> Vec<f64> {
    DEFAULT_SCHEDULE.to_vec()
}

impl SceneSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config {
            line: e.line(),
            msg: e.to_string(),
        })
    }

    pub fn num_objects(&self) -> usize {
        self.instances.iter().map(|s| s.count).sum()
    }

    /// Checks the declared flags can hold and the spec is well formed.
    pub fn validate(&self) -> Result<()> {
        validate_schedule(&self.schedule)?;
        let finest = *self.schedule.last().unwrap();
        let coarsest = self.schedule[0];
        if !(self.separation.is_finite() && self.separation > 0.0) {
            return Err(Error::arg("separation must be positive"));
        }
        if self.num_objects() > u16::MAX as usize {
            return Err(Error::arg("too many objects for 16-bit instance ids"));
        }
        for s in &self.instances {
            if s.points == 0 || !(s.spacing.is_finite() && s.spacing > 0.0) {
                return Err(Error::arg(format!("instance spec for class {} needs points and a positive spacing", s.class_id)));
            }
            if s.class_id == 0 || s.class_id > u16::MAX as u32 {
                return Err(Error::arg(format!("class id {} must be in 1..=65535", s.class_id)));
            }
            // keep clear of f32 rounding at the eps boundary
            if self.connected && s.spacing > finest * (1.0 - 1e-3) {
                return Err(Error::arg(format!(
                    "spacing {} is not below the finest eps {finest}",
                    s.spacing
                )));
            }
        }
        for s in &self.stuff {
            if !(s.density > 0.0 && s.extent.iter().all(|e| e.is_finite() && *e > 0.0)) {
                return Err(Error::arg("stuff plane needs positive extent and density"));
            }
        }
        if self.separable {
            let widest = self.instances.iter().map(blob_radius).fold(0.0, f64::max);
            let gap = self.separation - 2.0 * widest;
            if gap <= coarsest * (1.0 + 1e-3) {
                return Err(Error::arg(format!(
                    "separation {} leaves a gap of {gap:.4} m between blobs of radius {widest:.4}; \
                     more than the coarsest eps {coarsest} is needed",
                    self.separation
                )));
            }
        }
        Ok(())
    }
}

const JITTER: f64 = 0.1;

/// Lattice step such that jittered lattice neighbors stay within `spacing`.
fn lattice_step(spacing: f64) -> f64 {
    // neighbor offset (s + 2j, 2j, 2j) with j = JITTER * s
    spacing / ((1.0 + 2.0 * JITTER).powi(2) + 8.0 * JITTER * JITTER).sqrt()
}

fn lattice_side(points: usize) -> usize {
    (points as f64).cbrt().ceil() as usize
}

/// Bound on the distance from a blob's center to any of its points.
fn blob_radius(s: &InstanceSpec) -> f64 {
    let step = lattice_step(s.spacing);
    let half = (lattice_side(s.points) - 1) as f64 * step / 2.0;
    match s.shape {
        BlobShape::Box => (half + JITTER * step) * 3f64.sqrt(),
        BlobShape::Gaussian => gaussian_radius(s),
    }
}

fn gaussian_radius(s: &InstanceSpec) -> f64 {
    (lattice_side(s.points) as f64 * lattice_step(s.spacing)).max(s.spacing)
}

fn box_blob(s: &InstanceSpec, rng: &mut ChaCha8Rng) -> Vec<Point> {
    let step = lattice_step(s.spacing);
    let side = lattice_side(s.points);
    let half = (side - 1) as f64 * step / 2.0;
    let j = JITTER * step;
    (0..s.points)
        .map(|k| {
            let idx = [k % side, (k / side) % side, k / (side * side)];
            idx.map(|i| i as f64 * step - half + rng.gen_range(-j..=j))
        })
        .collect()
}

fn gaussian_blob(s: &InstanceSpec, rng: &mut ChaCha8Rng) -> Vec<Point> {
    let radius = gaussian_radius(s);
    let normal = Normal::new(0.0, radius / 2.5).expect("finite sigma");
    let mut pts: Vec<Point> = vec![[0.0; 3]];
    while pts.len() < s.points {
        // Targets are clipped to the ball, which is convex, so points stay inside it.
        let mut t = [0; 3].map(|_: i32| normal.sample(rng));
        let norm = dist2(&t, &[0.0; 3]).sqrt();
        if norm > radius {
            t = t.map(|v| v * radius / norm);
        }
        let (parent, d2) = pts
            .iter()
            .enumerate()
            .map(|(i, p)| (i, dist2(p, &t)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("non-empty");
        let d = d2.sqrt();
        let step = s.spacing * rng.gen_range(0.5..1.0);
        let p = pts[parent];
        let q = if d <= step {
            t
        } else {
            [0, 1, 2].map(|a| p[a] + (t[a] - p[a]) * step / d)
        };
        pts.push(q);
    }
    pts
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub cloud: PointCloud,
    /// Raw-space labels.
    pub labels: LabelMap,
    /// Point indices of each generated object, in instance-id order.
    pub objects: Vec<Vec<u32>>,
}

/// First scene of the spec.
pub fn generate(spec: &SceneSpec) -> Result<Scene> {
    generate_scene(spec, 0)
}

pub fn generate_corpus(spec: &SceneSpec) -> Result<Vec<Scene>> {
    (0..spec.scans).map(|i| generate_scene(spec, i)).collect()
}

/// Scene `index` of the spec; each index draws from its own random stream.
pub fn generate_scene(spec: &SceneSpec, index: usize) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);

    let mut order: Vec<&InstanceSpec> = spec
        .instances
        .iter()
        .flat_map(|s| std::iter::repeat_n(s, s.count))
        .collect();
    order.shuffle(&mut rng);
    let cols = (order.len() as f64).sqrt().ceil().max(1.0) as usize;
    let rows = order.len().div_ceil(cols);
    let lift = spec.instances.iter().map(blob_radius).fold(0.0, f64::max) + 0.3;

    let mut points: Vec<Point> = Vec::new();
    let mut semantic = Vec::new();
    let mut instance = Vec::new();
    for (k, s) in order.iter().enumerate() {
        let center = [
            (k % cols) as f64 * spec.separation,
            (k / cols) as f64 * spec.separation,
            lift,
        ];
        let blob = match s.shape {
            BlobShape::Box => box_blob(s, &mut rng),
            BlobShape::Gaussian => gaussian_blob(s, &mut rng),
        };
        for p in blob {
            points.push([0, 1, 2].map(|a| p[a] + center[a]));
            semantic.push(s.class_id);
            instance.push(k as u32 + 1);
        }
    }

    let mid = [
        (cols - 1) as f64 * spec.separation / 2.0,
        rows.saturating_sub(1) as f64 * spec.separation / 2.0,
    ];
    for s in &spec.stuff {
        let n = (s.extent[0] * s.extent[1] * s.density).round() as usize;
        for _ in 0..n {
            points.push([
                mid[0] + rng.gen_range(-0.5..0.5) * s.extent[0],
                mid[1] + rng.gen_range(-0.5..0.5) * s.extent[1],
                rng.gen_range(-0.02..0.02),
            ]);
            semantic.push(s.class_id);
            instance.push(0);
        }
    }

    // Store what a file round trip would give back.
    for p in &mut points {
        *p = p.map(|v| v as f32 as f64);
    }
    let mut perm: Vec<usize> = (0..points.len()).collect();
    perm.shuffle(&mut rng);
    let points: Vec<Point> = perm.iter().map(|&i| points[i]).collect();
    let semantic: Vec<u32> = perm.iter().map(|&i| semantic[i]).collect();
    let instance: Vec<u32> = perm.iter().map(|&i| instance[i]).collect();

    let mut objects = vec![Vec::new(); order.len()];
    for (p, &id) in instance.iter().enumerate() {
        if id > 0 {
            objects[id as usize - 1].push(p as u32);
        }
    }
    Ok(Scene {
        cloud: PointCloud::new(points).with_scan_id(format!("{index:06}")),
        labels: LabelMap::new(semantic, instance, LabelSpace::Raw)?,
        objects,
    })
}

/// Brute-force check of the connectivity and separation flags on a scene.
pub fn verify_scene(scene: &Scene, spec: &SceneSpec) -> Result<()> {
    let pts = &scene.cloud.points;
    let finest = *spec.schedule.last().unwrap();
    let coarsest = spec.schedule[0];
    if spec.connected {
        for (k, obj) in scene.objects.iter().enumerate() {
            let mut uf = UnionFind::new(obj.len());
            for a in 0..obj.len() {
                for b in a + 1..obj.len() {
                    if dist2(&pts[obj[a] as usize], &pts[obj[b] as usize]) <= finest * finest {
                        uf.union(a as u32, b as u32);
                    }
                }
            }
            let root = uf.find(0);
            if (1..obj.len() as u32).any(|a| uf.find(a) != root) {
                return Err(Error::arg(format!("object {} is not connected at eps {finest}", k + 1)));
            }
        }
    }
    if spec.separable {
        for a in 0..scene.objects.len() {
            for b in a + 1..scene.objects.len() {
                for &p in &scene.objects[a] {
                    for &q in &scene.objects[b] {
                        if dist2(&pts[p as usize], &pts[q as usize]) <= coarsest * coarsest {
                            return Err(Error::arg(format!(
                                "objects {} and {} are within eps {coarsest}",
                                a + 1,
                                b + 1
                            )));
                        }
                    }
                }
            }
        }
    }
    Ok(())
}
