//! Synthetic ground-truth scenes, camera rings and pseudo-prior depth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{Camera, GaussianPrimitive, Scene};
use crate::raster::{render, DepthMap, ImageBuffer, RenderOptions};

/// How ground-truth primitives are placed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    /// Uniform in a cube of half-width `extent`.
    Blobs,
    /// A flat tabletop of wide discs plus a few compact objects resting on it.
    Desk,
}

/// Affine-plus-noise corruption used to synthesize a monocular-style prior.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorNoise {
    pub a: f64,
    pub b: f64,
    pub sigma: f64,
}

impl Default for PriorNoise {
    fn default() -> Self {
        Self { a: 0.5, b: 1.0, sigma: 0.02 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSceneSpec {
    pub layout: Layout,
    pub num_primitives: usize,
    /// Half-width of the region holding the primitives, world units.
    pub extent: f64,
    pub palette: Vec<[f64; 3]>,
    pub background: [f64; 3],
    /// Total ring cameras; every `holdout_every`-th one is held out.
    pub num_views: usize,
    pub holdout_every: usize,
    pub radius: f64,
    /// Camera elevation above the ring plane, degrees.
    pub elevation_deg: f64,
    pub resolution: (usize, usize),
    /// Focal length as a multiple of the image width.
    pub focal_factor: f64,
    pub prior: PriorNoise,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        Self {
            layout: Layout::Desk,
            num_primitives: 300,
            extent: 1.0,
            palette: vec![
                [0.85, 0.25, 0.2],
                [0.2, 0.55, 0.85],
                [0.95, 0.8, 0.25],
                [0.3, 0.75, 0.35],
                [0.6, 0.35, 0.7],
            ],
            background: [0.05, 0.05, 0.08],
            num_views: 16,
            holdout_every: 4,
            radius: 4.0,
            elevation_deg: 30.0,
            resolution: (64, 64),
            focal_factor: 1.8,
            prior: PriorNoise::default(),
        }
    }
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.into()));
        if self.num_primitives < 1 {
            return bad("num_primitives must be at least 1");
        }
        if !(self.extent > 0.0) || !(self.radius > self.extent) {
            return bad("need 0 < extent < radius");
        }
        if self.palette.is_empty() {
            return bad("palette must not be empty");
        }
        if self.num_views < 2 || self.holdout_every < 2 || self.holdout_every > self.num_views {
            return bad("need at least one train and one holdout view");
        }
        if self.resolution.0 < 2 || self.resolution.1 < 2 {
            return bad("resolution must be at least 2×2");
        }
        if !(self.focal_factor > 0.0) || !(self.prior.a > 0.0) || !(self.prior.sigma >= 0.0) {
            return bad("focal_factor and prior.a must be positive, prior.sigma non-negative");
        }
        Ok(())
    }

    pub fn is_holdout(&self, view: usize) -> bool {
        view % self.holdout_every == self.holdout_every - 1
    }
}

/// A rendered view of the ground-truth scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticView {
    pub camera: Camera<f64>,
    pub image: ImageBuffer<f64>,
    pub depth: DepthMap<f64>,
    pub prior: DepthMap<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub scene: Scene<f64>,
    pub train: Vec<SyntheticView>,
    pub holdout: Vec<SyntheticView>,
}

fn unit_quaternion(rng: &mut ChaCha8Rng) -> [f64; 4] {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    let q: [f64; 4] = std::array::from_fn(|_| n.sample(rng));
    let len = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    q.map(|v| v / len)
}

fn jitter(rng: &mut ChaCha8Rng, c: [f64; 3], amount: f64) -> [f64; 3] {
    c.map(|v| (v + rng.gen_range(-amount..amount)).clamp(0.0, 1.0))
}

fn blobs(spec: &SyntheticSceneSpec, rng: &mut ChaCha8Rng) -> Vec<GaussianPrimitive<f64>> {
    let e = spec.extent;
    let s = e * (4.0 / spec.num_primitives as f64).cbrt().min(0.5);
    (0..spec.num_primitives)
        .map(|_| {
            let c = spec.palette[rng.gen_range(0..spec.palette.len())];
            GaussianPrimitive {
                mu: std::array::from_fn(|_| rng.gen_range(-e..e)),
                scale: std::array::from_fn(|_| s * rng.gen_range(0.3..1.0)),
                rotation: unit_quaternion(rng),
                opacity: rng.gen_range(0.5..0.95),
                color: jitter(rng, c, 0.05),
            }
        })
        .collect()
}

/// World frame: y points down, so the tabletop sits at `y = +0.3·extent` and objects rise towards −y.
fn desk(spec: &SyntheticSceneSpec, rng: &mut ChaCha8Rng) -> Vec<GaussianPrimitive<f64>> {
    let e = spec.extent;
    let n = spec.num_primitives;
    let table_y = 0.3 * e;
    let n_table = (n * 2 / 5).max(1);
    let mut out = Vec::with_capacity(n);
    let wood = [0.55, 0.4, 0.28];
    let side = (n_table as f64).sqrt().ceil() as usize;
    for k in 0..n_table {
        let (i, j) = (k % side, k / side);
        let step = 2.0 * e / side as f64;
        let x = -e + step * (i as f64 + 0.5) + rng.gen_range(-0.2..0.2) * step;
        let z = -e + step * (j as f64 + 0.5) + rng.gen_range(-0.2..0.2) * step;
        // checkerboard tint gives the table internal texture edges
        let tint = if (i / 2 + j / 2) % 2 == 0 { 1.0 } else { 0.7 };
        out.push(GaussianPrimitive {
            mu: [x, table_y + rng.gen_range(-0.01..0.01) * e, z],
            scale: [0.7 * step, 0.02 * e, 0.7 * step],
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity: rng.gen_range(0.85..0.98),
            color: jitter(rng, wood.map(|v| v * tint), 0.03),
        });
    }
    // objects: boxes and columns built from clusters
    let n_objects = 3 + n / 150;
    let rest = n - n_table;
    for o in 0..n_objects {
        let count = rest / n_objects + usize::from(o < rest % n_objects);
        if count == 0 {
            continue;
        }
        let color = spec.palette[o % spec.palette.len()];
        let cx = rng.gen_range(-0.65..0.65) * e;
        let cz = rng.gen_range(-0.65..0.65) * e;
        let half = [rng.gen_range(0.12..0.3) * e, rng.gen_range(0.2..0.6) * e, rng.gen_range(0.12..0.3) * e];
        let s = (half[0] * half[1] * half[2] * 8.0 / count as f64).cbrt() * 0.6;
        for _ in 0..count {
            let local: [f64; 3] = std::array::from_fn(|k| rng.gen_range(-half[k]..half[k]));
            out.push(GaussianPrimitive {
                mu: [cx + local[0], table_y - half[1] + local[1], cz + local[2]],
                scale: std::array::from_fn(|_| s * rng.gen_range(0.6..1.2)),
                rotation: unit_quaternion(rng),
                opacity: rng.gen_range(0.7..0.95),
                color: jitter(rng, color, 0.04),
            });
        }
    }
    out
}

/// Cameras on a ring around the vertical axis, looking at the origin.
pub fn camera_ring(spec: &SyntheticSceneSpec) -> Result<Vec<Camera<f64>>> {
    let (h, w) = spec.resolution;
    let elev = spec.elevation_deg.to_radians();
    let f = spec.focal_factor * w as f64;
    (0..spec.num_views)
        .map(|k| {
            let az = std::f64::consts::TAU * k as f64 / spec.num_views as f64;
            let eye = [
                spec.radius * elev.cos() * az.cos(),
                -spec.radius * elev.sin(),
                spec.radius * elev.cos() * az.sin(),
            ];
            Camera::look_at(
                eye,
                [0.0; 3],
                [0.0, -1.0, 0.0],
                [f, f],
                [(w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0],
                (h, w),
            )
        })
        .collect()
}

/// `a·D + b + N(0, σ²)` per pixel, clamped at zero.
pub fn corrupt_depth(gt: &DepthMap<f64>, a: f64, b: f64, sigma: f64, seed: u64) -> Result<DepthMap<f64>> {
    if !(a > 0.0) || !(sigma >= 0.0) || !b.is_finite() {
        return Err(Error::InvalidParameter("corrupt_depth needs a > 0, sigma ≥ 0, finite b".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let data = gt
        .data
        .iter()
        .map(|&d| {
            let n = if sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            (a * d + b + n).max(0.0)
        })
        .collect();
    DepthMap::from_data(gt.height, gt.width, data)
}

/// Ground-truth scene plus rendered train and holdout views.
pub fn generate_scene(spec: &SyntheticSceneSpec, seed: u64) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prims = match spec.layout {
        Layout::Blobs => blobs(spec, &mut rng),
        Layout::Desk => desk(spec, &mut rng),
    };
    let scene = Scene::new(prims, spec.background);
    scene.validate()?;
    let opts = RenderOptions::default();
    let mut train = Vec::new();
    let mut holdout = Vec::new();
    for (k, camera) in camera_ring(spec)?.into_iter().enumerate() {
        let out = render(&scene, &camera, None, &opts)?;
        let n = spec.prior;
        let prior = corrupt_depth(&out.depth, n.a, n.b, n.sigma, seed.wrapping_mul(1000).wrapping_add(k as u64))?;
        let view = SyntheticView { camera, image: out.color, depth: out.depth, prior };
        if spec.is_holdout(k) {
            holdout.push(view);
        } else {
            train.push(view);
        }
    }
    Ok(SyntheticScene { scene, train, holdout })
}

/// Uninformed starting point: `n` grey, semi-transparent primitives spread uniformly through the scene volume.
pub fn init_scene(spec: &SyntheticSceneSpec, n: usize, seed: u64) -> Result<Scene<f64>> {
    if n < 1 {
        return Err(Error::EmptyScene);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1a17);
    let e = spec.extent;
    let s = e * (2.0 / n as f64).cbrt().min(0.5);
    let prims = (0..n)
        .map(|_| GaussianPrimitive {
            mu: std::array::from_fn(|_| rng.gen_range(-e..e)),
            scale: [s; 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity: 0.3,
            color: std::array::from_fn(|_| rng.gen_range(0.3..0.7)),
        })
        .collect();
    Ok(Scene::new(prims, spec.background))
}
