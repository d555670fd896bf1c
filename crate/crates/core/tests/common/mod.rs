#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splatedge::{Camera, GaussianPrimitive, Scene};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Camera at `(0, 0, -dist)` looking at the origin.
pub fn front_camera(h: usize, w: usize, focal: f64, dist: f64) -> Camera<f64> {
    Camera::look_at(
        [0.0, 0.0, -dist],
        [0.0, 0.0, 0.0],
        [0.0, -1.0, 0.0],
        [focal, focal],
        [(w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0],
        (h, w),
    )
    .unwrap()
}

pub fn random_primitive(rng: &mut ChaCha8Rng, spread: f64) -> GaussianPrimitive<f64> {
    let q: [f64; 4] = [
        rng.gen_range(0.5..1.0),
        rng.gen_range(-0.5..0.5),
        rng.gen_range(-0.5..0.5),
        rng.gen_range(-0.5..0.5),
    ];
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    GaussianPrimitive {
        mu: [
            rng.gen_range(-spread..spread),
            rng.gen_range(-spread..spread),
            rng.gen_range(-spread..spread),
        ],
        scale: [rng.gen_range(0.2..0.6), rng.gen_range(0.2..0.6), rng.gen_range(0.2..0.6)],
        rotation: [q[0] / n, q[1] / n, q[2] / n, q[3] / n],
        opacity: rng.gen_range(0.2..0.8),
        color: [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)],
    }
}

pub fn random_scene(rng: &mut ChaCha8Rng, n: usize, spread: f64) -> Scene<f64> {
    let prims = (0..n).map(|_| random_primitive(rng, spread)).collect();
    Scene::new(prims, [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)])
}

/// Number of scalar parameters per primitive in flattened order.
pub const PARAMS: usize = 14;

pub fn param_mut(p: &mut GaussianPrimitive<f64>, k: usize) -> &mut f64 {
    match k {
        0..=2 => &mut p.mu[k],
        3..=5 => &mut p.scale[k - 3],
        6..=9 => &mut p.rotation[k - 6],
        10 => &mut p.opacity,
        _ => &mut p.color[k - 11],
    }
}

/// Central differences of `f` over every primitive parameter, flattened like `RenderGradients::flatten`.
pub fn fd_scene_gradient(scene: &Scene<f64>, h: f64, mut f: impl FnMut(&Scene<f64>) -> f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(scene.len() * PARAMS);
    let mut work = scene.clone();
    for i in 0..scene.len() {
        for k in 0..PARAMS {
            let base = *param_mut(&mut work.primitives[i], k);
            let step = h * base.abs().max(1.0);
            *param_mut(&mut work.primitives[i], k) = base + step;
            let fp = f(&work);
            *param_mut(&mut work.primitives[i], k) = base - step;
            let fm = f(&work);
            *param_mut(&mut work.primitives[i], k) = base;
            out.push((fp - fm) / (2.0 * step));
        }
    }
    out
}

/// Relative error with an absolute floor: differences below `floor` count as exact.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    let d = (a - b).abs();
    if d <= floor {
        0.0
    } else {
        d / a.abs().max(b.abs())
    }
}

pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| rel_err(*x, *y, floor)).fold(0.0, f64::max)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
