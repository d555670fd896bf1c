//! Adam over the unconstrained parameterization of a scene.
//!
//! Each primitive contributes 14 slots: center (3), log-scale (3), raw
//! quaternion (4), opacity logit (1) and color (3).

use serde::{Deserialize, Serialize};

use crate::gaussian::Scene;
use crate::raster::RenderGradients;
use crate::scalar::Real;

pub const SLOTS: usize = 14;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates<T> {
    pub mu: T,
    pub scale: T,
    pub rotation: T,
    pub opacity: T,
    pub color: T,
}

impl<T: Real> Default for LearningRates<T> {
    fn default() -> Self {
        Self {
            mu: T::lit(1.6e-3),
            scale: T::lit(5e-3),
            rotation: T::lit(1e-3),
            opacity: T::lit(5e-2),
            color: T::lit(2.5e-3),
        }
    }
}

impl<T: Real> LearningRates<T> {
    pub fn zero() -> Self {
        Self { mu: T::zero(), scale: T::zero(), rotation: T::zero(), opacity: T::zero(), color: T::zero() }
    }

    fn for_slot(&self, k: usize) -> T {
        match k {
            0..=2 => self.mu,
            3..=5 => self.scale,
            6..=9 => self.rotation,
            10 => self.opacity,
            _ => self.color,
        }
    }
}

/// First and second moments, serialized into checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam<T> {
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub step: u64,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

pub fn logit<T: Real>(p: T) -> T {
    (p / (T::one() - p)).ln()
}

pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Gradient in the unconstrained parameterization, laid out per primitive.
pub fn unconstrained_gradient<T: Real>(scene: &Scene<T>, g: &RenderGradients<T>) -> Vec<T> {
    let mut out = Vec::with_capacity(scene.len() * SLOTS);
    for (i, p) in scene.primitives.iter().enumerate() {
        out.extend_from_slice(&g.mu[i]);
        for k in 0..3 {
            out.push(g.scale[i][k] * p.scale[k]);
        }
        out.extend_from_slice(&g.rotation[i]);
        out.push(g.opacity[i] * p.opacity * (T::one() - p.opacity));
        out.extend_from_slice(&g.color[i]);
    }
    out
}

impl<T: Real> Adam<T> {
    pub fn new(num_primitives: usize) -> Self {
        Self {
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-15),
            step: 0,
            m: vec![T::zero(); num_primitives * SLOTS],
            v: vec![T::zero(); num_primitives * SLOTS],
        }
    }

    /// Applies one update. Parameters whose step is exactly zero are left bit-identical.
    pub fn update(&mut self, scene: &mut Scene<T>, grads: &RenderGradients<T>, lr: &LearningRates<T>) {
        let g = unconstrained_gradient(scene, grads);
        self.step += 1;
        let t = T::from_u64(self.step).expect("step count");
        let bc1 = T::one() - self.beta1.powf(t);
        let bc2 = T::one() - self.beta2.powf(t);
        let mut delta = vec![T::zero(); g.len()];
        for (k, gk) in g.iter().enumerate() {
            self.m[k] = self.beta1 * self.m[k] + (T::one() - self.beta1) * *gk;
            self.v[k] = self.beta2 * self.v[k] + (T::one() - self.beta2) * *gk * *gk;
            let rate = lr.for_slot(k % SLOTS);
            if rate == T::zero() {
                continue;
            }
            let mhat = self.m[k] / bc1;
            let vhat = self.v[k] / bc2;
            delta[k] = -rate * mhat / (vhat.sqrt() + self.eps);
        }
        for (i, p) in scene.primitives.iter_mut().enumerate() {
            let d = &delta[i * SLOTS..(i + 1) * SLOTS];
            for k in 0..3 {
                p.mu[k] = p.mu[k] + d[k];
                if d[3 + k] != T::zero() {
                    p.scale[k] = (p.scale[k].ln() + d[3 + k]).exp();
                }
            }
            if d[6..10].iter().any(|v| *v != T::zero()) {
                let mut q = p.rotation;
                for k in 0..4 {
                    q[k] = q[k] + d[6 + k];
                }
                let n = q.iter().fold(T::zero(), |acc, v| acc + *v * *v).sqrt();
                if n > T::zero() {
                    p.rotation = [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
                }
            }
            if d[10] != T::zero() {
                let lo = T::lit(1e-6);
                p.opacity = sigmoid(logit(p.opacity) + d[10]).max(lo).min(T::one() - lo);
            }
            for k in 0..3 {
                if d[11 + k] != T::zero() {
                    p.color[k] = (p.color[k] + d[11 + k]).max(T::zero()).min(T::one());
                }
            }
        }
    }

    /// Drops the moment rows of primitives not in `keep`.
    pub fn retain(&mut self, keep: &[bool]) {
        let mut m = Vec::with_capacity(self.m.len());
        let mut v = Vec::with_capacity(self.v.len());
        for (i, &k) in keep.iter().enumerate() {
            if k {
                m.extend_from_slice(&self.m[i * SLOTS..(i + 1) * SLOTS]);
                v.extend_from_slice(&self.v[i * SLOTS..(i + 1) * SLOTS]);
            }
        }
        self.m = m;
        self.v = v;
    }
}
