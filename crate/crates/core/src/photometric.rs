//! Color reconstruction loss and image quality metrics.

use serde::{Deserialize, Serialize};

use crate::error::{check_shape, Error, Result};
use crate::raster::ImageBuffer;
use crate::scalar::Real;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;
/// PSNR value written to reports in place of infinity.
pub const PSNR_CAP: f64 = 99.0;

/// Weights and thresholds of the full training objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights<T> {
    pub lambda_dssim: T,
    pub gamma: T,
    pub eta: T,
    pub beta: T,
    pub phi: T,
    pub omega: T,
    pub tau_edge: T,
    pub tau_smooth: T,
    pub delta: T,
    pub epsilon: T,
    pub tolerance: T,
}

impl<T: Real> Default for LossWeights<T> {
    fn default() -> Self {
        Self {
            lambda_dssim: T::lit(0.2),
            gamma: T::lit(0.1),
            eta: T::one(),
            beta: T::lit(0.1),
            phi: T::lit(0.8),
            omega: T::lit(0.99),
            tau_edge: T::lit(1e-2),
            tau_smooth: T::lit(1e-4),
            delta: T::lit(1e-8),
            epsilon: T::lit(1e-8),
            tolerance: T::lit(0.05),
        }
    }
}

impl<T: Real> LossWeights<T> {
    /// Photometric terms only.
    pub fn color_only() -> Self {
        Self { gamma: T::zero(), eta: T::zero(), beta: T::zero(), phi: T::zero(), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_dssim,
            self.gamma,
            self.eta,
            self.beta,
            self.phi,
            self.tau_edge,
            self.tau_smooth,
            self.delta,
            self.epsilon,
            self.tolerance,
        ];
        if all.iter().any(|v| !(*v >= T::zero())) {
            return Err(Error::InvalidParameter("loss weights must be non-negative".into()));
        }
        if !(self.omega > T::zero() && self.omega < T::one()) {
            return Err(Error::InvalidParameter("omega must lie in (0, 1)".into()));
        }
        if !(self.tau_edge > self.tau_smooth) {
            return Err(Error::InvalidParameter("tau_edge must exceed tau_smooth".into()));
        }
        Ok(())
    }
}

/// Mean absolute error and its sign subgradient.
pub fn l1_loss<T: Real>(pred: &ImageBuffer<T>, gt: &ImageBuffer<T>) -> Result<(T, ImageBuffer<T>)> {
    check_shape(gt.resolution(), pred.resolution())?;
    let n = T::from_usize_lossy(pred.data.len());
    let mut loss = T::zero();
    let mut grad = ImageBuffer::new(pred.height, pred.width);
    for (k, (p, g)) in pred.data.iter().zip(&gt.data).enumerate() {
        let d = *p - *g;
        loss = loss + d.abs();
        grad.data[k] = if d > T::zero() {
            T::one() / n
        } else if d < T::zero() {
            -T::one() / n
        } else {
            T::zero()
        };
    }
    Ok((loss / n, grad))
}

fn gaussian_window<T: Real>() -> [T; SSIM_WINDOW] {
    let mut k = [T::zero(); SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - half;
        *v = T::lit((-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
    }
    let s: T = k.iter().copied().sum();
    for v in &mut k {
        *v = *v / s;
    }
    k
}

/// Valid-mode separable filtering of an `h × w` plane.
fn filter_valid<T: Real>(x: &[T], h: usize, w: usize, k: &[T; SSIM_WINDOW]) -> Vec<T> {
    let (hv, wv) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut tmp = vec![T::zero(); h * wv];
    for r in 0..h {
        for c in 0..wv {
            let mut acc = T::zero();
            for (i, &g) in k.iter().enumerate() {
                acc = acc + g * x[r * w + c + i];
            }
            tmp[r * wv + c] = acc;
        }
    }
    let mut out = vec![T::zero(); hv * wv];
    for r in 0..hv {
        for c in 0..wv {
            let mut acc = T::zero();
            for (i, &g) in k.iter().enumerate() {
                acc = acc + g * tmp[(r + i) * wv + c];
            }
            out[r * wv + c] = acc;
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters a valid-size map back to `h × w`.
fn filter_adjoint<T: Real>(g: &[T], h: usize, w: usize, k: &[T; SSIM_WINDOW]) -> Vec<T> {
    let (hv, wv) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut tmp = vec![T::zero(); h * wv];
    for r in 0..hv {
        for c in 0..wv {
            let v = g[r * wv + c];
            for (i, &kv) in k.iter().enumerate() {
                tmp[(r + i) * wv + c] = tmp[(r + i) * wv + c] + kv * v;
            }
        }
    }
    let mut out = vec![T::zero(); h * w];
    for r in 0..h {
        for c in 0..wv {
            let v = tmp[r * wv + c];
            for (i, &kv) in k.iter().enumerate() {
                out[r * w + c + i] = out[r * w + c + i] + kv * v;
            }
        }
    }
    out
}

fn channel_plane<T: Real>(img: &ImageBuffer<T>, ch: usize) -> Vec<T> {
    img.data.iter().skip(ch).step_by(3).copied().collect()
}

/// Channel-averaged SSIM and, optionally, its gradient with respect to `a`.
fn ssim_impl<T: Real>(a: &ImageBuffer<T>, b: &ImageBuffer<T>, want_grad: bool) -> Result<(T, Option<ImageBuffer<T>>)> {
    check_shape(a.resolution(), b.resolution())?;
    let (h, w) = a.resolution();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::ImageTooSmall { height: h, width: w, min: SSIM_WINDOW });
    }
    let k = gaussian_window::<T>();
    let (c1, c2) = (T::lit(C1), T::lit(C2));
    let two = T::lit(2.0);
    let npos = (h - SSIM_WINDOW + 1) * (w - SSIM_WINDOW + 1);
    let norm = T::one() / (T::from_usize_lossy(npos) * T::lit(3.0));
    let mut total = T::zero();
    let mut grad = want_grad.then(|| ImageBuffer::new(h, w));
    for ch in 0..3 {
        let x = channel_plane(a, ch);
        let y = channel_plane(b, ch);
        let xx: Vec<T> = x.iter().map(|v| *v * *v).collect();
        let yy: Vec<T> = y.iter().map(|v| *v * *v).collect();
        let xy: Vec<T> = x.iter().zip(&y).map(|(p, q)| *p * *q).collect();
        let mx = filter_valid(&x, h, w, &k);
        let my = filter_valid(&y, h, w, &k);
        let exx = filter_valid(&xx, h, w, &k);
        let eyy = filter_valid(&yy, h, w, &k);
        let exy = filter_valid(&xy, h, w, &k);
        let mut g_mu = vec![T::zero(); npos];
        let mut g_xx = vec![T::zero(); npos];
        let mut g_xy = vec![T::zero(); npos];
        for p in 0..npos {
            let (ux, uy) = (mx[p], my[p]);
            let sxx = exx[p] - ux * ux;
            let syy = eyy[p] - uy * uy;
            let sxy = exy[p] - ux * uy;
            let a1 = two * ux * uy + c1;
            let a2 = two * sxy + c2;
            let b1 = ux * ux + uy * uy + c1;
            let b2 = sxx + syy + c2;
            let s = (a1 * a2) / (b1 * b2);
            total = total + s;
            if want_grad {
                g_xy[p] = norm * s * two / a2;
                g_xx[p] = -norm * s / b2;
                g_mu[p] = norm * s * (two * uy / a1 - two * uy / a2 - two * ux / b1 + two * ux / b2);
            }
        }
        if let Some(gimg) = grad.as_mut() {
            let dmu = filter_adjoint(&g_mu, h, w, &k);
            let dxx = filter_adjoint(&g_xx, h, w, &k);
            let dxy = filter_adjoint(&g_xy, h, w, &k);
            for i in 0..h * w {
                gimg.data[i * 3 + ch] = dmu[i] + two * x[i] * dxx[i] + y[i] * dxy[i];
            }
        }
    }
    Ok((total * norm, grad))
}

/// Mean SSIM over all valid 11×11 windows, averaged across channels.
pub fn ssim<T: Real>(a: &ImageBuffer<T>, b: &ImageBuffer<T>) -> Result<T> {
    Ok(ssim_impl(a, b, false)?.0)
}

/// `(1 − SSIM) / 2` and its gradient with respect to `pred`.
pub fn dssim_loss<T: Real>(pred: &ImageBuffer<T>, gt: &ImageBuffer<T>) -> Result<(T, ImageBuffer<T>)> {
    let (s, g) = ssim_impl(pred, gt, true)?;
    let half = T::lit(0.5);
    let g = g.expect("requested").map(|v| -half * v);
    Ok(((T::one() - s) * half, g))
}

/// `L1 + λ·D-SSIM`.
pub fn color_loss<T: Real>(pred: &ImageBuffer<T>, gt: &ImageBuffer<T>, lambda: T) -> Result<(T, ImageBuffer<T>)> {
    let (l1, mut g) = l1_loss(pred, gt)?;
    if lambda == T::zero() {
        return Ok((l1, g));
    }
    let (ds, gd) = dssim_loss(pred, gt)?;
    for (a, b) in g.data.iter_mut().zip(&gd.data) {
        *a = *a + lambda * *b;
    }
    Ok((l1 + lambda * ds, g))
}

pub fn mse<T: Real>(pred: &ImageBuffer<T>, gt: &ImageBuffer<T>) -> Result<T> {
    check_shape(gt.resolution(), pred.resolution())?;
    let n = T::from_usize_lossy(pred.data.len());
    Ok(pred.data.iter().zip(&gt.data).map(|(p, g)| (*p - *g) * (*p - *g)).sum::<T>() / n)
}

/// PSNR in dB for `[0, 1]` images; identical images give `+∞`.
pub fn psnr<T: Real>(pred: &ImageBuffer<T>, gt: &ImageBuffer<T>) -> Result<T> {
    let m = mse(pred, gt)?;
    if m == T::zero() {
        return Ok(T::infinity());
    }
    Ok(T::lit(10.0) * (T::one() / m).log10())
}

/// PSNR clamped to [`PSNR_CAP`] for tables.
pub fn psnr_capped(v: f64) -> f64 {
    v.min(PSNR_CAP)
}
