//! Two-scale depth normalization and the depth supervision loss.
//!
//! The patch scale standardizes each tile with its own mean and standard
//! deviation; the image scale keeps the per-tile mean subtraction but divides
//! by the standard deviation of the whole map. Both use population statistics.

use crate::error::{check_shape, Error, Result};
use crate::raster::DepthMap;
use crate::scalar::Real;

/// Below this global standard deviation a map is treated as constant.
pub const SIGMA_GUARD: f64 = 1e-8;

/// Non-overlapping square tiles anchored at the origin; edge tiles may be smaller.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub patch_size: usize,
    pub height: usize,
    pub width: usize,
}

impl PatchGrid {
    pub fn new(patch_size: usize, height: usize, width: usize) -> Result<Self> {
        if patch_size < 1 {
            return Err(Error::InvalidParameter("patch size must be at least 1".into()));
        }
        Ok(Self { patch_size, height, width })
    }

    pub fn tiles_x(&self) -> usize {
        self.width.div_ceil(self.patch_size)
    }

    pub fn tiles_y(&self) -> usize {
        self.height.div_ceil(self.patch_size)
    }

    pub fn num_tiles(&self) -> usize {
        self.tiles_x() * self.tiles_y()
    }

    #[inline]
    pub fn tile_of(&self, row: usize, col: usize) -> usize {
        (row / self.patch_size) * self.tiles_x() + col / self.patch_size
    }

    /// Flat pixel indices covered by each tile.
    pub fn tiles(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_tiles()];
        for r in 0..self.height {
            for c in 0..self.width {
                out[self.tile_of(r, c)].push(r * self.width + c);
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedDepth<T> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

struct TileStats<T> {
    mean: Vec<T>,
    std: Vec<T>,
    count: Vec<usize>,
}

fn tile_stats<T: Real>(data: &[T], grid: &PatchGrid) -> TileStats<T> {
    let n = grid.num_tiles();
    let mut sum = vec![T::zero(); n];
    let mut count = vec![0usize; n];
    for r in 0..grid.height {
        for c in 0..grid.width {
            let t = grid.tile_of(r, c);
            sum[t] = sum[t] + data[r * grid.width + c];
            count[t] += 1;
        }
    }
    let mean: Vec<T> = sum.iter().zip(&count).map(|(s, &k)| *s / T::from_usize_lossy(k.max(1))).collect();
    let mut var = vec![T::zero(); n];
    for r in 0..grid.height {
        for c in 0..grid.width {
            let t = grid.tile_of(r, c);
            let d = data[r * grid.width + c] - mean[t];
            var[t] = var[t] + d * d;
        }
    }
    let std = var.iter().zip(&count).map(|(v, &k)| (*v / T::from_usize_lossy(k.max(1))).sqrt()).collect();
    TileStats { mean, std, count }
}

fn global_stats<T: Real>(data: &[T]) -> (T, T) {
    let n = T::from_usize_lossy(data.len());
    let mean = data.iter().copied().sum::<T>() / n;
    let var = data.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, var.sqrt())
}

fn check_grid<T>(d: &DepthMap<T>, grid: &PatchGrid) -> Result<()> {
    check_shape((grid.height, grid.width), (d.height, d.width))
}

/// Per-tile standardization `(D − μ_P) / (σ_P + δ)`.
pub fn patch_normalize<T: Real>(d: &DepthMap<T>, grid: &PatchGrid, delta: T) -> Result<NormalizedDepth<T>> {
    check_grid(d, grid)?;
    if !(delta > T::zero()) {
        return Err(Error::InvalidParameter("delta must be positive".into()));
    }
    let st = tile_stats(&d.data, grid);
    let mut data = Vec::with_capacity(d.data.len());
    for r in 0..grid.height {
        for c in 0..grid.width {
            let t = grid.tile_of(r, c);
            data.push((d.data[r * grid.width + c] - st.mean[t]) / (st.std[t] + delta));
        }
    }
    Ok(NormalizedDepth { height: d.height, width: d.width, data })
}

/// Per-tile mean subtraction divided by the image-wide standard deviation.
///
/// A map whose global deviation falls below [`SIGMA_GUARD`] normalizes to zeros.
pub fn image_normalize<T: Real>(d: &DepthMap<T>, grid: &PatchGrid) -> Result<NormalizedDepth<T>> {
    check_grid(d, grid)?;
    let st = tile_stats(&d.data, grid);
    let (_, sigma) = global_stats(&d.data);
    let constant = !(sigma >= T::lit(SIGMA_GUARD));
    let mut data = Vec::with_capacity(d.data.len());
    for r in 0..grid.height {
        for c in 0..grid.width {
            if constant {
                data.push(T::zero());
            } else {
                let t = grid.tile_of(r, c);
                data.push((d.data[r * grid.width + c] - st.mean[t]) / sigma);
            }
        }
    }
    Ok(NormalizedDepth { height: d.height, width: d.width, data })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthLossConfig<T> {
    /// Patch-scale weight.
    pub gamma: T,
    /// Image-scale weight.
    pub eta: T,
    /// Dead zone on normalized residuals.
    pub tolerance: T,
    pub delta: T,
    /// Treat means and deviations of the rendered map as constants in the gradient.
    pub stop_statistics: bool,
}

impl<T: Real> Default for DepthLossConfig<T> {
    fn default() -> Self {
        Self {
            gamma: T::lit(0.1),
            eta: T::one(),
            tolerance: T::lit(0.05),
            delta: T::lit(1e-8),
            stop_statistics: false,
        }
    }
}

/// `max(|r| − tol, 0)²` and its derivative.
#[inline]
pub fn dead_zone_sq<T: Real>(r: T, tol: T) -> (T, T) {
    let e = r.abs() - tol;
    if e > T::zero() {
        (e * e, T::lit(2.0) * e * r.signum())
    } else {
        (T::zero(), T::zero())
    }
}

/// Dual-scale depth loss and its gradient with respect to the rendered depth.
pub fn depth_loss<T: Real>(
    d: &DepthMap<T>,
    prior: &DepthMap<T>,
    grid: &PatchGrid,
    cfg: &DepthLossConfig<T>,
) -> Result<(T, Vec<T>)> {
    check_shape(d.resolution(), prior.resolution())?;
    check_grid(d, grid)?;
    if !(cfg.gamma >= T::zero() && cfg.eta >= T::zero() && cfg.tolerance >= T::zero()) {
        return Err(Error::InvalidParameter("gamma, eta and tolerance must be non-negative".into()));
    }
    let npx = d.data.len();
    let inv_n = T::one() / T::from_usize_lossy(npx);
    let tiles = tile_stats(&d.data, grid);
    let width = grid.width;

    let dp = patch_normalize(d, grid, cfg.delta)?;
    let pp = patch_normalize(prior, grid, cfg.delta)?;
    let di = image_normalize(d, grid)?;
    let pi = image_normalize(prior, grid)?;

    let mut loss_p = T::zero();
    let mut loss_i = T::zero();
    // dL/d(normalized value) for each scale
    let mut gp = vec![T::zero(); npx];
    let mut gi = vec![T::zero(); npx];
    for k in 0..npx {
        let (lp, dlp) = dead_zone_sq(dp.data[k] - pp.data[k], cfg.tolerance);
        let (li, dli) = dead_zone_sq(di.data[k] - pi.data[k], cfg.tolerance);
        loss_p = loss_p + lp;
        loss_i = loss_i + li;
        gp[k] = cfg.gamma * inv_n * dlp;
        gi[k] = cfg.eta * inv_n * dli;
    }
    let loss = cfg.gamma * loss_p * inv_n + cfg.eta * loss_i * inv_n;

    let mut grad = vec![T::zero(); npx];
    let nt = grid.num_tiles();

    // Patch scale.
    if cfg.stop_statistics {
        for r in 0..grid.height {
            for c in 0..width {
                let t = grid.tile_of(r, c);
                let k = r * width + c;
                grad[k] = grad[k] + gp[k] / (tiles.std[t] + cfg.delta);
            }
        }
    } else {
        let mut g_sum = vec![T::zero(); nt];
        let mut g_dev = vec![T::zero(); nt];
        for r in 0..grid.height {
            for c in 0..width {
                let t = grid.tile_of(r, c);
                let k = r * width + c;
                g_sum[t] = g_sum[t] + gp[k];
                g_dev[t] = g_dev[t] + gp[k] * (d.data[k] - tiles.mean[t]);
            }
        }
        for r in 0..grid.height {
            for c in 0..width {
                let t = grid.tile_of(r, c);
                let k = r * width + c;
                let den = tiles.std[t] + cfg.delta;
                let cnt = T::from_usize_lossy(tiles.count[t]);
                let mut v = (gp[k] - g_sum[t] / cnt) / den;
                if tiles.std[t] > T::zero() {
                    let dsigma = (d.data[k] - tiles.mean[t]) / (cnt * tiles.std[t]);
                    v = v - g_dev[t] / (den * den) * dsigma;
                }
                grad[k] = grad[k] + v;
            }
        }
    }

    // Image scale.
    let (mean_i, sigma_i) = global_stats(&d.data);
    if sigma_i >= T::lit(SIGMA_GUARD) {
        if cfg.stop_statistics {
            for k in 0..npx {
                grad[k] = grad[k] + gi[k] / sigma_i;
            }
        } else {
            let mut g_sum = vec![T::zero(); nt];
            let mut g_dev = T::zero();
            for r in 0..grid.height {
                for c in 0..width {
                    let t = grid.tile_of(r, c);
                    let k = r * width + c;
                    g_sum[t] = g_sum[t] + gi[k];
                    g_dev = g_dev + gi[k] * (d.data[k] - tiles.mean[t]);
                }
            }
            let nn = T::from_usize_lossy(npx);
            for r in 0..grid.height {
                for c in 0..width {
                    let t = grid.tile_of(r, c);
                    let k = r * width + c;
                    let cnt = T::from_usize_lossy(tiles.count[t]);
                    let dsigma = (d.data[k] - mean_i) / (nn * sigma_i);
                    grad[k] = grad[k] + (gi[k] - g_sum[t] / cnt) / sigma_i - g_dev / (sigma_i * sigma_i) * dsigma;
                }
            }
        }
    }
    Ok((loss, grad))
}
