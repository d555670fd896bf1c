//! Canny edge detection and the edge-aware depth smoothness term.

use crate::error::{check_shape, Error, Result};
use crate::raster::{DepthMap, ImageBuffer};
use crate::scalar::Real;

pub const CANNY_LOW: f64 = 20.0;
pub const CANNY_HIGH: f64 = 200.0;
pub const BLUR_SIGMA: f64 = 1.4;
pub const EPSILON: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Canny,
    Synthetic,
}

/// Binary raster with values in `{0, 1}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
    pub provenance: Provenance,
}

impl EdgeMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0; height * width], provenance: Provenance::Synthetic }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![1; height * width], provenance: Provenance::Synthetic }
    }

    pub fn from_data(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width || data.iter().any(|&v| v > 1) {
            return Err(Error::Format("mask must hold height*width values in {0, 1}".into()));
        }
        Ok(Self { height, width, data, provenance: Provenance::Synthetic })
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }
}

/// Single-channel float raster used by the Canny stages.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane<T> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Real> Plane<T> {
    #[inline]
    fn at_clamped(&self, row: isize, col: isize) -> T {
        let r = row.clamp(0, self.height as isize - 1) as usize;
        let c = col.clamp(0, self.width as isize - 1) as usize;
        self.data[r * self.width + c]
    }
}

/// ITU-R 601 luma on the 0–255 scale.
pub fn grayscale<T: Real>(img: &ImageBuffer<T>) -> Plane<T> {
    let (wr, wg, wb) = (T::lit(0.299), T::lit(0.587), T::lit(0.114));
    let s = T::lit(255.0);
    let data = img.data.chunks_exact(3).map(|p| s * (wr * p[0] + wg * p[1] + wb * p[2])).collect();
    Plane { height: img.height, width: img.width, data }
}

/// Separable 5×5 Gaussian blur with replicated borders.
pub fn gaussian_blur<T: Real>(p: &Plane<T>, sigma: T) -> Plane<T> {
    let mut k = [T::zero(); 5];
    for (i, v) in k.iter_mut().enumerate() {
        let x = T::from_usize_lossy(i) - T::lit(2.0);
        *v = (-(x * x) / (T::lit(2.0) * sigma * sigma)).exp();
    }
    let sum: T = k.iter().copied().sum();
    for v in &mut k {
        *v = *v / sum;
    }
    let mut tmp = Plane { height: p.height, width: p.width, data: vec![T::zero(); p.data.len()] };
    for r in 0..p.height {
        for c in 0..p.width {
            let mut acc = T::zero();
            for (i, &w) in k.iter().enumerate() {
                acc = acc + w * p.at_clamped(r as isize, c as isize + i as isize - 2);
            }
            tmp.data[r * p.width + c] = acc;
        }
    }
    let mut out = Plane { height: p.height, width: p.width, data: vec![T::zero(); p.data.len()] };
    for r in 0..p.height {
        for c in 0..p.width {
            let mut acc = T::zero();
            for (i, &w) in k.iter().enumerate() {
                acc = acc + w * tmp.at_clamped(r as isize + i as isize - 2, c as isize);
            }
            out.data[r * p.width + c] = acc;
        }
    }
    out
}

/// 3×3 Sobel derivatives `(gx, gy)` with replicated borders.
pub fn sobel<T: Real>(p: &Plane<T>) -> (Plane<T>, Plane<T>) {
    let mut gx = vec![T::zero(); p.data.len()];
    let mut gy = vec![T::zero(); p.data.len()];
    let two = T::lit(2.0);
    for r in 0..p.height as isize {
        for c in 0..p.width as isize {
            let v = |dr: isize, dc: isize| p.at_clamped(r + dr, c + dc);
            let x = (v(-1, 1) + two * v(0, 1) + v(1, 1)) - (v(-1, -1) + two * v(0, -1) + v(1, -1));
            let y = (v(1, -1) + two * v(1, 0) + v(1, 1)) - (v(-1, -1) + two * v(-1, 0) + v(-1, 1));
            let k = r as usize * p.width + c as usize;
            gx[k] = x;
            gy[k] = y;
        }
    }
    (
        Plane { height: p.height, width: p.width, data: gx },
        Plane { height: p.height, width: p.width, data: gy },
    )
}

pub fn gradient_magnitude<T: Real>(gx: &Plane<T>, gy: &Plane<T>) -> Plane<T> {
    let data = gx.data.iter().zip(&gy.data).map(|(a, b)| a.hypot(*b)).collect();
    Plane { height: gx.height, width: gx.width, data }
}

/// Thins the magnitude map to local maxima along the quantized gradient direction.
///
/// Ties along the direction keep the first pixel of the pair, so a symmetric
/// ridge stays one pixel wide. The outer border ring is always suppressed.
pub fn non_max_suppression<T: Real>(mag: &Plane<T>, gx: &Plane<T>, gy: &Plane<T>) -> Plane<T> {
    let (h, w) = (mag.height, mag.width);
    let mut out = vec![T::zero(); mag.data.len()];
    if h < 3 || w < 3 {
        return Plane { height: h, width: w, data: out };
    }
    let tan22 = T::lit((std::f64::consts::PI / 8.0).tan());
    let tan67 = T::lit((3.0 * std::f64::consts::PI / 8.0).tan());
    for r in 1..h - 1 {
        for c in 1..w - 1 {
            let k = r * w + c;
            let m = mag.data[k];
            if m <= T::zero() {
                continue;
            }
            let (x, y) = (gx.data[k], gy.data[k]);
            let (ax, ay) = (x.abs(), y.abs());
            // (before, after) neighbour offsets along the gradient
            let ((r1, c1), (r2, c2)) = if ay <= ax * tan22 {
                ((0, -1), (0, 1))
            } else if ay >= ax * tan67 {
                ((-1, 0), (1, 0))
            } else if (x > T::zero()) == (y > T::zero()) {
                ((-1, -1), (1, 1))
            } else {
                ((-1, 1), (1, -1))
            };
            let n1 = mag.data[(r as isize + r1) as usize * w + (c as isize + c1) as usize];
            let n2 = mag.data[(r as isize + r2) as usize * w + (c as isize + c2) as usize];
            let tol = T::lit(1e-9) * m.max(T::one());
            if m > n1 + tol && m >= n2 - tol {
                out[k] = m;
            }
        }
    }
    Plane { height: h, width: w, data: out }
}

/// Keeps weak pixels (`> low`) 8-connected to a strong pixel (`> high`).
///
/// The result is the connected-set fixed point, independent of visit order.
pub fn hysteresis<T: Real>(nms: &Plane<T>, low: T, high: T) -> Vec<u8> {
    let (h, w) = (nms.height, nms.width);
    let mut out = vec![0u8; h * w];
    let mut stack: Vec<usize> = Vec::new();
    for (k, &m) in nms.data.iter().enumerate() {
        if m > high {
            out[k] = 1;
            stack.push(k);
        }
    }
    while let Some(k) = stack.pop() {
        let (r, c) = ((k / w) as isize, (k % w) as isize);
        for dr in -1..=1isize {
            for dc in -1..=1isize {
                let (nr, nc) = (r + dr, c + dc);
                if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                    continue;
                }
                let nk = nr as usize * w + nc as usize;
                if out[nk] == 0 && nms.data[nk] > low {
                    out[nk] = 1;
                    stack.push(nk);
                }
            }
        }
    }
    out
}

/// Intermediate products of [`canny_stages`], kept for debugging dumps.
pub struct CannyStages<T> {
    pub magnitude: Plane<T>,
    pub suppressed: Plane<T>,
    pub mask: EdgeMask,
}

pub fn canny_stages<T: Real>(img: &ImageBuffer<T>, low: T, high: T) -> Result<CannyStages<T>> {
    if img.height == 0 || img.width == 0 {
        return Err(Error::InvalidParameter("empty image".into()));
    }
    if !(low >= T::zero() && low < high && high <= T::lit(255.0)) {
        return Err(Error::InvalidParameter(format!("thresholds need 0 <= low < high <= 255, got {low}, {high}")));
    }
    let gray = grayscale(img);
    let blurred = gaussian_blur(&gray, T::lit(BLUR_SIGMA));
    let (gx, gy) = sobel(&blurred);
    let magnitude = gradient_magnitude(&gx, &gy);
    let suppressed = non_max_suppression(&magnitude, &gx, &gy);
    let data = hysteresis(&suppressed, low, high);
    Ok(CannyStages {
        magnitude,
        suppressed,
        mask: EdgeMask { height: img.height, width: img.width, data, provenance: Provenance::Canny },
    })
}

/// Canny edge map of a `[0, 1]` RGB image; thresholds are on the 0–255 gradient scale.
pub fn canny<T: Real>(img: &ImageBuffer<T>, low: T, high: T) -> Result<EdgeMask> {
    Ok(canny_stages(img, low, high)?.mask)
}

/// `1 − E`.
pub fn non_edge_mask(e: &EdgeMask) -> EdgeMask {
    EdgeMask {
        height: e.height,
        width: e.width,
        data: e.data.iter().map(|&v| 1 - v.min(1)).collect(),
        provenance: e.provenance,
    }
}

const CROSS: [(isize, isize); 5] = [(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)];

#[inline]
fn cross_neighbours(row: usize, col: usize, h: usize, w: usize) -> impl Iterator<Item = usize> {
    CROSS.iter().filter_map(move |&(dr, dc)| {
        let (r, c) = (row as isize + dr, col as isize + dc);
        (r >= 0 && c >= 0 && r < h as isize && c < w as isize).then(|| r as usize * w + c as usize)
    })
}

/// Masked mean over the clipped center-plus-four cross neighbourhood.
pub fn masked_local_mean<T: Real>(d: &DepthMap<T>, m: &EdgeMask, epsilon: T) -> Result<DepthMap<T>> {
    check_shape(d.resolution(), m.resolution())?;
    let (h, w) = d.resolution();
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let mut num = T::zero();
            let mut den = T::zero();
            for j in cross_neighbours(r, c, h, w) {
                if m.data[j] == 1 {
                    num = num + d.data[j];
                    den = den + T::one();
                }
            }
            out.push(num / (den + epsilon));
        }
    }
    DepthMap::from_data(h, w, out)
}

/// Masked squared deviation from the local mean, averaged over unmasked pixels.
pub fn edge_loss<T: Real>(d: &DepthMap<T>, m: &EdgeMask, epsilon: T) -> Result<(T, Vec<T>)> {
    check_shape(d.resolution(), m.resolution())?;
    let (h, w) = d.resolution();
    let valid = m.count_ones();
    if valid == 0 {
        return Ok((T::zero(), vec![T::zero(); h * w]));
    }
    let mean = masked_local_mean(d, m, epsilon)?;
    let inv_p = T::one() / T::from_usize_lossy(valid);
    let two = T::lit(2.0);
    let mut den = vec![T::zero(); h * w];
    for r in 0..h {
        for c in 0..w {
            let cnt = cross_neighbours(r, c, h, w).filter(|&j| m.data[j] == 1).count();
            den[r * w + c] = T::from_usize_lossy(cnt) + epsilon;
        }
    }
    let mut loss = T::zero();
    // s_i = dL/dD̄_i scaled residual for valid pixels
    let mut resid = vec![T::zero(); h * w];
    for k in 0..h * w {
        if m.data[k] == 1 {
            let rr = d.data[k] - mean.data[k];
            loss = loss + rr * rr;
            resid[k] = rr;
        }
    }
    let mut grad = vec![T::zero(); h * w];
    for r in 0..h {
        for c in 0..w {
            let k = r * w + c;
            let mut g = two * resid[k];
            if m.data[k] == 1 {
                // D_k enters D̄_i for every valid i in its cross (the relation is symmetric)
                for i in cross_neighbours(r, c, h, w) {
                    if m.data[i] == 1 {
                        g = g - two * resid[i] / den[i];
                    }
                }
            }
            grad[k] = g * inv_p;
        }
    }
    Ok((loss * inv_p, grad))
}
