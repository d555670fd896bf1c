//! Edge-preserving total variation guided by the reference image.
//!
//! Forward differences are taken per channel. One mask per direction is built
//! from the largest reference-gradient magnitude across channels, and the
//! penalty is summed over channels and divided by `H·W`.

use crate::error::{check_shape, Error, Result};
use crate::raster::ImageBuffer;
use crate::scalar::Real;

pub const TAU_EDGE: f64 = 1e-2;
pub const TAU_SMOOTH: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradientField<T> {
    pub height: usize,
    pub width: usize,
    /// `H × (W−1) × 3`, row-major, channel-interleaved.
    pub horizontal: Vec<T>,
    /// `(H−1) × W × 3`.
    pub vertical: Vec<T>,
}

impl<T: Real> GradientField<T> {
    #[inline]
    pub fn h(&self, row: usize, col: usize, ch: usize) -> T {
        self.horizontal[(row * (self.width - 1) + col) * 3 + ch]
    }

    #[inline]
    pub fn v(&self, row: usize, col: usize, ch: usize) -> T {
        self.vertical[(row * self.width + col) * 3 + ch]
    }
}

pub fn directional_gradients<T: Real>(img: &ImageBuffer<T>) -> Result<GradientField<T>> {
    let (h, w) = img.resolution();
    if h < 2 || w < 2 {
        return Err(Error::ImageTooSmall { height: h, width: w, min: 2 });
    }
    let mut horizontal = Vec::with_capacity(h * (w - 1) * 3);
    for r in 0..h {
        for c in 0..w - 1 {
            for ch in 0..3 {
                horizontal.push(img.get(r, c + 1, ch) - img.get(r, c, ch));
            }
        }
    }
    let mut vertical = Vec::with_capacity((h - 1) * w * 3);
    for r in 0..h - 1 {
        for c in 0..w {
            for ch in 0..3 {
                vertical.push(img.get(r + 1, c, ch) - img.get(r, c, ch));
            }
        }
    }
    Ok(GradientField { height: h, width: w, horizontal, vertical })
}

/// Directional smoothness masks: 1 where the reference gradient is below `tau_edge`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GradientMasks {
    pub height: usize,
    pub width: usize,
    /// `H × (W−1)`.
    pub horizontal: Vec<u8>,
    /// `(H−1) × W`.
    pub vertical: Vec<u8>,
}

pub fn gradient_masks<T: Real>(gt: &ImageBuffer<T>, tau_edge: T) -> Result<GradientMasks> {
    if !(tau_edge > T::zero()) {
        return Err(Error::InvalidParameter("tau_edge must be positive".into()));
    }
    let g = directional_gradients(gt)?;
    let reduce = |v: &[T]| {
        v.chunks_exact(3)
            .map(|px| u8::from(px.iter().fold(T::zero(), |m, x| m.max(x.abs())) < tau_edge))
            .collect::<Vec<u8>>()
    };
    Ok(GradientMasks {
        height: g.height,
        width: g.width,
        horizontal: reduce(&g.horizontal),
        vertical: reduce(&g.vertical),
    })
}

/// Edge-preserving TV loss and its subgradient with respect to `pred`.
pub fn tv_loss<T: Real>(
    pred: &ImageBuffer<T>,
    gt: &ImageBuffer<T>,
    tau_edge: T,
    tau_smooth: T,
) -> Result<(T, ImageBuffer<T>)> {
    check_shape(gt.resolution(), pred.resolution())?;
    if !(tau_smooth > T::zero()) {
        return Err(Error::InvalidParameter("tau_smooth must be positive".into()));
    }
    let masks = gradient_masks(gt, tau_edge)?;
    let g = directional_gradients(pred)?;
    let (h, w) = pred.resolution();
    let scale = T::one() / T::from_usize_lossy(h * w);
    let mut grad = ImageBuffer::new(h, w);
    let mut loss = T::zero();
    let mut penalize = |v: T, from: (usize, usize), to: (usize, usize), ch: usize, grad: &mut ImageBuffer<T>| {
        let excess = v.abs() - tau_smooth;
        if excess > T::zero() {
            loss = loss + excess;
            let s = v.signum() * scale;
            grad.set(to.0, to.1, ch, grad.get(to.0, to.1, ch) + s);
            grad.set(from.0, from.1, ch, grad.get(from.0, from.1, ch) - s);
        }
    };
    for r in 0..h {
        for c in 0..w - 1 {
            if masks.horizontal[r * (w - 1) + c] == 1 {
                for ch in 0..3 {
                    penalize(g.h(r, c, ch), (r, c), (r, c + 1), ch, &mut grad);
                }
            }
        }
    }
    for r in 0..h - 1 {
        for c in 0..w {
            if masks.vertical[r * w + c] == 1 {
                for ch in 0..3 {
                    penalize(g.v(r, c, ch), (r, c), (r + 1, c), ch, &mut grad);
                }
            }
        }
    }
    Ok((loss * scale, grad))
}
