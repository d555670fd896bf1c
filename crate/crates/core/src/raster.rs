//! Front-to-back compositing of projected Gaussians and its reverse-mode pass.
//!
//! Primitives are sorted once per view by `‖μ − o‖₂` (ties by index) and every
//! pixel folds the primitives whose Mahalanobis distance is within
//! `cutoff_sigma`. The backward pass treats that order as fixed.

use rayon::prelude::*;

use crate::error::{check_shape, Error, Result};
use crate::gaussian::{project_gaussian, quaternion_to_matrix, Camera, Gaussian2D, Scene};
use crate::scalar::{mat3t_vec, sub3, Real, Vec2, Vec3};

/// Rows handed to one parallel job. Fixed so reductions do not depend on the thread count.
const ROW_CHUNK: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer<T> {
    pub height: usize,
    pub width: usize,
    /// Row-major, channel-interleaved RGB.
    pub data: Vec<T>,
}

impl<T: Real> ImageBuffer<T> {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![T::zero(); height * width * 3] }
    }

    pub fn filled(height: usize, width: usize, rgb: Vec3<T>) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self { height, width, data }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..3 {
                    data.push(f(r, c, ch));
                }
            }
        }
        Self { height, width, data }
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> T {
        self.data[(row * self.width + col) * 3 + ch]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: T) {
        self.data[(row * self.width + col) * 3 + ch] = v;
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> Vec3<T> {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Clamps every channel into `[0, 1]`.
    pub fn finalize(&mut self) {
        for v in &mut self.data {
            *v = v.max(T::zero()).min(T::one());
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { height: self.height, width: self.width, data: self.data.iter().map(|&v| f(v)).collect() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap<T> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
    pub accumulated_alpha: Vec<T>,
}

impl<T: Real> DepthMap<T> {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![T::zero(); height * width],
            accumulated_alpha: vec![T::zero(); height * width],
        }
    }

    /// Depth raster without coverage information (priors, cotangents).
    pub fn from_data(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Format(format!(
                "depth data has {} values, expected {}",
                data.len(),
                height * width
            )));
        }
        Ok(Self { height, width, data, accumulated_alpha: vec![T::zero(); height * width] })
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[row * self.width + col]
    }
}

/// Which depth definition a depth cotangent refers to.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DepthMode<T> {
    /// Alpha-composited distance.
    Standard,
    /// Rank-weighted distance with a fixed boosted opacity `omega`.
    Enhanced { omega: T },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderOptions<T> {
    /// Contributions beyond this Mahalanobis radius are dropped.
    pub cutoff_sigma: T,
    /// Upper clamp on a single contribution's alpha.
    pub alpha_max: T,
}

impl<T: Real> Default for RenderOptions<T> {
    fn default() -> Self {
        Self { cutoff_sigma: T::lit(3.0), alpha_max: T::lit(0.99) }
    }
}

#[derive(Clone, Debug)]
pub struct RenderOutput<T> {
    pub color: ImageBuffer<T>,
    pub depth: DepthMap<T>,
    pub enhanced_depth: Option<DepthMap<T>>,
    /// Per pixel: contributor count plus `1 << 16` per alpha-clamped contributor.
    /// Changes only when a primitive crosses the cutoff or the clamp.
    pub signature: Vec<u32>,
}

/// Per-primitive parameter gradients. Rows for culled primitives stay zero.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderGradients<T> {
    pub mu: Vec<Vec3<T>>,
    pub scale: Vec<Vec3<T>>,
    pub rotation: Vec<[T; 4]>,
    pub opacity: Vec<T>,
    pub color: Vec<Vec3<T>>,
}

impl<T: Real> RenderGradients<T> {
    pub fn zeros(n: usize) -> Self {
        Self {
            mu: vec![[T::zero(); 3]; n],
            scale: vec![[T::zero(); 3]; n],
            rotation: vec![[T::zero(); 4]; n],
            opacity: vec![T::zero(); n],
            color: vec![[T::zero(); 3]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    /// Flattened view in the order mu, scale, rotation, opacity, color per primitive.
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.len() * 14);
        for i in 0..self.len() {
            out.extend_from_slice(&self.mu[i]);
            out.extend_from_slice(&self.scale[i]);
            out.extend_from_slice(&self.rotation[i]);
            out.push(self.opacity[i]);
            out.extend_from_slice(&self.color[i]);
        }
        out
    }
}

/// Cotangents for the reverse pass. Absent fields count as zero.
#[derive(Clone, Copy, Debug)]
pub struct Cotangents<'a, T> {
    pub color: Option<&'a ImageBuffer<T>>,
    pub depth: Option<&'a [T]>,
    /// Cotangent on the enhanced depth map together with its `omega`.
    pub enhanced_depth: Option<(&'a [T], T)>,
}

struct Projected<T> {
    g: Gaussian2D<T>,
    index: usize,
    opacity: T,
    color: Vec3<T>,
    /// Inclusive pixel bounds `[col_min, col_max, row_min, row_max]`.
    bounds: [i64; 4],
}

struct Prepared<T> {
    order: Vec<Projected<T>>,
    cutoff2: T,
    alpha_max: T,
}

fn check_omega<T: Real>(omega: T) -> Result<()> {
    if !(omega > T::zero() && omega < T::one()) {
        return Err(Error::InvalidParameter(format!("omega must lie in (0, 1), got {omega}")));
    }
    Ok(())
}

fn prepare<T: Real>(scene: &Scene<T>, cam: &Camera<T>, opts: &RenderOptions<T>) -> Result<Prepared<T>> {
    scene.validate()?;
    let mut order = Vec::with_capacity(scene.len());
    for (index, p) in scene.primitives.iter().enumerate() {
        let Some(g) = project_gaussian(p, cam) else { continue };
        let ext = g.extent(opts.cutoff_sigma);
        let to_i = |v: T| v.to_f64().map(|f| f.clamp(-1e9, 1e9) as i64).unwrap_or(0);
        let bounds = [
            to_i((g.mean2d[0] - ext[0]).ceil()).max(0),
            to_i((g.mean2d[0] + ext[0]).floor()).min(cam.width as i64 - 1),
            to_i((g.mean2d[1] - ext[1]).ceil()).max(0),
            to_i((g.mean2d[1] + ext[1]).floor()).min(cam.height as i64 - 1),
        ];
        if bounds[0] > bounds[1] || bounds[2] > bounds[3] {
            continue;
        }
        let color = [
            p.color[0].max(T::zero()).min(T::one()),
            p.color[1].max(T::zero()).min(T::one()),
            p.color[2].max(T::zero()).min(T::one()),
        ];
        order.push(Projected { g, index, opacity: p.opacity, color, bounds });
    }
    order.sort_by(|a, b| {
        a.g.view_depth
            .partial_cmp(&b.g.view_depth)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.index.cmp(&b.index))
    });
    Ok(Prepared { order, cutoff2: opts.cutoff_sigma * opts.cutoff_sigma, alpha_max: opts.alpha_max })
}

impl<T: Real> Prepared<T> {
    /// Sorted positions of primitives whose row range covers `row`.
    fn row_list(&self, row: usize) -> Vec<usize> {
        let r = row as i64;
        self.order
            .iter()
            .enumerate()
            .filter(|(_, p)| p.bounds[2] <= r && r <= p.bounds[3])
            .map(|(k, _)| k)
            .collect()
    }
}

/// One term of a per-pixel fold.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Contribution<T> {
    /// Index into the scene's primitive list.
    pub primitive: usize,
    pub gaussian: T,
    /// Effective alpha after the clamp.
    pub alpha: T,
    /// Transmittance in front of this term.
    pub transmittance: T,
    pub view_depth: T,
}

struct PixelEntry<T> {
    pos: usize,
    g: T,
    dx: T,
    dy: T,
    a: T,
    clamped: bool,
}

fn gather<T: Real>(prep: &Prepared<T>, list: &[usize], pixel: Vec2<T>, col: i64, out: &mut Vec<PixelEntry<T>>) {
    out.clear();
    for &k in list {
        let p = &prep.order[k];
        if col < p.bounds[0] || col > p.bounds[1] {
            continue;
        }
        let q = p.g.power(pixel);
        if !(q <= prep.cutoff2) {
            continue;
        }
        let g = (-T::lit(0.5) * q).exp();
        let raw = p.opacity * g;
        let clamped = raw > prep.alpha_max;
        let a = if clamped { prep.alpha_max } else { raw };
        out.push(PixelEntry {
            pos: k,
            g,
            dx: pixel[0] - p.g.mean2d[0],
            dy: pixel[1] - p.g.mean2d[1],
            a,
            clamped,
        });
    }
}

fn enhanced_weight<T: Real>(omega: T, rank: usize) -> T {
    let iota = -(T::one() - omega).ln();
    omega * (-iota * T::from_usize_lossy(rank)).exp()
}

/// Renders color, standard depth and (optionally) the enhanced-opacity depth in one pass.
pub fn render<T: Real>(
    scene: &Scene<T>,
    cam: &Camera<T>,
    enhanced_omega: Option<T>,
    opts: &RenderOptions<T>,
) -> Result<RenderOutput<T>> {
    if let Some(w) = enhanced_omega {
        check_omega(w)?;
    }
    let prep = prepare(scene, cam, opts)?;
    let (h, w) = cam.resolution();
    let bg = scene.background;

    let rows: Vec<(Vec<T>, Vec<T>, Vec<T>, Vec<T>, Vec<u32>)> = (0..h)
        .into_par_iter()
        .map(|row| {
            let list = prep.row_list(row);
            let mut entries = Vec::new();
            let mut color = Vec::with_capacity(w * 3);
            let mut depth = Vec::with_capacity(w);
            let mut acc = Vec::with_capacity(w);
            let mut enh = Vec::with_capacity(if enhanced_omega.is_some() { w } else { 0 });
            let mut sig = Vec::with_capacity(w);
            for col in 0..w {
                let pixel = [T::from_usize_lossy(col), T::from_usize_lossy(row)];
                gather(&prep, &list, pixel, col as i64, &mut entries);
                let clamped = entries.iter().filter(|e| e.clamped).count() as u32;
                sig.push(entries.len() as u32 + (clamped << 16));
                let mut t = T::one();
                let mut c = [T::zero(); 3];
                let mut d = T::zero();
                for e in &entries {
                    let p = &prep.order[e.pos];
                    let wgt = e.a * t;
                    for ch in 0..3 {
                        c[ch] = c[ch] + p.color[ch] * wgt;
                    }
                    d = d + p.g.view_depth * wgt;
                    t = t * (T::one() - e.a);
                }
                for ch in 0..3 {
                    color.push(c[ch] + bg[ch] * t);
                }
                depth.push(d);
                acc.push(T::one() - t);
                if let Some(omega) = enhanced_omega {
                    let mut de = T::zero();
                    for (rank, e) in entries.iter().enumerate() {
                        de = de + enhanced_weight(omega, rank) * e.g * prep.order[e.pos].g.view_depth;
                    }
                    enh.push(de);
                }
            }
            (color, depth, acc, enh, sig)
        })
        .collect();

    let mut color = ImageBuffer::new(h, w);
    let mut depth = DepthMap::new(h, w);
    let mut enhanced = enhanced_omega.map(|_| DepthMap::new(h, w));
    let mut signature = Vec::with_capacity(h * w);
    for (row, (c, d, a, e, sg)) in rows.into_iter().enumerate() {
        signature.extend_from_slice(&sg);
        color.data[row * w * 3..(row + 1) * w * 3].copy_from_slice(&c);
        depth.data[row * w..(row + 1) * w].copy_from_slice(&d);
        depth.accumulated_alpha[row * w..(row + 1) * w].copy_from_slice(&a);
        if let Some(em) = enhanced.as_mut() {
            em.data[row * w..(row + 1) * w].copy_from_slice(&e);
        }
    }
    Ok(RenderOutput { color, depth, enhanced_depth: enhanced, signature })
}

pub fn render_color<T: Real>(scene: &Scene<T>, cam: &Camera<T>) -> Result<ImageBuffer<T>> {
    Ok(render(scene, cam, None, &RenderOptions::default())?.color)
}

pub fn render_depth<T: Real>(scene: &Scene<T>, cam: &Camera<T>) -> Result<DepthMap<T>> {
    Ok(render(scene, cam, None, &RenderOptions::default())?.depth)
}

pub fn render_depth_enhanced<T: Real>(scene: &Scene<T>, cam: &Camera<T>, omega: T) -> Result<DepthMap<T>> {
    let out = render(scene, cam, Some(omega), &RenderOptions::default())?;
    Ok(out.enhanced_depth.expect("requested"))
}

/// Ordered contributions at one pixel, for inspection and tests.
pub fn pixel_trace<T: Real>(
    scene: &Scene<T>,
    cam: &Camera<T>,
    row: usize,
    col: usize,
    opts: &RenderOptions<T>,
) -> Result<Vec<Contribution<T>>> {
    let prep = prepare(scene, cam, opts)?;
    let list = prep.row_list(row);
    let mut entries = Vec::new();
    gather(&prep, &list, [T::from_usize_lossy(col), T::from_usize_lossy(row)], col as i64, &mut entries);
    let mut t = T::one();
    Ok(entries
        .iter()
        .map(|e| {
            let p = &prep.order[e.pos];
            let c = Contribution {
                primitive: p.index,
                gaussian: e.g,
                alpha: e.a,
                transmittance: t,
                view_depth: p.g.view_depth,
            };
            t = t * (T::one() - e.a);
            c
        })
        .collect())
}

/// Screen-space gradient accumulator for one projected primitive.
#[derive(Clone, Copy, Default)]
struct Grad2D<T> {
    mean: [T; 2],
    conic: [T; 3],
    opacity: T,
    color: [T; 3],
    depth: T,
}

impl<T: Real> Grad2D<T> {
    fn zero() -> Self {
        Self {
            mean: [T::zero(); 2],
            conic: [T::zero(); 3],
            opacity: T::zero(),
            color: [T::zero(); 3],
            depth: T::zero(),
        }
    }

    fn add(&mut self, o: &Self) {
        self.mean[0] = self.mean[0] + o.mean[0];
        self.mean[1] = self.mean[1] + o.mean[1];
        for k in 0..3 {
            self.conic[k] = self.conic[k] + o.conic[k];
            self.color[k] = self.color[k] + o.color[k];
        }
        self.opacity = self.opacity + o.opacity;
        self.depth = self.depth + o.depth;
    }
}

/// Reverse-mode pass for the spec-level single depth cotangent.
pub fn render_vjp<T: Real>(
    scene: &Scene<T>,
    cam: &Camera<T>,
    grad_color: &ImageBuffer<T>,
    grad_depth: &DepthMap<T>,
    depth_mode: DepthMode<T>,
) -> Result<RenderGradients<T>> {
    check_shape(cam.resolution(), grad_color.resolution())?;
    check_shape(cam.resolution(), grad_depth.resolution())?;
    let cot = match depth_mode {
        DepthMode::Standard => Cotangents { color: Some(grad_color), depth: Some(&grad_depth.data), enhanced_depth: None },
        DepthMode::Enhanced { omega } => Cotangents {
            color: Some(grad_color),
            depth: None,
            enhanced_depth: Some((&grad_depth.data, omega)),
        },
    };
    render_vjp_multi(scene, cam, &cot, &RenderOptions::default())
}

/// Reverse-mode pass accepting cotangents on color, standard depth and enhanced depth at once.
pub fn render_vjp_multi<T: Real>(
    scene: &Scene<T>,
    cam: &Camera<T>,
    cot: &Cotangents<'_, T>,
    opts: &RenderOptions<T>,
) -> Result<RenderGradients<T>> {
    let (h, w) = cam.resolution();
    if let Some(c) = cot.color {
        check_shape((h, w), c.resolution())?;
    }
    for len in [cot.depth.map(|d| d.len()), cot.enhanced_depth.map(|d| d.0.len())].into_iter().flatten() {
        if len != h * w {
            return Err(Error::ShapeMismatch { expected: (h, w), got: (len, 1) });
        }
    }
    if let Some((_, omega)) = cot.enhanced_depth {
        check_omega(omega)?;
    }
    let prep = prepare(scene, cam, opts)?;
    let n = prep.order.len();
    let bg = scene.background;

    let chunks: Vec<usize> = (0..h).step_by(ROW_CHUNK).collect();
    let partials: Vec<Vec<Grad2D<T>>> = chunks
        .par_iter()
        .map(|&start| {
            let mut acc = vec![Grad2D::zero(); n];
            let mut entries = Vec::new();
            let mut trans = Vec::new();
            for row in start..(start + ROW_CHUNK).min(h) {
                let list = prep.row_list(row);
                for col in 0..w {
                    let idx = row * w + col;
                    let gc = cot.color.map(|c| [c.data[idx * 3], c.data[idx * 3 + 1], c.data[idx * 3 + 2]]);
                    let gd = cot.depth.map(|d| d[idx]);
                    let ge = cot.enhanced_depth.map(|(d, om)| (d[idx], om));
                    let gc = gc.filter(|v| v.iter().any(|x| *x != T::zero()));
                    let gd = gd.filter(|v| *v != T::zero());
                    let ge = ge.filter(|v| v.0 != T::zero());
                    if gc.is_none() && gd.is_none() && ge.is_none() {
                        continue;
                    }
                    let pixel = [T::from_usize_lossy(col), T::from_usize_lossy(row)];
                    gather(&prep, &list, pixel, col as i64, &mut entries);
                    if entries.is_empty() {
                        continue;
                    }
                    pixel_backward(&prep, &entries, &mut trans, bg, gc, gd, ge, &mut acc);
                }
            }
            acc
        })
        .collect();

    let mut total = vec![Grad2D::zero(); n];
    for part in &partials {
        for (t, p) in total.iter_mut().zip(part) {
            t.add(p);
        }
    }

    let mut grads = RenderGradients::zeros(scene.len());
    for (proj, g2) in prep.order.iter().zip(&total) {
        backprop_primitive(scene, cam, proj, g2, &mut grads);
    }
    Ok(grads)
}

#[allow(clippy::too_many_arguments)]
fn pixel_backward<T: Real>(
    prep: &Prepared<T>,
    entries: &[PixelEntry<T>],
    trans: &mut Vec<T>,
    bg: Vec3<T>,
    gc: Option<[T; 3]>,
    gd: Option<T>,
    ge: Option<(T, T)>,
    acc: &mut [Grad2D<T>],
) {
    trans.clear();
    let mut t = T::one();
    for e in entries {
        trans.push(t);
        t = t * (T::one() - e.a);
    }
    let gc = gc.unwrap_or([T::zero(); 3]);
    let gd = gd.unwrap_or(T::zero());
    // Suffix sums: everything composited behind the current term, background included.
    let mut s_color = [bg[0] * t, bg[1] * t, bg[2] * t];
    let mut s_depth = T::zero();
    for (k, e) in entries.iter().enumerate().rev() {
        let p = &prep.order[e.pos];
        let tk = trans[k];
        let one_m = T::one() - e.a;
        let wgt = e.a * tk;
        let slot = &mut acc[e.pos];

        let mut g_a = T::zero();
        for ch in 0..3 {
            g_a = g_a + gc[ch] * (p.color[ch] * tk - s_color[ch] / one_m);
            slot.color[ch] = slot.color[ch] + gc[ch] * wgt;
        }
        g_a = g_a + gd * (p.g.view_depth * tk - s_depth / one_m);
        slot.depth = slot.depth + gd * wgt;

        for ch in 0..3 {
            s_color[ch] = s_color[ch] + p.color[ch] * wgt;
        }
        s_depth = s_depth + p.g.view_depth * wgt;

        let mut g_g = T::zero();
        if !e.clamped {
            slot.opacity = slot.opacity + g_a * e.g;
            g_g = g_a * p.opacity;
        }
        if let Some((gev, omega)) = ge {
            let wr = enhanced_weight(omega, k);
            g_g = g_g + gev * wr * p.g.view_depth;
            slot.depth = slot.depth + gev * wr * e.g;
        }
        if g_g != T::zero() {
            // G = exp(-q/2), q = [dx dy] A [dx dy]^T
            let g_q = -T::lit(0.5) * e.g * g_g;
            let two = T::lit(2.0);
            let cn = &p.g.conic;
            slot.conic[0] = slot.conic[0] + g_q * e.dx * e.dx;
            slot.conic[1] = slot.conic[1] + g_q * two * e.dx * e.dy;
            slot.conic[2] = slot.conic[2] + g_q * e.dy * e.dy;
            slot.mean[0] = slot.mean[0] - g_q * two * (cn[0] * e.dx + cn[1] * e.dy);
            slot.mean[1] = slot.mean[1] - g_q * two * (cn[1] * e.dx + cn[2] * e.dy);
        }
    }
}

/// Chains screen-space gradients back through projection and covariance.
fn backprop_primitive<T: Real>(
    scene: &Scene<T>,
    cam: &Camera<T>,
    proj: &Projected<T>,
    g2: &Grad2D<T>,
    out: &mut RenderGradients<T>,
) {
    let i = proj.index;
    let prim = &scene.primitives[i];
    let zero = T::zero();
    let two = T::lit(2.0);

    out.opacity[i] = g2.opacity;
    for ch in 0..3 {
        let c = prim.color[ch];
        out.color[i][ch] = if c >= zero && c <= T::one() { g2.color[ch] } else { zero };
    }

    // conic -> cov2d: dL/dΣ = -A G_A A with G_A symmetric (off-diagonal halved).
    let a = &proj.g.conic;
    let am = [[a[0], a[1]], [a[1], a[2]]];
    let ga = [[g2.conic[0], g2.conic[1] / two], [g2.conic[1] / two, g2.conic[2]]];
    let mut tmp = [[zero; 2]; 2];
    for r in 0..2 {
        for c in 0..2 {
            tmp[r][c] = am[r][0] * ga[0][c] + am[r][1] * ga[1][c];
        }
    }
    let mut gs = [[zero; 2]; 2];
    for r in 0..2 {
        for c in 0..2 {
            gs[r][c] = -(tmp[r][0] * am[0][c] + tmp[r][1] * am[1][c]);
        }
    }

    let pc = proj.g.cam_point;
    let j = cam.projection_jacobian(pc);
    let wr = &cam.rotation;
    let mut m = [[zero; 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            m[r][c] = j[r][0] * wr[0][c] + j[r][1] * wr[1][c] + j[r][2] * wr[2][c];
        }
    }
    let rot = quaternion_to_matrix(prim.rotation);
    let s = prim.scale;
    let mut nmat = [[zero; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            nmat[r][c] = rot[r][c] * s[c];
        }
    }
    let mut cov3 = [[zero; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            cov3[r][c] = nmat[r][0] * nmat[c][0] + nmat[r][1] * nmat[c][1] + nmat[r][2] * nmat[c][2];
        }
    }

    // Σ2 = M Σ3 Mᵀ: G_Σ3 = Mᵀ G_S M, G_M = 2 G_S M Σ3.
    let mut gs_m = [[zero; 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            gs_m[r][c] = gs[r][0] * m[0][c] + gs[r][1] * m[1][c];
        }
    }
    let mut g_cov3 = [[zero; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            g_cov3[r][c] = m[0][r] * gs_m[0][c] + m[1][r] * gs_m[1][c];
        }
    }
    let mut g_m = [[zero; 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            g_m[r][c] = two * (gs_m[r][0] * cov3[0][c] + gs_m[r][1] * cov3[1][c] + gs_m[r][2] * cov3[2][c]);
        }
    }
    // M = J W: G_J = G_M Wᵀ.
    let mut g_j = [[zero; 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            g_j[r][c] = g_m[r][0] * wr[c][0] + g_m[r][1] * wr[c][1] + g_m[r][2] * wr[c][2];
        }
    }

    let (fx, fy) = (cam.focal[0], cam.focal[1]);
    let (tx, ty, tz) = (pc[0], pc[1], pc[2]);
    let iz = T::one() / tz;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let mut g_t = [zero; 3];
    // mean2d
    g_t[0] = g_t[0] + g2.mean[0] * fx * iz;
    g_t[1] = g_t[1] + g2.mean[1] * fy * iz;
    g_t[2] = g_t[2] - g2.mean[0] * fx * tx * iz2 - g2.mean[1] * fy * ty * iz2;
    // Jacobian entries
    g_t[0] = g_t[0] - g_j[0][2] * fx * iz2;
    g_t[1] = g_t[1] - g_j[1][2] * fy * iz2;
    g_t[2] = g_t[2] - g_j[0][0] * fx * iz2 + g_j[0][2] * two * fx * tx * iz3 - g_j[1][1] * fy * iz2
        + g_j[1][2] * two * fy * ty * iz3;

    let mut g_mu = mat3t_vec(wr, g_t);
    let diff = sub3(prim.mu, cam.center());
    let dist = proj.g.view_depth;
    if dist > zero {
        for k in 0..3 {
            g_mu[k] = g_mu[k] + g2.depth * diff[k] / dist;
        }
    }
    out.mu[i] = g_mu;

    // Σ3 = N Nᵀ, N = R S.
    let mut g_n = [[zero; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            g_n[r][c] = two * (g_cov3[r][0] * nmat[0][c] + g_cov3[r][1] * nmat[1][c] + g_cov3[r][2] * nmat[2][c]);
        }
    }
    let mut g_rot = [[zero; 3]; 3];
    for c in 0..3 {
        let mut gsc = zero;
        for r in 0..3 {
            gsc = gsc + g_n[r][c] * rot[r][c];
            g_rot[r][c] = g_n[r][c] * s[c];
        }
        out.scale[i][c] = gsc;
    }
    out.rotation[i] = quaternion_backward(prim.rotation, &g_rot);
}

/// Gradient with respect to the raw quaternion through `q / ‖q‖` and the rotation matrix.
fn quaternion_backward<T: Real>(q: [T; 4], g: &[[T; 3]; 3]) -> [T; 4] {
    let norm = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm);
    let two = T::lit(2.0);
    let four = T::lit(4.0);
    let gw = two * (-z * g[0][1] + y * g[0][2] + z * g[1][0] - x * g[1][2] - y * g[2][0] + x * g[2][1]);
    let gx = two * (y * g[0][1] + z * g[0][2] + y * g[1][0] - w * g[1][2] + z * g[2][0] + w * g[2][1])
        - four * x * (g[1][1] + g[2][2]);
    let gy = two * (x * g[0][1] + w * g[0][2] + x * g[1][0] + z * g[1][2] - w * g[2][0] + z * g[2][1])
        - four * y * (g[0][0] + g[2][2]);
    let gz = two * (-w * g[0][1] + x * g[0][2] + w * g[1][0] + y * g[1][2] + x * g[2][0] + y * g[2][1])
        - four * z * (g[0][0] + g[1][1]);
    let gn = [gw, gx, gy, gz];
    let qn = [w, x, y, z];
    let proj = gn.iter().zip(&qn).fold(T::zero(), |acc, (a, b)| acc + *a * *b);
    [
        (gn[0] - qn[0] * proj) / norm,
        (gn[1] - qn[1] * proj) / norm,
        (gn[2] - qn[2] * proj) / norm,
        (gn[3] - qn[3] * proj) / norm,
    ]
}
