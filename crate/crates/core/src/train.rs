//! Objective assembly, the optimization loop and gradient verification.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::depth::{depth_loss, DepthLossConfig, PatchGrid};
use crate::edges::{canny, edge_loss, non_edge_mask, EdgeMask, CANNY_HIGH, CANNY_LOW};
use crate::error::{check_shape, Error, Result};
use crate::gaussian::{Camera, Scene};
use crate::optim::{Adam, LearningRates};
use crate::photometric::{color_loss, psnr, LossWeights};
use crate::raster::{render, render_vjp_multi, Cotangents, DepthMap, ImageBuffer, RenderGradients, RenderOptions};
use crate::scalar::Real;
use crate::tv::tv_loss;

/// Depth definition fed to the depth supervision term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DepthSource {
    Standard,
    Enhanced,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, bound = "T: Real + Serialize + serde::de::DeserializeOwned")]
pub struct TrainConfig<T> {
    pub iterations: usize,
    pub lr: LearningRates<T>,
    pub weights: LossWeights<T>,
    pub depth_every: usize,
    /// Inclusive range for the patch size drawn at each depth-supervised step.
    pub patch_range: (usize, usize),
    pub depth_mode: DepthSource,
    pub seed: u64,
    pub prune_opacity_below: Option<T>,
    pub prune_every: usize,
    pub edge_every: usize,
    pub tv_every: usize,
    /// Treat the rendered map's normalization statistics as constants.
    pub stop_statistics: bool,
    pub canny_low: T,
    pub canny_high: T,
}

impl<T: Real> Default for TrainConfig<T> {
    fn default() -> Self {
        Self {
            iterations: 1500,
            lr: LearningRates::default(),
            weights: LossWeights::default(),
            depth_every: 5,
            patch_range: (5, 20),
            depth_mode: DepthSource::Enhanced,
            seed: 0,
            prune_opacity_below: Some(T::lit(0.005)),
            prune_every: 500,
            edge_every: 1,
            tv_every: 1,
            stop_statistics: false,
            canny_low: T::lit(CANNY_LOW),
            canny_high: T::lit(CANNY_HIGH),
        }
    }
}

impl<T: Real> TrainConfig<T> {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.depth_every < 1 || self.edge_every < 1 || self.tv_every < 1 || self.prune_every < 1 {
            return Err(Error::InvalidParameter("term schedules must be at least 1".into()));
        }
        let (lo, hi) = self.patch_range;
        if lo < 1 || lo > hi {
            return Err(Error::InvalidParameter(format!("invalid patch range ({lo}, {hi})")));
        }
        Ok(())
    }
}

/// One training view. The non-edge mask is derived from the reference image once.
#[derive(Clone, Debug)]
pub struct TrainView<T> {
    pub camera: Camera<T>,
    pub image: ImageBuffer<T>,
    pub prior: Option<DepthMap<T>>,
    pub non_edge: EdgeMask,
}

impl<T: Real> TrainView<T> {
    pub fn new(camera: Camera<T>, image: ImageBuffer<T>, prior: Option<DepthMap<T>>, low: T, high: T) -> Result<Self> {
        check_shape(camera.resolution(), image.resolution())?;
        if let Some(p) = &prior {
            check_shape(camera.resolution(), p.resolution())?;
        }
        let non_edge = non_edge_mask(&canny(&image, low, high)?);
        Ok(Self { camera, image, prior, non_edge })
    }
}

/// Per-term losses of one objective evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport<T> {
    pub iteration: usize,
    pub view: usize,
    pub color: T,
    /// Present only on depth-supervised steps.
    pub depth: Option<T>,
    pub edge: Option<T>,
    pub tv: Option<T>,
    pub total: T,
    pub psnr: T,
    pub patch_size: Option<usize>,
}

/// Which terms an evaluation includes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TermSwitches<T> {
    pub depth: Option<(PatchGrid, DepthSource)>,
    pub edge: bool,
    pub tv: bool,
    pub stop_statistics: bool,
    pub opts: RenderOptions<T>,
}

#[derive(Clone, Debug)]
pub struct Evaluation<T> {
    pub report: LossReport<T>,
    pub gradients: RenderGradients<T>,
}

/// `L_color + L_depth + β·L_edge + φ·L_tv` with parameter gradients.
pub fn evaluate<T: Real>(
    scene: &Scene<T>,
    view: &TrainView<T>,
    weights: &LossWeights<T>,
    sw: &TermSwitches<T>,
) -> Result<Evaluation<T>> {
    let cam = &view.camera;
    check_shape(cam.resolution(), view.image.resolution())?;
    let enhanced_omega = match sw.depth {
        Some((_, DepthSource::Enhanced)) => Some(weights.omega),
        _ => None,
    };
    let out = render(scene, cam, enhanced_omega, &sw.opts)?;
    let (h, w) = cam.resolution();

    let (l_color, mut g_color) = color_loss(&out.color, &view.image, weights.lambda_dssim)?;
    let mut g_depth = vec![T::zero(); h * w];
    let mut g_enh: Option<Vec<T>> = None;

    let mut l_depth = None;
    let mut patch_size = None;
    if let Some((grid, source)) = sw.depth {
        let prior = view.prior.as_ref().ok_or(Error::MissingPrior)?;
        let cfg = DepthLossConfig {
            gamma: weights.gamma,
            eta: weights.eta,
            tolerance: weights.tolerance,
            delta: weights.delta,
            stop_statistics: sw.stop_statistics,
        };
        let rendered = match source {
            DepthSource::Standard => &out.depth,
            DepthSource::Enhanced => out.enhanced_depth.as_ref().expect("requested"),
        };
        let (l, g) = depth_loss(rendered, prior, &grid, &cfg)?;
        match source {
            DepthSource::Standard => g_depth = g,
            DepthSource::Enhanced => g_enh = Some(g),
        }
        l_depth = Some(l);
        patch_size = Some(grid.patch_size);
    }

    let mut l_edge = None;
    if sw.edge {
        let (l, g) = edge_loss(&out.depth, &view.non_edge, weights.epsilon)?;
        for (a, b) in g_depth.iter_mut().zip(&g) {
            *a = *a + weights.beta * *b;
        }
        l_edge = Some(l);
    }

    let mut l_tv = None;
    if sw.tv {
        let (l, g) = tv_loss(&out.color, &view.image, weights.tau_edge, weights.tau_smooth)?;
        for (a, b) in g_color.data.iter_mut().zip(&g.data) {
            *a = *a + weights.phi * *b;
        }
        l_tv = Some(l);
    }

    let total = l_color
        + l_depth.unwrap_or(T::zero())
        + weights.beta * l_edge.unwrap_or(T::zero())
        + weights.phi * l_tv.unwrap_or(T::zero());

    let cot = Cotangents {
        color: Some(&g_color),
        depth: Some(&g_depth),
        enhanced_depth: g_enh.as_deref().map(|g| (g, weights.omega)),
    };
    let gradients = render_vjp_multi(scene, cam, &cot, &sw.opts)?;
    let report = LossReport {
        iteration: 0,
        view: 0,
        color: l_color,
        depth: l_depth,
        edge: l_edge,
        tv: l_tv,
        total,
        psnr: psnr(&out.color, &view.image)?,
        patch_size,
    };
    Ok(Evaluation { report, gradients })
}

/// Full objective with every regularizer active; depth only when `apply_depth`.
pub fn total_loss<T: Real>(
    scene: &Scene<T>,
    cam: &Camera<T>,
    gt_image: &ImageBuffer<T>,
    prior_depth: Option<&DepthMap<T>>,
    weights: &LossWeights<T>,
    grid: &PatchGrid,
    apply_depth: bool,
    depth_mode: DepthSource,
) -> Result<Evaluation<T>> {
    if apply_depth && prior_depth.is_none() {
        return Err(Error::MissingPrior);
    }
    let view = TrainView::new(
        cam.clone(),
        gt_image.clone(),
        prior_depth.cloned(),
        T::lit(CANNY_LOW),
        T::lit(CANNY_HIGH),
    )?;
    let sw = TermSwitches {
        depth: apply_depth.then_some((*grid, depth_mode)),
        edge: true,
        tv: true,
        stop_statistics: false,
        opts: RenderOptions::default(),
    };
    evaluate(scene, &view, weights, &sw)
}

/// Optimizer state carried between steps.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub scene: Scene<T>,
    pub iteration: usize,
    pub history: Vec<LossReport<T>>,
    pub adam: Adam<T>,
    rng: ChaCha8Rng,
    view_order: Vec<usize>,
}

impl<T: Real> TrainState<T> {
    pub fn new(scene: Scene<T>, seed: u64) -> Self {
        let n = scene.len();
        Self {
            scene,
            iteration: 0,
            history: Vec::new(),
            adam: Adam::new(n),
            rng: ChaCha8Rng::seed_from_u64(seed),
            view_order: Vec::new(),
        }
    }

    /// Index of the view used by the next step: seeded shuffles, visited round-robin.
    pub fn next_view(&mut self, num_views: usize) -> usize {
        let k = self.iteration % num_views;
        if k == 0 || self.view_order.len() != num_views {
            self.view_order = (0..num_views).collect();
            self.view_order.shuffle(&mut self.rng);
        }
        self.view_order[k]
    }
}

fn check_finite<T: Real>(r: &LossReport<T>) -> Result<()> {
    let iteration = r.iteration;
    let terms = [("color", Some(r.color)), ("depth", r.depth), ("edge", r.edge), ("tv", r.tv), ("total", Some(r.total))];
    for (term, v) in terms {
        if let Some(v) = v {
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss { term, iteration });
            }
        }
    }
    Ok(())
}

/// One Adam step on `view`. Iterations count from 1.
pub fn train_step<T: Real>(
    state: &mut TrainState<T>,
    view: &TrainView<T>,
    view_index: usize,
    config: &TrainConfig<T>,
) -> Result<LossReport<T>> {
    let it = state.iteration + 1;
    let w = &config.weights;
    let depth_on = it.is_multiple_of(config.depth_every) && (w.gamma > T::zero() || w.eta > T::zero());
    let depth = if depth_on {
        let (lo, hi) = config.patch_range;
        let size = state.rng.gen_range(lo..=hi);
        let (h, wd) = view.camera.resolution();
        Some((PatchGrid::new(size, h, wd)?, config.depth_mode))
    } else {
        None
    };
    let sw = TermSwitches {
        depth,
        edge: w.beta > T::zero() && it.is_multiple_of(config.edge_every),
        tv: w.phi > T::zero() && it.is_multiple_of(config.tv_every),
        stop_statistics: config.stop_statistics,
        opts: RenderOptions::default(),
    };
    let mut eval = evaluate(&state.scene, view, w, &sw)?;
    eval.report.iteration = it;
    eval.report.view = view_index;
    check_finite(&eval.report)?;

    state.adam.update(&mut state.scene, &eval.gradients, &config.lr);
    state.iteration = it;

    if let Some(threshold) = config.prune_opacity_below {
        if it.is_multiple_of(config.prune_every) {
            let keep: Vec<bool> = state.scene.primitives.iter().map(|p| p.opacity >= threshold).collect();
            if keep.iter().any(|k| *k) && keep.iter().any(|k| !*k) {
                state.adam.retain(&keep);
                let mut i = 0;
                state.scene.primitives.retain(|_| {
                    let k = keep[i];
                    i += 1;
                    k
                });
            }
        }
    }
    state.history.push(eval.report.clone());
    Ok(eval.report)
}

/// Runs `config.iterations` steps over `views` and returns the final scene and history.
pub fn train<T: Real>(
    views: &[TrainView<T>],
    init_scene: Scene<T>,
    config: &TrainConfig<T>,
) -> Result<(Scene<T>, Vec<LossReport<T>>)> {
    if views.is_empty() {
        return Err(Error::InvalidParameter("training needs at least one view".into()));
    }
    config.validate()?;
    let mut state = TrainState::new(init_scene, config.seed);
    for _ in 0..config.iterations {
        let v = state.next_view(views.len());
        train_step(&mut state, &views[v], v, config)?;
    }
    Ok((state.scene, state.history))
}

/// Worst finite-difference disagreement for one loss term.
#[derive(Clone, Debug, PartialEq)]
pub struct TermCheck {
    pub term: &'static str,
    pub max_rel_err: f64,
    pub checked: usize,
    /// Parameters whose ±h probes crossed a kink and were excluded.
    pub skipped: usize,
    pub max_abs_grad: f64,
    /// Largest raw |analytic − finite difference| among checked parameters.
    pub max_abs_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub terms: Vec<TermCheck>,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.terms.iter().map(|t| t.max_rel_err).fold(0.0, f64::max)
    }
}

fn set_param<T: Real>(scene: &mut Scene<T>, i: usize, k: usize, v: T) {
    let p = &mut scene.primitives[i];
    match k {
        0..=2 => p.mu[k] = v,
        3..=5 => p.scale[k - 3] = v,
        6..=9 => p.rotation[k - 6] = v,
        10 => p.opacity = v,
        _ => p.color[k - 11] = v,
    }
}

fn get_param<T: Real>(scene: &Scene<T>, i: usize, k: usize) -> T {
    let p = &scene.primitives[i];
    match k {
        0..=2 => p.mu[k],
        3..=5 => p.scale[k - 3],
        6..=9 => p.rotation[k - 6],
        10 => p.opacity,
        _ => p.color[k - 11],
    }
}

/// Piecewise-smooth state of every kinked quantity entering the objective.
fn kink_signature<T: Real>(
    scene: &Scene<T>,
    view: &TrainView<T>,
    weights: &LossWeights<T>,
    sw: &TermSwitches<T>,
) -> Result<Vec<i64>> {
    let omega = match sw.depth {
        Some((_, DepthSource::Enhanced)) => Some(weights.omega),
        _ => None,
    };
    let out = render(scene, &view.camera, omega, &sw.opts)?;
    let mut sig: Vec<i64> = out.signature.iter().map(|&v| v as i64).collect();
    let sign = |v: T| if v > T::zero() { 1 } else if v < T::zero() { -1 } else { 0 };
    for (p, g) in out.color.data.iter().zip(&view.image.data) {
        sig.push(sign(*p - *g));
    }
    for c in scene.primitives.iter().flat_map(|p| p.color) {
        sig.push(i64::from(c >= T::zero() && c <= T::one()));
    }
    if sw.tv {
        let g = crate::tv::directional_gradients(&out.color)?;
        for v in g.horizontal.iter().chain(&g.vertical) {
            let e = v.abs() - weights.tau_smooth;
            sig.push(if e > T::zero() { sign(*v) } else { 2 });
        }
    }
    if let Some((grid, source)) = sw.depth {
        let prior = view.prior.as_ref().ok_or(Error::MissingPrior)?;
        let rendered = match source {
            DepthSource::Standard => &out.depth,
            DepthSource::Enhanced => out.enhanced_depth.as_ref().expect("requested"),
        };
        let pairs = [
            (
                crate::depth::patch_normalize(rendered, &grid, weights.delta)?,
                crate::depth::patch_normalize(prior, &grid, weights.delta)?,
            ),
            (crate::depth::image_normalize(rendered, &grid)?, crate::depth::image_normalize(prior, &grid)?),
        ];
        for (a, b) in &pairs {
            for (x, y) in a.data.iter().zip(&b.data) {
                let r = *x - *y;
                sig.push(if r.abs() > weights.tolerance { sign(r) } else { 2 });
            }
        }
    }
    Ok(sig)
}

/// Compares analytic gradients with central differences, one loss term at a time.
///
/// A parameter is excluded for a term when its `±h` probes land in different
/// smooth pieces (dead zones, sign changes, footprint cutoff, alpha clamp).
pub fn check_gradients<T: Real>(
    scene: &Scene<T>,
    view: &TrainView<T>,
    weights: &LossWeights<T>,
    grid: &PatchGrid,
    depth_source: DepthSource,
    h: f64,
) -> Result<GradCheckReport> {
    let zero = T::zero();
    let only = |color: bool, depth: bool, edge: bool, tv: bool| {
        let w = LossWeights {
            gamma: if depth { weights.gamma } else { zero },
            eta: if depth { weights.eta } else { zero },
            beta: if edge { weights.beta } else { zero },
            phi: if tv { weights.phi } else { zero },
            ..*weights
        };
        let sw = TermSwitches {
            depth: depth.then_some((*grid, depth_source)),
            edge,
            tv,
            stop_statistics: false,
            opts: RenderOptions::default(),
        };
        (w, sw, color)
    };
    let cases: Vec<(&'static str, (LossWeights<T>, TermSwitches<T>, bool))> = vec![
        ("color", only(true, false, false, false)),
        ("depth", only(false, true, false, false)),
        ("edge", only(false, false, true, false)),
        ("tv", only(false, false, false, true)),
        ("total", only(true, true, true, true)),
    ];

    let mut terms = Vec::new();
    for (name, (w, sw, with_color)) in cases {
        let value = |s: &Scene<T>| -> Result<T> {
            let e = evaluate(s, view, &w, &sw)?;
            let r = e.report;
            let mut v = r.depth.unwrap_or(zero) + w.beta * r.edge.unwrap_or(zero) + w.phi * r.tv.unwrap_or(zero);
            if with_color {
                v = v + r.color;
            }
            Ok(v)
        };
        let analytic = {
            let mut e = evaluate(scene, view, &w, &sw)?;
            if !with_color {
                // strip the photometric contribution by re-running with color cotangent removed
                e.gradients = gradient_without_color(scene, view, &w, &sw)?;
            }
            e.gradients
        };
        let flat = analytic.flatten();
        let base_sig = kink_signature(scene, view, &w, &sw)?;
        let mut work = scene.clone();
        let mut max_err = 0.0f64;
        let mut max_abs_err = 0.0f64;
        let mut checked = 0;
        let mut skipped = 0;
        for i in 0..scene.len() {
            for k in 0..14 {
                let base = get_param(scene, i, k);
                let step = T::lit(h) * base.abs().max(T::one());
                set_param(&mut work, i, k, base + step);
                let sp = kink_signature(&work, view, &w, &sw)?;
                let fp = value(&work)?;
                set_param(&mut work, i, k, base - step);
                let sm = kink_signature(&work, view, &w, &sw)?;
                let fm = value(&work)?;
                set_param(&mut work, i, k, base);
                if sp != base_sig || sm != base_sig {
                    skipped += 1;
                    continue;
                }
                let fd = ((fp - fm) / (step + step)).as_f64();
                let an = flat[i * 14 + k].as_f64();
                let diff = (fd - an).abs();
                max_abs_err = max_abs_err.max(diff);
                let err = if diff <= 1e-6 { 0.0 } else { diff / fd.abs().max(an.abs()) };
                max_err = max_err.max(err);
                checked += 1;
            }
        }
        let max_abs_grad = flat.iter().map(|v| v.as_f64().abs()).fold(0.0, f64::max);
        terms.push(TermCheck { term: name, max_rel_err: max_err, checked, skipped, max_abs_grad, max_abs_err });
    }
    Ok(GradCheckReport { terms })
}

fn gradient_without_color<T: Real>(
    scene: &Scene<T>,
    view: &TrainView<T>,
    w: &LossWeights<T>,
    sw: &TermSwitches<T>,
) -> Result<RenderGradients<T>> {
    let full = evaluate(scene, view, w, sw)?.gradients;
    let color_only = TermSwitches { depth: None, edge: false, tv: false, ..*sw };
    let c = evaluate(scene, view, w, &color_only)?.gradients;
    let mut out = full;
    let sub3 = |a: &mut [T; 3], b: &[T; 3]| {
        for k in 0..3 {
            a[k] = a[k] - b[k];
        }
    };
    for i in 0..out.len() {
        sub3(&mut out.mu[i], &c.mu[i]);
        sub3(&mut out.scale[i], &c.scale[i]);
        sub3(&mut out.color[i], &c.color[i]);
        for k in 0..4 {
            out.rotation[i][k] = out.rotation[i][k] - c.rotation[i][k];
        }
        out.opacity[i] = out.opacity[i] - c.opacity[i];
    }
    Ok(out)
}
