//! Desk-scale ablation harness: variants × scenes × seeds, evaluated on holdout views.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::photometric::{psnr, psnr_capped, ssim, LossWeights};
use crate::raster::{render, DepthMap, RenderOptions};
use crate::synth::{generate_scene, init_scene, SyntheticScene, SyntheticSceneSpec};
use crate::train::{train, DepthSource, TrainConfig, TrainView};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub weights: LossWeights<f64>,
}

impl Variant {
    /// The five Table IV rows: None, +depth, +edge, +tv and Full.
    pub fn standard(base: &LossWeights<f64>) -> Vec<Variant> {
        let none = LossWeights { gamma: 0.0, eta: 0.0, beta: 0.0, phi: 0.0, ..*base };
        let v = |name: &str, weights| Variant { name: name.into(), weights };
        vec![
            v("None", none),
            v("+depth", LossWeights { gamma: base.gamma, eta: base.eta, ..none }),
            v("+edge", LossWeights { beta: base.beta, ..none }),
            v("+tv", LossWeights { phi: base.phi, ..none }),
            v("Full", *base),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub name: String,
    pub spec: SyntheticSceneSpec,
    /// Seed of the ground-truth scene itself (training seeds vary separately).
    pub scene_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationSpec {
    pub variants: Vec<Variant>,
    pub scenes: Vec<SceneEntry>,
    pub seeds: Vec<u64>,
    /// Primitives in the uninformed initialization.
    pub init_primitives: usize,
    pub config: TrainConfig<f64>,
}

impl Default for AblationSpec {
    fn default() -> Self {
        // Standard (Eq. 3) depth feeds L_depth here: the synthetic priors are corrupted
        // standard-depth renders, and the enhanced (Eq. 4) reading mismatches them.
        let config = TrainConfig { depth_mode: DepthSource::Standard, ..TrainConfig::default() };
        let desk = SyntheticSceneSpec::default();
        let blobs = SyntheticSceneSpec { layout: crate::synth::Layout::Blobs, num_primitives: 250, ..desk.clone() };
        Self {
            variants: Variant::standard(&config.weights),
            scenes: vec![
                SceneEntry { name: "desk".into(), spec: desk, scene_seed: 11 },
                SceneEntry { name: "blobs".into(), spec: blobs, scene_seed: 23 },
            ],
            seeds: vec![0, 1, 2],
            init_primitives: 300,
            config,
        }
    }
}

impl AblationSpec {
    pub fn validate(&self) -> Result<()> {
        let mut names: Vec<&str> = self.variants.iter().map(|v| v.name.as_str()).collect();
        names.sort_unstable();
        if names.is_empty() || names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidParameter("variant names must be unique and non-empty".into()));
        }
        if self.scenes.is_empty() || self.seeds.is_empty() {
            return Err(Error::InvalidParameter("need at least one scene and one seed".into()));
        }
        for s in &self.scenes {
            s.spec.validate()?;
        }
        for v in &self.variants {
            v.weights.validate()?;
        }
        self.config.validate()
    }
}

/// Metrics of one trained (variant, scene, seed) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub variant: String,
    pub scene: String,
    pub seed: u64,
    pub psnr: f64,
    pub ssim: f64,
    pub depth_rmse: f64,
    pub seconds: f64,
    /// Set when training aborted; metrics are then NaN.
    pub error: Option<String>,
}

/// Seed-averaged metrics for one (variant, scene) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub variant: String,
    pub scene: String,
    pub psnr: f64,
    pub ssim: f64,
    pub depth_rmse: f64,
    pub completed: usize,
    pub failed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub cells: Vec<CellResult>,
    pub rows: Vec<TableRow>,
}

/// Median-ratio scale alignment followed by RMSE over the reference foreground.
///
/// Both maps are converted to expected depth (`D/ᾱ`) first; pixels where the
/// reference accumulates less than half opacity are ignored.
pub fn aligned_depth_rmse(pred: &DepthMap<f64>, gt: &DepthMap<f64>) -> f64 {
    let expected = |d: &DepthMap<f64>, k: usize| {
        let a = d.accumulated_alpha[k];
        if a > 1e-6 { d.data[k] / a } else { 0.0 }
    };
    let fg: Vec<usize> = (0..gt.data.len()).filter(|&k| gt.accumulated_alpha[k] > 0.5).collect();
    if fg.is_empty() {
        return 0.0;
    }
    let p: Vec<f64> = fg.iter().map(|&k| expected(pred, k)).collect();
    let g: Vec<f64> = fg.iter().map(|&k| expected(gt, k)).collect();
    let median = |v: &[f64]| {
        let mut s = v.to_vec();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) }
    };
    let mp = median(&p);
    let scale = if mp > 0.0 { median(&g) / mp } else { 1.0 };
    let se: f64 = p.iter().zip(&g).map(|(a, b)| (scale * a - b).powi(2)).sum();
    (se / fg.len() as f64).sqrt()
}

/// Trains one cell and evaluates it on the scene's holdout views.
pub fn run_cell(
    data: &SyntheticScene,
    spec: &SyntheticSceneSpec,
    weights: &LossWeights<f64>,
    config: &TrainConfig<f64>,
    init_primitives: usize,
    seed: u64,
) -> Result<(f64, f64, f64)> {
    let views = data
        .train
        .iter()
        .map(|v| TrainView::new(v.camera.clone(), v.image.clone(), Some(v.prior.clone()), config.canny_low, config.canny_high))
        .collect::<Result<Vec<_>>>()?;
    let cfg = TrainConfig { weights: *weights, seed, ..config.clone() };
    let init = init_scene(spec, init_primitives, seed)?;
    let (scene, _) = train(&views, init, &cfg)?;
    let (mut p, mut s, mut d) = (0.0, 0.0, 0.0);
    for v in &data.holdout {
        let out = render(&scene, &v.camera, None, &RenderOptions::default())?;
        p += psnr_capped(psnr(&out.color, &v.image)?);
        s += ssim(&out.color, &v.image)?;
        d += aligned_depth_rmse(&out.depth, &v.depth);
    }
    let n = data.holdout.len() as f64;
    Ok((p / n, s / n, d / n))
}

/// Trains every (variant × scene × seed) cell in parallel; failed cells are recorded, not fatal.
pub fn run_ablation(spec: &AblationSpec) -> Result<AblationReport> {
    spec.validate()?;
    let data: Vec<SyntheticScene> =
        spec.scenes.iter().map(|s| generate_scene(&s.spec, s.scene_seed)).collect::<Result<_>>()?;
    let mut jobs = Vec::new();
    for vi in 0..spec.variants.len() {
        for si in 0..spec.scenes.len() {
            for &seed in &spec.seeds {
                jobs.push((vi, si, seed));
            }
        }
    }
    let cells: Vec<CellResult> = jobs
        .par_iter()
        .map(|&(vi, si, seed)| {
            let variant = &spec.variants[vi];
            let scene = &spec.scenes[si];
            let t = Instant::now();
            let r = run_cell(&data[si], &scene.spec, &variant.weights, &spec.config, spec.init_primitives, seed);
            let (psnr, ssim, depth_rmse, error) = match r {
                Ok((p, s, d)) => (p, s, d, None),
                Err(e) => (f64::NAN, f64::NAN, f64::NAN, Some(e.to_string())),
            };
            CellResult {
                variant: variant.name.clone(),
                scene: scene.name.clone(),
                seed,
                psnr,
                ssim,
                depth_rmse,
                seconds: t.elapsed().as_secs_f64(),
                error,
            }
        })
        .collect();
    let mut rows = Vec::new();
    for v in &spec.variants {
        for s in &spec.scenes {
            let ok: Vec<&CellResult> =
                cells.iter().filter(|c| c.variant == v.name && c.scene == s.name && c.error.is_none()).collect();
            let total = cells.iter().filter(|c| c.variant == v.name && c.scene == s.name).count();
            let mean = |f: fn(&CellResult) -> f64| {
                if ok.is_empty() { f64::NAN } else { ok.iter().map(|c| f(c)).sum::<f64>() / ok.len() as f64 }
            };
            rows.push(TableRow {
                variant: v.name.clone(),
                scene: s.name.clone(),
                psnr: mean(|c| c.psnr),
                ssim: mean(|c| c.ssim),
                depth_rmse: mean(|c| c.depth_rmse),
                completed: ok.len(),
                failed: total - ok.len(),
            });
        }
    }
    Ok(AblationReport { cells, rows })
}

impl AblationReport {
    /// Mean over every completed cell of a variant, across scenes and seeds.
    pub fn variant_mean(&self, variant: &str) -> Option<(f64, f64, f64)> {
        let ok: Vec<&CellResult> = self.cells.iter().filter(|c| c.variant == variant && c.error.is_none()).collect();
        if ok.is_empty() {
            return None;
        }
        let n = ok.len() as f64;
        Some((
            ok.iter().map(|c| c.psnr).sum::<f64>() / n,
            ok.iter().map(|c| c.ssim).sum::<f64>() / n,
            ok.iter().map(|c| c.depth_rmse).sum::<f64>() / n,
        ))
    }

    /// Table IV-style text: one line per (variant, scene) plus per-variant means.
    pub fn to_table(&self) -> String {
        let mut s = format!("{:<8} {:<8} {:>8} {:>7} {:>10} {:>4}\n", "variant", "scene", "PSNR", "SSIM", "depthRMSE", "ok");
        for r in &self.rows {
            s.push_str(&format!(
                "{:<8} {:<8} {:>8.3} {:>7.4} {:>10.5} {:>2}/{}\n",
                r.variant,
                r.scene,
                r.psnr,
                r.ssim,
                r.depth_rmse,
                r.completed,
                r.completed + r.failed
            ));
        }
        let mut seen = Vec::new();
        for r in &self.rows {
            if seen.contains(&r.variant) {
                continue;
            }
            seen.push(r.variant.clone());
            if let Some((p, q, d)) = self.variant_mean(&r.variant) {
                s.push_str(&format!("{:<8} {:<8} {:>8.3} {:>7.4} {:>10.5}\n", r.variant, "mean", p, q, d));
            }
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,scene,seed,psnr,ssim,depth_rmse,seconds,error\n");
        for c in &self.cells {
            s.push_str(&format!(
                "{},{},{},{:e},{:e},{:e},{:.3},{}\n",
                c.variant,
                c.scene,
                c.seed,
                c.psnr,
                c.ssim,
                c.depth_rmse,
                c.seconds,
                c.error.as_deref().unwrap_or("").replace(',', ";")
            ));
        }
        s
    }
}
