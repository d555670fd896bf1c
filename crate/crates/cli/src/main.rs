//! `splatedge` command-line entry point.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error. The worker thread
//! count comes from `SPLATEDGE_THREADS` (default: all cores).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use splatedge::ablation::AblationSpec;
use splatedge::edges::canny;
use splatedge::io;
use splatedge::optim::Adam;
use splatedge::synth::{generate_scene, init_scene, SyntheticSceneSpec};
use splatedge::train::{check_gradients, train_step, DepthSource, TrainConfig, TrainState, TrainView};
use splatedge::{psnr, render, run_ablation, LossWeights, PatchGrid, RenderOptions, Scene};

pub const THREADS_ENV: &str = "SPLATEDGE_THREADS";

#[derive(Parser)]
#[command(name = "splatedge", version, about = "Depth- and edge-regularized Gaussian splatting at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a scene from a camera to PNG or PFM.
    Render(RenderArgs),
    /// Optimize a scene against a dataset directory.
    Train(TrainArgs),
    /// Canny edge mask of a PNG image.
    Edges(EdgesArgs),
    /// Compare analytic and finite-difference gradients per loss term.
    CheckGrad(CheckGradArgs),
    /// Run the variant × scene × seed ablation and print the table.
    Ablate(AblateArgs),
    /// Generate a synthetic ground-truth dataset directory.
    MakeScene(MakeSceneArgs),
}

/// Per-weight and schedule overrides shared by the training commands.
#[derive(Args, Clone, Default)]
struct Overrides {
    /// Training seed (view order, patch sizes, initialization).
    #[arg(long)]
    seed: Option<u64>,
    /// Patch-scale depth weight γ.
    #[arg(long)]
    gamma: Option<f64>,
    /// Image-scale depth weight η.
    #[arg(long)]
    eta: Option<f64>,
    /// Edge-aware depth smoothing weight β.
    #[arg(long)]
    beta: Option<f64>,
    /// Edge-preserving TV weight φ.
    #[arg(long)]
    phi: Option<f64>,
    /// D-SSIM mix λ in the color loss.
    #[arg(long)]
    lambda: Option<f64>,
    /// Enhanced opacity ω.
    #[arg(long)]
    omega: Option<f64>,
    /// Ground-truth gradient above which TV is not applied.
    #[arg(long)]
    tau_edge: Option<f64>,
    /// TV dead zone on predicted gradients.
    #[arg(long)]
    tau_smooth: Option<f64>,
    /// Dead-zone tolerance on normalized depth residuals.
    #[arg(long)]
    tolerance: Option<f64>,
    /// Smallest random depth patch size.
    #[arg(long)]
    patch_min: Option<usize>,
    /// Largest random depth patch size.
    #[arg(long)]
    patch_max: Option<usize>,
    /// Apply the depth loss every N iterations.
    #[arg(long)]
    depth_every: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Depth fed to L_depth: standard (Eq. 3) or enhanced (Eq. 4).
    #[arg(long, value_parser = parse_depth_source)]
    depth_mode: Option<DepthSource>,
}

fn parse_depth_source(s: &str) -> std::result::Result<DepthSource, String> {
    match s {
        "standard" => Ok(DepthSource::Standard),
        "enhanced" => Ok(DepthSource::Enhanced),
        _ => Err(format!("expected 'standard' or 'enhanced', got '{s}'")),
    }
}

impl Overrides {
    fn apply_weights(&self, w: &mut LossWeights<f64>) {
        let set = |dst: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *dst = v;
            }
        };
        set(&mut w.gamma, self.gamma);
        set(&mut w.eta, self.eta);
        set(&mut w.beta, self.beta);
        set(&mut w.phi, self.phi);
        set(&mut w.lambda_dssim, self.lambda);
        set(&mut w.omega, self.omega);
        set(&mut w.tau_edge, self.tau_edge);
        set(&mut w.tau_smooth, self.tau_smooth);
        set(&mut w.tolerance, self.tolerance);
    }

    fn apply(&self, c: &mut TrainConfig<f64>) {
        self.apply_weights(&mut c.weights);
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(v) = self.patch_min {
            c.patch_range.0 = v;
        }
        if let Some(v) = self.patch_max {
            c.patch_range.1 = v;
        }
        if let Some(v) = self.depth_every {
            c.depth_every = v;
        }
        if let Some(v) = self.iterations {
            c.iterations = v;
        }
        if let Some(v) = self.depth_mode {
            c.depth_mode = v;
        }
    }
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    camera: PathBuf,
    /// Color output; `.pfm` writes float PF, anything else PNG.
    #[arg(long)]
    out: PathBuf,
    /// Optional standard-depth output (PFM).
    #[arg(long)]
    depth_out: Option<PathBuf>,
    /// Optional enhanced-depth output (PFM), rendered with `--omega`.
    #[arg(long)]
    enhanced_out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.99)]
    omega: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory containing views.json.
    #[arg(long)]
    data: PathBuf,
    /// JSON TrainConfig; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Starting scene; defaults to a random initialization.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Primitive count of the random initialization.
    #[arg(long, default_value_t = 300)]
    init_primitives: usize,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Write scene + optimizer moments every N iterations (0 disables).
    #[arg(long, default_value_t = 500)]
    checkpoint_every: usize,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct EdgesArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20.0)]
    low: f64,
    #[arg(long, default_value_t = 200.0)]
    high: f64,
}

#[derive(Args)]
struct CheckGradArgs {
    /// Scene to check; defaults to a random one from `--seed`.
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long, requires_all = ["image", "scene"])]
    camera: Option<PathBuf>,
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long)]
    prior: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    primitives: usize,
    #[arg(long, default_value_t = 16)]
    resolution: usize,
    #[arg(long, default_value_t = 6)]
    patch_size: usize,
    /// Relative finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Exit 2 when any term exceeds this relative error.
    #[arg(long, default_value_t = 1e-3)]
    max_rel_err: f64,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct AblateArgs {
    /// JSON AblationSpec; defaults to the desk-scale reference spec.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Comma-separated training seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, default_value = "ablation")]
    out_dir: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct MakeSceneArgs {
    /// JSON SyntheticSceneSpec; defaults to the desk layout.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "scene")]
    out_dir: PathBuf,
    #[arg(long)]
    primitives: Option<usize>,
    /// `H` or `HxW`.
    #[arg(long)]
    resolution: Option<String>,
}

fn parse_resolution(s: &str) -> Result<(usize, usize)> {
    let parts: Vec<&str> = s.split(['x', 'X']).collect();
    let v = parts.iter().map(|p| p.trim().parse::<usize>()).collect::<std::result::Result<Vec<_>, _>>()?;
    match v.as_slice() {
        [n] => Ok((*n, *n)),
        [h, w] => Ok((*h, *w)),
        _ => bail!("resolution must be N or HxW"),
    }
}

fn write_color(path: &Path, img: &splatedge::ImageBuffer<f64>) -> Result<()> {
    let is_pfm = path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("pfm"));
    if is_pfm {
        io::write_color_pfm(path, img)?;
    } else {
        io::write_png(path, img)?;
    }
    Ok(())
}

fn cmd_render(a: RenderArgs) -> Result<()> {
    let scene = io::read_scene(&a.scene).with_context(|| format!("reading {}", a.scene.display()))?;
    let cam = io::read_camera(&a.camera).with_context(|| format!("reading {}", a.camera.display()))?;
    let omega = a.enhanced_out.as_ref().map(|_| a.omega);
    let out = render(&scene, &cam, omega, &RenderOptions::default())?;
    write_color(&a.out, &out.color)?;
    if let Some(p) = &a.depth_out {
        io::write_depth_pfm(p, &out.depth)?;
    }
    if let (Some(p), Some(d)) = (&a.enhanced_out, &out.enhanced_depth) {
        io::write_depth_pfm(p, d)?;
    }
    Ok(())
}

fn load_config(path: Option<&PathBuf>) -> Result<TrainConfig<f64>> {
    match path {
        Some(p) => io::read_json(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(TrainConfig::default()),
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_ref())?;
    a.overrides.apply(&mut cfg);
    cfg.validate()?;
    let (train_views, holdout) = io::read_dataset(&a.data).with_context(|| format!("reading {}", a.data.display()))?;
    if train_views.is_empty() {
        bail!("dataset has no training views");
    }
    let views = train_views
        .into_iter()
        .map(|v| TrainView::new(v.camera, v.image, v.prior, cfg.canny_low, cfg.canny_high))
        .collect::<splatedge::Result<Vec<_>>>()?;
    let init = match &a.init {
        Some(p) => io::read_scene(p)?,
        None => {
            // background is a capture setting, taken from the default rig
            init_scene(&SyntheticSceneSpec::default(), a.init_primitives, cfg.seed)?
        }
    };
    std::fs::create_dir_all(&a.out_dir)?;
    io::write_json(a.out_dir.join("config.json"), &cfg)?;
    let mut state = TrainState::new(init, cfg.seed);
    for _ in 0..cfg.iterations {
        let v = state.next_view(views.len());
        train_step(&mut state, &views[v], v, &cfg)?;
        if a.checkpoint_every > 0 && state.iteration % a.checkpoint_every == 0 {
            save_checkpoint(&a.out_dir, &format!("checkpoint_{:06}", state.iteration), &state.scene, &state.adam)?;
        }
    }
    save_checkpoint(&a.out_dir, "final", &state.scene, &state.adam)?;
    io::write_history_csv(a.out_dir.join("history.csv"), &state.history)?;
    if let Some(last) = state.history.last() {
        println!("iteration {} total {:.6} train PSNR {:.3}", last.iteration, last.total, last.psnr);
    }
    if !holdout.is_empty() {
        let mut sum = 0.0;
        for v in &holdout {
            let out = render(&state.scene, &v.camera, None, &RenderOptions::default())?;
            sum += splatedge::photometric::psnr_capped(psnr(&out.color, &v.image)?);
        }
        println!("holdout PSNR {:.3} over {} views", sum / holdout.len() as f64, holdout.len());
    }
    Ok(())
}

fn save_checkpoint(dir: &Path, stem: &str, scene: &Scene<f64>, adam: &Adam<f64>) -> Result<()> {
    io::write_scene(dir.join(format!("{stem}.scene.json")), scene)?;
    io::write_json(dir.join(format!("{stem}.adam.json")), adam)?;
    Ok(())
}

fn cmd_edges(a: EdgesArgs) -> Result<()> {
    let img = io::read_png(&a.image).with_context(|| format!("reading {}", a.image.display()))?;
    let mask = canny(&img, a.low, a.high)?;
    io::write_mask_png(&a.out, &mask)?;
    println!("{} edge pixels", mask.count_ones());
    Ok(())
}

fn cmd_check_grad(a: CheckGradArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_ref())?;
    a.overrides.apply(&mut cfg);
    cfg.validate()?;
    let (scene, view) = match (&a.scene, &a.camera, &a.image) {
        (Some(s), Some(c), Some(i)) => {
            let cam = io::read_camera(c)?;
            let img = io::read_png(i)?;
            let prior = a.prior.as_ref().map(io::read_depth_pfm).transpose()?;
            (io::read_scene(s)?, TrainView::new(cam, img, prior, cfg.canny_low, cfg.canny_high)?)
        }
        (None, None, None) => random_instance(a.primitives, a.resolution, cfg.seed, &cfg)?,
        _ => bail!("--scene, --camera and --image must be given together"),
    };
    if view.prior.is_none() {
        bail!("gradient check of the depth term needs --prior");
    }
    let (h, w) = view.camera.resolution();
    let grid = PatchGrid::new(a.patch_size, h, w)?;
    let report = check_gradients(&scene, &view, &cfg.weights, &grid, cfg.depth_mode, a.step)?;
    println!("{:<6} {:>12} {:>12} {:>8} {:>8}", "term", "max_rel_err", "max_abs_err", "checked", "skipped");
    for t in &report.terms {
        println!("{:<6} {:>12.3e} {:>12.3e} {:>8} {:>8}", t.term, t.max_rel_err, t.max_abs_err, t.checked, t.skipped);
    }
    if report.worst() > a.max_rel_err {
        bail!("relative error {:.3e} exceeds {:.1e}", report.worst(), a.max_rel_err);
    }
    Ok(())
}

fn random_instance(n: usize, res: usize, seed: u64, cfg: &TrainConfig<f64>) -> Result<(Scene<f64>, TrainView<f64>)> {
    let spec = SyntheticSceneSpec {
        layout: splatedge::synth::Layout::Blobs,
        num_primitives: n + 2,
        resolution: (res, res),
        extent: 0.8,
        ..SyntheticSceneSpec::default()
    };
    let data = generate_scene(&spec, seed)?;
    let mut scene = generate_scene(&SyntheticSceneSpec { num_primitives: n, ..spec.clone() }, seed + 1)?.scene;
    scene.background = data.scene.background;
    let v = &data.train[0];
    let view = TrainView::new(v.camera.clone(), v.image.clone(), Some(v.prior.clone()), cfg.canny_low, cfg.canny_high)?;
    Ok((scene, view))
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let mut spec: AblationSpec = match &a.spec {
        Some(p) => io::read_json(p).with_context(|| format!("reading spec {}", p.display()))?,
        None => AblationSpec::default(),
    };
    a.overrides.apply(&mut spec.config);
    for v in &mut spec.variants {
        // weight overrides only touch terms a variant already enables
        let mut w = v.weights;
        a.overrides.apply_weights(&mut w);
        let keep = |on: bool, x: f64| if on { x } else { 0.0 };
        v.weights = LossWeights {
            gamma: keep(v.weights.gamma > 0.0, w.gamma),
            eta: keep(v.weights.eta > 0.0, w.eta),
            beta: keep(v.weights.beta > 0.0, w.beta),
            phi: keep(v.weights.phi > 0.0, w.phi),
            ..w
        };
    }
    if let Some(s) = a.seeds {
        spec.seeds = s;
    }
    let report = run_ablation(&spec)?;
    std::fs::create_dir_all(&a.out_dir)?;
    std::fs::write(a.out_dir.join("table.txt"), report.to_table())?;
    std::fs::write(a.out_dir.join("cells.csv"), report.to_csv())?;
    io::write_json(a.out_dir.join("spec.json"), &spec)?;
    print!("{}", report.to_table());
    let failed = report.cells.iter().filter(|c| c.error.is_some()).count();
    if failed > 0 {
        eprintln!("{failed} cell(s) failed; see cells.csv");
    }
    Ok(())
}

fn cmd_make_scene(a: MakeSceneArgs) -> Result<()> {
    let mut spec: SyntheticSceneSpec = match &a.spec {
        Some(p) => io::read_json(p).with_context(|| format!("reading spec {}", p.display()))?,
        None => SyntheticSceneSpec::default(),
    };
    if let Some(n) = a.primitives {
        spec.num_primitives = n;
    }
    if let Some(r) = &a.resolution {
        spec.resolution = parse_resolution(r)?;
    }
    let data = generate_scene(&spec, a.seed)?;
    io::write_dataset(&a.out_dir, &data)?;
    io::write_json(a.out_dir.join("spec.json"), &spec)?;
    println!(
        "{} primitives, {} train + {} holdout views in {}",
        data.scene.len(),
        data.train.len(),
        data.holdout.len(),
        a.out_dir.display()
    );
    Ok(())
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.parse().with_context(|| format!("{THREADS_ENV} must be a positive integer"))?;
        if n == 0 {
            bail!("{THREADS_ENV} must be a positive integer");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Render(a) => cmd_render(a),
        Command::Train(a) => cmd_train(a),
        Command::Edges(a) => cmd_edges(a),
        Command::CheckGrad(a) => cmd_check_grad(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::MakeScene(a) => cmd_make_scene(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
