//! Objective assembly, schedule, optimizer and end-to-end gradient checks.

mod common;

use common::*;
use splatedge::synth::corrupt_depth;
use splatedge::train::TermSwitches;
use splatedge::{
    check_gradients, evaluate, render, render_color, render_depth, total_loss, train, train_step, DepthSource,
    Error, LearningRates, LossWeights, PatchGrid, RenderOptions, Scene, TrainConfig, TrainState, TrainView,
};

struct Fixture {
    scene: Scene<f64>,
    view: TrainView<f64>,
}

fn fixture(seed: u64, n: usize, res: usize) -> Fixture {
    let mut r = rng(seed);
    let target = random_scene(&mut r, n + 2, 0.6);
    let scene = random_scene(&mut r, n, 0.6);
    let cam = front_camera(res, res, res as f64, 5.0);
    let gt = render_color(&target, &cam).unwrap();
    let prior = corrupt_depth(&render_depth(&target, &cam).unwrap(), 2.0, 0.5, 0.0, seed).unwrap();
    let view = TrainView::new(cam, gt, Some(prior), 20.0, 200.0).unwrap();
    Fixture { scene, view }
}

#[test]
fn every_term_matches_finite_differences() {
    for (seed, source) in [(1, DepthSource::Standard), (2, DepthSource::Enhanced), (3, DepthSource::Standard)] {
        let f = fixture(seed, 4, 16);
        let grid = PatchGrid::new(5, 16, 16).unwrap();
        let report = check_gradients(&f.scene, &f.view, &LossWeights::default(), &grid, source, 1e-5).unwrap();
        for t in &report.terms {
            eprintln!("seed {seed} {source:?} {t:?}");
            assert!(t.checked > 0, "{} checked nothing", t.term);
            assert!(t.max_rel_err <= 1e-3, "seed {seed} {:?}: {t:?}", source);
        }
        assert_eq!(report.terms.len(), 5);
    }
}

#[test]
fn zero_weight_regularizers_give_zero_gradients() {
    let f = fixture(4, 4, 16);
    let grid = PatchGrid::new(5, 16, 16).unwrap();
    let w = LossWeights { gamma: 0.0, eta: 0.0, beta: 0.0, phi: 0.0, ..LossWeights::default() };
    let report = check_gradients(&f.scene, &f.view, &w, &grid, DepthSource::Standard, 1e-5).unwrap();
    for t in &report.terms {
        if t.term != "color" && t.term != "total" {
            assert_eq!(t.max_abs_grad, 0.0, "{t:?}");
        }
    }
}

#[test]
fn total_is_weighted_sum_of_terms() {
    let f = fixture(5, 5, 16);
    let w = LossWeights::default();
    let grid = PatchGrid::new(6, 16, 16).unwrap();
    let e = total_loss(&f.scene, &f.view.camera, &f.view.image, f.view.prior.as_ref(), &w, &grid, true, DepthSource::Enhanced)
        .unwrap();
    let r = e.report;
    let expect = r.color + r.depth.unwrap() + w.beta * r.edge.unwrap() + w.phi * r.tv.unwrap();
    assert_eq!(r.total, expect);
    assert_eq!(r.patch_size, Some(6));
    let no_depth = total_loss(&f.scene, &f.view.camera, &f.view.image, None, &w, &grid, false, DepthSource::Standard).unwrap();
    assert!(no_depth.report.depth.is_none());
    assert!(matches!(
        total_loss(&f.scene, &f.view.camera, &f.view.image, None, &w, &grid, true, DepthSource::Standard),
        Err(Error::MissingPrior)
    ));
}

#[test]
fn perfect_fit_has_zero_color_only_loss() {
    let mut r = rng(6);
    let scene = random_scene(&mut r, 3, 0.5);
    let cam = front_camera(16, 16, 16.0, 5.0);
    let gt = render_color(&scene, &cam).unwrap();
    let view = TrainView::new(cam, gt, None, 20.0, 200.0).unwrap();
    let sw = TermSwitches { depth: None, edge: false, tv: false, stop_statistics: false, opts: RenderOptions::default() };
    let e = evaluate(&scene, &view, &LossWeights::color_only(), &sw).unwrap();
    assert_eq!(e.report.total, 0.0);
}

#[test]
fn depth_schedule_and_patch_sizes() {
    let f = fixture(7, 6, 24);
    let cfg = TrainConfig { iterations: 40, seed: 3, ..TrainConfig::default() };
    let (_, hist) = train(std::slice::from_ref(&f.view), f.scene.clone(), &cfg).unwrap();
    assert_eq!(hist.len(), 40);
    for (k, r) in hist.iter().enumerate() {
        assert_eq!(r.iteration, k + 1);
        assert_eq!(r.depth.is_some(), r.iteration % 5 == 0, "iteration {}", r.iteration);
        assert_eq!(r.patch_size.is_some(), r.depth.is_some());
        if let Some(p) = r.patch_size {
            assert!((5..=20).contains(&p));
        }
    }
}

#[test]
fn frozen_optimizer_and_empty_loop_leave_scene_unchanged() {
    let f = fixture(8, 4, 16);
    let cfg = TrainConfig { iterations: 7, lr: LearningRates::zero(), prune_opacity_below: None, ..TrainConfig::default() };
    let (scene, hist) = train(std::slice::from_ref(&f.view), f.scene.clone(), &cfg).unwrap();
    assert_eq!(scene, f.scene);
    assert_eq!(hist.len(), 7);
    let cfg = TrainConfig { iterations: 0, ..TrainConfig::default() };
    let (scene, hist) = train(std::slice::from_ref(&f.view), f.scene.clone(), &cfg).unwrap();
    assert_eq!(scene, f.scene);
    assert!(hist.is_empty());
}

#[test]
fn training_is_bitwise_deterministic() {
    let f = fixture(9, 6, 20);
    let views = vec![f.view.clone(), fixture(10, 6, 20).view];
    let cfg = TrainConfig { iterations: 30, seed: 42, ..TrainConfig::default() };
    let a = train(&views, f.scene.clone(), &cfg).unwrap();
    let b = train(&views, f.scene.clone(), &cfg).unwrap();
    assert_eq!(a.1, b.1);
    assert_eq!(a.0, b.0);
    let c = train(&views, f.scene.clone(), &TrainConfig { seed: 43, ..cfg }).unwrap();
    assert_ne!(a.1, c.1);
}

#[test]
fn quaternions_stay_normalized() {
    let f = fixture(11, 6, 16);
    let cfg = TrainConfig { iterations: 1, ..TrainConfig::default() };
    let mut state = TrainState::new(f.scene.clone(), 0);
    for _ in 0..20 {
        train_step(&mut state, &f.view, 0, &cfg).unwrap();
        for p in &state.scene.primitives {
            let n: f64 = p.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }
    assert_eq!(state.iteration, 20);
    assert_eq!(state.history.len(), 20);
}

#[test]
fn overfits_a_single_view() {
    let mut r = rng(12);
    let target = random_scene(&mut r, 5, 0.6);
    let cam = front_camera(24, 24, 24.0, 5.0);
    let gt = render_color(&target, &cam).unwrap();
    let view = TrainView::new(cam.clone(), gt.clone(), None, 20.0, 200.0).unwrap();
    let mut init = target.clone();
    for p in &mut init.primitives {
        p.mu[0] += 0.1;
        p.color = [0.5; 3];
        p.opacity = 0.5;
    }
    let cfg = TrainConfig {
        iterations: 600,
        weights: LossWeights::color_only(),
        lr: LearningRates { mu: 4e-3, color: 1e-2, ..LearningRates::default() },
        ..TrainConfig::default()
    };
    let (scene, _) = train(&[view], init, &cfg).unwrap();
    let out = render(&scene, &cam, None, &RenderOptions::default()).unwrap();
    let p = splatedge::psnr(&out.color, &gt).unwrap();
    assert!(p >= 30.0, "psnr {p}");
}

#[test]
fn non_finite_loss_names_the_term() {
    let f = fixture(13, 3, 16);
    let mut view = f.view.clone();
    view.image.data[5] = f64::NAN;
    let cfg = TrainConfig { iterations: 1, ..TrainConfig::default() };
    match train(&[view], f.scene.clone(), &cfg) {
        Err(Error::NonFiniteLoss { term, iteration }) => {
            assert_eq!(term, "color");
            assert_eq!(iteration, 1);
        }
        other => panic!("expected NonFiniteLoss, got {other:?}"),
    }
}

#[test]
fn missing_prior_on_depth_step_is_an_error() {
    let f = fixture(14, 3, 16);
    let mut view = f.view.clone();
    view.prior = None;
    let cfg = TrainConfig { iterations: 5, ..TrainConfig::default() };
    assert!(matches!(train(&[view], f.scene.clone(), &cfg), Err(Error::MissingPrior)));
}

#[test]
fn config_validation() {
    let bad = TrainConfig::<f64> { patch_range: (6, 5), ..TrainConfig::default() };
    assert!(bad.validate().is_err());
    let bad = TrainConfig::<f64> { depth_every: 0, ..TrainConfig::default() };
    assert!(bad.validate().is_err());
    let json = serde_json::to_string(&TrainConfig::<f64>::default()).unwrap();
    let back: TrainConfig<f64> = serde_json::from_str(&json).unwrap();
    assert_eq!(back, TrainConfig::default());
    let partial: TrainConfig<f64> = serde_json::from_str(r#"{"iterations": 10}"#).unwrap();
    assert_eq!(partial.iterations, 10);
    assert_eq!(partial.depth_every, 5);
}

#[test]
fn pure_l1_descent_is_non_increasing_with_small_steps() {
    let f = fixture(15, 4, 16);
    let w = LossWeights { lambda_dssim: 0.0, ..LossWeights::color_only() };
    let lr = LearningRates { mu: 1e-4, scale: 1e-4, rotation: 1e-4, opacity: 1e-3, color: 2e-4 };
    let cfg = TrainConfig { iterations: 60, weights: w, lr, prune_opacity_below: None, ..TrainConfig::default() };
    let (_, hist) = train(std::slice::from_ref(&f.view), f.scene.clone(), &cfg).unwrap();
    for win in hist.chunks(10).collect::<Vec<_>>().windows(2) {
        assert!(win[1].last().unwrap().total <= win[0].last().unwrap().total, "window increased");
    }
    assert!(hist.last().unwrap().total < hist[0].total);
}
