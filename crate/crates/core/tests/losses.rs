//! Finite-difference oracles and invariants for the loss terms.

#![allow(clippy::needless_range_loop, clippy::type_complexity)]

mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use splatedge::depth::dead_zone_sq;
use splatedge::edges::canny_stages;
use splatedge::{
    canny, color_loss, depth_loss, dssim_loss, edge_loss, image_normalize, l1_loss, masked_local_mean,
    non_edge_mask, patch_normalize, psnr, ssim, tv_loss, DepthLossConfig, DepthMap, EdgeMask, ImageBuffer,
    PatchGrid,
};

fn random_depth(seed: u64, h: usize, w: usize, lo: f64, hi: f64) -> DepthMap<f64> {
    let mut r = rng(seed);
    DepthMap::from_data(h, w, (0..h * w).map(|_| r.gen_range(lo..hi)).collect()).unwrap()
}

fn random_image(seed: u64, h: usize, w: usize) -> ImageBuffer<f64> {
    let mut r = rng(seed);
    ImageBuffer::from_fn(h, w, |_, _, _| r.gen_range(0.0..1.0))
}

fn fd_vec(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut work = x.to_vec();
    (0..x.len())
        .map(|i| {
            work[i] = x[i] + h;
            let fp = f(&work);
            work[i] = x[i] - h;
            let fm = f(&work);
            work[i] = x[i];
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

#[test]
fn depth_loss_gradient_matches_fd() {
    for (seed, size) in [(1, 4), (2, 5), (3, 7), (4, 3)] {
        let (h, w) = (11, 13);
        let d = random_depth(seed, h, w, 1.0, 4.0);
        let prior = random_depth(seed + 100, h, w, 2.0, 9.0);
        let grid = PatchGrid::new(size, h, w).unwrap();
        let cfg = DepthLossConfig::default();
        let (_, g) = depth_loss(&d, &prior, &grid, &cfg).unwrap();
        let fd = fd_vec(&d.data, 1e-6, |x| {
            depth_loss(&DepthMap::from_data(h, w, x.to_vec()).unwrap(), &prior, &grid, &cfg).unwrap().0
        });
        let err = max_rel_err(&g, &fd, 1e-8);
        assert!(err < 1e-4, "seed {seed} size {size}: {err}");
        // the loss is shift invariant, so the full gradient has zero sum
        let s: f64 = g.iter().sum();
        assert!(s.abs() < 1e-10, "{s}");
    }
}

#[test]
fn stop_statistics_gradient_is_per_pixel_scaled() {
    let (h, w) = (8, 8);
    let d = random_depth(6, h, w, 1.0, 4.0);
    let prior = random_depth(7, h, w, 2.0, 9.0);
    let grid = PatchGrid::new(8, h, w).unwrap();
    // with a single tile and only the patch term, the stopped gradient is γ/N·h'(r)/(σ+δ)
    let cfg = DepthLossConfig { eta: 0.0, stop_statistics: true, ..DepthLossConfig::default() };
    let (l, g) = depth_loss(&d, &prior, &grid, &cfg).unwrap();
    let (l_full, _) = depth_loss(&d, &prior, &grid, &DepthLossConfig { stop_statistics: false, ..cfg }).unwrap();
    assert_eq!(l, l_full);
    let dp = patch_normalize(&d, &grid, 1e-8).unwrap();
    let pp = patch_normalize(&prior, &grid, 1e-8).unwrap();
    let mean = d.data.iter().sum::<f64>() / 64.0;
    let sigma = (d.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0).sqrt();
    for k in 0..64 {
        let (_, dh) = dead_zone_sq(dp.data[k] - pp.data[k], 0.05);
        let expect = 0.1 / 64.0 * dh / (sigma + 1e-8);
        assert!((g[k] - expect).abs() <= 1e-12 * expect.abs().max(1.0));
    }
}

#[test]
fn depth_loss_is_zero_for_affine_prior_and_dead_zone() {
    let d = random_depth(5, 12, 12, 1.0, 3.0);
    let prior = DepthMap::from_data(12, 12, d.data.iter().map(|v| 3.0 * v + 2.0).collect()).unwrap();
    let grid = PatchGrid::new(4, 12, 12).unwrap();
    let (l, g) = depth_loss(&d, &prior, &grid, &DepthLossConfig::default()).unwrap();
    assert!(l.abs() < 1e-20, "{l}");
    assert!(g.iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn dead_zone_shape() {
    assert_eq!(dead_zone_sq(0.04, 0.05), (0.0, 0.0));
    assert_eq!(dead_zone_sq(-0.05, 0.05), (0.0, 0.0));
    let (v, dv) = dead_zone_sq(0.15f64, 0.05);
    assert!((v - 0.01).abs() < 1e-15 && (dv - 0.2).abs() < 1e-15);
    let (v, dv) = dead_zone_sq(-0.25f64, 0.05);
    assert!((v - 0.04).abs() < 1e-15 && (dv + 0.4).abs() < 1e-15);
}

#[test]
fn image_normalization_affine_invariance() {
    let d = random_depth(9, 16, 16, 0.5, 5.0);
    let grid = PatchGrid::new(8, 16, 16).unwrap();
    let base = image_normalize(&d, &grid).unwrap();
    for a in [0.5, 2.0, 10.0] {
        for b in [-3.0, 0.0, 7.5] {
            let t = DepthMap::from_data(16, 16, d.data.iter().map(|v| a * v + b).collect()).unwrap();
            let n = image_normalize(&t, &grid).unwrap();
            for (x, y) in base.data.iter().zip(&n.data) {
                assert!((x - y).abs() <= 1e-9, "a={a} b={b}: {x} vs {y}");
            }
        }
    }
}

#[test]
fn image_normalization_of_constant_is_zero() {
    let d = DepthMap::from_data(6, 6, vec![2.5; 36]).unwrap();
    let n = image_normalize(&d, &PatchGrid::new(3, 6, 6).unwrap()).unwrap();
    assert!(n.data.iter().all(|v| *v == 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn patch_normalization_shift_and_scale(seed in 0u64..10_000, size in 2usize..9, b in -5.0f64..5.0, a in 0.2f64..20.0) {
        let (h, w) = (13, 10);
        let d = random_depth(seed, h, w, 0.5, 4.0);
        let grid = PatchGrid::new(size, h, w).unwrap();
        let delta = 1e-8;
        let base = patch_normalize(&d, &grid, delta).unwrap();
        // shift: tile mean and spread are unaffected up to the rounding of the shifted values
        let shifted = DepthMap::from_data(h, w, d.data.iter().map(|v| v + b).collect()).unwrap();
        let s = patch_normalize(&shifted, &grid, delta).unwrap();
        for (x, y) in base.data.iter().zip(&s.data) {
            prop_assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()));
        }
        // scale: exact up to the δ guard, whose relative effect is δ/(aσ_P)
        let scaled = DepthMap::from_data(h, w, d.data.iter().map(|v| a * v).collect()).unwrap();
        let sc = patch_normalize(&scaled, &grid, delta).unwrap();
        let tiles = grid.tiles();
        for tile in &tiles {
            let vals: Vec<f64> = tile.iter().map(|&i| d.data[i]).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let sigma = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
            let bound = delta / (a * sigma).max(1e-300) + delta / sigma.max(1e-300) + 1e-10;
            for &i in tile {
                let (x, y) = (base.data[i], sc.data[i]);
                prop_assert!((x - y).abs() <= bound * x.abs().max(1.0), "{x} vs {y} bound {bound}");
            }
        }
    }

    #[test]
    fn canny_invariant_under_inversion(seed in 0u64..1000) {
        let mut r = rng(seed);
        let cx = r.gen_range(5.0..15.0);
        let img = ImageBuffer::from_fn(20, 20, |row, col, _| if (col as f64) < cx + 0.3 * row as f64 { 0.1 } else { 0.9 });
        let inv = img.map(|v| 1.0 - v);
        prop_assert_eq!(canny(&img, 20.0, 200.0).unwrap().data, canny(&inv, 20.0, 200.0).unwrap().data);
    }
}

#[test]
fn canny_step_gives_single_connected_line() {
    let img = ImageBuffer::from_fn(32, 32, |_, c, _| if c < 16 { 0.0 } else { 1.0 });
    let m = canny(&img, 20.0, 200.0).unwrap();
    let cols: Vec<usize> = (0..32).filter(|&c| (0..32).any(|r| m.get(r, c) == 1)).collect();
    assert_eq!(cols.len(), 1, "edge columns {cols:?}");
    let c = cols[0];
    assert!(c == 15 || c == 16);
    // rows covered form one contiguous run, excluding the suppressed border ring
    let rows: Vec<usize> = (0..32).filter(|&r| m.get(r, c) == 1).collect();
    assert!(rows.windows(2).all(|w| w[1] == w[0] + 1));
    assert!(rows.len() >= 28);
    let stages = canny_stages(&img, 20.0, 200.0).unwrap();
    assert_eq!(stages.mask, m);
}

#[test]
fn canny_constant_is_empty_and_threshold_monotone() {
    let m = canny(&ImageBuffer::filled(16, 16, [0.4, 0.4, 0.4]), 20.0, 200.0).unwrap();
    assert_eq!(m.count_ones(), 0);
    let img = random_image(3, 24, 24);
    let a = canny(&img, 20.0, 200.0).unwrap();
    let b = canny(&img, 10.0, 200.0).unwrap();
    let c = canny(&img, 20.0, 100.0).unwrap();
    for i in 0..a.data.len() {
        assert!(a.data[i] <= b.data[i]);
        assert!(a.data[i] <= c.data[i]);
    }
}

#[test]
fn edge_loss_gradient_matches_fd() {
    let (h, w) = (9, 10);
    let d = random_depth(11, h, w, 1.0, 5.0);
    let mut r = rng(12);
    let m = EdgeMask::from_data(h, w, (0..h * w).map(|_| u8::from(r.gen_bool(0.7))).collect()).unwrap();
    let (_, g) = edge_loss(&d, &m, 1e-8).unwrap();
    let fd = fd_vec(&d.data, 1e-6, |x| edge_loss(&DepthMap::from_data(h, w, x.to_vec()).unwrap(), &m, 1e-8).unwrap().0);
    let err = max_rel_err(&g, &fd, 1e-8);
    assert!(err < 1e-5, "{err}");
}

#[test]
fn edge_loss_null_cases() {
    let d = random_depth(13, 8, 8, 1.0, 5.0);
    let (l, g) = edge_loss(&d, &EdgeMask::zeros(8, 8), 1e-8).unwrap();
    assert_eq!(l, 0.0);
    assert!(g.iter().all(|v| *v == 0.0));
    let flat = DepthMap::from_data(8, 8, vec![3.0; 64]).unwrap();
    let (l, _) = edge_loss(&flat, &EdgeMask::ones(8, 8), 1e-8).unwrap();
    // local mean is 3·n/(n+ε); the residual is at most 3·ε/n per pixel
    assert!(l <= (3.0f64 * 1e-8 / 3.0).powi(2), "{l}");
    let mean = masked_local_mean(&flat, &EdgeMask::ones(8, 8), 1e-8).unwrap();
    assert!(mean.data.iter().all(|v| (v - 3.0).abs() < 1e-7));
}

#[test]
fn non_edge_mask_inverts() {
    let e = EdgeMask::from_data(2, 2, vec![1, 0, 0, 1]).unwrap();
    assert_eq!(non_edge_mask(&e).data, vec![0, 1, 1, 0]);
}

#[test]
fn tv_gradient_matches_fd_away_from_kinks() {
    let (h, w) = (7, 8);
    let pred = random_image(21, h, w);
    // smooth reference so every mask entry is active
    let gt = ImageBuffer::from_fn(h, w, |r, c, ch| 0.3 + 0.001 * (r + c + ch) as f64);
    let (_, g) = tv_loss(&pred, &gt, 1e-2, 1e-4).unwrap();
    let fd = fd_vec(&pred.data, 1e-7, |x| {
        let p = ImageBuffer { height: h, width: w, data: x.to_vec() };
        tv_loss(&p, &gt, 1e-2, 1e-4).unwrap().0
    });
    assert!(max_rel_err(&g.data, &fd, 1e-8) < 1e-5);
}

#[test]
fn tv_masks_edges_out() {
    let gt = ImageBuffer::from_fn(6, 6, |_, c, _| if c < 3 { 0.0 } else { 1.0 });
    // prediction copies the step: only the masked-out edge has a large difference
    let (l, _) = tv_loss(&gt, &gt, 1e-2, 1e-4).unwrap();
    assert_eq!(l, 0.0);
}

#[test]
fn photometric_gradients_match_fd() {
    let (h, w) = (14, 15);
    let pred = random_image(31, h, w);
    let gt = random_image(32, h, w);
    let mk = |x: &[f64]| ImageBuffer { height: h, width: w, data: x.to_vec() };
    let (_, g) = dssim_loss(&pred, &gt).unwrap();
    let fd = fd_vec(&pred.data, 1e-6, |x| dssim_loss(&mk(x), &gt).unwrap().0);
    assert!(max_rel_err(&g.data, &fd, 1e-9) < 1e-5);
    let (_, g) = l1_loss(&pred, &gt).unwrap();
    let fd = fd_vec(&pred.data, 1e-7, |x| l1_loss(&mk(x), &gt).unwrap().0);
    assert!(max_rel_err(&g.data, &fd, 1e-9) < 1e-5);
    let (_, g) = color_loss(&pred, &gt, 0.2).unwrap();
    let fd = fd_vec(&pred.data, 1e-6, |x| color_loss(&mk(x), &gt, 0.2).unwrap().0);
    assert!(max_rel_err(&g.data, &fd, 1e-9) < 1e-5);
}

#[test]
fn ssim_and_psnr_basics() {
    let a = random_image(41, 16, 16);
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    assert!(psnr(&a, &a).unwrap().is_infinite());
    let b = a.map(|v| v + 0.1);
    assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    let (l, _) = color_loss(&a, &a, 0.2).unwrap();
    assert!(l.abs() < 1e-12);
    assert!(ssim(&a, &ImageBuffer::new(8, 8)).is_err());
}
