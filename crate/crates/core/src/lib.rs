//! Differentiable CPU Gaussian splatting with depth and edge-aware regularizers.
//!
//! Every numeric type is generic over [`Real`] (`f32` or `f64`); the `*64`/`*32`
//! aliases below name the common instantiations.

// `!(x > 0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Per-channel index loops mirror the equations; signatures follow the spec.
#![allow(clippy::needless_range_loop, clippy::too_many_arguments, clippy::type_complexity)]

pub mod ablation;
pub mod depth;
pub mod edges;
pub mod error;
pub mod gaussian;
pub mod io;
pub mod optim;
pub mod photometric;
pub mod raster;
pub mod scalar;
pub mod synth;
pub mod train;
pub mod tv;

pub use error::{Error, Result};
pub use gaussian::{
    covariance_from_scale_rotation, eval_gaussian_2d, project_gaussian, Camera, Covariance3D,
    Gaussian2D, GaussianPrimitive, Scene,
};
pub use raster::{
    render, render_color, render_depth, render_depth_enhanced, render_vjp, render_vjp_multi,
    Cotangents, DepthMap, DepthMode, ImageBuffer, RenderGradients, RenderOptions, RenderOutput,
};
pub use ablation::{run_ablation, AblationReport, AblationSpec, Variant};
pub use depth::{depth_loss, image_normalize, patch_normalize, DepthLossConfig, PatchGrid};
pub use edges::{canny, edge_loss, masked_local_mean, non_edge_mask, EdgeMask};
pub use optim::{Adam, LearningRates};
pub use photometric::{color_loss, dssim_loss, l1_loss, psnr, ssim, LossWeights};
pub use scalar::Real;
pub use train::{
    check_gradients, evaluate, total_loss, train, train_step, DepthSource, GradCheckReport, LossReport,
    TermSwitches, TrainConfig, TrainState, TrainView,
};
pub use synth::{corrupt_depth, generate_scene, init_scene, SyntheticSceneSpec};
pub use tv::{directional_gradients, gradient_masks, tv_loss};

pub type Scene64 = Scene<f64>;
pub type Scene32 = Scene<f32>;
pub type Camera64 = Camera<f64>;
pub type Camera32 = Camera<f32>;
pub type Image64 = ImageBuffer<f64>;
pub type Image32 = ImageBuffer<f32>;
pub type Depth64 = DepthMap<f64>;
pub type Depth32 = DepthMap<f32>;
