//! Gaussian primitives, pinhole cameras and EWA projection to screen space.
//!
//! Pixel `(row, col)` samples the image plane at `x = col`, `y = row`.
//! Cameras follow the x-right, y-down, z-forward convention.

use crate::error::{Error, Result};
use crate::scalar::{
    all_finite, cross3, mat3_mul, mat3_transpose, mat3_vec, mat3t_vec, norm3, normalize3, sub3,
    Mat3, Real, Vec2, Vec3,
};

/// Variance added to the projected covariance diagonal, in px².
pub const LOW_PASS: f64 = 0.3;
/// Camera-space depth below which a primitive is culled.
pub const Z_NEAR: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPrimitive<T> {
    pub mu: Vec3<T>,
    pub scale: Vec3<T>,
    /// Unit quaternion `(w, x, y, z)`.
    pub rotation: [T; 4],
    pub opacity: T,
    pub color: Vec3<T>,
}

impl<T: Real> GaussianPrimitive<T> {
    pub fn is_finite(&self) -> bool {
        all_finite(&self.mu)
            && all_finite(&self.scale)
            && all_finite(&self.rotation)
            && self.opacity.is_finite()
            && all_finite(&self.color)
    }

    pub fn covariance(&self) -> Result<Covariance3D<T>> {
        covariance_from_scale_rotation(self.scale, self.rotation)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene<T> {
    pub primitives: Vec<GaussianPrimitive<T>>,
    pub background: Vec3<T>,
}

impl<T: Real> Scene<T> {
    pub fn new(primitives: Vec<GaussianPrimitive<T>>, background: Vec3<T>) -> Self {
        Self { primitives, background }
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    /// Fails on an empty scene or on the first primitive with a non-finite field.
    pub fn validate(&self) -> Result<()> {
        if self.primitives.is_empty() {
            return Err(Error::EmptyScene);
        }
        for (index, p) in self.primitives.iter().enumerate() {
            if !p.is_finite() {
                return Err(Error::NonFinitePrimitive { index });
            }
            let qn = p.rotation.iter().fold(T::zero(), |a, v| a + *v * *v);
            if p.scale.iter().any(|s| !(*s > T::zero()))
                || !(qn > T::zero())
                || !(p.opacity >= T::zero() && p.opacity <= T::one())
            {
                return Err(Error::InvalidParameter(format!(
                    "primitive {index}: scale must be positive, rotation non-zero, opacity in [0, 1]"
                )));
            }
        }
        if !all_finite(&self.background) {
            return Err(Error::InvalidParameter("non-finite background".into()));
        }
        Ok(())
    }
}

/// Symmetric positive semi-definite 3×3 covariance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Covariance3D<T> {
    pub matrix: Mat3<T>,
}

/// Rotation matrix of the normalized quaternion `(w, x, y, z)`.
pub fn quaternion_to_matrix<T: Real>(q: [T; 4]) -> Mat3<T> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    let one = T::one();
    let two = T::lit(2.0);
    [
        [
            one - two * (y * y + z * z),
            two * (x * y - w * z),
            two * (x * z + w * y),
        ],
        [
            two * (x * y + w * z),
            one - two * (x * x + z * z),
            two * (y * z - w * x),
        ],
        [
            two * (x * z - w * y),
            two * (y * z + w * x),
            one - two * (x * x + y * y),
        ],
    ]
}

/// `R diag(s)² Rᵀ` for the rotation `R` of `rotation`.
pub fn covariance_from_scale_rotation<T: Real>(
    scale: Vec3<T>,
    rotation: [T; 4],
) -> Result<Covariance3D<T>> {
    if !all_finite(&scale) || !all_finite(&rotation) {
        return Err(Error::InvalidParameter("non-finite scale or rotation".into()));
    }
    let qn = rotation.iter().fold(T::zero(), |acc, &v| acc + v * v);
    if qn <= T::zero() {
        return Err(Error::InvalidParameter("zero quaternion".into()));
    }
    let r = quaternion_to_matrix(rotation);
    let mut m = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = r[i][j] * scale[j];
        }
    }
    let mut out = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in i..3 {
            let v = m[i][0] * m[j][0] + m[i][1] * m[j][1] + m[i][2] * m[j][2];
            out[i][j] = v;
            out[j][i] = v;
        }
    }
    Ok(Covariance3D { matrix: out })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Camera<T> {
    /// World-to-camera rotation.
    pub rotation: Mat3<T>,
    /// World-to-camera translation.
    pub translation: Vec3<T>,
    pub focal: Vec2<T>,
    pub principal_point: Vec2<T>,
    pub height: usize,
    pub width: usize,
}

impl<T: Real> Camera<T> {
    pub fn new(
        rotation: Mat3<T>,
        translation: Vec3<T>,
        focal: Vec2<T>,
        principal_point: Vec2<T>,
        resolution: (usize, usize),
    ) -> Result<Self> {
        let (height, width) = resolution;
        if height == 0 || width == 0 {
            return Err(Error::InvalidParameter("camera resolution must be at least 1x1".into()));
        }
        if !all_finite(&translation) || !all_finite(&focal) || !all_finite(&principal_point) {
            return Err(Error::InvalidParameter("non-finite camera intrinsics or pose".into()));
        }
        let rrt = mat3_mul(&rotation, &mat3_transpose(&rotation));
        let tol = T::lit(1e-6);
        for (i, row) in rrt.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                let target = if i == j { T::one() } else { T::zero() };
                if !((v - target).abs() <= tol) {
                    return Err(Error::InvalidParameter("pose rotation is not orthonormal".into()));
                }
            }
        }
        Ok(Self { rotation, translation, focal, principal_point, height, width })
    }

    /// Builds a camera from a row-major 4×4 world-to-camera matrix.
    pub fn from_pose_matrix(
        pose: &[[T; 4]; 4],
        focal: Vec2<T>,
        principal_point: Vec2<T>,
        resolution: (usize, usize),
    ) -> Result<Self> {
        let rotation = [
            [pose[0][0], pose[0][1], pose[0][2]],
            [pose[1][0], pose[1][1], pose[1][2]],
            [pose[2][0], pose[2][1], pose[2][2]],
        ];
        let translation = [pose[0][3], pose[1][3], pose[2][3]];
        Self::new(rotation, translation, focal, principal_point, resolution)
    }

    pub fn pose_matrix(&self) -> [[T; 4]; 4] {
        let r = &self.rotation;
        let t = &self.translation;
        let (z, o) = (T::zero(), T::one());
        [
            [r[0][0], r[0][1], r[0][2], t[0]],
            [r[1][0], r[1][1], r[1][2], t[1]],
            [r[2][0], r[2][1], r[2][2], t[2]],
            [z, z, z, o],
        ]
    }

    /// Camera at `eye` looking at `target`; `up` is the world up direction.
    pub fn look_at(
        eye: Vec3<T>,
        target: Vec3<T>,
        up: Vec3<T>,
        focal: Vec2<T>,
        principal_point: Vec2<T>,
        resolution: (usize, usize),
    ) -> Result<Self> {
        let forward = normalize3(sub3(target, eye));
        let right = normalize3(cross3(forward, up));
        let down = cross3(forward, right);
        if !all_finite(&forward) || !all_finite(&right) {
            return Err(Error::InvalidParameter("degenerate look-at frame".into()));
        }
        let rotation = [right, down, forward];
        let re = mat3_vec(&rotation, eye);
        let translation = [-re[0], -re[1], -re[2]];
        Self::new(rotation, translation, focal, principal_point, resolution)
    }

    /// Camera center `o` in world coordinates.
    pub fn center(&self) -> Vec3<T> {
        let c = mat3t_vec(&self.rotation, self.translation);
        [-c[0], -c[1], -c[2]]
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn world_to_camera(&self, p: Vec3<T>) -> Vec3<T> {
        let r = mat3_vec(&self.rotation, p);
        [r[0] + self.translation[0], r[1] + self.translation[1], r[2] + self.translation[2]]
    }

    /// Pinhole projection of a camera-space point to pixel coordinates.
    pub fn project_point(&self, pc: Vec3<T>) -> Vec2<T> {
        [
            self.focal[0] * pc[0] / pc[2] + self.principal_point[0],
            self.focal[1] * pc[1] / pc[2] + self.principal_point[1],
        ]
    }

    /// Jacobian of [`Camera::project_point`] at a camera-space point.
    pub fn projection_jacobian(&self, pc: Vec3<T>) -> [[T; 3]; 2] {
        let iz = T::one() / pc[2];
        let iz2 = iz * iz;
        [
            [self.focal[0] * iz, T::zero(), -self.focal[0] * pc[0] * iz2],
            [T::zero(), self.focal[1] * iz, -self.focal[1] * pc[1] * iz2],
        ]
    }
}

/// Screen-space footprint of a primitive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gaussian2D<T> {
    pub mean2d: Vec2<T>,
    /// Covariance `[xx, xy, yy]` in px², low-pass term included.
    pub cov2d: [T; 3],
    /// Inverse covariance `[xx, xy, yy]`.
    pub conic: [T; 3],
    /// `‖μ − o‖₂`.
    pub view_depth: T,
    /// Camera-space center.
    pub cam_point: Vec3<T>,
}

impl<T: Real> Gaussian2D<T> {
    /// Mahalanobis form `dᵀ Σ⁻¹ d` at `pixel`.
    #[inline]
    pub fn power(&self, pixel: Vec2<T>) -> T {
        let dx = pixel[0] - self.mean2d[0];
        let dy = pixel[1] - self.mean2d[1];
        self.conic[0] * dx * dx + T::lit(2.0) * self.conic[1] * dx * dy + self.conic[2] * dy * dy
    }

    /// Half extents of the axis-aligned box containing the `k`-sigma ellipse.
    pub fn extent(&self, k: T) -> Vec2<T> {
        [k * self.cov2d[0].sqrt(), k * self.cov2d[2].sqrt()]
    }
}

/// `J W Σ Wᵀ Jᵀ` with `W` the pose rotation, before the low-pass term.
pub(crate) fn projected_covariance<T: Real>(
    cov3: &Mat3<T>,
    cam: &Camera<T>,
    pc: Vec3<T>,
) -> [T; 3] {
    let j = cam.projection_jacobian(pc);
    let w = &cam.rotation;
    // m = J W, 2x3
    let mut m = [[T::zero(); 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            m[r][c] = j[r][0] * w[0][c] + j[r][1] * w[1][c] + j[r][2] * w[2][c];
        }
    }
    let mut ms = [[T::zero(); 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            ms[r][c] = m[r][0] * cov3[0][c] + m[r][1] * cov3[1][c] + m[r][2] * cov3[2][c];
        }
    }
    let xx = ms[0][0] * m[0][0] + ms[0][1] * m[0][1] + ms[0][2] * m[0][2];
    let xy = ms[0][0] * m[1][0] + ms[0][1] * m[1][1] + ms[0][2] * m[1][2];
    let yy = ms[1][0] * m[1][0] + ms[1][1] * m[1][1] + ms[1][2] * m[1][2];
    [xx, xy, yy]
}

/// EWA projection. `None` means the primitive is culled.
pub fn project_gaussian<T: Real>(p: &GaussianPrimitive<T>, cam: &Camera<T>) -> Option<Gaussian2D<T>> {
    let pc = cam.world_to_camera(p.mu);
    if !(pc[2] > T::lit(Z_NEAR)) {
        return None;
    }
    let cov3 = p.covariance().ok()?;
    let raw = projected_covariance(&cov3.matrix, cam, pc);
    let lp = T::lit(LOW_PASS);
    let cov2d = [raw[0] + lp, raw[1], raw[2] + lp];
    let det = cov2d[0] * cov2d[2] - cov2d[1] * cov2d[1];
    if !(det > T::zero()) || !det.is_finite() {
        return None;
    }
    let conic = [cov2d[2] / det, -cov2d[1] / det, cov2d[0] / det];
    Some(Gaussian2D {
        mean2d: cam.project_point(pc),
        cov2d,
        conic,
        view_depth: norm3(sub3(p.mu, cam.center())),
        cam_point: pc,
    })
}

/// `exp(−½ (x − m)ᵀ Σ⁻¹ (x − m))` evaluated from the stored covariance.
pub fn eval_gaussian_2d<T: Real>(g: &Gaussian2D<T>, pixel: Vec2<T>) -> Result<T> {
    let [a, b, c] = g.cov2d;
    let det = a * c - b * b;
    if !(det > T::zero()) || !det.is_finite() {
        return Err(Error::SingularCovariance);
    }
    let dx = pixel[0] - g.mean2d[0];
    let dy = pixel[1] - g.mean2d[1];
    let q = (c * dx * dx - T::lit(2.0) * b * dx * dy + a * dy * dy) / det;
    Ok((-T::lit(0.5) * q).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_cam(h: usize, w: usize) -> Camera<f64> {
        Camera::new(
            [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            [0.0; 3],
            [50.0, 50.0],
            [w as f64 / 2.0, h as f64 / 2.0],
            (h, w),
        )
        .unwrap()
    }

    // Independent quaternion -> matrix route through Rodrigues' formula.
    fn rodrigues(q: [f64; 4]) -> Mat3<f64> {
        let n = (q.iter().map(|v| v * v).sum::<f64>()).sqrt();
        let q = [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
        let s = (q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
        if s == 0.0 {
            return [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        }
        let angle = 2.0 * s.atan2(q[0]);
        let k = [q[1] / s, q[2] / s, q[3] / s];
        let (sn, cs) = angle.sin_cos();
        let kx = [[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]];
        let kx2 = mat3_mul(&kx, &kx);
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                r[i][j] = if i == j { 1.0 } else { 0.0 } + sn * kx[i][j] + (1.0 - cs) * kx2[i][j];
            }
        }
        r
    }

    #[test]
    fn covariance_identity_and_axis_scaling() {
        let c = covariance_from_scale_rotation([1.0, 1.0, 1.0], [1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(c.matrix, [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        let c = covariance_from_scale_rotation([2.0, 1.0, 1.0], [1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(c.matrix, [[4.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
    }

    #[test]
    fn covariance_matches_rodrigues_oracle() {
        let h = std::f64::consts::FRAC_PI_4;
        let q = [h.cos(), 0.0, 0.0, h.sin()];
        let s = [2.0, 1.0, 0.5];
        let c = covariance_from_scale_rotation(s, q).unwrap();
        let r = rodrigues(q);
        for i in 0..3 {
            for j in 0..3 {
                let mut v = 0.0;
                for k in 0..3 {
                    v += r[i][k] * s[k] * s[k] * r[j][k];
                }
                assert!((c.matrix[i][j] - v).abs() <= 1e-12, "{i}{j}");
            }
        }
        // 90 deg about z swaps the x and y variances.
        assert!((c.matrix[0][0] - 1.0).abs() < 1e-12);
        assert!((c.matrix[1][1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn non_finite_scale_is_rejected() {
        assert!(covariance_from_scale_rotation([f64::NAN, 1.0, 1.0], [1.0, 0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn optical_axis_projects_to_principal_point() {
        let cam = identity_cam(16, 20);
        let p = GaussianPrimitive {
            mu: [0.0, 0.0, 4.0],
            scale: [0.1; 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity: 0.5,
            color: [1.0, 0.0, 0.0],
        };
        let g = project_gaussian(&p, &cam).unwrap();
        assert_eq!(g.mean2d, cam.principal_point);
        assert!((g.view_depth - 4.0).abs() < 1e-15);
    }

    #[test]
    fn behind_camera_is_culled() {
        let cam = identity_cam(8, 8);
        let mut p = GaussianPrimitive {
            mu: [0.0, 0.0, -1.0],
            scale: [0.1; 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity: 0.5,
            color: [1.0; 3],
        };
        assert!(project_gaussian(&p, &cam).is_none());
        p.mu[2] = 0.0;
        assert!(project_gaussian(&p, &cam).is_none());
    }

    #[test]
    fn cov2d_matches_finite_difference_jacobian() {
        let cam = Camera::look_at(
            [0.3, -0.2, -4.0],
            [0.1, 0.1, 0.0],
            [0.0, -1.0, 0.0],
            [40.0, 45.0],
            [15.5, 16.0],
            (32, 32),
        )
        .unwrap();
        let p = GaussianPrimitive {
            mu: [0.4, -0.3, 0.2],
            scale: [0.3, 0.1, 0.2],
            rotation: [0.9, 0.2, -0.3, 0.1],
            opacity: 0.5,
            color: [0.5; 3],
        };
        let g = project_gaussian(&p, &cam).unwrap();
        // numerical Jacobian of world point -> pixel, which equals J W
        let h = 1e-5;
        let mut jw = [[0.0; 3]; 2];
        for k in 0..3 {
            let mut a = p.mu;
            let mut b = p.mu;
            a[k] += h;
            b[k] -= h;
            let pa = cam.project_point(cam.world_to_camera(a));
            let pb = cam.project_point(cam.world_to_camera(b));
            jw[0][k] = (pa[0] - pb[0]) / (2.0 * h);
            jw[1][k] = (pa[1] - pb[1]) / (2.0 * h);
        }
        let s = p.covariance().unwrap().matrix;
        let mut cov = [[0.0; 2]; 2];
        for r in 0..2 {
            for c in 0..2 {
                for i in 0..3 {
                    for j in 0..3 {
                        cov[r][c] += jw[r][i] * s[i][j] * jw[c][j];
                    }
                }
            }
        }
        let expect = [cov[0][0] + LOW_PASS, cov[0][1], cov[1][1] + LOW_PASS];
        for k in 0..3 {
            let rel = (g.cov2d[k] - expect[k]).abs() / expect[k].abs().max(1e-12);
            assert!(rel <= 1e-4, "entry {k}: {} vs {}", g.cov2d[k], expect[k]);
        }
    }

    #[test]
    fn eval_gaussian_closed_forms() {
        let g = Gaussian2D {
            mean2d: [3.0, 4.0],
            cov2d: [1.0, 0.0, 1.0],
            conic: [1.0, 0.0, 1.0],
            view_depth: 1.0,
            cam_point: [0.0, 0.0, 1.0],
        };
        assert_eq!(eval_gaussian_2d(&g, [3.0, 4.0]).unwrap(), 1.0);
        let v = eval_gaussian_2d(&g, [4.0, 4.0]).unwrap();
        assert!((v - (-0.5f64).exp()).abs() < 1e-15);
        let bad = Gaussian2D { cov2d: [1.0, 1.0, 1.0], ..g };
        assert!(matches!(eval_gaussian_2d(&bad, [0.0, 0.0]), Err(Error::SingularCovariance)));
    }

    #[test]
    fn eval_gaussian_matches_direct_inverse() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let l: [[f64; 2]; 2] = [[rng.gen_range(0.2..3.0), 0.0], [rng.gen_range(-2.0..2.0), rng.gen_range(0.2..3.0)]];
            let a = l[0][0] * l[0][0];
            let b = l[0][0] * l[1][0];
            let c = l[1][0] * l[1][0] + l[1][1] * l[1][1];
            let g = Gaussian2D {
                mean2d: [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)],
                cov2d: [a, b, c],
                conic: [0.0; 3],
                view_depth: 1.0,
                cam_point: [0.0, 0.0, 1.0],
            };
            let x: [f64; 2] = [rng.gen_range(-6.0..6.0), rng.gen_range(-6.0..6.0)];
            let det = a * c - b * b;
            let inv = [[c / det, -b / det], [-b / det, a / det]];
            let d = [x[0] - g.mean2d[0], x[1] - g.mean2d[1]];
            let q = d[0] * (inv[0][0] * d[0] + inv[0][1] * d[1]) + d[1] * (inv[1][0] * d[0] + inv[1][1] * d[1]);
            let expect = (-0.5 * q).exp();
            assert!((eval_gaussian_2d(&g, x).unwrap() - expect).abs() <= 1e-12);
        }
    }

    #[test]
    fn translating_along_axis_keeps_mean_and_shrinks_footprint() {
        let cam = identity_cam(32, 32);
        let mut prev: Option<f64> = None;
        for depth in [2.0, 3.0, 5.0, 8.0] {
            let p = GaussianPrimitive {
                mu: [0.0, 0.0, depth],
                scale: [0.2, 0.3, 0.1],
                rotation: [1.0, 0.0, 0.0, 0.0],
                opacity: 0.5,
                color: [0.5; 3],
            };
            let g = project_gaussian(&p, &cam).unwrap();
            assert_eq!(g.mean2d, [16.0, 16.0]);
            let det = g.cov2d[0] * g.cov2d[2] - g.cov2d[1] * g.cov2d[1];
            if let Some(d) = prev {
                assert!(det < d);
            }
            prev = Some(det);
        }
    }

    #[test]
    fn pose_matrix_round_trip_and_center() {
        let cam = Camera::<f64>::look_at([1.0, 2.0, -3.0], [0.0; 3], [0.0, -1.0, 0.0], [30.0, 30.0], [8.0, 8.0], (16, 16)).unwrap();
        let c = cam.center();
        assert!((c[0] - 1.0).abs() < 1e-12 && (c[1] - 2.0).abs() < 1e-12 && (c[2] + 3.0).abs() < 1e-12);
        let back = Camera::from_pose_matrix(&cam.pose_matrix(), cam.focal, cam.principal_point, (16, 16)).unwrap();
        assert_eq!(back, cam);
        let target = cam.world_to_camera([0.0; 3]);
        assert!(target[0].abs() < 1e-12 && target[1].abs() < 1e-12 && target[2] > 0.0);
    }

    #[test]
    fn non_orthonormal_pose_is_rejected() {
        let r = [[1.0, 0.1, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(Camera::new(r, [0.0; 3], [1.0, 1.0], [0.0, 0.0], (4, 4)).is_err());
        let i = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(Camera::new(i, [0.0; 3], [1.0, 1.0], [0.0, 0.0], (0, 4)).is_err());
    }
}
