//! Rigid-body geometry: poses, pinhole cameras, point clouds, alignment and
//! trajectory error metrics. Everything here runs in `f64`; scene units are
//! millimetres.
//!
//! Conventions, used consistently by the renderer and the pose solver:
//!
//! * World frame: `y` up. Cameras move in the `x`/`z` plane.
//! * Camera frame: `x` right, `y` up, `z` forward (right-handed). The image
//!   `v` axis points down, so projection negates `y`.
//! * A [`Pose`] maps camera coordinates to world coordinates,
//!   `p_w = R p_c + t`. `t` is the camera centre.
//! * Pixel `(ix, iy)` has continuous image coordinates `u = ix`, `v = iy`
//!   (the integer grid sits on pixel centres).

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::tensor::Tensor;

/// Max allowed deviation of `R^T R` from identity.
pub const ROT_ORTHO_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("rotation is not orthonormal (max deviation {dev:.3e}) or not right-handed (det {det:.6})")]
    BadRotation { dev: f64, det: f64 },
    #[error("{op} needs at least {need} points, got {got}")]
    NotEnoughPoints {
        op: &'static str,
        need: usize,
        got: usize,
    },
    #[error("point sets disagree: {lhs} vs {rhs} points")]
    PointCountMismatch { lhs: usize, rhs: usize },
    #[error("alignment is degenerate: {reason}")]
    Degenerate { reason: String },
    #[error("weights must be non-negative with a positive sum")]
    BadWeights,
    #[error("trajectory too short: need {need} poses, got {got}")]
    TrajectoryTooShort { need: usize, got: usize },
    #[error("estimate is not anchored to the reference at frame 0 (offset {offset:.3e})")]
    NotAnchored { offset: f64 },
    #[error("depth map contains a non-positive or non-finite sample at ({x}, {y})")]
    BadDepth { x: usize, y: usize },
    #[error("expected points in the {expected:?} frame, got {got:?}")]
    WrongFrame { expected: Frame, got: Frame },
    #[error("intrinsics invalid: {0}")]
    BadIntrinsics(String),
    #[error("pose parse error on line {line}: {reason}")]
    PoseParse { line: usize, reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

// ---- pose ----

/// Rigid transform, camera-to-world for camera poses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    r: Matrix3<f64>,
    t: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            r: Matrix3::identity(),
            t: Vector3::zeros(),
        }
    }

    /// Validates orthonormality and handedness.
    pub fn new(r: Matrix3<f64>, t: Vector3<f64>) -> Result<Self, GeometryError> {
        let dev = (r.transpose() * r - Matrix3::identity()).abs().max();
        let det = r.determinant();
        if dev > ROT_ORTHO_TOL || (det - 1.0).abs() > 1e-6 {
            return Err(GeometryError::BadRotation { dev, det });
        }
        Ok(Pose { r, t })
    }

    /// For internal construction from products of valid rotations.
    pub(crate) fn new_unchecked(r: Matrix3<f64>, t: Vector3<f64>) -> Self {
        debug_assert!((r.transpose() * r - Matrix3::identity()).abs().max() < 1e-6);
        Pose { r, t }
    }

    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64, t: Vector3<f64>) -> Self {
        let r = nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
        Pose {
            r: r.into_inner(),
            t,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.r
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.t
    }

    /// `self * other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            r: self.r * other.r,
            t: self.r * other.t + self.t,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.r.transpose();
        Pose {
            r: rt,
            t: -(rt * self.t),
        }
    }

    pub fn apply(&self, p: Vector3<f64>) -> Vector3<f64> {
        self.r * p + self.t
    }

    /// Rotation angle of `self.inverse() * other`, in radians.
    pub fn rotation_angle_to(&self, other: &Pose) -> f64 {
        let rel = self.r.transpose() * other.r;
        let c = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos()
    }

    /// Row-major 3x4 `[R | t]` flattening for the pose text format.
    pub fn to_row_major_3x4(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for row in 0..3 {
            for col in 0..3 {
                out[row * 4 + col] = self.r[(row, col)];
            }
            out[row * 4 + 3] = self.t[row];
        }
        out
    }

    pub fn from_row_major_3x4(v: &[f64; 12]) -> Result<Self, GeometryError> {
        let r = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        let t = Vector3::new(v[3], v[7], v[11]);
        Pose::new(r, t)
    }
}

// ---- camera ----

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        if !(fx > 0.0 && fy > 0.0) || width == 0 || height == 0 {
            return Err(GeometryError::BadIntrinsics(format!(
                "fx {fx}, fy {fy}, {width}x{height}"
            )));
        }
        Ok(Intrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Square camera with a 90 degree horizontal field of view.
    pub fn square(size: usize) -> Self {
        Intrinsics {
            fx: size as f64 / 2.0,
            fy: size as f64 / 2.0,
            cx: (size as f64 - 1.0) / 2.0,
            cy: (size as f64 - 1.0) / 2.0,
            width: size,
            height: size,
        }
    }

    /// Camera-frame point to continuous pixel coordinates; `None` behind the
    /// camera. The `v` axis points down while camera `y` points up.
    pub fn project(&self, p: Vector3<f64>) -> Option<(f64, f64)> {
        if p.z <= 0.0 {
            return None;
        }
        Some((
            self.fx * p.x / p.z + self.cx,
            self.cy - self.fy * p.y / p.z,
        ))
    }

    /// Pixel plus depth (camera-frame `z`) to a camera-frame point.
    pub fn unproject(&self, u: f64, v: f64, z: f64) -> Vector3<f64> {
        Vector3::new(
            (u - self.cx) / self.fx * z,
            (self.cy - v) / self.fy * z,
            z,
        )
    }

    /// Unit ray through a pixel, camera frame.
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        self.unproject(u, v, 1.0).normalize()
    }
}

// ---- point clouds ----

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Frame {
    World,
    Camera,
}

#[derive(Clone, Debug)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    pub frame: Frame,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Camera-frame cloud to world using a camera-to-world pose.
    pub fn to_world(&self, pose: &Pose) -> Result<PointCloud, GeometryError> {
        if self.frame != Frame::Camera {
            return Err(GeometryError::WrongFrame {
                expected: Frame::Camera,
                got: self.frame,
            });
        }
        Ok(PointCloud {
            points: self.points.iter().map(|&p| pose.apply(p)).collect(),
            frame: Frame::World,
        })
    }
}

/// Back-projects a depth map at a strided grid of pixel centres, one point
/// per grid cell in row-major cell order. With `stride` matching the
/// embedding stride, point `i` pairs with embedding row `i`.
///
/// The sample for cell `(gy, gx)` sits at pixel
/// `(gx * stride + stride / 2, gy * stride + stride / 2)`.
pub fn unproject_grid(
    depth: &Tensor<f32>,
    k: &Intrinsics,
    stride: usize,
) -> Result<PointCloud, GeometryError> {
    assert_eq!(depth.rank(), 2, "depth map must be HxW");
    let (h, w) = (depth.dim(0), depth.dim(1));
    debug_assert_eq!(h, k.height);
    debug_assert_eq!(w, k.width);
    let (gh, gw) = (h / stride, w / stride);
    let mut points = Vec::with_capacity(gh * gw);
    for gy in 0..gh {
        for gx in 0..gw {
            let (px, py) = (gx * stride + stride / 2, gy * stride + stride / 2);
            let z = depth.data()[py * w + px] as f64;
            if !(z.is_finite() && z > 0.0) {
                return Err(GeometryError::BadDepth { x: px, y: py });
            }
            points.push(k.unproject(px as f64, py as f64, z));
        }
    }
    Ok(PointCloud {
        points,
        frame: Frame::Camera,
    })
}

// ---- alignment ----

/// Weighted rigid alignment: the pose `T` minimising
/// `sum_i w_i || T(src_i) - dst_i ||^2` (rotation and translation, no scale).
///
/// Kabsch with an SVD sign correction, so reflections are never returned.
/// Fails when fewer than 3 points are given, weights are invalid, or the
/// weighted point spread is degenerate (all points nearly collinear), in
/// which case the rotation would be unconstrained.
pub fn umeyama_align(
    src: &[Vector3<f64>],
    dst: &[Vector3<f64>],
    weights: Option<&[f64]>,
) -> Result<Pose, GeometryError> {
    if src.len() != dst.len() {
        return Err(GeometryError::PointCountMismatch {
            lhs: src.len(),
            rhs: dst.len(),
        });
    }
    if src.len() < 3 {
        return Err(GeometryError::NotEnoughPoints {
            op: "umeyama_align",
            need: 3,
            got: src.len(),
        });
    }
    let n = src.len();
    let uniform = vec![1.0; n];
    let w = weights.unwrap_or(&uniform);
    if w.len() != n {
        return Err(GeometryError::PointCountMismatch {
            lhs: w.len(),
            rhs: n,
        });
    }
    let wsum: f64 = w.iter().sum();
    if !(wsum > 0.0) || w.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(GeometryError::BadWeights);
    }

    let mut s_mean = Vector3::zeros();
    let mut d_mean = Vector3::zeros();
    for i in 0..n {
        s_mean += w[i] * src[i];
        d_mean += w[i] * dst[i];
    }
    s_mean /= wsum;
    d_mean /= wsum;

    // weighted cross-covariance sum_i w (src - s)(dst - d)^T
    let mut h = Matrix3::zeros();
    for i in 0..n {
        h += w[i] * (src[i] - s_mean) * (dst[i] - d_mean).transpose();
    }
    h /= wsum;

    let svd = h.svd(true, true);
    let sv = svd.singular_values;
    // Rotation is only determined when the point spread has rank >= 2.
    if sv[0] < 1e-12 || sv[1] < 1e-9 * sv[0].max(1.0) {
        return Err(GeometryError::Degenerate {
            reason: format!(
                "cross-covariance is rank deficient (singular values {:.3e}, {:.3e}, {:.3e})",
                sv[0], sv[1], sv[2]
            ),
        });
    }
    let u = svd.u.expect("requested");
    let vt = svd.v_t.expect("requested");
    // minimiser of |R src - dst|: R = V S U^T with H = U Sigma V^T
    let det = (vt.transpose() * u.transpose()).determinant();
    let s = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, det.signum()));
    let r = vt.transpose() * s * u.transpose();
    let t = d_mean - r * s_mean;

    // Renormalise: accumulated products can drift slightly past the strict
    // orthonormality tolerance.
    let r = renormalize_rotation(r);
    Pose::new(r, t)
}

fn renormalize_rotation(r: Matrix3<f64>) -> Matrix3<f64> {
    let svd = r.svd(true, true);
    let u = svd.u.expect("requested");
    let vt = svd.v_t.expect("requested");
    let det = (u * vt).determinant();
    let s = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, det.signum()));
    u * s * vt
}

// ---- trajectories and metrics ----

#[derive(Clone, Debug, Default)]
pub struct Trajectory {
    pub poses: Vec<Pose>,
}

impl Trajectory {
    pub fn new(poses: Vec<Pose>) -> Self {
        Trajectory { poses }
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.poses.iter().map(|p| p.translation()).collect()
    }

    /// One pose per line, 12 row-major `[R | t]` entries, full precision.
    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<(), GeometryError> {
        let mut out = String::new();
        for p in &self.poses {
            let v = p.to_row_major_3x4();
            let line: Vec<String> = v.iter().map(|x| format!("{x:.17e}")).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        std::fs::write(path.as_ref(), out).map_err(|source| GeometryError::Io {
            path: path.as_ref().display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, GeometryError> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|source| GeometryError::Io {
            path: path.as_ref().display().to_string(),
            source,
        })?;
        let mut poses = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let vals: Result<Vec<f64>, _> = line.split_whitespace().map(str::parse).collect();
            let vals = vals.map_err(|e| GeometryError::PoseParse {
                line: i + 1,
                reason: e.to_string(),
            })?;
            if vals.len() != 12 {
                return Err(GeometryError::PoseParse {
                    line: i + 1,
                    reason: format!("expected 12 values, got {}", vals.len()),
                });
            }
            let arr: [f64; 12] = vals.try_into().expect("length checked");
            poses.push(Pose::from_row_major_3x4(&arr).map_err(|e| GeometryError::PoseParse {
                line: i + 1,
                reason: e.to_string(),
            })?);
        }
        Ok(Trajectory { poses })
    }
}

/// Average positional error over frames `1..=n` of an estimate anchored to
/// the reference at frame 0. Frame 0 is excluded: it is shared by
/// construction.
pub fn ape(reference: &Trajectory, estimate: &Trajectory, n: usize) -> Result<f64, GeometryError> {
    if reference.len() < n + 1 || estimate.len() < n + 1 {
        return Err(GeometryError::TrajectoryTooShort {
            need: n + 1,
            got: reference.len().min(estimate.len()),
        });
    }
    if n == 0 {
        return Err(GeometryError::TrajectoryTooShort { need: 2, got: 1 });
    }
    let anchor = (reference.poses[0].translation() - estimate.poses[0].translation()).norm();
    if anchor > 1e-6 {
        return Err(GeometryError::NotAnchored { offset: anchor });
    }
    let mut total = 0.0;
    for i in 1..=n {
        total += (reference.poses[i].translation() - estimate.poses[i].translation()).norm();
    }
    Ok(total / n as f64)
}

#[derive(Clone, Copy, Debug)]
pub struct AteResult {
    pub rmse: f64,
    /// False when the alignment was degenerate and the metric fell back to
    /// the frame-0-anchored positions.
    pub aligned: bool,
}

/// Root-mean-square positional error over frames `0..=n` after a rigid
/// alignment of the estimate onto the reference. Degenerate geometry
/// (e.g. a nearly straight path) falls back to the unaligned positions.
pub fn ate(reference: &Trajectory, estimate: &Trajectory, n: usize) -> Result<AteResult, GeometryError> {
    if reference.len() < n + 1 || estimate.len() < n + 1 {
        return Err(GeometryError::TrajectoryTooShort {
            need: n + 1,
            got: reference.len().min(estimate.len()),
        });
    }
    let est: Vec<Vector3<f64>> = estimate.poses[..=n].iter().map(|p| p.translation()).collect();
    let refp: Vec<Vector3<f64>> = reference.poses[..=n].iter().map(|p| p.translation()).collect();
    let (aligned, est_aligned): (bool, Vec<Vector3<f64>>) = match umeyama_align(&est, &refp, None) {
        Ok(pose) => (true, est.iter().map(|&p| pose.apply(p)).collect()),
        Err(GeometryError::Degenerate { .. }) | Err(GeometryError::NotEnoughPoints { .. }) => {
            (false, est)
        }
        Err(e) => return Err(e),
    };
    let mut ss = 0.0;
    for (e, r) in est_aligned.iter().zip(&refp) {
        ss += (e - r).norm_squared();
    }
    Ok(AteResult {
        rmse: (ss / (n + 1) as f64).sqrt(),
        aligned,
    })
}
