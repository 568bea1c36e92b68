//! Rigid-body poses, frame changes and box-to-box rigid alignment.
//!
//! A [`Pose`] maps local (sensor/ego) coordinates to global coordinates.
//! [`RigidTransform`] uses the forward convention `p' = R·p + c`.

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene_model::PointCloud;

pub type Vec3 = Vector3<f64>;

/// Tolerance on `‖RᵀR − I‖∞` accepted by [`Pose::new`].
pub const ORTHONORMAL_TOL: f64 = 1e-9;

/// Rotation drift above which [`compose`] re-projects onto SO(3).
const DRIFT_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("non-finite coordinate at point index {index}")]
    NonFinitePoint { index: usize },
    #[error("pose bottom row must be exactly (0, 0, 0, 1), got {0:?}")]
    BadBottomRow([f64; 4]),
    #[error("pose rotation is not orthonormal: ‖RᵀR − I‖∞ = {0:e}")]
    NotOrthonormal(f64),
    #[error("pose rotation has non-positive determinant {0}")]
    Reflection(f64),
    #[error("pose contains non-finite entries")]
    NonFinitePose,
    #[error("degenerate box {id}: dims {dims:?} must be strictly positive")]
    DegenerateBox { id: String, dims: [f64; 3] },
    #[error("alignment needs at least 3 matched points, got {0}")]
    TooFewPoints(usize),
    #[error("point sets differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("SVD did not converge")]
    SvdNotConverged,
}

fn rotation_error(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).abs().max()
}

/// Rigid sensor-to-global transform stored as a 4×4 homogeneous matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    matrix: Matrix4<f64>,
}

impl Pose {
    /// Validates and wraps a homogeneous matrix.
    pub fn new(matrix: Matrix4<f64>) -> Result<Self, GeometryError> {
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinitePose);
        }
        let bottom = [matrix[(3, 0)], matrix[(3, 1)], matrix[(3, 2)], matrix[(3, 3)]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(GeometryError::BadBottomRow(bottom));
        }
        let r: Matrix3<f64> = matrix.fixed_view::<3, 3>(0, 0).into_owned();
        let err = rotation_error(&r);
        if err >= ORTHONORMAL_TOL {
            return Err(GeometryError::NotOrthonormal(err));
        }
        let det = r.determinant();
        if det <= 0.0 {
            return Err(GeometryError::Reflection(det));
        }
        Ok(Self { matrix })
    }

    pub fn identity() -> Self {
        Self { matrix: Matrix4::identity() }
    }

    /// Builds a pose from a rotation block and a translation without drift checks
    /// beyond those of [`Pose::new`].
    pub fn from_parts(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self, GeometryError> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&translation);
        Self::new(m)
    }

    pub fn from_translation(t: Vec3) -> Self {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Self { matrix: m }
    }

    /// Planar pose: rotation about +z by `yaw` followed by translation `t`.
    pub fn from_yaw_translation(yaw: f64, t: Vec3) -> Self {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot_z(yaw));
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Self { matrix: m }
    }

    /// Parses 16 row-major entries.
    pub fn from_row_major(entries: &[f64; 16]) -> Result<Self, GeometryError> {
        Self::new(Matrix4::from_row_slice(entries))
    }

    pub fn to_row_major(&self) -> [f64; 16] {
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = self.matrix[(r, c)];
            }
        }
        out
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.matrix
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.matrix.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vec3 {
        self.matrix.fixed_view::<3, 1>(0, 3).into_owned()
    }

    #[inline]
    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        let m = &self.matrix;
        Vec3::new(
            m[(0, 0)] * p.x + m[(0, 1)] * p.y + m[(0, 2)] * p.z + m[(0, 3)],
            m[(1, 0)] * p.x + m[(1, 1)] * p.y + m[(1, 2)] * p.z + m[(1, 3)],
            m[(2, 0)] * p.x + m[(2, 1)] * p.y + m[(2, 2)] * p.z + m[(2, 3)],
        )
    }

    /// Yaw of the rotation block about +z (exact for planar poses).
    pub fn yaw(&self) -> f64 {
        self.matrix[(1, 0)].atan2(self.matrix[(0, 0)])
    }
}

impl Serialize for Pose {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<[f64; 4]> = (0..4)
            .map(|r| [self.matrix[(r, 0)], self.matrix[(r, 1)], self.matrix[(r, 2)], self.matrix[(r, 3)]])
            .collect();
        rows.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let rows = <[[f64; 4]; 4]>::deserialize(d)?;
        let mut flat = [0.0; 16];
        for (r, row) in rows.iter().enumerate() {
            flat[r * 4..r * 4 + 4].copy_from_slice(row);
        }
        Pose::from_row_major(&flat).map_err(serde::de::Error::custom)
    }
}

pub fn rot_z(yaw: f64) -> Matrix3<f64> {
    let (s, c) = yaw.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Applies `pose` to every point; intensity and frame tag pass through.
pub fn apply_pose(pose: &Pose, cloud: &PointCloud) -> Result<PointCloud, GeometryError> {
    if let Some(index) = cloud.points().iter().position(|p| !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite())) {
        return Err(GeometryError::NonFinitePoint { index });
    }
    let points = cloud.points().iter().map(|p| pose.transform_point(p)).collect();
    Ok(cloud.with_points(points))
}

/// Inverse as `(Rᵀ, −Rᵀt)`.
pub fn invert_pose(pose: &Pose) -> Pose {
    let rt = pose.rotation().transpose();
    let t = -(rt * pose.translation());
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
    Pose { matrix: m }
}

/// Matrix product `a · b`, re-projecting the rotation block onto SO(3) when it drifts.
pub fn compose(a: &Pose, b: &Pose) -> Pose {
    let mut m = a.matrix * b.matrix;
    let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
    if rotation_error(&r) > DRIFT_TOL {
        if let Some(projected) = polar_projection(&r) {
            m.fixed_view_mut::<3, 3>(0, 0).copy_from(&projected);
        }
    }
    m[(3, 0)] = 0.0;
    m[(3, 1)] = 0.0;
    m[(3, 2)] = 0.0;
    m[(3, 3)] = 1.0;
    Pose { matrix: m }
}

/// Nearest rotation in the Frobenius sense.
fn polar_projection(r: &Matrix3<f64>) -> Option<Matrix3<f64>> {
    let svd = r.try_svd(true, true, 1e-15, 200)?;
    let u = svd.u?;
    let v_t = svd.v_t?;
    let d = (u * v_t).determinant().signum();
    Some(u * Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, d)) * v_t)
}

/// Rigid motion in the forward convention `p' = R·p + c`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vec3::zeros() }
    }

    #[inline]
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn to_pose(&self) -> Result<Pose, GeometryError> {
        Pose::from_parts(self.rotation, self.translation)
    }
}

/// Opaque persistent object identity.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InstanceId(pub String);

impl InstanceId {
    pub fn new(s: impl Into<String>) -> Self {
        Self(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for InstanceId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// Oriented 3D box with yaw about +z. `dims` = (length, width, height).
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceBox {
    pub instance_id: InstanceId,
    pub center: Vec3,
    pub dims: Vec3,
    pub yaw: f64,
}

/// Corner sign pattern: bottom face counter-clockwise from (−,−), then the top face.
const CORNER_SIGNS: [[f64; 3]; 8] = [
    [-1.0, -1.0, -1.0],
    [1.0, -1.0, -1.0],
    [1.0, 1.0, -1.0],
    [-1.0, 1.0, -1.0],
    [-1.0, -1.0, 1.0],
    [1.0, -1.0, 1.0],
    [1.0, 1.0, 1.0],
    [-1.0, 1.0, 1.0],
];

impl InstanceBox {
    pub fn new(id: impl Into<String>, center: Vec3, dims: Vec3, yaw: f64) -> Result<Self, GeometryError> {
        let b = Self { instance_id: InstanceId::new(id), center, dims, yaw };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let finite = self.center.iter().chain(self.dims.iter()).all(|v| v.is_finite()) && self.yaw.is_finite();
        if !finite || self.dims.iter().any(|&d| d <= 0.0) {
            return Err(GeometryError::DegenerateBox {
                id: self.instance_id.0.clone(),
                dims: [self.dims.x, self.dims.y, self.dims.z],
            });
        }
        Ok(())
    }

    pub fn volume(&self) -> f64 {
        self.dims.x * self.dims.y * self.dims.z
    }

    /// The 8 corners in canonical order (see `CORNER_SIGNS`).
    pub fn corners(&self) -> [Vec3; 8] {
        let r = rot_z(self.yaw);
        let half = self.dims * 0.5;
        CORNER_SIGNS.map(|s| self.center + r * Vec3::new(s[0] * half.x, s[1] * half.y, s[2] * half.z))
    }

    /// Box-local coordinates of a point (un-center, then un-yaw).
    #[inline]
    pub fn to_local(&self, p: &Vec3) -> Vec3 {
        let (s, c) = self.yaw.sin_cos();
        let d = p - self.center;
        Vec3::new(c * d.x + s * d.y, -s * d.x + c * d.y, d.z)
    }

    pub fn contains(&self, p: &Vec3, margin: f64) -> bool {
        let l = self.to_local(p);
        l.x.abs() <= self.dims.x * 0.5 + margin
            && l.y.abs() <= self.dims.y * 0.5 + margin
            && l.z.abs() <= self.dims.z * 0.5 + margin
    }

    /// This box expressed in another frame, where `pose` maps the current frame into it.
    /// Only the yaw component of the pose rotation is carried over.
    pub fn transformed(&self, pose: &Pose) -> Self {
        Self {
            instance_id: self.instance_id.clone(),
            center: pose.transform_point(&self.center),
            dims: self.dims,
            yaw: self.yaw + pose.yaw(),
        }
    }
}

/// Indices of points inside `b` grown by `margin` on every axis.
pub fn points_in_box(cloud: &PointCloud, b: &InstanceBox, margin: f64) -> Vec<usize> {
    cloud
        .points()
        .iter()
        .enumerate()
        .filter(|(_, p)| b.contains(p, margin))
        .map(|(i, _)| i)
        .collect()
}

/// Least-squares rigid alignment of index-matched point sets (Kabsch).
///
/// Returns `(R, c)` minimizing `Σ‖R·src_k + c − dst_k‖²` with `det(R) = +1`.
pub fn kabsch(src: &[Vec3], dst: &[Vec3]) -> Result<RigidTransform, GeometryError> {
    if src.len() != dst.len() {
        return Err(GeometryError::LengthMismatch(src.len(), dst.len()));
    }
    if src.len() < 3 {
        return Err(GeometryError::TooFewPoints(src.len()));
    }
    let n = src.len() as f64;
    let src_mean = src.iter().fold(Vec3::zeros(), |a, p| a + p) / n;
    let dst_mean = dst.iter().fold(Vec3::zeros(), |a, p| a + p) / n;

    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s - src_mean) * (d - dst_mean).transpose();
    }

    let svd = h.try_svd(true, true, 1e-15, 500).ok_or(GeometryError::SvdNotConverged)?;
    let u = svd.u.ok_or(GeometryError::SvdNotConverged)?;
    let v = svd.v_t.ok_or(GeometryError::SvdNotConverged)?.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let rotation = v * Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, d)) * u.transpose();
    let translation = dst_mean - rotation * src_mean;
    Ok(RigidTransform { rotation, translation })
}

/// Rigid transform carrying the corners of `src` onto the corners of `dst`.
pub fn svd_align(src: &InstanceBox, dst: &InstanceBox) -> Result<RigidTransform, GeometryError> {
    src.validate()?;
    dst.validate()?;
    kabsch(&src.corners(), &dst.corners())
}
