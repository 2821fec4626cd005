//! Geometric primitives shared by every stage: points, rigid transforms,
//! oriented boxes and the continuous 6D rotation encoding.
//!
//! Yaw is counterclockwise about +z with zero along +x, and every stored
//! yaw is normalized to (−π, π].

use std::f64::consts::PI;

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};

use crate::error::{Error, Result};

/// Orthonormality tolerance for transforms and decoded rotations.
pub const ROTATION_TOL: f64 = 1e-9;

/// A single sensor return.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub position: Vector3<f64>,
    /// RGB in [0, 1].
    pub color: [f64; 3],
    /// Return intensity in [0, 1].
    pub intensity: f64,
    pub traversal_id: u16,
}

impl Point {
    pub fn new(position: Vector3<f64>, color: [f64; 3], intensity: f64, traversal_id: u16) -> Self {
        Self { position, color, intensity, traversal_id }
    }

    /// A grey, zero-intensity point at `position`.
    pub fn at(x: f64, y: f64, z: f64) -> Self {
        Self::new(Vector3::new(x, y, z), [0.5; 3], 0.0, 0)
    }

    pub fn is_valid(&self) -> bool {
        self.position.iter().all(|v| v.is_finite())
            && self.color.iter().all(|c| (0.0..=1.0).contains(c))
            && (0.0..=1.0).contains(&self.intensity)
    }
}

/// Ordered point collection. Order is stable through every operation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn positions(&self) -> impl Iterator<Item = &Vector3<f64>> {
        self.points.iter().map(|p| &p.position)
    }

    pub fn extend(&mut self, other: &PointCloud) {
        self.points.extend_from_slice(&other.points);
    }
}

impl FromIterator<Point> for PointCloud {
    fn from_iter<I: IntoIterator<Item = Point>>(iter: I) -> Self {
        Self { points: iter.into_iter().collect() }
    }
}

/// Proper rigid motion `p ↦ R·p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        check_rotation(&rotation).map_err(Error::InvalidTransform)?;
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidTransform("non-finite translation".into()));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn from_yaw(yaw: f64, translation: Vector3<f64>) -> Self {
        Self { rotation: yaw_matrix(yaw), translation }
    }

    pub fn translation_only(translation: Vector3<f64>) -> Self {
        Self { rotation: Matrix3::identity(), translation }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self ∘ first`: apply `first`, then `self`.
    pub fn compose(&self, first: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * first.rotation,
            translation: self.rotation * first.translation + self.translation,
        }
    }

    /// Yaw of the rotation's x-axis image, for yaw-only transforms.
    pub fn yaw(&self) -> f64 {
        self.rotation[(1, 0)].atan2(self.rotation[(0, 0)])
    }
}

fn check_rotation(r: &Matrix3<f64>) -> std::result::Result<(), String> {
    if !r.iter().all(|v| v.is_finite()) {
        return Err("non-finite rotation entries".into());
    }
    let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
    if ortho > ROTATION_TOL {
        return Err(format!("RᵀR deviates from identity by {ortho:e}"));
    }
    let det = r.determinant();
    if (det - 1.0).abs() > ROTATION_TOL {
        return Err(format!("det(R) = {det}"));
    }
    Ok(())
}

pub fn yaw_matrix(yaw: f64) -> Matrix3<f64> {
    let (s, c) = yaw.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Applies `t` to every point position; attributes and order are untouched.
pub fn transform_points(pc: &PointCloud, t: &RigidTransform) -> Result<PointCloud> {
    check_rotation(&t.rotation).map_err(Error::InvalidTransform)?;
    Ok(pc
        .points
        .iter()
        .map(|p| Point { position: t.apply(&p.position), ..*p })
        .collect())
}

/// Wraps an angle into (−π, π].
pub fn normalize_angle(theta: f64) -> f64 {
    let mut a = theta.rem_euclid(2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    }
    // rem_euclid maps −π to π already; guard against rounding to exactly −π.
    if a <= -PI {
        a += 2.0 * PI;
    }
    a
}

/// Oriented 3D box. `dims` is (length along heading, width, height).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3D {
    pub center: Vector3<f64>,
    pub dims: Vector3<f64>,
    pub yaw: f64,
}

impl Box3D {
    pub fn new(center: Vector3<f64>, dims: Vector3<f64>, yaw: f64) -> Result<Self> {
        if !dims.iter().all(|d| d.is_finite() && *d > 0.0) {
            return Err(Error::Input(format!("box dims must be positive, got {dims:?}")));
        }
        if !center.iter().all(|v| v.is_finite()) || !yaw.is_finite() {
            return Err(Error::Input("non-finite box parameters".into()));
        }
        Ok(Self { center, dims, yaw: normalize_angle(yaw) })
    }

    /// BEV corners, counterclockwise.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let hl = self.dims.x / 2.0;
        let hw = self.dims.y / 2.0;
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        local.map(|[x, y]| [self.center.x + c * x - s * y, self.center.y + s * x + c * y])
    }

    pub fn z_range(&self) -> (f64, f64) {
        (self.center.z - self.dims.z / 2.0, self.center.z + self.dims.z / 2.0)
    }

    pub fn volume(&self) -> f64 {
        self.dims.x * self.dims.y * self.dims.z
    }

    /// Image under a rigid transform; only the yaw component of the rotation
    /// is carried into the heading.
    pub fn transformed(&self, t: &RigidTransform) -> Box3D {
        Box3D {
            center: t.apply(&self.center),
            dims: self.dims,
            yaw: normalize_angle(self.yaw + t.yaw()),
        }
    }

    /// Expresses a world point in the box frame.
    pub fn to_local(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let d = p - self.center;
        let (s, c) = self.yaw.sin_cos();
        Vector3::new(c * d.x + s * d.y, -s * d.x + c * d.y, d.z)
    }
}

/// Containment test with a uniform dilation `margin` on every half extent.
pub fn point_in_box(p: &Vector3<f64>, b: &Box3D, margin: f64) -> bool {
    let local = b.to_local(p);
    local.x.abs() <= b.dims.x / 2.0 + margin
        && local.y.abs() <= b.dims.y / 2.0 + margin
        && local.z.abs() <= b.dims.z / 2.0 + margin
}

/// First two columns of a rotation matrix, column-major.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rot6D(pub [f64; 6]);

impl Rot6D {
    pub fn from_matrix(r: &Matrix3<f64>) -> Self {
        Rot6D([r[(0, 0)], r[(1, 0)], r[(2, 0)], r[(0, 1)], r[(1, 1)], r[(2, 1)]])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Quaternion (w, x, y, z) to its rotation matrix, requiring unit norm within 1e-6.
pub fn quat_to_matrix(q: &Quaternion<f64>) -> Result<Matrix3<f64>> {
    let n = q.norm();
    if !n.is_finite() || (n - 1.0).abs() > 1e-6 {
        return Err(Error::DegenerateRotation(format!("quaternion norm {n} is not 1")));
    }
    Ok(UnitQuaternion::from_quaternion(*q).to_rotation_matrix().into_inner())
}

pub fn quat_to_rot6d(q: &Quaternion<f64>) -> Result<Rot6D> {
    quat_to_matrix(q).map(|m| Rot6D::from_matrix(&m))
}

/// Gram–Schmidt decoding of a 6D rotation into a proper rotation matrix.
pub fn rot6d_to_matrix(r: &Rot6D) -> Result<Matrix3<f64>> {
    let a = Vector3::new(r.0[0], r.0[1], r.0[2]);
    let b = Vector3::new(r.0[3], r.0[4], r.0[5]);
    if !a.iter().chain(b.iter()).all(|v| v.is_finite()) {
        return Err(Error::DegenerateRotation("non-finite 6D rotation".into()));
    }
    let an = a.norm();
    if an < 1e-12 {
        return Err(Error::DegenerateRotation("zero-norm first column".into()));
    }
    let c1 = a / an;
    let b_perp = b - c1 * c1.dot(&b);
    let bn = b_perp.norm();
    if bn < 1e-12 * b.norm().max(1.0) {
        return Err(Error::DegenerateRotation("parallel columns".into()));
    }
    let c2 = b_perp / bn;
    let c3 = c1.cross(&c2);
    Ok(Matrix3::from_columns(&[c1, c2, c3]))
}

/// Quaternion (w, x, y, z) for a rotation matrix.
pub fn matrix_to_quat(r: &Matrix3<f64>) -> Quaternion<f64> {
    let rot = Rotation3::from_matrix_unchecked(*r);
    *UnitQuaternion::from_rotation_matrix(&rot).quaternion()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn identity_transform_is_noop() {
        let pc = PointCloud::new(vec![Point::at(1.0, -2.0, 3.0), Point::at(0.5, 0.0, 0.0)]);
        let out = transform_points(&pc, &RigidTransform::identity()).unwrap();
        assert_eq!(out, pc);
    }

    #[test]
    fn translation_and_yaw() {
        let pc = PointCloud::new(vec![Point::at(0.0, 0.0, 0.0)]);
        let t = RigidTransform::translation_only(Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(transform_points(&pc, &t).unwrap().points[0].position, Vector3::new(1.0, 0.0, 0.0));

        let pc = PointCloud::new(vec![Point::at(1.0, 0.0, 0.0)]);
        let t = RigidTransform::from_yaw(FRAC_PI_2, Vector3::zeros());
        let p = transform_points(&pc, &t).unwrap().points[0].position;
        assert!((p - Vector3::new(0.0, 1.0, 0.0)).abs().max() < 1e-12);
    }

    #[test]
    fn rejects_non_orthonormal() {
        let mut m = Matrix3::identity();
        m[(0, 0)] = 1.1;
        assert!(matches!(RigidTransform::new(m, Vector3::zeros()), Err(Error::InvalidTransform(_))));
        let reflect = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(RigidTransform::new(reflect, Vector3::zeros()).is_err());
    }

    #[test]
    fn box_containment_cases() {
        let b = Box3D::new(Vector3::new(1.0, 2.0, 0.5), Vector3::new(4.0, 2.0, 1.0), 0.3).unwrap();
        assert!(point_in_box(&b.center, &b, 0.0));

        let b0 = Box3D::new(Vector3::zeros(), Vector3::new(4.0, 2.0, 1.0), 0.0).unwrap();
        let margin = 0.1;
        let p = Vector3::new(2.0 + margin + 1e-9, 0.0, 0.0);
        assert!(!point_in_box(&p, &b0, margin));
        assert!(point_in_box(&Vector3::new(2.0 + margin, 0.0, 0.0), &b0, margin));
    }

    #[test]
    fn rotated_box_containment_matches_explicit_frame() {
        let q = std::f64::consts::FRAC_PI_4;
        let b = Box3D::new(Vector3::zeros(), Vector3::new(2.0, 1.0, 1.0), q).unwrap();
        let p = Vector3::new(0.9 * q.cos(), 0.9 * q.sin(), 0.0);
        // Explicit frame rotation: p lies on the box's long axis at 0.9 < l/2 = 1.
        let local_x = p.x * q.cos() + p.y * q.sin();
        let local_y = -p.x * q.sin() + p.y * q.cos();
        assert!((local_x - 0.9).abs() < 1e-12 && local_y.abs() < 1e-12);
        assert!(point_in_box(&p, &b, 0.0));
        // Same point is outside the unrotated box along y (0.636 > 0.5).
        let b0 = Box3D::new(Vector3::zeros(), Vector3::new(2.0, 1.0, 1.0), 0.0).unwrap();
        assert!(!point_in_box(&p, &b0, 0.0));
    }

    #[test]
    fn angle_normalization() {
        assert!((normalize_angle(-PI) - PI).abs() < 1e-15);
        assert!((normalize_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((normalize_angle(0.25) - 0.25).abs() < 1e-15);
        assert!((normalize_angle(-0.25 - 4.0 * PI) + 0.25).abs() < 1e-12);
    }

    #[test]
    fn rot6d_analytic_cases() {
        let id = Quaternion::new(1.0, 0.0, 0.0, 0.0);
        let r = quat_to_rot6d(&id).unwrap();
        assert_eq!(r.0, [1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert!((rot6d_to_matrix(&r).unwrap() - Matrix3::identity()).abs().max() < 1e-15);

        let h = FRAC_PI_2 / 2.0;
        let yaw = Quaternion::new(h.cos(), 0.0, 0.0, h.sin());
        let r = quat_to_rot6d(&yaw).unwrap();
        let want = [0.0, 1.0, 0.0, -1.0, 0.0, 0.0];
        for (a, b) in r.0.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rot6d_degenerate_inputs() {
        assert!(matches!(rot6d_to_matrix(&Rot6D([0.0; 6])), Err(Error::DegenerateRotation(_))));
        assert!(rot6d_to_matrix(&Rot6D([1.0, 0.0, 0.0, 2.0, 0.0, 0.0])).is_err());
        assert!(quat_to_rot6d(&Quaternion::new(2.0, 0.0, 0.0, 0.0)).is_err());
    }
}
