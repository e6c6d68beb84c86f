//! Rigid poses, the pinhole camera model and pose-error metrics.
//!
//! Every [`Pose`] in this crate is **camera-to-world**: it maps points expressed
//! in the camera frame into the world frame. Projection therefore goes through
//! the inverse. Lengths are millimeters throughout.

use nalgebra::{Matrix3, Matrix4, Point2, Point3, Rotation3, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Continuous pixel position, `x` along the width (u) and `y` along the height (v).
pub type PixelCoord = Point2<f64>;

/// 3D point in millimeters; world or camera frame depending on context.
pub type ScenePoint = Point3<f64>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("point is behind the camera (z = {z})")]
    BehindCamera { z: f64 },
    #[error("invalid depth {depth} mm")]
    InvalidDepth { depth: f64 },
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
}

/// Rigid camera-to-world transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    /// Camera center in world coordinates, mm.
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::identity(), translation)
    }

    /// Rotation of `angle` radians about `axis`, no translation.
    pub fn from_axis_angle(axis: &Unit<Vector3<f64>>, angle: f64) -> Self {
        Self::new(UnitQuaternion::from_axis_angle(axis, angle), Vector3::zeros())
    }

    /// Builds a pose from a rotation matrix. The matrix is assumed orthonormal.
    pub fn from_rotation_matrix(rotation: &Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let rot = Rotation3::from_matrix_unchecked(*rotation);
        Self::new(UnitQuaternion::from_rotation_matrix(&rot), translation)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        *self.rotation.to_rotation_matrix().matrix()
    }

    /// Homogeneous 4x4 matrix.
    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// `R * p + t`.
    pub fn transform_point(&self, p: &ScenePoint) -> ScenePoint {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.rotation.inverse();
        Pose {
            rotation: inv,
            translation: -(inv * self.translation),
        }
    }

    /// Camera center in world coordinates. For a camera-to-world pose this is
    /// just the translation.
    pub fn camera_center(&self) -> ScenePoint {
        Point3::from(self.translation)
    }

    /// Rotation angle in radians between the two orientations, immune to the
    /// quaternion sign ambiguity.
    pub fn rotation_angle_to(&self, other: &Pose) -> f64 {
        let rel = self.rotation * other.rotation.inverse();
        let q = rel.quaternion();
        2.0 * q.imag().norm().atan2(q.w.abs())
    }

    /// True when both poses agree within the given rotation (radians) and
    /// translation (mm) tolerances.
    pub fn approx_eq(&self, other: &Pose, angle_tol: f64, translation_tol: f64) -> bool {
        self.rotation_angle_to(other) <= angle_tol
            && (self.translation - other.translation).norm() <= translation_tol
    }
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// The commonly used 7-Scenes Kinect calibration (640x480, f = 585).
    pub fn seven_scenes() -> Self {
        Self {
            fx: 585.0,
            fy: 585.0,
            cx: 320.0,
            cy: 240.0,
            width: 640,
            height: 480,
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let finite = [self.fx, self.fy, self.cx, self.cy]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(GeometryError::InvalidIntrinsics(
                "non-finite parameter".into(),
            ));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx = {}, fy = {})",
                self.fx, self.fy
            )));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "cx = {} outside (0, {})",
                self.cx, self.width
            )));
        }
        if !(self.cy > 0.0 && self.cy < self.height as f64) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "cy = {} outside (0, {})",
                self.cy, self.height
            )));
        }
        Ok(())
    }

    /// Projects a camera-frame point. The result may fall outside the image.
    pub fn project(&self, p_cam: &ScenePoint) -> Result<PixelCoord, GeometryError> {
        if p_cam.z <= 0.0 {
            return Err(GeometryError::BehindCamera { z: p_cam.z });
        }
        Ok(Point2::new(
            self.cx + self.fx * p_cam.x / p_cam.z,
            self.cy + self.fy * p_cam.y / p_cam.z,
        ))
    }

    /// Lifts a pixel at the given depth (mm) to a camera-frame point.
    pub fn backproject(&self, px: &PixelCoord, depth: f64) -> Result<ScenePoint, GeometryError> {
        if !(depth > 0.0) || !depth.is_finite() {
            return Err(GeometryError::InvalidDepth { depth });
        }
        Ok(Point3::new(
            (px.x - self.cx) * depth / self.fx,
            (px.y - self.cy) * depth / self.fy,
            depth,
        ))
    }

    /// Unit-less ray direction `K^-1 [u, v, 1]` (z = 1).
    pub fn ray(&self, px: &PixelCoord) -> Vector3<f64> {
        Vector3::new((px.x - self.cx) / self.fx, (px.y - self.cy) / self.fy, 1.0)
    }

    pub fn contains(&self, px: &PixelCoord) -> bool {
        px.x >= 0.0 && px.y >= 0.0 && px.x < self.width as f64 && px.y < self.height as f64
    }
}

/// Pixel distance between `px` and the projection of world point `s` through
/// camera-to-world pose `pose`. Points at or behind the camera plane give
/// `f64::INFINITY`.
pub fn reprojection_error(k: &Intrinsics, pose: &Pose, s: &ScenePoint, px: &PixelCoord) -> f64 {
    let p_cam = pose.inverse().transform_point(s);
    reprojection_error_cam(k, &p_cam, px)
}

/// Same as [`reprojection_error`] for a point already in the camera frame.
#[inline]
pub fn reprojection_error_cam(k: &Intrinsics, p_cam: &ScenePoint, px: &PixelCoord) -> f64 {
    if p_cam.z <= 0.0 {
        return f64::INFINITY;
    }
    let du = k.cx + k.fx * p_cam.x / p_cam.z - px.x;
    let dv = k.cy + k.fy * p_cam.y / p_cam.z - px.y;
    du.hypot(dv)
}

/// Translational (mm) and rotational (degrees) pose error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseError {
    pub translational: f64,
    pub rotational: f64,
}

impl PoseError {
    pub fn translational_cm(&self) -> f64 {
        self.translational / 10.0
    }
}

/// Camera-center distance plus the angle of `R_est * R_gt^T`.
pub fn pose_error(estimate: &Pose, ground_truth: &Pose) -> PoseError {
    let translational = (estimate.camera_center() - ground_truth.camera_center()).norm();
    let rotational = estimate
        .rotation_angle_to(ground_truth)
        .to_degrees()
        .clamp(0.0, 180.0);
    PoseError {
        translational,
        rotational,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn k() -> Intrinsics {
        Intrinsics::seven_scenes()
    }

    #[test]
    fn project_examples() {
        let px = k().project(&Point3::new(0.0, 0.0, 1000.0)).unwrap();
        assert_eq!((px.x, px.y), (320.0, 240.0));
        let px = k().project(&Point3::new(100.0, 0.0, 1000.0)).unwrap();
        assert_eq!((px.x, px.y), (378.5, 240.0));
        assert!(matches!(
            k().project(&Point3::new(0.0, 0.0, -5.0)),
            Err(GeometryError::BehindCamera { .. })
        ));
    }

    #[test]
    fn backproject_examples() {
        let p = k().backproject(&Point2::new(320.0, 240.0), 1500.0).unwrap();
        assert_eq!(p, Point3::new(0.0, 0.0, 1500.0));
        let p = k().backproject(&Point2::new(378.5, 240.0), 1000.0).unwrap();
        assert_abs_diff_eq!(p.x, 100.0, epsilon = 1e-12);
        assert_eq!((p.y, p.z), (0.0, 1000.0));
        assert!(matches!(
            k().backproject(&Point2::new(10.0, 10.0), 0.0),
            Err(GeometryError::InvalidDepth { .. })
        ));
    }

    #[test]
    fn intrinsics_validation() {
        assert!(Intrinsics::new(585.0, 585.0, 320.0, 240.0, 640, 480).is_ok());
        assert!(Intrinsics::new(0.0, 585.0, 320.0, 240.0, 640, 480).is_err());
        assert!(Intrinsics::new(585.0, 585.0, 640.0, 240.0, 640, 480).is_err());
        assert!(Intrinsics::new(585.0, 585.0, 320.0, 0.0, 640, 480).is_err());
    }

    #[test]
    fn transform_point_examples() {
        let p = Point3::new(1.0, 2.0, 3.0);
        assert_eq!(Pose::identity().transform_point(&p), p);
        let t = Pose::from_translation(Vector3::new(10.0, 0.0, 0.0));
        assert_eq!(t.transform_point(&p), Point3::new(11.0, 2.0, 3.0));
        let rz = Pose::from_axis_angle(&Vector3::z_axis(), FRAC_PI_2);
        let q = rz.transform_point(&Point3::new(1.0, 0.0, 0.0));
        assert_abs_diff_eq!(q, Point3::new(0.0, 1.0, 0.0), epsilon = 1e-9);
    }

    #[test]
    fn reprojection_error_examples() {
        let pose = Pose::new(
            UnitQuaternion::from_euler_angles(0.1, -0.2, 0.3),
            Vector3::new(100.0, -50.0, 20.0),
        );
        let px = Point2::new(200.0, 100.0);
        let s = pose.transform_point(&k().backproject(&px, 2500.0).unwrap());
        assert!(reprojection_error(&k(), &pose, &s, &px) < 1e-6);
        let off = Point2::new(px.x + 3.0, px.y + 4.0);
        assert_abs_diff_eq!(reprojection_error(&k(), &pose, &s, &off), 5.0, epsilon = 1e-6);
        let behind = pose.transform_point(&Point3::new(0.0, 0.0, -100.0));
        assert_eq!(reprojection_error(&k(), &pose, &behind, &px), f64::INFINITY);
    }

    #[test]
    fn pose_error_examples() {
        let p = Pose::new(
            UnitQuaternion::from_euler_angles(0.3, 0.2, 0.1),
            Vector3::new(1.0, 2.0, 3.0),
        );
        let e = pose_error(&p, &p);
        assert_eq!(e.translational, 0.0);
        assert!(e.rotational < 1e-9);

        let flipped = p.compose(&Pose::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI));
        let e = pose_error(&flipped, &p);
        assert_abs_diff_eq!(e.translational, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(e.rotational, 180.0, epsilon = 1e-9);

        // q and -q describe the same rotation
        let neg = Pose::new(
            UnitQuaternion::new_unchecked(-p.rotation.into_inner()),
            p.translation,
        );
        assert!(pose_error(&neg, &p).rotational < 1e-9);
    }

    fn arb_pose() -> impl Strategy<Value = Pose> {
        (
            prop::array::uniform3(-3.0f64..3.0),
            prop::array::uniform3(-5000.0f64..5000.0),
        )
            .prop_map(|(r, t)| {
                Pose::new(
                    UnitQuaternion::from_scaled_axis(Vector3::from(r)),
                    Vector3::from(t),
                )
            })
    }

    fn arb_point() -> impl Strategy<Value = ScenePoint> {
        prop::array::uniform3(-5000.0f64..5000.0).prop_map(Point3::from)
    }

    /// Rotation angle from the trace of `R_a R_b^T`.
    fn trace_angle_deg(a: &Pose, b: &Pose) -> f64 {
        let r = a.rotation_matrix() * b.rotation_matrix().transpose();
        ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos().to_degrees()
    }

    proptest! {
        #[test]
        fn project_backproject_round_trip(u in 0.0f64..640.0, v in 0.0f64..480.0, d in 1.0f64..10000.0) {
            let px = Point2::new(u, v);
            let back = k().project(&k().backproject(&px, d).unwrap()).unwrap();
            prop_assert!((back - px).norm() < 1e-9);
        }

        #[test]
        fn rigid_maps_preserve_distances(pose in arb_pose(), p in arb_point(), q in arb_point()) {
            let d0 = (p - q).norm();
            let d1 = (pose.transform_point(&p) - pose.transform_point(&q)).norm();
            prop_assert!((d0 - d1).abs() <= 1e-9 * d0.max(1.0));
        }

        #[test]
        fn compose_with_inverse_is_identity(pose in arb_pose()) {
            let id = pose.compose(&pose.inverse());
            prop_assert!(id.rotation.angle() < 1e-9);
            prop_assert!(id.translation.norm() < 1e-6);
            prop_assert!((pose.rotation.norm() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn compose_matches_matrix_product(a in arb_pose(), b in arb_pose(), c in arb_pose(), p in arb_point()) {
            let lhs = a.compose(&b).compose(&c).to_matrix();
            let rhs = a.to_matrix() * b.to_matrix() * c.to_matrix();
            let rhs2 = a.compose(&b.compose(&c)).to_matrix();
            for i in 0..3 {
                for j in 0..3 {
                    prop_assert!((lhs[(i, j)] - rhs[(i, j)]).abs() < 1e-9);
                    prop_assert!((lhs[(i, j)] - rhs2[(i, j)]).abs() < 1e-9);
                }
                prop_assert!((lhs[(i, 3)] - rhs[(i, 3)]).abs() < 1e-9 * 1e4);
                prop_assert!((lhs[(i, 3)] - rhs2[(i, 3)]).abs() < 1e-9 * 1e4);
            }
            let seq = a.transform_point(&b.transform_point(&p));
            prop_assert!((a.compose(&b).transform_point(&p) - seq).norm() < 1e-6);
        }

        #[test]
        fn pose_error_matches_trace_oracle(a in arb_pose(), b in arb_pose()) {
            let e = pose_error(&a, &b);
            let oracle = trace_angle_deg(&a, &b);
            // acos is ill-conditioned near 0 and 180 degrees
            let tol = if !(1.0..=179.0).contains(&oracle) { 1e-4 } else { 1e-6 };
            prop_assert!((e.rotational - oracle).abs() < tol, "{} vs {}", e.rotational, oracle);
            prop_assert!((e.translational - (a.translation - b.translation).norm()).abs() < 1e-9);
            let sym = pose_error(&b, &a);
            prop_assert!((sym.rotational - e.rotational).abs() < 1e-9);
            prop_assert!(e.rotational >= 0.0 && e.rotational <= 180.0);
        }

        #[test]
        fn reprojection_of_own_projection_is_zero(pose in arb_pose(), u in 0.0f64..640.0, v in 0.0f64..480.0, d in 100.0f64..8000.0) {
            let px = Point2::new(u, v);
            let s = pose.transform_point(&k().backproject(&px, d).unwrap());
            prop_assert!(reprojection_error(&k(), &pose, &s, &px) < 1e-6);
        }
    }
}
