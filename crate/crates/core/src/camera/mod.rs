//! Pinhole cameras, rigid poses and camera paths.
//!
//! Conventions: right-handed frames, the camera looks down `+z` with `x` to
//! the right and `y` pointing down. Poses are stored world-to-camera, i.e. a
//! world point `p` maps to `rotation * p + translation` in camera coordinates.
//! World "up" is therefore `-y`.

mod rays;
mod spline;
mod trajectory;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use rays::{plucker_ray_map, RayMap};
pub use spline::MonotoneCubic;
pub use trajectory::{
    orbit_position, spin_trajectory, spiral_path, spiral_trajectory, static_trajectory,
    view_angles, Spacing, SpinParams, SpiralParams, SpiralPath, Trajectory, TrajectoryKind,
};

/// Horizontal and vertical field of view used for every synthetic capture.
pub const DEFAULT_FOV_DEG: f64 = 72.0;

/// World up direction (`-y`, since image rows grow downwards).
pub const WORLD_UP: Vector3<f64> = Vector3::new(0.0, -1.0, 0.0);

const ORTHONORMAL_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "IntrinsicsRecord", into = "IntrinsicsRecord")]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IntrinsicsRecord {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
}

impl TryFrom<IntrinsicsRecord> for Intrinsics {
    type Error = Error;

    fn try_from(r: IntrinsicsRecord) -> Result<Self> {
        Intrinsics::new(r.fx, r.fy, r.cx, r.cy, r.width, r.height)
    }
}

impl From<Intrinsics> for IntrinsicsRecord {
    fn from(i: Intrinsics) -> Self {
        IntrinsicsRecord {
            fx: i.fx,
            fy: i.fy,
            cx: i.cx,
            cy: i.cy,
            width: i.width,
            height: i.height,
        }
    }
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let intr = Intrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        intr.validate()?;
        Ok(intr)
    }

    /// Square-pixel intrinsics with the principal point at the image center.
    pub fn from_fov(fov_deg: f64, width: u32, height: u32) -> Result<Self> {
        if !(fov_deg > 0.0 && fov_deg < 180.0) {
            return Err(Error::InvalidIntrinsics(format!(
                "field of view {fov_deg} outside (0, 180)"
            )));
        }
        let half = (fov_deg.to_radians() / 2.0).tan();
        let fx = f64::from(width) / 2.0 / half;
        let fy = f64::from(height) / 2.0 / half;
        Intrinsics::new(
            fx,
            fy,
            f64::from(width) / 2.0,
            f64::from(height) / 2.0,
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.fx.is_finite() || !self.fy.is_finite() {
            return Err(Error::InvalidIntrinsics(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidIntrinsics("empty image".into()));
        }
        if !(self.cx >= 0.0 && self.cx < f64::from(self.width)) {
            return Err(Error::InvalidIntrinsics(format!(
                "cx={} outside [0, {})",
                self.cx, self.width
            )));
        }
        if !(self.cy >= 0.0 && self.cy < f64::from(self.height)) {
            return Err(Error::InvalidIntrinsics(format!(
                "cy={} outside [0, {})",
                self.cy, self.height
            )));
        }
        Ok(())
    }

    /// Projects a camera-space point to pixel coordinates. Points at or
    /// behind the image plane return `None`.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        if p.z <= 0.0 {
            return None;
        }
        Some((
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ))
    }

    /// Unnormalized camera-space direction `(x, y, 1)` through pixel `(u, v)`.
    pub fn back_project(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// Rescales the intrinsics to another image size.
    pub fn scaled(&self, width: u32, height: u32) -> Result<Self> {
        let sx = f64::from(width) / f64::from(self.width);
        let sy = f64::from(height) / f64::from(self.height);
        Intrinsics::new(
            self.fx * sx,
            self.fy * sy,
            self.cx * sx,
            self.cy * sy,
            width,
            height,
        )
    }
}

/// Rigid world-to-camera transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl CameraPose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let pose = CameraPose {
            rotation,
            translation,
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn identity() -> Self {
        CameraPose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Camera at `eye` looking at `target`, with image-up aligned to `up` as
    /// closely as possible.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Result<Self> {
        let forward = target - eye;
        let norm = forward.norm();
        if !(norm > 0.0) {
            return Err(Error::InvalidPose("eye and target coincide".into()));
        }
        let z = forward / norm;
        let down = -up;
        let x = down.cross(&z);
        let xn = x.norm();
        if xn < 1e-12 {
            return Err(Error::InvalidPose(
                "viewing direction parallel to up vector".into(),
            ));
        }
        let x = x / xn;
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let translation = -(rotation * eye);
        CameraPose::new(rotation, translation)
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        if r.iter().chain(self.translation.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidPose("non-finite entries".into()));
        }
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if err > ORTHONORMAL_TOL {
            return Err(Error::InvalidPose(format!(
                "rotation is not orthonormal (max |RᵀR - I| = {err:.3e})"
            )));
        }
        let det = r.determinant();
        if (det - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(Error::InvalidPose(format!(
                "rotation determinant {det} is not +1"
            )));
        }
        Ok(())
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Viewing direction (`+z` of the camera) in world coordinates.
    pub fn forward(&self) -> Vector3<f64> {
        self.rotation.row(2).transpose()
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &CameraPose) -> CameraPose {
        CameraPose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> CameraPose {
        let rt = self.rotation.transpose();
        CameraPose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Largest absolute deviation from the identity transform.
    pub fn distance_to_identity(&self) -> f64 {
        (self.rotation - Matrix3::identity())
            .abs()
            .max()
            .max(self.translation.abs().max())
    }

    pub(crate) fn from_row_major(r: [f64; 9], t: [f64; 3]) -> Result<Self> {
        CameraPose::new(Matrix3::from_row_slice(&r), Vector3::from(t))
    }

    pub(crate) fn to_row_major(&self) -> ([f64; 9], [f64; 3]) {
        let mut r = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                r[i * 3 + j] = self.rotation[(i, j)];
            }
        }
        (r, [self.translation.x, self.translation.y, self.translation.z])
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseRecord {
    #[serde(rename = "R")]
    r: [f64; 9],
    t: [f64; 3],
}

impl Serialize for CameraPose {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let (r, t) = self.to_row_major();
        PoseRecord { r, t }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for CameraPose {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rec = PoseRecord::deserialize(d)?;
        CameraPose::from_row_major(rec.r, rec.t).map_err(serde::de::Error::custom)
    }
}

/// Transform from reference-camera coordinates to driving-camera coordinates.
pub fn relative_pose(driving: &CameraPose, reference: &CameraPose) -> Result<CameraPose> {
    driving.validate()?;
    reference.validate()?;
    Ok(driving.compose(&reference.inverse()))
}

/// Rotation about the world vertical axis followed by pitch and roll,
/// `R = R_y(yaw) · R_x(pitch) · R_z(roll)`.
pub fn euler_rotation(yaw: f64, pitch: f64, roll: f64) -> Matrix3<f64> {
    let (sy, cy) = yaw.sin_cos();
    let (sp, cp) = pitch.sin_cos();
    let (sr, cr) = roll.sin_cos();
    let ry = Matrix3::new(cy, 0.0, sy, 0.0, 1.0, 0.0, -sy, 0.0, cy);
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cp, -sp, 0.0, sp, cp);
    let rz = Matrix3::new(cr, -sr, 0.0, sr, cr, 0.0, 0.0, 0.0, 1.0);
    ry * rx * rz
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_pose(rng: &mut impl Rng) -> CameraPose {
        let r = euler_rotation(
            rng.random_range(-3.1..3.1),
            rng.random_range(-1.5..1.5),
            rng.random_range(-3.1..3.1),
        );
        let t = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        CameraPose::new(r, t).unwrap()
    }

    fn to_h(p: &CameraPose) -> nalgebra::Matrix4<f64> {
        let mut m = nalgebra::Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&p.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&p.translation);
        m
    }

    #[test]
    fn relative_pose_of_identical_poses_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let p = random_pose(&mut rng);
            let rel = relative_pose(&p, &p).unwrap();
            assert!(rel.distance_to_identity() < 1e-12);
        }
    }

    #[test]
    fn pure_translation_relative_pose() {
        let reference = CameraPose::identity();
        let driving = CameraPose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, 0.1)).unwrap();
        let rel = relative_pose(&driving, &reference).unwrap();
        // Hand-composed 4x4: T_drv · T_ref⁻¹ with T_ref = I.
        let expected = to_h(&driving) * to_h(&reference).try_inverse().unwrap();
        assert_eq!(rel.rotation, Matrix3::identity());
        assert_relative_eq!(rel.translation, Vector3::new(0.0, 0.0, 0.1));
        assert_relative_eq!(to_h(&rel), expected, epsilon = 1e-15);
    }

    #[test]
    fn relative_pose_matches_homogeneous_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let (a, b, c) = (
                random_pose(&mut rng),
                random_pose(&mut rng),
                random_pose(&mut rng),
            );
            let ab = relative_pose(&a, &b).unwrap();
            let bc = relative_pose(&b, &c).unwrap();
            let ac = relative_pose(&a, &c).unwrap();
            let brute = to_h(&a) * to_h(&b).try_inverse().unwrap();
            assert_relative_eq!(to_h(&ab), brute, epsilon = 1e-12);
            assert_relative_eq!(to_h(&ab.compose(&bc)), to_h(&ac), epsilon = 1e-12);
        }
    }

    #[test]
    fn non_orthonormal_rotation_is_rejected() {
        let mut bad = CameraPose::identity();
        bad.rotation[(0, 0)] = 1.1;
        assert!(matches!(
            relative_pose(&bad, &CameraPose::identity()),
            Err(Error::InvalidPose(_))
        ));
        let mut reflect = CameraPose::identity();
        reflect.rotation[(2, 2)] = -1.0;
        assert!(reflect.validate().is_err());
    }

    #[test]
    fn look_at_points_forward_axis_at_target() {
        let eye = Vector3::new(0.1, -0.05, -0.3);
        let target = Vector3::new(0.0, 0.01, 0.02);
        let pose = CameraPose::look_at(eye, target, WORLD_UP).unwrap();
        let dir = (target - eye).normalize();
        assert!(pose.forward().angle(&dir) < 1e-12);
        assert_relative_eq!(pose.center(), eye, epsilon = 1e-12);
        let p = pose.transform_point(&target);
        assert!(p.x.abs() < 1e-12 && p.y.abs() < 1e-12 && p.z > 0.0);
    }

    #[test]
    fn look_at_keeps_world_up_on_top_of_image() {
        let pose = CameraPose::look_at(
            Vector3::new(0.0, 0.0, -1.0),
            Vector3::zeros(),
            WORLD_UP,
        )
        .unwrap();
        let above = pose.transform_point(&Vector3::new(0.0, -0.1, 0.0));
        assert!(above.y < 0.0);
        let right = pose.transform_point(&Vector3::new(0.1, 0.0, 0.0));
        assert!(right.x > 0.0);
    }

    #[test]
    fn intrinsics_validation() {
        assert!(Intrinsics::new(0.0, 10.0, 1.0, 1.0, 4, 4).is_err());
        assert!(Intrinsics::new(10.0, 10.0, 4.0, 1.0, 4, 4).is_err());
        let i = Intrinsics::from_fov(DEFAULT_FOV_DEG, 64, 64).unwrap();
        assert_relative_eq!(i.fx, 32.0 / 36f64.to_radians().tan());
        let (u, v) = i.project(&Vector3::new(0.0, 0.0, 2.0)).unwrap();
        assert_eq!((u, v), (32.0, 32.0));
    }

    #[test]
    fn pose_json_round_trip_is_row_major() {
        let pose = CameraPose::look_at(
            Vector3::new(0.2, -0.1, -0.3),
            Vector3::zeros(),
            WORLD_UP,
        )
        .unwrap();
        let v = serde_json::to_value(pose).unwrap();
        assert_eq!(v["R"][1].as_f64().unwrap(), pose.rotation[(0, 1)]);
        let back: CameraPose = serde_json::from_value(v).unwrap();
        assert_eq!(back, pose);
        let bad = serde_json::json!({"R": [2.0, 0, 0, 0, 1, 0, 0, 0, 1], "t": [0, 0, 0]});
        assert!(serde_json::from_value::<CameraPose>(bad).is_err());
    }
}
