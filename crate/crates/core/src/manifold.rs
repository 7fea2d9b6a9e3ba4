//! SO(3) and SE(3) primitives.
//!
//! Rotations are stored as unit quaternions and renormalized after every
//! composition. The tangent space uses the right-perturbation convention
//! throughout the crate: a rotation `R` perturbed by `dtheta` is
//! `R * Exp(dtheta)`.

use std::ops::Mul;

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Below this angle exp/log switch to their Taylor expansions.
const SMALL_ANGLE: f64 = 1e-8;
/// Below this angle the V / right-Jacobian coefficients use series forms.
const SERIES_ANGLE: f64 = 1e-3;

/// Skew-symmetric matrix such that `hat(a) * b == a.cross(&b)`.
pub fn hat(v: &Vec3) -> Mat3 {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// An element of SO(3).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation(UnitQuaternion<f64>);

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation {
    pub fn identity() -> Self {
        Rotation(UnitQuaternion::identity())
    }

    /// Exponential map without input validation. Non-finite input yields a
    /// non-finite rotation; use [`so3_exp`] at API boundaries.
    pub fn exp(phi: &Vec3) -> Self {
        let theta2 = phi.norm_squared();
        let theta = theta2.sqrt();
        let (w, k) = if theta < SMALL_ANGLE {
            (1.0 - theta2 / 8.0, 0.5 - theta2 / 48.0)
        } else {
            let half = 0.5 * theta;
            (half.cos(), half.sin() / theta)
        };
        let q = Quaternion::new(w, k * phi.x, k * phi.y, k * phi.z);
        Rotation(UnitQuaternion::new_normalize(q))
    }

    /// Logarithm with norm in `[0, pi]`.
    pub fn log(&self) -> Vec3 {
        let q = self.0.quaternion();
        // Double cover: pick the representative with w >= 0.
        let (w, v) = if q.w < 0.0 {
            (-q.w, -q.imag())
        } else {
            (q.w, q.imag())
        };
        let n2 = v.norm_squared();
        let n = n2.sqrt();
        if n < SMALL_ANGLE {
            // theta = 2 atan(n / w) ~ 2 n / w (1 - n^2 / (3 w^2))
            v * (2.0 / w * (1.0 - n2 / (3.0 * w * w)))
        } else {
            let theta = 2.0 * n.atan2(w);
            v * (theta / n)
        }
    }

    pub fn from_quaternion(q: UnitQuaternion<f64>) -> Self {
        Rotation(UnitQuaternion::new_normalize(q.into_inner()))
    }

    /// Builds a rotation from a matrix, rejecting anything that is not
    /// orthonormal with positive determinant within `1e-6`.
    pub fn from_matrix(m: &Mat3) -> Result<Self> {
        if m.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("rotation matrix has non-finite entries"));
        }
        let ortho = (m.transpose() * m - Mat3::identity()).norm();
        let det = m.determinant();
        if ortho > 1e-6 || (det - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!(
                "matrix is not a rotation (|RtR-I|={ortho:.3e}, det={det:.9})"
            )));
        }
        // nalgebra uses the largest-diagonal (Shepperd) branch here.
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*m));
        Ok(Rotation::from_quaternion(q))
    }

    pub fn quaternion(&self) -> &UnitQuaternion<f64> {
        &self.0
    }

    pub fn matrix(&self) -> Mat3 {
        self.0.to_rotation_matrix().into_inner()
    }

    pub fn inverse(&self) -> Self {
        Rotation(self.0.inverse())
    }

    /// Angle of `self^-1 * other`, in `[0, pi]`.
    pub fn angle_to(&self, other: &Rotation) -> f64 {
        (self.inverse() * *other).log().norm()
    }

    pub fn is_finite(&self) -> bool {
        self.0.coords.iter().all(|x| x.is_finite())
    }
}

impl Mul for Rotation {
    type Output = Rotation;

    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(UnitQuaternion::new_normalize(
            self.0.into_inner() * rhs.0.into_inner(),
        ))
    }
}

impl Mul<Vec3> for Rotation {
    type Output = Vec3;

    fn mul(self, rhs: Vec3) -> Vec3 {
        self.0 * rhs
    }
}

impl Mul<&Vec3> for &Rotation {
    type Output = Vec3;

    fn mul(self, rhs: &Vec3) -> Vec3 {
        self.0 * rhs
    }
}

/// Rigid transform `p -> R p + t`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vec3,
}

impl Pose {
    pub fn new(rotation: Rotation, translation: Vec3) -> Self {
        Pose {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Pose::default()
    }

    pub fn from_translation(t: Vec3) -> Self {
        Pose::new(Rotation::identity(), t)
    }

    pub fn inverse(&self) -> Pose {
        let r_inv = self.rotation.inverse();
        Pose::new(r_inv, -(r_inv * self.translation))
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        &self.rotation * p + self.translation
    }

    /// SE(3) exponential of the twist `(rho, phi)`: translation part first.
    pub fn exp(rho: &Vec3, phi: &Vec3) -> Pose {
        Pose::new(Rotation::exp(phi), left_jacobian(phi) * rho)
    }

    /// SE(3) logarithm, returned as `(rho, phi)`.
    pub fn log(&self) -> (Vec3, Vec3) {
        let phi = self.rotation.log();
        (left_jacobian_inverse(&phi) * self.translation, phi)
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.is_finite() && self.translation.iter().all(|x| x.is_finite())
    }
}

impl Mul for Pose {
    type Output = Pose;

    fn mul(self, rhs: Pose) -> Pose {
        Pose::new(
            self.rotation * rhs.rotation,
            self.rotation * rhs.translation + self.translation,
        )
    }
}

/// `(1 - cos t) / t^2` and `(t - sin t) / t^3`.
fn jacobian_coefficients(theta: f64) -> (f64, f64) {
    let t2 = theta * theta;
    if theta < SERIES_ANGLE {
        (
            0.5 - t2 / 24.0 + t2 * t2 / 720.0,
            1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0,
        )
    } else {
        let s = (0.5 * theta).sin();
        (2.0 * s * s / t2, (theta - theta.sin()) / (t2 * theta))
    }
}

/// Left Jacobian of SO(3), the `V` matrix of the SE(3) exponential.
pub fn left_jacobian(phi: &Vec3) -> Mat3 {
    let (b, c) = jacobian_coefficients(phi.norm());
    let k = hat(phi);
    Mat3::identity() + k * b + k * k * c
}

pub fn left_jacobian_inverse(phi: &Vec3) -> Mat3 {
    let theta = phi.norm();
    let t2 = theta * theta;
    let d = if theta < SERIES_ANGLE {
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    } else {
        let half = 0.5 * theta;
        (1.0 - half / half.tan()) / t2
    };
    let k = hat(phi);
    Mat3::identity() - k * 0.5 + k * k * d
}

/// Right Jacobian of SO(3): `Exp(phi + d) ~ Exp(phi) Exp(Jr(phi) d)`.
pub fn right_jacobian(phi: &Vec3) -> Mat3 {
    let (b, c) = jacobian_coefficients(phi.norm());
    let k = hat(phi);
    Mat3::identity() - k * b + k * k * c
}

fn check_finite(v: &Vec3, what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::invalid(format!("{what} has non-finite components")))
    }
}

fn check_scale(scale: f64) -> Result<()> {
    if (0.0..=1.0).contains(&scale) {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "interpolation scale {scale} outside [0, 1]"
        )))
    }
}

pub fn so3_exp(phi: &Vec3) -> Result<Rotation> {
    check_finite(phi, "so3 tangent")?;
    Ok(Rotation::exp(phi))
}

pub fn so3_log(r: &Rotation) -> Vec3 {
    r.log()
}

/// Geodesic `a * Exp(scale * Log(a^-1 b))`.
pub fn rotation_interpolate(a: &Rotation, b: &Rotation, scale: f64) -> Result<Rotation> {
    check_scale(scale)?;
    Ok(RotationGeodesic::new(a, b).at(scale))
}

/// Screw-motion geodesic `A * Exp(scale * Log(A^-1 B))`.
pub fn se3_interpolate(a: &Pose, b: &Pose, scale: f64) -> Result<Pose> {
    check_scale(scale)?;
    Ok(PoseGeodesic::new(a, b).at(scale))
}

/// Precomputed rotation geodesic for repeated evaluation.
#[derive(Clone, Copy, Debug)]
pub struct RotationGeodesic {
    start: Rotation,
    end: Rotation,
    delta: Vec3,
}

impl RotationGeodesic {
    pub fn new(a: &Rotation, b: &Rotation) -> Self {
        RotationGeodesic {
            start: *a,
            end: *b,
            delta: (a.inverse() * *b).log(),
        }
    }

    /// Caller guarantees `scale` in `[0, 1]`; endpoints are returned exactly.
    pub fn at(&self, scale: f64) -> Rotation {
        if scale == 0.0 {
            self.start
        } else if scale == 1.0 {
            self.end
        } else {
            self.start * Rotation::exp(&(self.delta * scale))
        }
    }
}

/// Precomputed SE(3) geodesic for repeated evaluation.
#[derive(Clone, Copy, Debug)]
pub struct PoseGeodesic {
    start: Pose,
    end: Pose,
    rho: Vec3,
    phi: Vec3,
}

impl PoseGeodesic {
    pub fn new(a: &Pose, b: &Pose) -> Self {
        let (rho, phi) = (a.inverse() * *b).log();
        PoseGeodesic {
            start: *a,
            end: *b,
            rho,
            phi,
        }
    }

    pub fn at(&self, scale: f64) -> Pose {
        if scale == 0.0 {
            self.start
        } else if scale == 1.0 {
            self.end
        } else {
            self.start * Pose::exp(&(self.rho * scale), &(self.phi * scale))
        }
    }
}
