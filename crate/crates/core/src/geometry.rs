//! Rigid-body transforms on SE(3).
//!
//! Frame convention: a pose `T^A_B` maps points expressed in frame `B` into
//! frame `A`, i.e. `p_A = R p_B + t`. Trajectory poses are `T^W_L` (sensor to
//! world).

use nalgebra::{Matrix3, Rotation3, Vector3};

use crate::error::{Error, Result};

/// A point or free vector in metres.
pub type Point3 = Vector3<f64>;

/// Rigid transform stored as an orthonormal rotation matrix plus translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSE3 {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

/// Minimal six-parameter increment: angle-axis rotation and translation.
///
/// `exp` builds the pose `(Rodrigues(rotation), translation)`; the optimizer
/// applies it on the left, `T <- exp(delta) * T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseDelta6 {
    pub rotation: Vector3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for PoseSE3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl PoseSE3 {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Pose from an angle-axis vector (radians) and a translation.
    pub fn from_axis_angle(axis_angle: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: Rotation3::from_scaled_axis(axis_angle).into_inner(),
            translation,
        }
    }

    /// Pose from roll/pitch/yaw (radians, applied as `Rz(yaw) Ry(pitch) Rx(roll)`).
    pub fn from_euler(roll: f64, pitch: f64, yaw: f64, translation: Vector3<f64>) -> Self {
        Self {
            rotation: Rotation3::from_euler_angles(roll, pitch, yaw).into_inner(),
            translation,
        }
    }

    /// `R p + t`.
    #[inline]
    pub fn apply(&self, p: &Point3) -> Point3 {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applying the result equals applying `other` then `self`.
    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        PoseSE3 {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> PoseSE3 {
        let rt = self.rotation.transpose();
        PoseSE3 {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Rotation angle in radians, in `[0, π]`.
    pub fn rotation_angle(&self) -> f64 {
        let c = 0.5 * (self.rotation.trace() - 1.0);
        c.clamp(-1.0, 1.0).acos()
    }

    pub fn log(&self) -> PoseDelta6 {
        PoseDelta6 {
            rotation: Rotation3::from_matrix_unchecked(self.rotation).scaled_axis(),
            translation: self.translation,
        }
    }

    /// Rows of the upper 3x4 block `[R | t]`, row-major.
    pub fn to_row_major_3x4(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t.x,
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t.y,
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.z,
        ]
    }

    pub fn from_row_major_3x4(v: &[f64; 12]) -> PoseSE3 {
        PoseSE3 {
            rotation: Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]),
            translation: Vector3::new(v[3], v[7], v[11]),
        }
    }

    /// Re-orthonormalizes the rotation (nearest rotation in Frobenius norm).
    pub fn orthonormalized(&self) -> PoseSE3 {
        let svd = self.rotation.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut d = Matrix3::identity();
        if (u * vt).determinant() < 0.0 {
            d[(2, 2)] = -1.0;
        }
        PoseSE3 {
            rotation: u * d * vt,
            translation: self.translation,
        }
    }

    /// Largest absolute entry-wise difference to `other` over `[R | t]`.
    pub fn max_abs_diff(&self, other: &PoseSE3) -> f64 {
        self.to_row_major_3x4()
            .iter()
            .zip(other.to_row_major_3x4().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl std::ops::Mul for PoseSE3 {
    type Output = PoseSE3;

    fn mul(self, rhs: PoseSE3) -> PoseSE3 {
        self.compose(&rhs)
    }
}

impl PoseDelta6 {
    pub fn zero() -> Self {
        Self {
            rotation: Vector3::zeros(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self {
            rotation: Vector3::new(v[0], v[1], v[2]),
            translation: Vector3::new(v[3], v[4], v[5]),
        }
    }

    pub fn exp(&self) -> PoseSE3 {
        PoseSE3::from_axis_angle(self.rotation, self.translation)
    }

    pub fn norm(&self) -> f64 {
        (self.rotation.norm_squared() + self.translation.norm_squared()).sqrt()
    }
}

/// Applies `pose` to `p` (`R p + t`).
pub fn se3_apply(pose: &PoseSE3, p: &Point3) -> Point3 {
    pose.apply(p)
}

pub fn se3_compose(a: &PoseSE3, b: &PoseSE3) -> PoseSE3 {
    a.compose(b)
}

pub fn se3_inverse(a: &PoseSE3) -> PoseSE3 {
    a.inverse()
}

/// Initial guess assuming the last inter-frame motion repeats:
/// `T_prev · T_prevprev⁻¹ · T_prev`.
pub fn constant_velocity_prior(t_prev: &PoseSE3, t_prevprev: &PoseSE3) -> PoseSE3 {
    t_prev.compose(&t_prevprev.inverse()).compose(t_prev)
}

/// Least-squares rigid alignment (rotation and translation, no scale).
///
/// Returns `G` minimizing `Σ ‖G · estimated_k − reference_k‖²`, so that the
/// aligned estimate is `G` applied to each estimated point.
///
/// Fails with [`Error::Degenerate`] when the cross-covariance has rank below
/// two (all points collinear or coincident), where the rotation is not unique.
pub fn umeyama_align(estimated: &[Point3], reference: &[Point3]) -> Result<PoseSE3> {
    if estimated.len() != reference.len() {
        return Err(Error::LengthMismatch(estimated.len(), reference.len()));
    }
    let n = estimated.len();
    if n < 3 {
        return Err(Error::TooFewSamples { needed: 3, got: n });
    }
    let inv_n = 1.0 / n as f64;
    let mean_est = estimated.iter().sum::<Point3>() * inv_n;
    let mean_ref = reference.iter().sum::<Point3>() * inv_n;

    let mut sigma = Matrix3::zeros();
    for (e, r) in estimated.iter().zip(reference) {
        sigma += (r - mean_ref) * (e - mean_est).transpose();
    }
    sigma *= inv_n;

    let svd = sigma.svd(true, true);
    let mut sv = [
        svd.singular_values[0],
        svd.singular_values[1],
        svd.singular_values[2],
    ];
    sv.sort_by(|a, b| b.total_cmp(a));
    if sv[0] <= f64::MIN_POSITIVE || sv[1] <= 1e-12 * sv[0] {
        return Err(Error::Degenerate("point covariance is rank-deficient"));
    }

    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut s = Matrix3::identity();
    if u.determinant() * vt.determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let rotation = u * s * vt;
    let translation = mean_ref - rotation * mean_est;
    Ok(PoseSE3 {
        rotation,
        translation,
    })
}
