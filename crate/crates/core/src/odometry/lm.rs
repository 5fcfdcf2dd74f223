//! Levenberg–Marquardt over a left-multiplicative SE(3) increment for
//! point-to-line residual blocks.

use nalgebra::{Matrix3, Matrix3x6, Matrix6, Vector3, Vector6};

use crate::geometry::{Point3, PoseDelta6, PoseSE3};

/// Vector point-to-line residual `ω · ((T p − a) × u)` with `u` a unit line
/// direction; its norm is `ω · d_e`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineResidual {
    /// Edge in the sensor frame.
    pub source: Point3,
    /// A point on the line (first anchor).
    pub anchor: Point3,
    /// Unit direction of the line.
    pub direction: Vector3<f64>,
    pub weight: f64,
}

#[inline]
fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

impl LineResidual {
    pub fn new(source: Point3, n1: Point3, n2: Point3, weight: f64) -> Self {
        Self {
            source,
            anchor: n1,
            direction: (n1 - n2).normalize(),
            weight,
        }
    }

    #[inline]
    pub fn evaluate(&self, pose: &PoseSE3) -> Vector3<f64> {
        let pw = pose.apply(&self.source);
        self.weight * (pw - self.anchor).cross(&self.direction)
    }

    /// Jacobian w.r.t. `[ω, v]` of `exp(δ) · pose` at `δ = 0`:
    /// `∂r/∂p_w = −ω [u]×`, `∂p_w/∂ω = −[p_w]×`, `∂p_w/∂v = I`.
    pub fn jacobian(&self, pose: &PoseSE3) -> Matrix3x6<f64> {
        let pw = pose.apply(&self.source);
        let ux = skew(&self.direction);
        let mut j = Matrix3x6::zeros();
        j.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&(self.weight * ux * skew(&pw)));
        j.fixed_view_mut::<3, 3>(0, 3)
            .copy_from(&(-self.weight * ux));
        j
    }

    /// Central finite differences with step `h` on each increment coordinate.
    pub fn numeric_jacobian(&self, pose: &PoseSE3, h: f64) -> Matrix3x6<f64> {
        let mut j = Matrix3x6::zeros();
        for c in 0..6 {
            let mut d = [0.0; 6];
            d[c] = h;
            let plus = self.evaluate(&(PoseDelta6::from_slice(&d).exp() * *pose));
            d[c] = -h;
            let minus = self.evaluate(&(PoseDelta6::from_slice(&d).exp() * *pose));
            j.set_column(c, &((plus - minus) / (2.0 * h)));
        }
        j
    }
}

/// `ρ(s) = s` for `√s ≤ δ`, `2δ√s − δ²` beyond.
#[inline]
pub fn huber_rho(s: f64, delta: f64) -> f64 {
    if s <= delta * delta {
        s
    } else {
        2.0 * delta * s.sqrt() - delta * delta
    }
}

/// `dρ/ds`.
#[inline]
pub fn huber_rho_derivative(s: f64, delta: f64) -> f64 {
    if s <= delta * delta {
        1.0
    } else {
        delta / s.sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JacobianMode {
    #[default]
    Analytic,
    Numeric,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmSettings {
    pub max_iterations: usize,
    pub initial_damping: f64,
    pub cost_tolerance: f64,
    pub step_tolerance: f64,
    pub huber_delta: f64,
    pub jacobian: JacobianMode,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LmReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Linear solves attempted.
    pub iterations: usize,
    /// Cost after each accepted step, starting with the initial cost.
    pub accepted_costs: Vec<f64>,
    pub converged: bool,
}

impl LmReport {
    /// True when no accepted step increased the cost.
    pub fn is_monotone(&self) -> bool {
        self.accepted_costs.windows(2).all(|w| w[1] <= w[0])
    }
}

/// `½ Σ ρ(‖r‖²)`.
pub fn total_cost(residuals: &[LineResidual], pose: &PoseSE3, delta: f64) -> f64 {
    0.5 * residuals
        .iter()
        .map(|r| huber_rho(r.evaluate(pose).norm_squared(), delta))
        .sum::<f64>()
}

fn normal_equations(
    residuals: &[LineResidual],
    pose: &PoseSE3,
    s: &LmSettings,
) -> (Matrix6<f64>, Vector6<f64>) {
    let mut h = Matrix6::zeros();
    let mut g = Vector6::zeros();
    for r in residuals {
        let e = r.evaluate(pose);
        let w = huber_rho_derivative(e.norm_squared(), s.huber_delta);
        let j = match s.jacobian {
            JacobianMode::Analytic => r.jacobian(pose),
            JacobianMode::Numeric => r.numeric_jacobian(pose, 1e-6),
        };
        let jt = j.transpose();
        h += w * jt * j;
        g += w * jt * e;
    }
    (h, g)
}

/// Minimizes [`total_cost`] starting at `pose`.
///
/// Damped normal equations `(H + λ diag(H)) δ = −g`; λ is multiplied by 10
/// on a rejected step and by 0.5 on an accepted one. Stops on a relative
/// cost decrease below `cost_tolerance`, a step norm below
/// `step_tolerance`, or after `max_iterations` solves.
pub fn solve(residuals: &[LineResidual], pose: PoseSE3, s: &LmSettings) -> (PoseSE3, LmReport) {
    let mut pose = pose;
    let mut cost = total_cost(residuals, &pose, s.huber_delta);
    let mut report = LmReport {
        initial_cost: cost,
        final_cost: cost,
        accepted_costs: vec![cost],
        ..Default::default()
    };
    if residuals.is_empty() || cost == 0.0 {
        report.converged = true;
        return (pose, report);
    }

    let mut lambda = s.initial_damping;
    let (mut h, mut g) = normal_equations(residuals, &pose, s);
    while report.iterations < s.max_iterations {
        report.iterations += 1;
        let diag_floor = 1e-12 * h.diagonal().max().max(1e-12);
        let mut damped = h;
        for i in 0..6 {
            damped[(i, i)] += lambda * h[(i, i)].max(diag_floor);
        }
        let Some(chol) = damped.cholesky() else {
            lambda *= 10.0;
            continue;
        };
        let step = PoseDelta6::from_slice((-chol.solve(&g)).as_slice());
        if step.norm() < s.step_tolerance {
            report.converged = true;
            break;
        }
        let candidate = step.exp() * pose;
        let new_cost = total_cost(residuals, &candidate, s.huber_delta);
        if new_cost < cost {
            let decrease = (cost - new_cost) / cost;
            pose = candidate;
            cost = new_cost;
            report.accepted_costs.push(cost);
            lambda = (lambda * 0.5).max(1e-12);
            if decrease < s.cost_tolerance || cost == 0.0 {
                report.converged = true;
                break;
            }
            (h, g) = normal_equations(residuals, &pose, s);
        } else {
            lambda *= 10.0;
            if lambda > 1e16 {
                // No descent direction left at machine precision.
                report.converged = true;
                break;
            }
        }
    }
    report.final_cost = cost;
    (pose, report)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn huber_examples() {
        assert_eq!(huber_rho(0.0, 0.3), 0.0);
        let d: f64 = 0.3;
        assert!((huber_rho(d * d, d) - d * d).abs() < 1e-15);
        assert!((2.0 * d * (d * d).sqrt() - d * d - d * d).abs() < 1e-15);
        assert!((huber_rho(1.0, 0.1) - 0.19).abs() < 1e-15);
    }

    #[test]
    fn huber_is_c1() {
        let d: f64 = 0.25;
        let s0 = d * d;
        let eps = 1e-9;
        let left = (huber_rho(s0, d) - huber_rho(s0 - eps, d)) / eps;
        let right = (huber_rho(s0 + eps, d) - huber_rho(s0, d)) / eps;
        assert!((left - right).abs() < 1e-6);
        assert!((huber_rho_derivative(s0, d) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn analytic_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..1000 {
            let pose = PoseSE3::from_euler(
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-3.0..3.0),
                Vector3::new(
                    rng.random_range(-30.0..30.0),
                    rng.random_range(-30.0..30.0),
                    rng.random_range(-2.0..2.0),
                ),
            );
            let src = Point3::new(
                rng.random_range(-40.0..40.0),
                rng.random_range(-40.0..40.0),
                rng.random_range(-3.0..3.0),
            );
            let n1 = pose.apply(&src)
                + Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                );
            let n2 = n1
                + Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(0.2..1.0),
                );
            let r = LineResidual::new(src, n1, n2, rng.random_range(0.05..1.0));
            let a = r.jacobian(&pose);
            let n = r.numeric_jacobian(&pose, 1e-6);
            let rel = (a - n).norm() / n.norm().max(1e-12);
            assert!(rel < 1e-5, "relative Jacobian error {rel}");
        }
    }

    #[test]
    fn zero_residual_is_a_fixed_point() {
        let pose = PoseSE3::from_euler(0.1, 0.0, 0.3, Vector3::new(1.0, 2.0, 0.0));
        let src = Point3::new(5.0, 1.0, 0.5);
        let pw = pose.apply(&src);
        let r = LineResidual::new(src, pw + Vector3::z(), pw - Vector3::z(), 1.0);
        let s = LmSettings {
            max_iterations: 25,
            initial_damping: 1e-4,
            cost_tolerance: 1e-8,
            step_tolerance: 1e-10,
            huber_delta: 0.3,
            jacobian: JacobianMode::Analytic,
        };
        let (out, rep) = solve(&[r], pose, &s);
        assert!(rep.final_cost < 1e-12);
        assert!(out.max_abs_diff(&pose) < 1e-12);
        assert!(rep.converged);
    }
}
