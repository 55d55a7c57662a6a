//! Kinematic unicycle with the polar obstacle barrier.

use crate::model::{Barrier, Dynamics, InputSet};
use crate::reach::{ReachBound, ReachKind};
use crate::systems::wrap_pi;
use crate::{Matrix, Vector};

/// `ẋ₁ = u₁ cos x₃`, `ẋ₂ = u₁ sin x₃`, `ẋ₃ = u₂`.
#[derive(Debug, Clone)]
pub struct Unicycle {
    input: InputSet,
}

impl Unicycle {
    /// `u₁ ∈ [0, 5]`, `u₂ ∈ [-0.25, 0.25]`.
    pub fn new() -> Self {
        Self::with_input(InputSet::new(vec![0.0, -0.25], vec![5.0, 0.25]).expect("valid bounds"))
    }

    pub fn with_input(input: InputSet) -> Self {
        Self { input }
    }

    pub fn input_set(&self) -> &InputSet {
        &self.input
    }
}

impl Default for Unicycle {
    fn default() -> Self {
        Self::new()
    }
}

fn sinc(s: f64) -> f64 {
    if s.abs() < 1e-4 {
        1.0 - s * s / 6.0
    } else {
        s.sin() / s
    }
}

/// State after holding `(u₁, u₂)` for `tau` seconds, using the closed-form arc.
pub fn arc(x: &Vector, u: &Vector, tau: f64) -> Vector {
    let half = 0.5 * u[1] * tau;
    let chord = u[0] * tau * sinc(half);
    let mid = x[2] + half;
    Vector::from_vec(vec![
        x[0] + chord * mid.cos(),
        x[1] + chord * mid.sin(),
        x[2] + u[1] * tau,
    ])
}

impl Dynamics for Unicycle {
    fn dim_state(&self) -> usize {
        3
    }

    fn dim_input(&self) -> usize {
        2
    }

    fn drift(&self, _x: &Vector) -> Vector {
        Vector::zeros(3)
    }

    fn input_matrix(&self, x: &Vector) -> Matrix {
        let (s, c) = x[2].sin_cos();
        Matrix::from_row_slice(3, 2, &[c, 0.0, s, 0.0, 0.0, 1.0])
    }

    fn drift_jacobian(&self, _x: &Vector) -> Matrix {
        Matrix::zeros(3, 3)
    }

    fn lipschitz_f(&self) -> Option<f64> {
        Some(0.0)
    }

    fn lipschitz_g(&self) -> Option<f64> {
        Some(1.0)
    }

    /// Headings are identified modulo `2π`.
    fn project(&self, x: &mut Vector) {
        x[2] = wrap_pi(x[2]);
    }

    fn flow(&self, x: &Vector, u: &Vector, tau: f64, _substeps: usize) -> Vector {
        arc(x, u, tau)
    }
}

/// Exact one-period reach cover `{arc(x_k, u, τ) : u ∈ U, τ ∈ [0, T)}`;
/// `resolution` is the per-axis count of [`ReachBound::cover`].
pub fn reach_exact_unicycle(x_k: &Vector, horizon: f64, resolution: usize) -> ReachBound {
    ReachBound {
        center: x_k.clone(),
        horizon,
        kind: ReachKind::ConstantInputFlow { resolution },
        delta_used: None,
    }
}

/// `h = ρ - sqrt(r² - wrap_π(x₃ - σ·atan2(y, x))²)` relative to the obstacle
/// center. Non-differentiable where the wrapped angle is `±π` and at the center.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarBarrier {
    pub center: [f64; 2],
    pub rho: f64,
    pub sigma: f64,
}

impl PolarBarrier {
    pub fn new(center: [f64; 2], rho: f64, sigma: f64) -> Self {
        Self { center, rho, sigma }
    }

    fn parts(&self, x: &Vector) -> (f64, f64, f64, f64) {
        let dx = x[0] - self.center[0];
        let dy = x[1] - self.center[1];
        let r2 = dx * dx + dy * dy;
        let w = wrap_pi(x[2] - self.sigma * dy.atan2(dx));
        (dx, dy, r2, w)
    }

    /// Wrapped heading error `w`.
    pub fn angle(&self, x: &Vector) -> f64 {
        self.parts(x).3
    }

    /// Radicand `r² - w²`; negative values have no barrier value.
    pub fn radicand(&self, x: &Vector) -> f64 {
        let (_, _, r2, w) = self.parts(x);
        r2 - w * w
    }
}

impl Barrier for PolarBarrier {
    fn value(&self, x: &Vector) -> f64 {
        let q = self.radicand(x);
        if q < 0.0 {
            return f64::NAN;
        }
        self.rho - q.sqrt()
    }

    fn gradient(&self, x: &Vector) -> Vector {
        let (dx, dy, r2, w) = self.parts(x);
        let q = r2 - w * w;
        if !(q > 0.0) {
            return Vector::from_element(3, f64::NAN);
        }
        let s = q.sqrt();
        let k = self.sigma * w / r2;
        Vector::from_vec(vec![-(dx - k * dy) / s, -(dy + k * dx) / s, w / s])
    }

    fn near_nondifferentiable(&self, x: &Vector, radius: f64) -> bool {
        let (_, _, r2, w) = self.parts(x);
        let r = r2.sqrt();
        if r <= radius {
            return true;
        }
        let slope = (1.0 + (self.sigma / (r - radius)).powi(2)).sqrt();
        std::f64::consts::PI - w.abs() <= radius * slope
    }

    fn nondiff_set_description(&self) -> &str {
        "states whose wrapped heading error x₃ - σ·atan2(x₂, x₁) equals ±π, and the obstacle center"
    }

    /// Same position, heading moved onto the nearer branch `w = ±π`.
    fn snap_to_nondifferentiable(&self, x: &Vector) -> Option<Vector> {
        let (dx, dy, _, w) = self.parts(x);
        let mut z = x.clone();
        z[2] = self.sigma * dy.atan2(dx) + std::f64::consts::PI.copysign(w);
        Some(z)
    }
}

/// Go-to-target law: `u₁ = clamp(k_v·d, U₁)`, `u₂ = clamp(k_ω·wrap_π(bearing - x₃), U₂)`.
pub fn unicycle_nominal(
    x: &Vector,
    target: [f64; 2],
    k_v: f64,
    k_omega: f64,
    input: &InputSet,
) -> Vector {
    let dx = target[0] - x[0];
    let dy = target[1] - x[1];
    let dist = dx.hypot(dy);
    if dist == 0.0 {
        return input.clamp(&Vector::zeros(2));
    }
    let bearing_error = wrap_pi(dy.atan2(dx) - x[2]);
    input.clamp(&Vector::from_vec(vec![k_v * dist, k_omega * bearing_error]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn v(xs: &[f64]) -> Vector {
        Vector::from_vec(xs.to_vec())
    }

    #[test]
    fn straight_line_limit() {
        let z = arc(&v(&[0.0, 0.0, 0.0]), &v(&[1.0, 0.0]), 0.1);
        assert!((z - v(&[0.1, 0.0, 0.0])).norm() < 1e-15);
    }

    #[test]
    fn turning_in_place() {
        let z = arc(&v(&[1.0, 2.0, 0.3]), &v(&[0.0, 0.25]), 0.1);
        assert!((z - v(&[1.0, 2.0, 0.325])).norm() < 1e-15);
    }

    #[test]
    fn nominal_examples() {
        let sys = Unicycle::new();
        let u = unicycle_nominal(
            &v(&[0.0, -20.0, PI / 2.0]),
            [0.0, 20.0],
            1.0,
            1.0,
            sys.input_set(),
        );
        assert!((u - v(&[5.0, 0.0])).norm() < 1e-12);
        let u = unicycle_nominal(
            &v(&[0.0, 20.0, 1.0]),
            [0.0, 20.0],
            1.0,
            1.0,
            sys.input_set(),
        );
        assert_eq!(u, v(&[0.0, 0.0]));
        let u = unicycle_nominal(&v(&[0.0, 0.0, 0.0]), [0.0, 20.0], 1.0, 1.0, sys.input_set());
        assert_eq!(u[1], 0.25);
    }

    #[test]
    fn barrier_is_nan_inside_the_radicand_hole() {
        let h = PolarBarrier::new([0.0, 0.0], 10.0, 1.0);
        assert!(h.value(&v(&[0.5, 0.0, 3.0])).is_nan());
        assert!((h.value(&v(&[20.0, 0.0, 0.0])) + 10.0).abs() < 1e-12);
    }
}
