//! Small systems with hand-checkable margins, used by tests and examples.

use crate::model::{Barrier, Dynamics, InputSet};
use crate::{Matrix, Vector};

/// `ẋ = u`, `u ∈ [-1, 1]`.
#[derive(Debug, Clone)]
pub struct Integrator1D {
    input: InputSet,
}

impl Integrator1D {
    pub fn new() -> Self {
        Self::with_bound(1.0)
    }

    pub fn with_bound(bound: f64) -> Self {
        Self {
            input: InputSet::symmetric(1, bound).expect("finite bound"),
        }
    }

    pub fn input_set(&self) -> &InputSet {
        &self.input
    }
}

impl Default for Integrator1D {
    fn default() -> Self {
        Self::new()
    }
}

impl Dynamics for Integrator1D {
    fn dim_state(&self) -> usize {
        1
    }
    fn dim_input(&self) -> usize {
        1
    }
    fn drift(&self, _x: &Vector) -> Vector {
        Vector::zeros(1)
    }
    fn input_matrix(&self, _x: &Vector) -> Matrix {
        Matrix::identity(1, 1)
    }
    fn lipschitz_f(&self) -> Option<f64> {
        Some(0.0)
    }
    fn lipschitz_g(&self) -> Option<f64> {
        Some(0.0)
    }
    fn flow(&self, x: &Vector, u: &Vector, tau: f64, _substeps: usize) -> Vector {
        x + u * tau
    }
}

/// `ẋ₁ = x₂`, `ẋ₂ = u`, `u ∈ [-1, 1]`.
#[derive(Debug, Clone)]
pub struct DoubleIntegrator {
    input: InputSet,
}

impl DoubleIntegrator {
    pub fn new() -> Self {
        Self {
            input: InputSet::symmetric(1, 1.0).expect("finite bound"),
        }
    }

    pub fn input_set(&self) -> &InputSet {
        &self.input
    }
}

impl Default for DoubleIntegrator {
    fn default() -> Self {
        Self::new()
    }
}

impl Dynamics for DoubleIntegrator {
    fn dim_state(&self) -> usize {
        2
    }
    fn dim_input(&self) -> usize {
        1
    }
    fn drift(&self, x: &Vector) -> Vector {
        Vector::from_vec(vec![x[1], 0.0])
    }
    fn input_matrix(&self, _x: &Vector) -> Matrix {
        Matrix::from_column_slice(2, 1, &[0.0, 1.0])
    }
    fn lipschitz_f(&self) -> Option<f64> {
        Some(1.0)
    }
    fn lipschitz_g(&self) -> Option<f64> {
        Some(0.0)
    }
    fn flow(&self, x: &Vector, u: &Vector, tau: f64, _substeps: usize) -> Vector {
        Vector::from_vec(vec![
            x[0] + x[1] * tau + 0.5 * u[0] * tau * tau,
            x[1] + u[0] * tau,
        ])
    }
}

/// `ẋ = 0` regardless of the input.
#[derive(Debug, Clone)]
pub struct StaticSystem {
    input: InputSet,
}

impl StaticSystem {
    pub fn new() -> Self {
        Self {
            input: InputSet::symmetric(1, 1.0).expect("finite bound"),
        }
    }

    pub fn input_set(&self) -> &InputSet {
        &self.input
    }
}

impl Default for StaticSystem {
    fn default() -> Self {
        Self::new()
    }
}

impl Dynamics for StaticSystem {
    fn dim_state(&self) -> usize {
        1
    }
    fn dim_input(&self) -> usize {
        1
    }
    fn drift(&self, _x: &Vector) -> Vector {
        Vector::zeros(1)
    }
    fn input_matrix(&self, _x: &Vector) -> Matrix {
        Matrix::zeros(1, 1)
    }
    fn lipschitz_f(&self) -> Option<f64> {
        Some(0.0)
    }
    fn lipschitz_g(&self) -> Option<f64> {
        Some(0.0)
    }
    fn flow(&self, x: &Vector, _u: &Vector, _tau: f64, _substeps: usize) -> Vector {
        x.clone()
    }
}

/// `ẋ = -rate·x + u`, `u ∈ [-1, 1]`.
#[derive(Debug, Clone)]
pub struct LinearDecay {
    rate: f64,
    input: InputSet,
}

impl LinearDecay {
    pub fn new(rate: f64) -> Self {
        Self {
            rate,
            input: InputSet::symmetric(1, 1.0).expect("finite bound"),
        }
    }

    pub fn input_set(&self) -> &InputSet {
        &self.input
    }
}

impl Dynamics for LinearDecay {
    fn dim_state(&self) -> usize {
        1
    }
    fn dim_input(&self) -> usize {
        1
    }
    fn drift(&self, x: &Vector) -> Vector {
        x * -self.rate
    }
    fn input_matrix(&self, _x: &Vector) -> Matrix {
        Matrix::identity(1, 1)
    }
    fn lipschitz_f(&self) -> Option<f64> {
        Some(self.rate.abs())
    }
    fn lipschitz_g(&self) -> Option<f64> {
        Some(0.0)
    }
}

/// `h(x) = a·x + c`.
#[derive(Debug, Clone)]
pub struct LinearBarrier {
    a: Vector,
    c: f64,
}

impl LinearBarrier {
    pub fn new(a: Vec<f64>, c: f64) -> Self {
        Self {
            a: Vector::from_vec(a),
            c,
        }
    }
}

impl Barrier for LinearBarrier {
    fn value(&self, x: &Vector) -> f64 {
        self.a.dot(x) + self.c
    }

    fn gradient(&self, _x: &Vector) -> Vector {
        self.a.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_flows_match_rk4() {
        let x = Vector::from_vec(vec![0.3, -0.7]);
        let u = Vector::from_vec(vec![0.4]);
        let sys = DoubleIntegrator::new();
        let exact = sys.flow(&x, &u, 0.1, 0);
        let numeric = crate::integrate::rk4(|z| sys.velocity(z, &u), &x, 0.1, 20);
        assert!((exact - numeric).norm() < 1e-14);
    }
}
