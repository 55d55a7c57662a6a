//! Spacecraft pointing: unit boresight `p`, body rate `ω`, rate input `u`.

use nalgebra::Vector3;

use crate::model::{Barrier, Dynamics, InputSet};
use crate::{Matrix, Vector};

fn p_of(x: &Vector) -> Vector3<f64> {
    Vector3::new(x[0], x[1], x[2])
}

fn w_of(x: &Vector) -> Vector3<f64> {
    Vector3::new(x[3], x[4], x[5])
}

fn skew(a: &Vector3<f64>) -> [[f64; 3]; 3] {
    [[0.0, -a.z, a.y], [a.z, 0.0, -a.x], [-a.y, a.x, 0.0]]
}

/// `ṗ = ω × p`, `ω̇ = u`, `||u||∞ <= u_bound`, states `(p, ω) ∈ ℝ⁶`.
#[derive(Debug, Clone)]
pub struct Spacecraft {
    input: InputSet,
    omega_max: f64,
}

impl Spacecraft {
    /// `||u||∞ <= 0.01`, rates bounded by `||ω||∞ <= 0.2` in the working domain.
    pub fn new() -> Self {
        Self::with_bounds(0.01, 0.2)
    }

    pub fn with_bounds(u_bound: f64, omega_max: f64) -> Self {
        Self {
            input: InputSet::symmetric(3, u_bound).expect("finite bound"),
            omega_max,
        }
    }

    pub fn input_set(&self) -> &InputSet {
        &self.input
    }

    pub fn omega_max(&self) -> f64 {
        self.omega_max
    }
}

impl Default for Spacecraft {
    fn default() -> Self {
        Self::new()
    }
}

impl Dynamics for Spacecraft {
    fn dim_state(&self) -> usize {
        6
    }

    fn dim_input(&self) -> usize {
        3
    }

    fn drift(&self, x: &Vector) -> Vector {
        let pd = w_of(x).cross(&p_of(x));
        Vector::from_vec(vec![pd.x, pd.y, pd.z, 0.0, 0.0, 0.0])
    }

    fn input_matrix(&self, _x: &Vector) -> Matrix {
        let mut g = Matrix::zeros(6, 3);
        for i in 0..3 {
            g[(3 + i, i)] = 1.0;
        }
        g
    }

    fn drift_jacobian(&self, x: &Vector) -> Matrix {
        let wx = skew(&w_of(x));
        let px = skew(&p_of(x));
        let mut j = Matrix::zeros(6, 6);
        for r in 0..3 {
            for c in 0..3 {
                j[(r, c)] = wx[r][c];
                j[(r, 3 + c)] = -px[r][c];
            }
        }
        j
    }

    /// `sqrt(||p||² + ||ω||²_max)` bounds `||[ [ω]×, -[p]× ]||` on the domain.
    fn lipschitz_f(&self) -> Option<f64> {
        Some((1.0 + 3.0 * self.omega_max * self.omega_max).sqrt())
    }

    fn lipschitz_g(&self) -> Option<f64> {
        Some(0.0)
    }

    fn project(&self, x: &mut Vector) {
        let n = p_of(x).norm();
        if n > 0.0 {
            for i in 0..3 {
                x[i] /= n;
            }
        }
    }
}

/// `h = s·p - cos θ + μ c|c|` with `c = s·(ω × p)`. Second derivatives jump
/// on `c = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointingBarrier {
    pub s: Vector3<f64>,
    pub theta: f64,
    pub mu: f64,
}

impl PointingBarrier {
    pub fn new(s: [f64; 3], theta: f64, mu: f64) -> Self {
        let s = Vector3::from(s);
        Self {
            s: s / s.norm(),
            theta,
            mu,
        }
    }

    fn c(&self, x: &Vector) -> f64 {
        self.s.dot(&w_of(x).cross(&p_of(x)))
    }
}

impl Barrier for PointingBarrier {
    fn value(&self, x: &Vector) -> f64 {
        let c = self.c(x);
        self.s.dot(&p_of(x)) - self.theta.cos() + self.mu * c * c.abs()
    }

    fn gradient(&self, x: &Vector) -> Vector {
        let p = p_of(x);
        let w = w_of(x);
        let k = 2.0 * self.mu * self.c(x).abs();
        let gp = self.s + self.s.cross(&w) * k;
        let gw = p.cross(&self.s) * k;
        Vector::from_vec(vec![gp.x, gp.y, gp.z, gw.x, gw.y, gw.z])
    }

    fn near_nondifferentiable(&self, x: &Vector, radius: f64) -> bool {
        let slope = 1.0 + w_of(x).norm() + radius;
        self.c(x).abs() <= radius * slope
    }

    fn nondiff_set_description(&self) -> &str {
        "states with s·(ω × p) = 0"
    }

    fn psi(&self, _model: &dyn Dynamics, x: &Vector, u: &Vector) -> f64 {
        let p = p_of(x);
        let w = w_of(x);
        let u = Vector3::new(u[0], u[1], u[2]);
        let s = &self.s;
        let a = w.cross(&p);
        let c = s.dot(&a);
        if c == 0.0 {
            return f64::NAN;
        }
        let cd = s.dot(&u.cross(&p)) + s.dot(&w.cross(&a));
        let cdd = 2.0 * s.dot(&u.cross(&a))
            + s.dot(&w.cross(&u.cross(&p)))
            + s.dot(&w.cross(&w.cross(&a)));
        let pdd = w.cross(&a) + u.cross(&p);
        s.dot(&pdd) + 2.0 * self.mu * (c.signum() * cd * cd + c.abs() * cdd)
    }
}

/// `h = sign·ω_axis - bound`; `ḣ = sign·u_axis` so `ψ ≡ 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct OmegaBoxBarrier {
    pub axis: usize,
    pub sign: f64,
    pub bound: f64,
}

impl Barrier for OmegaBoxBarrier {
    fn value(&self, x: &Vector) -> f64 {
        self.sign * x[3 + self.axis] - self.bound
    }

    fn gradient(&self, _x: &Vector) -> Vector {
        let mut g = Vector::zeros(6);
        g[3 + self.axis] = self.sign;
        g
    }

    fn psi(&self, _model: &dyn Dynamics, _x: &Vector, _u: &Vector) -> f64 {
        0.0
    }
}

/// Six barriers `±ω_i - bound`.
pub fn omega_box_barriers(bound: f64) -> Vec<OmegaBoxBarrier> {
    (0..3)
        .flat_map(|axis| [1.0, -1.0].map(|sign| OmegaBoxBarrier { axis, sign, bound }))
        .collect()
}

/// PD slew toward `target`: `u = k_p e - k_d ω`, scaled so that `||u||∞ <= u_bound`,
/// with `e = p × target` (a fixed axis orthogonal to `p` when antiparallel).
pub fn spacecraft_nominal(
    x: &Vector,
    target: &Vector3<f64>,
    k_p: f64,
    k_d: f64,
    u_bound: f64,
) -> Vector {
    let p = p_of(x);
    let w = w_of(x);
    let mut e = p.cross(target);
    if e.norm() < 1e-12 && p.dot(target) < 0.0 {
        e = (0..3)
            .map(|i| {
                let b = Vector3::ith(i, 1.0);
                b - p * p.dot(&b)
            })
            .find(|v| v.norm() > 1e-6)
            .map(|v| v.normalize())
            .unwrap_or_else(Vector3::zeros);
    }
    let mut u = e * k_p - w * k_d;
    let peak = u.amax();
    if peak > u_bound {
        u *= u_bound / peak;
    }
    Vector::from_vec(vec![u.x, u.y, u.z])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fd_gradient;

    fn state(p: [f64; 3], w: [f64; 3]) -> Vector {
        let p = Vector3::from(p).normalize();
        Vector::from_vec(vec![p.x, p.y, p.z, w[0], w[1], w[2]])
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let h = PointingBarrier::new([1.0, 0.0, 0.0], std::f64::consts::PI / 5.0, 100.0);
        let x = state([0.3, -0.8, 0.5], [0.05, -0.1, 0.02]);
        let fd = fd_gradient(|y| h.value(y), &x);
        assert!((h.gradient(&x) - &fd).norm() < 1e-6 * fd.norm());
    }

    #[test]
    fn psi_matches_derivative_of_hdot() {
        let sys = Spacecraft::new();
        let h = PointingBarrier::new([1.0, 0.0, 0.0], std::f64::consts::PI / 5.0, 100.0);
        let x = state([0.3, -0.8, 0.5], [0.05, -0.1, 0.02]);
        let u = Vector::from_vec(vec![0.01, -0.004, 0.007]);
        let hd = |y: &Vector| h.gradient(y).dot(&sys.velocity(y, &u));
        let dt = 1e-5;
        let fwd = sys.flow(&x, &u, dt, 4);
        let bwd = crate::integrate::rk4(|z| -sys.velocity(z, &u), &x, dt, 4);
        let fd = (hd(&fwd) - hd(&bwd)) / (2.0 * dt);
        let exact = h.psi(&sys, &x, &u);
        assert!(
            (exact - fd).abs() < 1e-4 * exact.abs().max(1e-3),
            "{exact} vs {fd}"
        );
    }

    #[test]
    fn nominal_examples() {
        let target = Vector3::new(0.0, 1.0, 0.0);
        assert_eq!(
            spacecraft_nominal(&state([0.0, 1.0, 0.0], [0.0; 3]), &target, 0.02, 0.2, 0.01).norm(),
            0.0
        );
        let u = spacecraft_nominal(
            &state([0.0, 1.0, 0.0], [0.1, 0.0, -0.2]),
            &target,
            0.02,
            0.2,
            0.01,
        );
        assert!((u - Vector::from_vec(vec![-0.005, 0.0, 0.01])).norm() < 1e-15);
        let u = spacecraft_nominal(&state([1.0, 0.0, 0.0], [0.0; 3]), &target, 1.0, 0.2, 0.01);
        assert!((u - Vector::from_vec(vec![0.0, 0.0, 0.01])).norm() < 1e-15);
        let u = spacecraft_nominal(&state([0.0, -1.0, 0.0], [0.0; 3]), &target, 1.0, 0.2, 0.01);
        assert!((u.amax() - 0.01).abs() < 1e-15 && u[1] == 0.0);
    }

    #[test]
    fn omega_box_rows() {
        let rows = omega_box_barriers(0.2);
        assert_eq!(rows.len(), 6);
        let x = state([1.0, 0.0, 0.0], [0.2, 0.0, 0.0]);
        assert_eq!(rows[0].value(&x), 0.0);
        assert!(rows
            .iter()
            .all(|b| b.value(&state([1.0, 0.0, 0.0], [0.0; 3])) == -0.2));
    }
}
