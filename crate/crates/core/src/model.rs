//! Control-affine dynamics, barrier functions, class-K functions and input sets.
//!
//! A system is `ẋ = f(x) + g(x) u` with `u` in a box `U`. A barrier `h` defines
//! the safe set `S = {x : h(x) <= 0}`. Everything downstream (reachability,
//! margins, the safety filter and the simulator) only talks to these traits.

use std::fmt;
use std::sync::Arc;

use nalgebra::SymmetricEigen;

use crate::error::{non_finite, Error, Result};
use crate::integrate;
use crate::{Matrix, Vector};

/// Relative central-difference step used when no analytic derivative exists.
pub const FD_STEP: f64 = 1e-6;

fn fd_step(xi: f64) -> f64 {
    FD_STEP * (1.0 + xi.abs())
}

/// Central-difference gradient of a scalar function.
pub fn fd_gradient(f: impl Fn(&Vector) -> f64, x: &Vector) -> Vector {
    let mut grad = Vector::zeros(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let e = fd_step(x[i]);
        probe[i] = x[i] + e;
        let up = f(&probe);
        probe[i] = x[i] - e;
        let down = f(&probe);
        probe[i] = x[i];
        grad[i] = (up - down) / (2.0 * e);
    }
    grad
}

/// Central-difference Jacobian (rows = outputs) of a vector-valued function.
pub fn fd_jacobian(f: impl Fn(&Vector) -> Vector, x: &Vector) -> Matrix {
    let mut probe = x.clone();
    let mut columns = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let e = fd_step(x[i]);
        probe[i] = x[i] + e;
        let up = f(&probe);
        probe[i] = x[i] - e;
        let down = f(&probe);
        probe[i] = x[i];
        columns.push((up - down) / (2.0 * e));
    }
    Matrix::from_columns(&columns)
}

/// Induced 2-norm (largest singular value) of a small dense matrix.
pub fn spectral_norm(a: &Matrix) -> f64 {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0.0;
    }
    if a.nrows() == 1 || a.ncols() == 1 {
        return a.norm();
    }
    let gram = if a.nrows() <= a.ncols() {
        a * a.transpose()
    } else {
        a.transpose() * a
    };
    let eig = SymmetricEigen::new(gram);
    eig.eigenvalues
        .iter()
        .fold(0.0_f64, |m, &v| m.max(v))
        .max(0.0)
        .sqrt()
}

/// Axis-aligned box of admissible inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct InputSet {
    lo: Vector,
    hi: Vector,
}

impl InputSet {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::Dimension {
                expected: lo.len(),
                got: hi.len(),
            });
        }
        if lo.is_empty() {
            return Err(Error::InvalidParameter(
                "input set needs at least one component".into(),
            ));
        }
        for (i, (l, h)) in lo.iter().zip(&hi).enumerate() {
            if !(l.is_finite() && h.is_finite()) || l > h {
                return Err(Error::InvalidParameter(format!(
                    "input bound {i}: [{l}, {h}] is not a nonempty finite interval"
                )));
            }
        }
        Ok(Self {
            lo: Vector::from_vec(lo),
            hi: Vector::from_vec(hi),
        })
    }

    /// The ∞-norm ball `||u||∞ <= radius` in `dim` components.
    pub fn symmetric(dim: usize, radius: f64) -> Result<Self> {
        Self::new(vec![-radius; dim], vec![radius; dim])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &Vector {
        &self.lo
    }

    pub fn hi(&self) -> &Vector {
        &self.hi
    }

    /// `max_{u in U} ||u||`, attained at a corner.
    pub fn u_max(&self) -> f64 {
        self.lo
            .iter()
            .zip(self.hi.iter())
            .map(|(l, h)| (l * l).max(h * h))
            .sum::<f64>()
            .sqrt()
    }

    /// All `2^m` corners, in binary order of the component choices.
    pub fn corners(&self) -> Vec<Vector> {
        let m = self.dim();
        (0..1usize << m)
            .map(|mask| {
                Vector::from_iterator(
                    m,
                    (0..m).map(|i| {
                        if mask >> i & 1 == 1 {
                            self.hi[i]
                        } else {
                            self.lo[i]
                        }
                    }),
                )
            })
            .collect()
    }

    /// Maps a point of the unit cube onto the box.
    pub fn from_unit(&self, t: &[f64]) -> Vector {
        Vector::from_iterator(
            self.dim(),
            (0..self.dim()).map(|i| self.lo[i] + t[i] * (self.hi[i] - self.lo[i])),
        )
    }

    pub fn clamp(&self, u: &Vector) -> Vector {
        Vector::from_iterator(
            self.dim(),
            (0..self.dim()).map(|i| u[i].clamp(self.lo[i], self.hi[i])),
        )
    }

    pub fn contains(&self, u: &Vector, tol: f64) -> bool {
        (0..self.dim()).all(|i| u[i] >= self.lo[i] - tol && u[i] <= self.hi[i] + tol)
    }
}

/// Control-affine dynamics `ẋ = f(x) + g(x) u`.
pub trait Dynamics: Send + Sync {
    fn dim_state(&self) -> usize;
    fn dim_input(&self) -> usize;

    /// Drift `f(x)`.
    fn drift(&self, x: &Vector) -> Vector;

    /// Input matrix `g(x)`, `n × m`.
    fn input_matrix(&self, x: &Vector) -> Matrix;

    fn velocity(&self, x: &Vector, u: &Vector) -> Vector {
        self.drift(x) + self.input_matrix(x) * u
    }

    fn drift_jacobian(&self, x: &Vector) -> Matrix {
        fd_jacobian(|y| self.drift(y), x)
    }

    /// Jacobian of column `col` of `g`.
    fn input_jacobian(&self, x: &Vector, col: usize) -> Matrix {
        fd_jacobian(|y| self.input_matrix(y).column(col).into_owned(), x)
    }

    /// Lipschitz constant `l_f` over the declared working domain, if known.
    fn lipschitz_f(&self) -> Option<f64> {
        None
    }

    /// Lipschitz constant `l_g` over the declared working domain, if known.
    fn lipschitz_g(&self) -> Option<f64> {
        None
    }

    /// Retraction onto the state manifold (identity for Euclidean states).
    fn project(&self, _x: &mut Vector) {}

    /// State after holding `u` for `tau` seconds. Default is RK4 with
    /// `substeps` steps; systems with closed-form flows override it.
    fn flow(&self, x: &Vector, u: &Vector, tau: f64, substeps: usize) -> Vector {
        let mut y = integrate::rk4(|z| self.velocity(z, u), x, tau, substeps);
        self.project(&mut y);
        y
    }
}

/// Scalar barrier function; the safe set is `h(x) <= 0`.
pub trait Barrier: Send + Sync {
    fn value(&self, x: &Vector) -> f64;

    fn gradient(&self, x: &Vector) -> Vector {
        fd_gradient(|y| self.value(y), x)
    }

    /// True if the ball of the given radius around `x` may meet the set `Z`
    /// where the second derivative of `h` fails to exist.
    fn near_nondifferentiable(&self, _x: &Vector, _radius: f64) -> bool {
        false
    }

    fn nondiff_set_description(&self) -> &str {
        "empty"
    }

    /// A point of `Z` sharing every coordinate with `x` except the ones `Z`
    /// constrains, if the barrier can construct one. Lipschitz estimates
    /// evaluate these points so that jumps of `∇h` are seen at the
    /// finite-difference resolution instead of being missed by sampling.
    fn snap_to_nondifferentiable(&self, _x: &Vector) -> Option<Vector> {
        None
    }

    /// `ψ(x, u) = ∇[ḣ(x)] · (f(x) + g(x) u)` for constant `u`. The default
    /// differentiates `ḣ` along the velocity; it returns NaN when the stencil
    /// touches `Z`.
    fn psi(&self, model: &dyn Dynamics, x: &Vector, u: &Vector) -> f64 {
        let v = model.velocity(x, u);
        let speed = v.norm();
        if speed == 0.0 {
            return 0.0;
        }
        let span = 1e-5 * (1.0 + x.norm());
        let eps = span / speed;
        if self.near_nondifferentiable(x, 2.0 * span) {
            return f64::NAN;
        }
        let hdot_at = |y: &Vector| self.gradient(y).dot(&model.velocity(y, u));
        (hdot_at(&(x + &v * eps)) - hdot_at(&(x - &v * eps))) / (2.0 * eps)
    }
}

/// `(L_f h(x), L_g h(x))`.
pub fn lie_derivatives(
    model: &dyn Dynamics,
    barrier: &dyn Barrier,
    x: &Vector,
) -> Result<(f64, Vector)> {
    let grad = barrier.gradient(x);
    let lf = grad.dot(&model.drift(x));
    let lg = model.input_matrix(x).transpose() * &grad;
    if !lf.is_finite() || lg.iter().any(|v| !v.is_finite()) {
        return Err(non_finite("Lie derivative", x));
    }
    Ok((lf, lg))
}

/// `ḣ = L_f h(x) + L_g h(x) u`.
pub fn hdot(model: &dyn Dynamics, barrier: &dyn Barrier, x: &Vector, u: &Vector) -> Result<f64> {
    let (lf, lg) = lie_derivatives(model, barrier, x)?;
    Ok(lf + lg.dot(u))
}

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Extended class-K function: continuous, strictly increasing, `α(0) = 0`.
#[derive(Clone)]
pub enum ClassK {
    /// `α(λ) = slope · λ`.
    Linear { slope: f64 },
    /// Arbitrary function; the inverse is found by bisection.
    Custom {
        name: String,
        alpha: ScalarFn,
        local_slope: Option<f64>,
    },
}

impl fmt::Debug for ClassK {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClassK::Linear { slope } => write!(f, "Linear({slope})"),
            ClassK::Custom { name, .. } => write!(f, "Custom({name})"),
        }
    }
}

impl ClassK {
    pub fn identity() -> Self {
        ClassK::Linear { slope: 1.0 }
    }

    pub fn linear(slope: f64) -> Result<Self> {
        if !(slope.is_finite() && slope > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "class-K slope must be positive, got {slope}"
            )));
        }
        Ok(ClassK::Linear { slope })
    }

    pub fn custom(
        name: impl Into<String>,
        alpha: impl Fn(f64) -> f64 + Send + Sync + 'static,
        local_slope: Option<f64>,
    ) -> Self {
        ClassK::Custom {
            name: name.into(),
            alpha: Arc::new(alpha),
            local_slope,
        }
    }

    pub fn eval(&self, lambda: f64) -> f64 {
        match self {
            ClassK::Linear { slope } => slope * lambda,
            ClassK::Custom { alpha, .. } => alpha(lambda),
        }
    }

    pub fn inverse(&self, value: f64) -> f64 {
        match self {
            ClassK::Linear { slope } => value / slope,
            ClassK::Custom { .. } => self.bisect_inverse(value),
        }
    }

    /// `Γ` with `α(λ) <= Γ λ` near the origin.
    pub fn local_slope_bound(&self) -> Option<f64> {
        match self {
            ClassK::Linear { slope } => Some(*slope),
            ClassK::Custom { local_slope, .. } => *local_slope,
        }
    }

    pub fn slope(&self) -> Option<f64> {
        match self {
            ClassK::Linear { slope } => Some(*slope),
            ClassK::Custom { .. } => None,
        }
    }

    fn bisect_inverse(&self, value: f64) -> f64 {
        if value == 0.0 {
            return 0.0;
        }
        let (mut lo, mut hi) = (0.0_f64, value.signum());
        for _ in 0..2048 {
            if (self.eval(hi) - value) * value.signum() >= 0.0 {
                break;
            }
            lo = hi;
            hi *= 2.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid == lo || mid == hi {
                break;
            }
            if (self.eval(mid) - value) * value.signum() < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

/// Axis-aligned box bounding the region of interest. Global suprema are
/// taken over `S ∩ D`.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkingDomain {
    lo: Vector,
    hi: Vector,
}

impl WorkingDomain {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::Dimension {
                expected: lo.len(),
                got: hi.len(),
            });
        }
        if lo
            .iter()
            .zip(&hi)
            .any(|(l, h)| !(l.is_finite() && h.is_finite()) || l > h)
        {
            return Err(Error::EmptyRegion(
                "working domain bounds are not an ordered finite box".into(),
            ));
        }
        Ok(Self {
            lo: Vector::from_vec(lo),
            hi: Vector::from_vec(hi),
        })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &Vector {
        &self.lo
    }

    pub fn hi(&self) -> &Vector {
        &self.hi
    }

    pub fn contains(&self, x: &Vector) -> bool {
        x.len() == self.dim() && (0..self.dim()).all(|i| x[i] >= self.lo[i] && x[i] <= self.hi[i])
    }

    pub fn from_unit(&self, t: &[f64]) -> Vector {
        Vector::from_iterator(
            self.dim(),
            (0..self.dim()).map(|i| self.lo[i] + t[i] * (self.hi[i] - self.lo[i])),
        )
    }
}

/// `S ∩ D` for one barrier.
#[derive(Clone, Copy)]
pub struct SafeSet<'a> {
    pub barrier: &'a dyn Barrier,
    pub domain: &'a WorkingDomain,
}

impl SafeSet<'_> {
    pub fn contains(&self, x: &Vector) -> bool {
        self.domain.contains(x) && self.barrier.value(x) <= 0.0
    }
}
