//! One-step reachable-set bounds and suprema over them.
//!
//! A [`Region`] maps points of the unit cube to states (plus the anchor state
//! the sample is reached from), which lets the supremum engine treat balls,
//! constant-input flow covers and `S ∩ D` uniformly.

use std::sync::Mutex;

use crate::error::{non_finite, Error, Result};
use crate::model::{spectral_norm, Barrier, Dynamics, InputSet, SafeSet};
use crate::sup::{self, Objective, SupConfig, SupEstimate};
use crate::{Matrix, Vector};

/// RK4 steps used to trace constant-input flows for reach sampling.
pub const FLOW_SUBSTEPS: usize = 12;

/// Default per-axis grid resolution of a flow cover.
pub const DEFAULT_RESOLUTION: usize = 9;

/// A sampled state and the state it was reached from.
#[derive(Debug, Clone)]
pub struct RegionPoint {
    pub state: Vector,
    pub anchor: Vector,
}

pub trait Region: Sync {
    /// Number of unit-cube coordinates consumed by [`Region::point`].
    fn dim(&self) -> usize;

    /// `None` rejects the sample.
    fn point(&self, t: &[f64]) -> Option<RegionPoint>;
}

/// Plain axis-aligned box, optionally retracted onto the state manifold.
pub struct BoxRegion<'a> {
    pub lo: Vector,
    pub hi: Vector,
    pub model: Option<&'a dyn Dynamics>,
}

impl<'a> BoxRegion<'a> {
    pub fn new(lo: Vector, hi: Vector, model: Option<&'a dyn Dynamics>) -> Result<Self> {
        if lo.len() != hi.len() || lo.iter().zip(hi.iter()).any(|(l, h)| !(l <= h)) {
            return Err(Error::EmptyRegion("box bounds are not ordered".into()));
        }
        Ok(Self { lo, hi, model })
    }
}

impl Region for BoxRegion<'_> {
    fn dim(&self) -> usize {
        self.lo.len()
    }

    fn point(&self, t: &[f64]) -> Option<RegionPoint> {
        let mut x = Vector::from_iterator(
            self.lo.len(),
            (0..self.lo.len()).map(|i| self.lo[i] + t[i] * (self.hi[i] - self.lo[i])),
        );
        if let Some(m) = self.model {
            m.project(&mut x);
            if x.iter().any(|v| !v.is_finite()) {
                return None;
            }
        }
        Some(RegionPoint {
            anchor: x.clone(),
            state: x,
        })
    }
}

/// Samples of `S ∩ D`.
pub struct SafeRegion<'a> {
    pub model: &'a dyn Dynamics,
    pub safe: SafeSet<'a>,
}

impl SafeRegion<'_> {
    fn sample(&self, t: &[f64]) -> Option<Vector> {
        let mut x = self.safe.domain.from_unit(t);
        self.model.project(&mut x);
        let h = self.safe.barrier.value(&x);
        (h.is_finite() && self.safe.contains(&x)).then_some(x)
    }
}

impl Region for SafeRegion<'_> {
    fn dim(&self) -> usize {
        self.safe.domain.dim()
    }

    fn point(&self, t: &[f64]) -> Option<RegionPoint> {
        self.sample(t).map(|x| RegionPoint {
            anchor: x.clone(),
            state: x,
        })
    }
}

/// Shape of a one-step reach over-approximation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReachKind {
    /// Closed ball of the given radius about the center.
    Ball { radius: f64 },
    /// `{flow(x_k, u, τ) : u ∈ U, τ ∈ [0, T)}`; exact for zero-order-hold
    /// inputs. `resolution` is the per-axis count of [`ReachBound::cover`].
    ConstantInputFlow { resolution: usize },
}

/// Over-approximation of `R(x_k, T)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReachBound {
    pub center: Vector,
    pub horizon: f64,
    pub kind: ReachKind,
    /// `Δ` (or `Δ₀`) that produced a ball radius `T Δ`.
    pub delta_used: Option<f64>,
}

impl ReachBound {
    pub fn ball(center: Vector, horizon: f64, delta: f64) -> Self {
        Self {
            center,
            horizon,
            kind: ReachKind::Ball {
                radius: horizon * delta,
            },
            delta_used: Some(delta),
        }
    }

    pub fn flow(center: Vector, horizon: f64) -> Self {
        Self {
            center,
            horizon,
            kind: ReachKind::ConstantInputFlow {
                resolution: DEFAULT_RESOLUTION,
            },
            delta_used: None,
        }
    }

    pub fn radius(&self) -> Option<f64> {
        match self.kind {
            ReachKind::Ball { radius } => Some(radius),
            ReachKind::ConstantInputFlow { .. } => None,
        }
    }

    pub fn param_dim(&self, input_dim: usize) -> usize {
        match self.kind {
            ReachKind::Ball { .. } => self.center.len(),
            ReachKind::ConstantInputFlow { .. } => input_dim + 1,
        }
    }

    /// Maps unit-cube coordinates to a state of the bound.
    pub fn state_at(&self, model: &dyn Dynamics, input_set: &InputSet, t: &[f64]) -> Vector {
        reach_state(&self.center, self.horizon, self.kind, model, input_set, t)
    }

    /// Grid cover at the bound's own resolution (flows) or [`DEFAULT_RESOLUTION`].
    pub fn cover(&self, model: &dyn Dynamics, input_set: &InputSet) -> Vec<Vector> {
        let res = match self.kind {
            ReachKind::ConstantInputFlow { resolution } => resolution,
            ReachKind::Ball { .. } => DEFAULT_RESOLUTION,
        };
        self.grid(model, input_set, res)
    }

    /// Regular grid of states covering the bound, `resolution` points per axis.
    pub fn grid(
        &self,
        model: &dyn Dynamics,
        input_set: &InputSet,
        resolution: usize,
    ) -> Vec<Vector> {
        let dim = self.param_dim(input_set.dim());
        let res = resolution.max(2);
        let total = res.pow(dim as u32);
        let mut t = vec![0.0; dim];
        (0..total)
            .map(|mut k| {
                for tj in t.iter_mut() {
                    *tj = (k % res) as f64 / (res - 1) as f64;
                    k /= res;
                }
                self.state_at(model, input_set, &t)
            })
            .collect()
    }
}

fn ball_point(center: &Vector, radius: f64, t: &[f64]) -> Vector {
    let v = Vector::from_iterator(center.len(), t.iter().map(|ti| 2.0 * ti - 1.0));
    let two = v.norm();
    if two == 0.0 {
        return center.clone();
    }
    let inf = v.amax();
    center + v * (radius * inf / two)
}

fn reach_state(
    center: &Vector,
    horizon: f64,
    kind: ReachKind,
    model: &dyn Dynamics,
    input_set: &InputSet,
    t: &[f64],
) -> Vector {
    match kind {
        ReachKind::Ball { radius } => {
            let mut z = ball_point(center, radius, t);
            model.project(&mut z);
            z
        }
        ReachKind::ConstantInputFlow { .. } => {
            let m = input_set.dim();
            let u = input_set.from_unit(&t[..m]);
            model.flow(center, &u, t[m] * horizon, FLOW_SUBSTEPS)
        }
    }
}

/// States reachable from `x_k` under one bound.
pub struct ReachRegion<'a> {
    pub model: &'a dyn Dynamics,
    pub input_set: &'a InputSet,
    pub bound: &'a ReachBound,
}

impl Region for ReachRegion<'_> {
    fn dim(&self) -> usize {
        self.bound.param_dim(self.input_set.dim())
    }

    fn point(&self, t: &[f64]) -> Option<RegionPoint> {
        let z = self.bound.state_at(self.model, self.input_set, t);
        z.iter().all(|v| v.is_finite()).then(|| RegionPoint {
            state: z,
            anchor: self.bound.center.clone(),
        })
    }
}

/// How the reach set of each anchor is bounded when sampling `∪_{y ∈ S} R(y, T)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReachShape {
    ConstantInputFlow,
    /// Ball of radius `T Δ` with a fixed `Δ`.
    Ball {
        delta: f64,
    },
}

/// Pairs `(y, z)` with `y ∈ S ∩ D` and `z ∈ R(y, T)`.
pub struct DilatedSafeRegion<'a> {
    pub model: &'a dyn Dynamics,
    pub input_set: &'a InputSet,
    pub safe: SafeSet<'a>,
    pub horizon: f64,
    pub shape: ReachShape,
}

impl DilatedSafeRegion<'_> {
    fn kind(&self) -> ReachKind {
        match self.shape {
            ReachShape::ConstantInputFlow => ReachKind::ConstantInputFlow {
                resolution: DEFAULT_RESOLUTION,
            },
            ReachShape::Ball { delta } => ReachKind::Ball {
                radius: self.horizon * delta,
            },
        }
    }
}

impl Region for DilatedSafeRegion<'_> {
    fn dim(&self) -> usize {
        let n = self.safe.domain.dim();
        n + match self.shape {
            ReachShape::ConstantInputFlow => self.input_set.dim() + 1,
            ReachShape::Ball { .. } => n,
        }
    }

    fn point(&self, t: &[f64]) -> Option<RegionPoint> {
        let n = self.safe.domain.dim();
        let anchor = SafeRegion {
            model: self.model,
            safe: self.safe,
        }
        .sample(&t[..n])?;
        let z = reach_state(
            &anchor,
            self.horizon,
            self.kind(),
            self.model,
            self.input_set,
            &t[n..],
        );
        z.iter()
            .all(|v| v.is_finite())
            .then_some(RegionPoint { state: z, anchor })
    }
}

/// Points of the barrier's non-differentiable set `Z` built from samples of
/// another region. With `within = Some(r)`, only anchors that may lie within
/// `r` of `Z` contribute.
pub struct SnappedRegion<'a> {
    pub inner: &'a dyn Region,
    pub barrier: &'a dyn Barrier,
    pub within: Option<f64>,
}

impl Region for SnappedRegion<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn point(&self, t: &[f64]) -> Option<RegionPoint> {
        let p = self.inner.point(t)?;
        if let Some(r) = self.within {
            if !self.barrier.near_nondifferentiable(&p.anchor, r) {
                return None;
            }
        }
        let state = self.barrier.snap_to_nondifferentiable(&p.state)?;
        Some(RegionPoint {
            state,
            anchor: p.anchor,
        })
    }
}

/// How the input enters an objective evaluated over a region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputMode {
    /// The objective ignores the input.
    None,
    /// Exact maximum over the `2^m` corners (objectives convex in `u`).
    Corners,
    /// The input is sampled as `m` extra coordinates.
    Continuous,
}

impl InputMode {
    pub fn extra_dims(self, input_set: &InputSet) -> usize {
        match self {
            InputMode::Continuous => input_set.dim(),
            _ => 0,
        }
    }
}

struct RegionObjective<'a, F> {
    region: &'a dyn Region,
    input_set: &'a InputSet,
    corners: Vec<Vector>,
    mode: InputMode,
    f: F,
}

impl<F> Objective for RegionObjective<'_, F>
where
    F: Fn(&RegionPoint, Option<&Vector>) -> f64 + Sync,
{
    fn count(&self) -> usize {
        1
    }

    fn eval(&self, t: &[f64], out: &mut [f64]) {
        out[0] = self.eval_one(t, 0);
    }

    fn eval_one(&self, t: &[f64], _which: usize) -> f64 {
        let rd = self.region.dim();
        let Some(p) = self.region.point(&t[..rd]) else {
            return f64::NAN;
        };
        match self.mode {
            InputMode::None => (self.f)(&p, None),
            InputMode::Continuous => {
                let u = self.input_set.from_unit(&t[rd..]);
                (self.f)(&p, Some(&u))
            }
            InputMode::Corners => {
                let mut best = f64::NAN;
                for u in &self.corners {
                    let v = (self.f)(&p, Some(u));
                    if v.is_finite() && !(v <= best) {
                        best = v;
                    }
                }
                best
            }
        }
    }
}

/// Estimated `sup` of `f(point, u)` over a region (and over `U` per `mode`).
/// Non-finite evaluations are treated as points of `Z` and discarded.
pub fn sup_over_region(
    region: &dyn Region,
    input_set: &InputSet,
    mode: InputMode,
    cfg: &SupConfig,
    f: impl Fn(&RegionPoint, Option<&Vector>) -> f64 + Sync,
) -> Result<SupEstimate> {
    let obj = RegionObjective {
        region,
        input_set,
        corners: input_set.corners(),
        mode,
        f,
    };
    let dim = region.dim() + mode.extra_dims(input_set);
    Ok(sup::maximize_many(dim, cfg, &obj)?.remove(0))
}

/// `sup_over_reach`: supremum of `f(state[, input])` over a reach bound.
pub fn sup_over_reach(
    model: &dyn Dynamics,
    input_set: &InputSet,
    bound: &ReachBound,
    mode: InputMode,
    cfg: &SupConfig,
    f: impl Fn(&Vector, Option<&Vector>) -> f64 + Sync,
) -> Result<SupEstimate> {
    let region = ReachRegion {
        model,
        input_set,
        bound,
    };
    sup_over_region(&region, input_set, mode, cfg, |p, u| f(&p.state, u))
}

/// `Δ = sup ||f(x) + g(x) u||` over `region × U`, using corner enumeration in `U`.
pub fn delta_sup(
    model: &dyn Dynamics,
    input_set: &InputSet,
    region: &dyn Region,
    cfg: &SupConfig,
) -> Result<SupEstimate> {
    let bad: Mutex<Option<Vector>> = Mutex::new(None);
    let est = sup_over_region(region, input_set, InputMode::Corners, cfg, |p, u| {
        let v = model.velocity(&p.state, u.expect("corner input")).norm();
        if !v.is_finite() {
            if let Ok(mut slot) = bad.lock() {
                slot.get_or_insert_with(|| p.state.clone());
            }
        }
        v
    });
    if let Some(x) = bad.into_inner().ok().flatten() {
        return Err(non_finite("dynamics", &x));
    }
    est.map_err(|e| match e {
        Error::AllSamplesRejected(n) => {
            Error::EmptyRegion(format!("no admissible state among {n} samples"))
        }
        other => other,
    })
}

/// `Δ₀(x_k) = (||f(x_k)|| + ||g(x_k)|| u_max) / (1 - (l_f + l_g u_max) T)`.
pub fn delta0_bound(
    model: &dyn Dynamics,
    input_set: &InputSet,
    x: &Vector,
    horizon: f64,
) -> Result<f64> {
    let (lf, lg) = match (model.lipschitz_f(), model.lipschitz_g()) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(Error::InvalidParameter(
                "Δ₀ needs Lipschitz constants l_f and l_g".into(),
            ))
        }
    };
    let u_max = input_set.u_max();
    let denominator = 1.0 - (lf + lg * u_max) * horizon;
    if !(denominator > 0.0) {
        return Err(Error::TimeStepTooLarge { denominator });
    }
    let num = model.drift(x).norm() + spectral_norm(&model.input_matrix(x)) * u_max;
    if !num.is_finite() {
        return Err(non_finite("Δ₀ numerator", x));
    }
    Ok(num / denominator)
}

/// Ball `B_{TΔ}(x_k)` after checking that `Δ` bounds `||ẋ||` on the ball; the
/// estimate is raised and rechecked at most twice.
pub fn reach_ball(
    model: &dyn Dynamics,
    input_set: &InputSet,
    x_k: &Vector,
    horizon: f64,
    delta: f64,
    cfg: &SupConfig,
) -> Result<ReachBound> {
    if !(delta >= 0.0 && horizon > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "reach ball needs Δ >= 0 and T > 0 (Δ={delta}, T={horizon})"
        )));
    }
    let mut current = delta;
    let mut increment = f64::INFINITY;
    for _ in 0..2 {
        let bound = ReachBound::ball(x_k.clone(), horizon, current);
        let est = delta_sup(
            model,
            input_set,
            &ReachRegion {
                model,
                input_set,
                bound: &bound,
            },
            cfg,
        )?;
        if est.raw <= current {
            return Ok(bound);
        }
        let next = est.value.max(est.raw);
        log::debug!("reach bound raised from {current} to {next}");
        let step = next - current;
        if step >= increment {
            return Err(Error::NotContracting {
                previous: current,
                next,
            });
        }
        increment = step;
        current = next;
    }
    let bound = ReachBound::ball(x_k.clone(), horizon, current);
    let est = delta_sup(
        model,
        input_set,
        &ReachRegion {
            model,
            input_set,
            bound: &bound,
        },
        cfg,
    )?;
    if est.raw <= current {
        Ok(bound)
    } else {
        Err(Error::NotContracting {
            previous: current,
            next: est.raw,
        })
    }
}

/// Spectral norm of a central-difference Jacobian of `f` at `x` with an
/// absolute step. Probes are retracted onto the state manifold.
pub fn fd_jacobian_norm(
    f: &dyn Fn(&Vector) -> Option<Vector>,
    model: Option<&dyn Dynamics>,
    x: &Vector,
    step: f64,
) -> f64 {
    let mut columns = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut up = x.clone();
        up[i] += step;
        let mut down = x.clone();
        down[i] -= step;
        if let Some(m) = model {
            m.project(&mut up);
            m.project(&mut down);
        }
        let (Some(a), Some(b)) = (f(&up), f(&down)) else {
            return f64::NAN;
        };
        columns.push((a - b) / (2.0 * step));
    }
    let jac = Matrix::from_columns(&columns);
    if jac.iter().any(|v| !v.is_finite()) {
        return f64::NAN;
    }
    spectral_norm(&jac)
}

/// Estimated Lipschitz constant of `f` over `region`: the supremum of the
/// finite-difference Jacobian norm. The step sets the length scale at which
/// jumps of `f` are resolved.
pub fn lipschitz_estimate(
    f: impl Fn(&Vector) -> Option<Vector> + Sync,
    region: &dyn Region,
    model: Option<&dyn Dynamics>,
    step: f64,
    cfg: &SupConfig,
) -> Result<SupEstimate> {
    if !(step > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "Lipschitz step must be positive, got {step}"
        )));
    }
    let dummy = InputSet::symmetric(1, 0.0)?;
    sup_over_region(region, &dummy, InputMode::None, cfg, |p, _| {
        fd_jacobian_norm(&f, model, &p.state, step)
    })
}

/// Scalar convenience wrapper around [`lipschitz_estimate`].
pub fn lipschitz_estimate_scalar(
    f: impl Fn(&Vector) -> f64 + Sync,
    region: &dyn Region,
    model: Option<&dyn Dynamics>,
    step: f64,
    cfg: &SupConfig,
) -> Result<SupEstimate> {
    lipschitz_estimate(
        |x| {
            let v = f(x);
            v.is_finite().then(|| Vector::from_element(1, v))
        },
        region,
        model,
        step,
        cfg,
    )
}

/// `h` along a barrier at every grid state of a bound; used by cover checks.
pub fn barrier_over_grid(barrier: &dyn Barrier, states: &[Vector]) -> Vec<f64> {
    states.iter().map(|x| barrier.value(x)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::toy::{DoubleIntegrator, Integrator1D, LinearDecay, StaticSystem};

    fn cfg() -> SupConfig {
        SupConfig::default().with_samples(1024)
    }

    fn v(xs: &[f64]) -> Vector {
        Vector::from_vec(xs.to_vec())
    }

    #[test]
    fn delta_of_integrator_is_input_bound() {
        let sys = Integrator1D::new();
        let region = BoxRegion::new(v(&[-3.0]), v(&[3.0]), None).unwrap();
        let est = delta_sup(&sys, sys.input_set(), &region, &cfg().with_inflation(1.0)).unwrap();
        assert!((est.value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn delta_of_double_integrator_hits_corner() {
        let sys = DoubleIntegrator::new();
        let region = BoxRegion::new(v(&[-1.0, -2.0]), v(&[1.0, 2.0]), None).unwrap();
        let est = delta_sup(&sys, sys.input_set(), &region, &cfg().with_inflation(1.0)).unwrap();
        assert!((est.value - 5f64.sqrt()).abs() < 1e-6, "{}", est.value);
    }

    #[test]
    fn delta0_formula_cases() {
        let i1 = Integrator1D::new();
        assert!((delta0_bound(&i1, i1.input_set(), &v(&[0.3]), 0.1).unwrap() - 1.0).abs() < 1e-15);
        let decay = LinearDecay::new(1.0);
        let d = delta0_bound(&decay, decay.input_set(), &v(&[0.0]), 0.1).unwrap();
        assert!((d - 1.0 / 0.9).abs() < 1e-12);
        let fast = LinearDecay::new(10.0);
        assert!(matches!(
            delta0_bound(&fast, fast.input_set(), &v(&[0.0]), 0.1),
            Err(Error::TimeStepTooLarge { .. })
        ));
    }

    #[test]
    fn reach_ball_cases() {
        let i1 = Integrator1D::new();
        let b = reach_ball(&i1, i1.input_set(), &v(&[0.0]), 0.1, 1.0, &cfg()).unwrap();
        assert!((b.radius().unwrap() - 0.1).abs() < 1e-15);
        let st = StaticSystem::new();
        let b = reach_ball(&st, st.input_set(), &v(&[0.5]), 0.1, 0.0, &cfg()).unwrap();
        assert_eq!(b.radius(), Some(0.0));
    }

    #[test]
    fn reach_ball_raises_an_underestimate() {
        let i1 = Integrator1D::new();
        let b = reach_ball(
            &i1,
            i1.input_set(),
            &v(&[0.0]),
            0.1,
            0.5,
            &cfg().with_inflation(1.0),
        )
        .unwrap();
        assert!((b.delta_used.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sup_over_reach_examples() {
        let i1 = Integrator1D::new();
        let ball = ReachBound::ball(v(&[0.0]), 0.1, 2.0);
        let c = cfg();
        let est =
            sup_over_reach(&i1, i1.input_set(), &ball, InputMode::None, &c, |_, _| 3.0).unwrap();
        assert!((est.value - 3.15).abs() < 1e-12);

        let dbl = DoubleIntegrator::new();
        let center = v(&[0.4, -0.3]);
        let ball = ReachBound::ball(center.clone(), 0.1, 3.0);
        let r = 0.3;
        let est = sup_over_reach(&dbl, dbl.input_set(), &ball, InputMode::None, &c, |z, _| {
            (z - &center).norm_squared()
        })
        .unwrap();
        assert!(
            (est.value / (r * r * 1.05) - 1.0).abs() < 0.02,
            "{}",
            est.value
        );

        let est = sup_over_reach(
            &dbl,
            dbl.input_set(),
            &ball,
            InputMode::Continuous,
            &c,
            |_, u| u.unwrap()[0],
        )
        .unwrap();
        assert!((est.value - 1.05).abs() < 1e-9);
    }

    #[test]
    fn lipschitz_examples() {
        let region = BoxRegion::new(v(&[0.0]), v(&[2.0]), None).unwrap();
        let c = cfg();
        let l = lipschitz_estimate_scalar(|x| 3.0 * x[0], &region, None, 1e-4, &c).unwrap();
        assert!((l.value - 3.15).abs() < 1e-6);
        let l = lipschitz_estimate_scalar(|x| x[0] * x[0], &region, None, 1e-4, &c).unwrap();
        assert!((l.value / (4.0 * 1.05) - 1.0).abs() < 0.02, "{}", l.value);
    }

    #[test]
    fn empty_safe_region_is_an_error() {
        use crate::model::WorkingDomain;
        use crate::systems::toy::LinearBarrier;
        let sys = Integrator1D::new();
        let domain = WorkingDomain::new(vec![1.0], vec![2.0]).unwrap();
        let h = LinearBarrier::new(vec![1.0], 0.0);
        let region = SafeRegion {
            model: &sys,
            safe: SafeSet {
                barrier: &h,
                domain: &domain,
            },
        };
        assert!(matches!(
            delta_sup(&sys, sys.input_set(), &region, &cfg()),
            Err(Error::EmptyRegion(_))
        ));
    }
}
