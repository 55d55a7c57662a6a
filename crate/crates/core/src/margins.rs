//! Zero-order-hold margin functions.
//!
//! Every variant has the form `φ(T, x) = α(-h(x)) - ν(T, x)` (variants 0-2) or
//! `φ(T, x) = -(γ/T) h(x) - ν(T, x)` (variant 3). Holding `u_k` with
//! `L_f h(x_k) + L_g h(x_k) u_k <= φ(T, x_k)` keeps `h <= 0` between samples.
//! The controller margins `ν` come from suprema over one-step reach sets
//! (local variants) or over the reach of the whole safe set (global variants).

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{non_finite, Error, Result};
use crate::model::{
    lie_derivatives, spectral_norm, Barrier, ClassK, Dynamics, InputSet, SafeSet, WorkingDomain,
};
use crate::reach::{
    delta0_bound, delta_sup, DilatedSafeRegion, ReachBound, ReachRegion, ReachShape, Region,
    RegionPoint, SnappedRegion,
};
use crate::sup::{self, Objective, SupConfig, SupEstimate};
use crate::{Matrix, Vector};

/// Below this `l₂` the `φ₀ᵍ` exponential is replaced by its `l₂ → 0` limit.
pub const L2_LIMIT: f64 = 1e-12;

/// Slopes `Γ` used to approximate the infimum over linear class-K functions.
pub fn gamma_grid() -> Vec<f64> {
    (0..=12).map(|k| 10f64.powf(k as f64 / 2.0)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Phi0G,
    Phi1L,
    Phi1G,
    Phi2L,
    Phi2G,
    Phi3L,
    Phi3G,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Phi0G,
        Variant::Phi1L,
        Variant::Phi1G,
        Variant::Phi2L,
        Variant::Phi2G,
        Variant::Phi3L,
        Variant::Phi3G,
    ];

    pub const GLOBAL: [Variant; 4] = [
        Variant::Phi0G,
        Variant::Phi1G,
        Variant::Phi2G,
        Variant::Phi3G,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Phi0G => "phi0g",
            Variant::Phi1L => "phi1l",
            Variant::Phi1G => "phi1g",
            Variant::Phi2L => "phi2l",
            Variant::Phi2G => "phi2g",
            Variant::Phi3L => "phi3l",
            Variant::Phi3G => "phi3g",
        }
    }

    /// Name of the matching controller margin, e.g. `nu1g`.
    pub fn nu_name(self) -> String {
        self.name().replacen("phi", "nu", 1)
    }

    pub fn is_global(self) -> bool {
        matches!(
            self,
            Variant::Phi0G | Variant::Phi1G | Variant::Phi2G | Variant::Phi3G
        )
    }

    /// 0 to 3.
    pub fn family(self) -> u8 {
        match self {
            Variant::Phi0G => 0,
            Variant::Phi1L | Variant::Phi1G => 1,
            Variant::Phi2L | Variant::Phi2G => 2,
            Variant::Phi3L | Variant::Phi3G => 3,
        }
    }

    pub fn uses_gamma(self) -> bool {
        self.family() == 3
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidParameter(format!("unknown margin variant '{s}'")))
    }
}

/// `α` for variants 0-2, `γ ∈ (0, 1]` for variant 3.
#[derive(Debug, Clone)]
pub enum Gain {
    Alpha(ClassK),
    Gamma(f64),
}

impl Gain {
    /// The choice used for both case studies: `α = id`, `γ = 1`.
    pub fn default_for(variant: Variant) -> Self {
        if variant.uses_gamma() {
            Gain::Gamma(1.0)
        } else {
            Gain::Alpha(ClassK::identity())
        }
    }
}

/// How the local variants bound `R(x_k, T)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocalReach {
    /// Constant-input flows (exact under zero-order hold).
    ExactFlow,
    /// The ball `B_{TΔ₀(x_k)}(x_k)`.
    Delta0Ball,
}

/// Everything a margin evaluation needs to know about one barrier row.
#[derive(Clone)]
pub struct MarginSetup<'a> {
    pub model: &'a dyn Dynamics,
    pub input_set: &'a InputSet,
    pub barrier: &'a dyn Barrier,
    pub domain: &'a WorkingDomain,
    pub local_reach: LocalReach,
    /// Absolute finite-difference step of Lipschitz estimates.
    pub lipschitz_step: f64,
    pub sup: SupConfig,
}

impl MarginSetup<'_> {
    pub fn safe(&self) -> SafeSet<'_> {
        SafeSet {
            barrier: self.barrier,
            domain: self.domain,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Quantity {
    Speed,
    LipLfh,
    LipLgh,
    LipAlpha,
    LipH,
    Upsilon,
    UpsilonPerGamma(f64),
    Psi,
    PsiAnchor,
    HIncrease,
}

impl Quantity {
    fn lipschitz_slot(self) -> Option<usize> {
        match self {
            Quantity::LipLfh => Some(0),
            Quantity::LipLgh => Some(1),
            Quantity::LipAlpha => Some(2),
            Quantity::LipH => Some(3),
            _ => None,
        }
    }

    fn needs_input(self) -> bool {
        matches!(self, Quantity::Psi | Quantity::PsiAnchor)
    }
}

#[derive(Debug, Clone)]
struct Terms {
    lfh: f64,
    lgh: Vector,
    h: f64,
}

fn terms(model: &dyn Dynamics, barrier: &dyn Barrier, x: &Vector) -> Option<Terms> {
    let (lfh, lgh) = lie_derivatives(model, barrier, x).ok()?;
    let h = barrier.value(x);
    h.is_finite().then_some(Terms { lfh, lgh, h })
}

/// `υ(x, z, u)` from precomputed terms.
fn upsilon_terms(x: &Terms, z: &Terms, u: &Vector, alpha: &ClassK) -> f64 {
    z.lfh - x.lfh + (&z.lgh - &x.lgh).dot(u) - alpha.eval(-z.h) + alpha.eval(-x.h)
}

/// `υ(x, z, u) = L_f h(z) - L_f h(x) + (L_g h(z) - L_g h(x)) u - α(-h(z)) + α(-h(x))`.
pub fn upsilon(
    model: &dyn Dynamics,
    barrier: &dyn Barrier,
    x: &Vector,
    z: &Vector,
    u: &Vector,
    alpha: &ClassK,
) -> Result<f64> {
    let tx = terms(model, barrier, x).ok_or_else(|| non_finite("υ at x", x))?;
    let tz = terms(model, barrier, z).ok_or_else(|| non_finite("υ at z", z))?;
    let v = upsilon_terms(&tx, &tz, u, alpha);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(non_finite("υ", z))
    }
}

/// Spectral norms of central-difference Jacobians of `L_f h`, `L_g h`,
/// `α(-h)` and `h` at `z`.
fn lipschitz_norms(setup: &MarginSetup<'_>, alpha: &ClassK, z: &Vector) -> Option<[f64; 4]> {
    let n = z.len();
    let m = setup.input_set.dim();
    let e = setup.lipschitz_step;
    let mut jf = Matrix::zeros(1, n);
    let mut jg = Matrix::zeros(m, n);
    let mut ja = Matrix::zeros(1, n);
    let mut jh = Matrix::zeros(1, n);
    for i in 0..n {
        let mut up = z.clone();
        up[i] += e;
        let mut down = z.clone();
        down[i] -= e;
        setup.model.project(&mut up);
        setup.model.project(&mut down);
        let a = terms(setup.model, setup.barrier, &up)?;
        let b = terms(setup.model, setup.barrier, &down)?;
        let k = 0.5 / e;
        jf[(0, i)] = (a.lfh - b.lfh) * k;
        for r in 0..m {
            jg[(r, i)] = (a.lgh[r] - b.lgh[r]) * k;
        }
        ja[(0, i)] = (alpha.eval(-a.h) - alpha.eval(-b.h)) * k;
        jh[(0, i)] = (a.h - b.h) * k;
    }
    let out = [
        spectral_norm(&jf),
        spectral_norm(&jg),
        spectral_norm(&ja),
        spectral_norm(&jh),
    ];
    out.iter().all(|v| v.is_finite()).then_some(out)
}

/// Objective of all margin constants over one region, so that the constants
/// of a single call are estimated on identical samples.
struct ConstantsObjective<'a> {
    setup: &'a MarginSetup<'a>,
    region: &'a dyn Region,
    alpha: &'a ClassK,
    quantities: Vec<Quantity>,
    corners: Vec<Vector>,
    with_input: bool,
}

#[derive(Default)]
struct Cache {
    z: Option<Option<Terms>>,
    anchor: Option<Option<Terms>>,
    lip: Option<Option<[f64; 4]>>,
}

impl<'a> ConstantsObjective<'a> {
    fn new(
        setup: &'a MarginSetup<'a>,
        region: &'a dyn Region,
        alpha: &'a ClassK,
        quantities: Vec<Quantity>,
    ) -> Self {
        let with_input = quantities.iter().any(|q| q.needs_input());
        Self {
            setup,
            region,
            alpha,
            corners: setup.input_set.corners(),
            quantities,
            with_input,
        }
    }

    fn dim(&self) -> usize {
        self.region.dim()
            + if self.with_input {
                self.setup.input_set.dim()
            } else {
                0
            }
    }

    fn run(&self, cfg: &SupConfig) -> Result<Vec<SupEstimate>> {
        sup::maximize_many(self.dim(), cfg, self)
    }

    fn quantity(&self, q: Quantity, p: &RegionPoint, u: Option<&Vector>, cache: &mut Cache) -> f64 {
        let setup = self.setup;
        let z_terms = |cache: &mut Cache| {
            cache
                .z
                .get_or_insert_with(|| terms(setup.model, setup.barrier, &p.state))
                .clone()
        };
        let anchor_terms = |cache: &mut Cache| {
            cache
                .anchor
                .get_or_insert_with(|| terms(setup.model, setup.barrier, &p.anchor))
                .clone()
        };
        if let Some(slot) = q.lipschitz_slot() {
            let lip = *cache
                .lip
                .get_or_insert_with(|| lipschitz_norms(setup, self.alpha, &p.state));
            return lip.map_or(f64::NAN, |l| l[slot]);
        }
        match q {
            Quantity::Speed => self
                .corners
                .iter()
                .map(|c| setup.model.velocity(&p.state, c).norm())
                .fold(f64::NAN, f64::max),
            Quantity::Upsilon | Quantity::UpsilonPerGamma(_) => {
                let (Some(y), Some(z)) = (anchor_terms(cache), z_terms(cache)) else {
                    return f64::NAN;
                };
                let a = z.lfh - y.lfh;
                let dg = &z.lgh - &y.lgh;
                let best = self
                    .corners
                    .iter()
                    .map(|c| dg.dot(c))
                    .fold(f64::NEG_INFINITY, f64::max);
                match q {
                    Quantity::UpsilonPerGamma(gamma) => (a + best) / gamma + (z.h - y.h),
                    _ => a + best - self.alpha.eval(-z.h) + self.alpha.eval(-y.h),
                }
            }
            Quantity::HIncrease => match (anchor_terms(cache), z_terms(cache)) {
                (Some(y), Some(z)) => z.h - y.h,
                _ => f64::NAN,
            },
            Quantity::Psi => {
                let s = &p.state;
                if setup.barrier.value(s).is_nan() {
                    return f64::NAN;
                }
                setup
                    .barrier
                    .psi(setup.model, s, u.expect("input coordinates"))
            }
            Quantity::PsiAnchor => {
                setup
                    .barrier
                    .psi(setup.model, &p.anchor, u.expect("input coordinates"))
            }
            _ => unreachable!(),
        }
    }

    fn evaluate(&self, t: &[f64], which: Option<usize>, out: &mut [f64]) {
        out.fill(f64::NAN);
        let rd = self.region.dim();
        let Some(p) = self.region.point(&t[..rd]) else {
            return;
        };
        let u = self
            .with_input
            .then(|| self.setup.input_set.from_unit(&t[rd..]));
        let mut cache = Cache::default();
        match which {
            Some(k) => out[0] = self.quantity(self.quantities[k], &p, u.as_ref(), &mut cache),
            None => {
                for (k, &q) in self.quantities.iter().enumerate() {
                    out[k] = self.quantity(q, &p, u.as_ref(), &mut cache);
                }
            }
        }
    }
}

impl Objective for ConstantsObjective<'_> {
    fn count(&self) -> usize {
        self.quantities.len()
    }

    fn eval(&self, t: &[f64], out: &mut [f64]) {
        self.evaluate(t, None, out);
    }

    fn eval_one(&self, t: &[f64], which: usize) -> f64 {
        let mut out = [f64::NAN];
        self.evaluate(t, Some(which), &mut out);
        out[0]
    }
}

fn empty_as_missing(e: Error, what: &str) -> Error {
    match e {
        Error::AllSamplesRejected(n) => {
            Error::EmptyRegion(format!("{what}: no admissible sample among {n}"))
        }
        other => other,
    }
}

/// Lipschitz estimates over the points of `Z` built from `region`; `None`
/// when the barrier has no such points there.
fn snapped_lipschitz(
    setup: &MarginSetup<'_>,
    region: &dyn Region,
    alpha: &ClassK,
    within: Option<f64>,
    cfg: &SupConfig,
) -> Result<Option<Vec<SupEstimate>>> {
    let snapped = SnappedRegion {
        inner: region,
        barrier: setup.barrier,
        within,
    };
    let quantities = vec![
        Quantity::LipLfh,
        Quantity::LipLgh,
        Quantity::LipAlpha,
        Quantity::LipH,
    ];
    match ConstantsObjective::new(setup, &snapped, alpha, quantities).run(cfg) {
        Ok(v) => Ok(Some(v)),
        Err(Error::AllSamplesRejected(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

fn larger(a: SupEstimate, b: Option<&SupEstimate>) -> SupEstimate {
    match b {
        Some(b) if b.value > a.value => b.clone(),
        _ => a,
    }
}

/// Settings recorded next to every table of global constants.
#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub samples: usize,
    pub refine_rounds: usize,
    pub inflation: f64,
    pub seed: u64,
    pub lipschitz_step: f64,
    pub domain_lo: Vec<f64>,
    pub domain_hi: Vec<f64>,
}

/// Constants over `∪_{y ∈ S ∩ D} R(y, T)` for one horizon and one `α`.
#[derive(Debug, Clone)]
pub struct GlobalConstants {
    pub horizon: f64,
    pub alpha: ClassK,
    pub u_max: f64,
    pub delta: SupEstimate,
    pub l_lfh: SupEstimate,
    pub l_lgh: SupEstimate,
    pub l_alpha: SupEstimate,
    pub l_h: SupEstimate,
    pub sup_upsilon: SupEstimate,
    /// `sup ψ` over the reach of the safe set (drives `ν₃ᵍ`).
    pub sup_psi: SupEstimate,
    /// `sup ψ` over `S ∩ D` itself (drives `δ₃ᵍ`).
    pub sup_psi_safe: SupEstimate,
    /// `sup h(z) - h(y)` over one-step pairs: the `Γ → ∞` limit of `δ₂ᵍ`.
    pub sup_h_increase: SupEstimate,
    /// `(Γ, sup υ_Γ / Γ)` for linear `α = Γλ`.
    pub upsilon_per_gamma: Vec<(f64, SupEstimate)>,
    pub provenance: Provenance,
}

impl GlobalConstants {
    pub fn l1(&self) -> f64 {
        self.l2() + self.l_alpha.value
    }

    pub fn l2(&self) -> f64 {
        self.l_lfh.value + self.l_lgh.value * self.u_max
    }

    pub fn nu0(&self) -> f64 {
        nu0_global(self.horizon, self.l1(), self.l2(), self.delta.value)
    }

    pub fn nu1(&self) -> f64 {
        self.l1() * self.horizon * self.delta.value
    }

    pub fn nu2(&self) -> f64 {
        self.sup_upsilon.value
    }

    pub fn eta(&self) -> f64 {
        self.sup_psi.value.max(0.0)
    }

    pub fn nu3(&self) -> f64 {
        0.5 * self.horizon * self.eta()
    }

    pub fn nu(&self, variant: Variant) -> Result<f64> {
        match variant {
            Variant::Phi0G => Ok(self.nu0()),
            Variant::Phi1G => Ok(self.nu1()),
            Variant::Phi2G => Ok(self.nu2()),
            Variant::Phi3G => Ok(self.nu3()),
            v => Err(Error::InvalidParameter(format!("{v} is a local margin"))),
        }
    }

    /// Named constants for the provenance report.
    pub fn entries(&self) -> Vec<(String, &SupEstimate)> {
        let mut out = vec![
            ("delta".to_string(), &self.delta),
            ("l_lfh".to_string(), &self.l_lfh),
            ("l_lgh".to_string(), &self.l_lgh),
            ("l_alpha_h".to_string(), &self.l_alpha),
            ("l_h".to_string(), &self.l_h),
            ("sup_upsilon".to_string(), &self.sup_upsilon),
            ("sup_psi".to_string(), &self.sup_psi),
            ("sup_psi_safe".to_string(), &self.sup_psi_safe),
            ("sup_h_increase".to_string(), &self.sup_h_increase),
        ];
        for (g, e) in &self.upsilon_per_gamma {
            out.push((format!("sup_upsilon_over_gamma[{g:e}]"), e));
        }
        out
    }
}

/// Estimates all global constants at horizon `T` on one shared sample set.
pub fn global_constants(
    setup: &MarginSetup<'_>,
    horizon: f64,
    alpha: &ClassK,
) -> Result<GlobalConstants> {
    if !(horizon > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "T must be positive, got {horizon}"
        )));
    }
    let cfg = &setup.sup;
    let dilated = DilatedSafeRegion {
        model: setup.model,
        input_set: setup.input_set,
        safe: setup.safe(),
        horizon,
        shape: ReachShape::ConstantInputFlow,
    };
    let grid = gamma_grid();
    let mut quantities = vec![
        Quantity::Speed,
        Quantity::LipLfh,
        Quantity::LipLgh,
        Quantity::LipAlpha,
        Quantity::LipH,
        Quantity::Upsilon,
        Quantity::Psi,
        Quantity::PsiAnchor,
        Quantity::HIncrease,
    ];
    quantities.extend(grid.iter().map(|&g| Quantity::UpsilonPerGamma(g)));
    let mut est = ConstantsObjective::new(setup, &dilated, alpha, quantities)
        .run(cfg)
        .map_err(|e| empty_as_missing(e, "S ∩ D"))?;
    let snapped = snapped_lipschitz(setup, &dilated, alpha, None, cfg)?;
    let snap = |k: usize| snapped.as_ref().map(|s| &s[k]);

    let gammas = est.split_off(9);
    let mut it = est.into_iter();
    let mut next = || it.next().expect("nine estimates");
    let delta = next();
    let l_lfh = larger(next(), snap(0));
    let l_lgh = larger(next(), snap(1));
    let l_alpha = larger(next(), snap(2));
    let l_h = larger(next(), snap(3));
    Ok(GlobalConstants {
        horizon,
        alpha: alpha.clone(),
        u_max: setup.input_set.u_max(),
        delta,
        l_lfh,
        l_lgh,
        l_alpha,
        l_h,
        sup_upsilon: next(),
        sup_psi: next(),
        sup_psi_safe: next(),
        sup_h_increase: next(),
        upsilon_per_gamma: grid.into_iter().zip(gammas).collect(),
        provenance: Provenance {
            samples: cfg.samples,
            refine_rounds: cfg.refine_rounds,
            inflation: cfg.inflation,
            seed: cfg.seed,
            lipschitz_step: setup.lipschitz_step,
            domain_lo: setup.domain.lo().iter().copied().collect(),
            domain_hi: setup.domain.hi().iter().copied().collect(),
        },
    })
}

/// Which local suprema to estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Needs {
    pub lipschitz: bool,
    pub upsilon: bool,
    pub psi: bool,
}

impl Needs {
    pub const ALL: Needs = Needs {
        lipschitz: true,
        upsilon: true,
        psi: true,
    };

    pub fn for_variant(variant: Variant) -> Needs {
        Needs {
            lipschitz: variant.family() == 1,
            upsilon: variant.family() == 2,
            psi: variant.family() == 3,
        }
    }
}

/// Local constants at one state. Fields not requested are `None`.
#[derive(Debug, Clone)]
pub struct LocalConstants {
    pub horizon: f64,
    pub reach: ReachBound,
    pub u_max: f64,
    pub delta: f64,
    pub l_lfh: Option<f64>,
    pub l_lgh: Option<f64>,
    pub l_alpha: Option<f64>,
    pub sup_upsilon: Option<f64>,
    pub sup_psi: Option<f64>,
}

fn not_computed(what: &'static str) -> Error {
    Error::MissingGlobals(what)
}

impl LocalConstants {
    pub fn l1(&self) -> Result<f64> {
        match (self.l_lfh, self.l_lgh, self.l_alpha) {
            (Some(f), Some(g), Some(a)) => Ok(f + g * self.u_max + a),
            _ => Err(not_computed("local Lipschitz constants")),
        }
    }

    /// `l_{L_f h} + l_{L_g h} u_max`.
    pub fn l2(&self) -> Result<f64> {
        Ok(self.l1()? - self.l_alpha.unwrap_or(0.0))
    }

    pub fn nu1(&self) -> Result<f64> {
        Ok(self.l1()? * self.horizon * self.delta)
    }

    pub fn nu2(&self) -> Result<f64> {
        self.sup_upsilon.ok_or_else(|| not_computed("local sup υ"))
    }

    pub fn eta(&self) -> Result<f64> {
        Ok(self
            .sup_psi
            .ok_or_else(|| not_computed("local sup ψ"))?
            .max(0.0))
    }

    pub fn nu3(&self) -> Result<f64> {
        Ok(0.5 * self.horizon * self.eta()?)
    }
}

/// Local constants at `x` over its one-step reach bound. Lipschitz constants
/// and `Δ` are capped by the matching global constants when `x ∈ S ∩ D`,
/// because `R(x, T)` lies inside the set those were taken over.
pub fn local_constants(
    setup: &MarginSetup<'_>,
    x: &Vector,
    horizon: f64,
    alpha: &ClassK,
    needs: Needs,
    globals: Option<&GlobalConstants>,
) -> Result<LocalConstants> {
    if !(horizon > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "T must be positive, got {horizon}"
        )));
    }
    let cfg = &setup.sup;
    let (model, input_set) = (setup.model, setup.input_set);
    let (reach, mut delta) = match setup.local_reach {
        LocalReach::ExactFlow => {
            let bound = ReachBound::flow(x.clone(), horizon);
            let d = delta_sup(
                model,
                input_set,
                &ReachRegion {
                    model,
                    input_set,
                    bound: &bound,
                },
                cfg,
            )?
            .value;
            (bound, d)
        }
        LocalReach::Delta0Ball => {
            let d0 = delta0_bound(model, input_set, x, horizon)?;
            let ball = ReachBound::ball(x.clone(), horizon, d0);
            let d = delta_sup(
                model,
                input_set,
                &ReachRegion {
                    model,
                    input_set,
                    bound: &ball,
                },
                cfg,
            )?
            .value;
            // Speeds stay below d on the larger ball, so trajectories cannot
            // leave the ball of radius T·d within one period.
            (ReachBound::ball(x.clone(), horizon, d.min(d0)), d)
        }
    };
    let region = ReachRegion {
        model,
        input_set,
        bound: &reach,
    };
    let mut quantities = Vec::new();
    if needs.lipschitz {
        quantities.extend([Quantity::LipLfh, Quantity::LipLgh, Quantity::LipAlpha]);
    }
    if needs.upsilon {
        quantities.push(Quantity::Upsilon);
    }
    if needs.psi {
        quantities.push(Quantity::Psi);
    }
    let mut out = LocalConstants {
        horizon,
        u_max: input_set.u_max(),
        delta,
        l_lfh: None,
        l_lgh: None,
        l_alpha: None,
        sup_upsilon: None,
        sup_psi: None,
        reach: reach.clone(),
    };
    if quantities.is_empty() {
        return Ok(out);
    }
    let est = ConstantsObjective::new(setup, &region, alpha, quantities.clone())
        .run(cfg)
        .map_err(|e| empty_as_missing(e, "local reach set"))?;
    let mut k = 0;
    if needs.lipschitz {
        let snapped = snapped_lipschitz(setup, &region, alpha, Some(horizon * delta), cfg)?;
        let pick = |i: usize| larger(est[i].clone(), snapped.as_ref().map(|s| &s[i])).value;
        let (mut f, mut g, mut a) = (pick(0), pick(1), pick(2));
        if let Some(gl) =
            globals.filter(|gl| same_horizon(gl.horizon, horizon) && setup.safe().contains(x))
        {
            f = f.min(gl.l_lfh.value);
            g = g.min(gl.l_lgh.value);
            a = a.min(gl.l_alpha.value);
            delta = delta.min(gl.delta.value);
        }
        out.l_lfh = Some(f);
        out.l_lgh = Some(g);
        out.l_alpha = Some(a);
        out.delta = delta;
        k = 3;
    }
    if needs.upsilon {
        out.sup_upsilon = Some(est[k].value);
        k += 1;
    }
    if needs.psi {
        out.sup_psi = Some(est[k].value);
    }
    Ok(out)
}

fn same_horizon(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs())
}

/// `ν₀ᵍ(T) = (l₁Δ/l₂)(e^{l₂T} - 1)`, with the `l₂ → 0` limit `l₁ΔT`.
pub fn nu0_global(horizon: f64, l1: f64, l2: f64, delta: f64) -> f64 {
    if l2 < L2_LIMIT {
        l1 * delta * horizon
    } else {
        l1 * delta / l2 * (l2 * horizon).exp_m1()
    }
}

fn check_nonnegative(values: &[(&str, f64)]) -> Result<()> {
    for (name, v) in values {
        if !(*v >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "{name} must be nonnegative, got {v}"
            )));
        }
    }
    Ok(())
}

/// `φ₀ᵍ(T, x) = α(-h(x)) - (l₁Δ/l₂)(e^{l₂T} - 1)` given `h = h(x)`.
pub fn phi0_global(
    h: f64,
    horizon: f64,
    l1: f64,
    l2: f64,
    delta: f64,
    alpha: &ClassK,
) -> Result<f64> {
    check_nonnegative(&[("l1", l1), ("l2", l2), ("delta", delta)])?;
    Ok(alpha.eval(-h) - nu0_global(horizon, l1, l2, delta))
}

/// `φ₁(T, x) = α(-h(x)) - l₁ T Δ`, local or global depending on the constants.
pub fn phi1(h: f64, horizon: f64, l1: f64, delta: f64, alpha: &ClassK) -> Result<f64> {
    check_nonnegative(&[("l1", l1), ("delta", delta)])?;
    Ok(alpha.eval(-h) - l1 * horizon * delta)
}

/// `φ₂(T, x) = α(-h(x)) - ν₂`.
pub fn phi2(h: f64, nu2: f64, alpha: &ClassK) -> f64 {
    alpha.eval(-h) - nu2
}

/// `φ₃(T, x) = -(γ/T) h(x) - (T/2) η`.
pub fn phi3(h: f64, horizon: f64, eta: f64, gamma: f64) -> Result<f64> {
    check_gamma(gamma)?;
    Ok(-gamma / horizon * h - 0.5 * horizon * eta.max(0.0))
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "γ must lie in (0, 1], got {gamma}"
        )))
    }
}

/// `η(T, x) = max{sup ψ(z, u) over R(x, T) × U, 0}`.
pub fn eta(setup: &MarginSetup<'_>, x: &Vector, horizon: f64) -> Result<f64> {
    let needs = Needs {
        lipschitz: false,
        upsilon: false,
        psi: true,
    };
    local_constants(setup, x, horizon, &ClassK::identity(), needs, None)?.eta()
}

/// One margin evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginValue {
    pub h: f64,
    pub phi: f64,
    pub nu: f64,
}

/// A variant with its class-K choice and, for global variants, its constants.
#[derive(Debug, Clone)]
pub struct MarginFunction {
    variant: Variant,
    gain: Gain,
    globals: Option<Arc<GlobalConstants>>,
}

impl MarginFunction {
    pub fn new(variant: Variant, gain: Gain) -> Result<Self> {
        match (&gain, variant.uses_gamma()) {
            (Gain::Gamma(g), true) => check_gamma(*g)?,
            (Gain::Alpha(_), false) => {}
            _ => {
                return Err(Error::InvalidParameter(format!(
                    "{variant} takes {}",
                    if variant.uses_gamma() { "γ" } else { "α" }
                )))
            }
        }
        Ok(Self {
            variant,
            gain,
            globals: None,
        })
    }

    /// Attaches global constants; required by global variants, optional for
    /// local ones (they cap local Lipschitz estimates).
    pub fn with_globals(mut self, globals: Arc<GlobalConstants>) -> Self {
        self.globals = Some(globals);
        self
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn gain(&self) -> &Gain {
        &self.gain
    }

    pub fn globals(&self) -> Option<&GlobalConstants> {
        self.globals.as_deref()
    }

    /// The class-K function of variants 0-2 (identity for variant 3, where
    /// constants use it only for bookkeeping).
    pub fn alpha(&self) -> ClassK {
        match &self.gain {
            Gain::Alpha(a) => a.clone(),
            Gain::Gamma(_) => ClassK::identity(),
        }
    }

    fn gamma(&self) -> f64 {
        match self.gain {
            Gain::Gamma(g) => g,
            Gain::Alpha(_) => 1.0,
        }
    }

    fn globals_for(&self, horizon: f64) -> Result<&GlobalConstants> {
        match self.globals.as_deref() {
            Some(g) if same_horizon(g.horizon, horizon) => Ok(g),
            _ => Err(Error::MissingGlobals(self.variant.name())),
        }
    }

    /// `α(-h)` (variants 0-2) or `-(γ/T) h` (variant 3).
    pub fn base(&self, h: f64, horizon: f64) -> f64 {
        match &self.gain {
            Gain::Alpha(a) => a.eval(-h),
            Gain::Gamma(g) => -g / horizon * h,
        }
    }

    /// `ν(T, x)`.
    pub fn nu(&self, setup: &MarginSetup<'_>, horizon: f64, x: &Vector) -> Result<f64> {
        if self.variant.is_global() {
            return self.globals_for(horizon)?.nu(self.variant);
        }
        let globals = self.globals.as_deref();
        let lc = local_constants(
            setup,
            x,
            horizon,
            &self.alpha(),
            Needs::for_variant(self.variant),
            globals,
        )?;
        match self.variant.family() {
            1 => lc.nu1(),
            2 => lc.nu2(),
            _ => lc.nu3(),
        }
    }

    /// `φ(T, x)` together with `h(x)` and `ν(T, x)`.
    pub fn evaluate(
        &self,
        setup: &MarginSetup<'_>,
        horizon: f64,
        x: &Vector,
    ) -> Result<MarginValue> {
        let h = setup.barrier.value(x);
        if !h.is_finite() {
            return Err(non_finite("barrier", x));
        }
        let nu = self.nu(setup, horizon, x)?;
        Ok(MarginValue {
            h,
            phi: self.base(h, horizon) - nu,
            nu,
        })
    }

    pub fn phi(&self, setup: &MarginSetup<'_>, horizon: f64, x: &Vector) -> Result<f64> {
        Ok(self.evaluate(setup, horizon, x)?.phi)
    }

    fn invert(&self, value: f64, horizon: f64) -> f64 {
        match &self.gain {
            Gain::Alpha(a) => a.inverse(value),
            Gain::Gamma(g) => value * horizon / g,
        }
    }
}

/// `δ(T) = sup{-h(x) : x ∈ S, φ(T, x) = 0}`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhysicalMargin {
    pub value: f64,
    pub variant: Variant,
    pub horizon: f64,
    pub gain: String,
    /// Set when no zero of `φ` was found in `S`; `value` is then 0.
    pub empty_manifold: bool,
}

/// Settings of the ray search used by local physical margins.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RaySearch {
    pub rays: usize,
    /// Coarse samples along each ray before bisection.
    pub stations: usize,
    /// Bisection tolerance in the ray parameter.
    pub tol: f64,
    pub seed: u64,
}

impl Default for RaySearch {
    fn default() -> Self {
        Self {
            rays: 256,
            stations: 32,
            tol: 1e-8,
            seed: 0,
        }
    }
}

/// Physical margin of one variant. Global variants use closed forms; local
/// ones bisect `φ = 0` along random rays through `S ∩ D`.
pub fn physical_margin(
    setup: &MarginSetup<'_>,
    func: &MarginFunction,
    horizon: f64,
    search: &RaySearch,
) -> Result<PhysicalMargin> {
    let gain = match func.gain() {
        Gain::Alpha(a) => format!("alpha={a:?}"),
        Gain::Gamma(g) => format!("gamma={g}"),
    };
    let make = |value: f64, empty: bool| PhysicalMargin {
        value,
        variant: func.variant(),
        horizon,
        gain: gain.clone(),
        empty_manifold: empty,
    };
    if func.variant().is_global() {
        let g = func.globals_for(horizon)?;
        let nu = match func.variant() {
            Variant::Phi3G => {
                let eta_safe = g.sup_psi_safe.value.max(0.0);
                return Ok(make(
                    horizon * horizon / (2.0 * func.gamma()) * eta_safe,
                    false,
                ));
            }
            v => g.nu(v)?,
        };
        if nu < 0.0 {
            return Ok(make(0.0, true));
        }
        return Ok(make(func.invert(nu, horizon), false));
    }

    let safe = setup.safe();
    let n = setup.domain.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(search.seed);
    let lo = setup.domain.lo();
    let hi = setup.domain.hi();
    let phi_at = |x: &Vector| -> Option<(f64, f64)> {
        if !safe.contains(x) {
            return None;
        }
        func.evaluate(setup, horizon, x).ok().map(|m| (m.phi, m.h))
    };
    let mut best: Option<f64> = None;
    for _ in 0..search.rays {
        let mut start = Vector::from_iterator(n, (0..n).map(|i| rng.random_range(lo[i]..=hi[i])));
        setup.model.project(&mut start);
        let mut dir = Vector::from_iterator(
            n,
            (0..n).map(|i| (hi[i] - lo[i]) * (rng.random::<f64>() - 0.5)),
        );
        if dir.norm() == 0.0 {
            continue;
        }
        dir /= dir.norm();
        let point = |s: f64| {
            let mut x = &start + &dir * s;
            setup.model.project(&mut x);
            x
        };
        let span = (0..n).map(|i| hi[i] - lo[i]).fold(0.0_f64, f64::max);
        let step = span / search.stations as f64;
        let mut prev: Option<(f64, f64)> = None;
        for k in 0..=search.stations {
            let s = k as f64 * step;
            let Some((phi, _)) = phi_at(&point(s)) else {
                prev = None;
                continue;
            };
            if let Some((s0, phi0)) = prev {
                if phi0.signum() != phi.signum() || phi == 0.0 {
                    let (mut a, mut b, fa) = (s0, s, phi0);
                    while b - a > search.tol {
                        let mid = 0.5 * (a + b);
                        match phi_at(&point(mid)) {
                            Some((pm, _)) if pm.signum() == fa.signum() && pm != 0.0 => a = mid,
                            Some(_) => b = mid,
                            None => break,
                        }
                    }
                    let root = point(0.5 * (a + b));
                    let depth = -setup.barrier.value(&root);
                    if depth.is_finite() && safe.contains(&root) {
                        best = Some(best.map_or(depth, |d: f64| d.max(depth)));
                    }
                }
            }
            prev = Some((s, phi));
        }
    }
    Ok(match best {
        Some(v) => make(v.max(0.0), false),
        None => make(0.0, true),
    })
}

/// How a `δ^inf` value was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InfMethod {
    /// Closed-form `Γ → ∞` limit.
    Limit,
    /// Minimum over the `Γ` grid (the grid values were not monotone).
    GridMinimum,
    /// Variant 3: attained at `γ = 1`.
    GammaOne,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhysicalMarginInf {
    pub value: f64,
    pub variant: Variant,
    pub horizon: f64,
    pub method: InfMethod,
    /// `(Γ, δ(T; α = Γλ))`.
    pub grid: Vec<(f64, f64)>,
}

/// `δ^inf(T)`: infimum of the global physical margin over linear `α = Γλ`,
/// `Γ >= 1` (variants 0-2), or `δ₃ᵍ` at `γ = 1`.
pub fn physical_margin_inf(
    globals: &GlobalConstants,
    variant: Variant,
) -> Result<PhysicalMarginInf> {
    let t = globals.horizon;
    let delta = globals.delta.value;
    let l_h = globals.l_h.value;
    let l2 = globals.l2();
    let growth = if l2 < L2_LIMIT {
        t
    } else {
        (l2 * t).exp_m1() / l2
    };
    let grid_of = |f: &dyn Fn(f64) -> f64| {
        gamma_grid()
            .into_iter()
            .map(|g| (g, f(g)))
            .collect::<Vec<_>>()
    };
    let (value, method, grid) = match variant {
        Variant::Phi0G => {
            let grid = grid_of(&|g| (l2 + g * l_h) * delta / g * growth);
            (l_h * delta * growth, InfMethod::Limit, grid)
        }
        Variant::Phi1G => {
            let grid = grid_of(&|g| (l2 + g * l_h) * t * delta / g);
            (l_h * t * delta, InfMethod::Limit, grid)
        }
        Variant::Phi2G => {
            let grid: Vec<(f64, f64)> = globals
                .upsilon_per_gamma
                .iter()
                .map(|(g, e)| (*g, e.value))
                .collect();
            let monotone = grid.windows(2).all(|w| w[1].1 <= w[0].1);
            if monotone {
                (
                    globals.sup_h_increase.value.max(0.0),
                    InfMethod::Limit,
                    grid,
                )
            } else {
                let min = grid.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
                (min.max(0.0), InfMethod::GridMinimum, grid)
            }
        }
        Variant::Phi3G => {
            let v = t * t / 2.0 * globals.sup_psi_safe.value.max(0.0);
            (v, InfMethod::GammaOne, vec![(1.0, v)])
        }
        v => {
            return Err(Error::InvalidParameter(format!(
                "δ^inf is defined for global variants, not {v}"
            )))
        }
    };
    Ok(PhysicalMarginInf {
        value,
        variant,
        horizon: t,
        method,
        grid,
    })
}

/// Writes every global constant with its sampling provenance as CSV.
pub fn write_provenance<W: Write>(out: W, system: &str, tables: &[&GlobalConstants]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "system",
        "T",
        "quantity",
        "value",
        "raw",
        "samples",
        "rejected",
        "refine_rounds",
        "inflation",
        "seed",
        "lipschitz_step",
    ])?;
    for g in tables {
        for (name, e) in g.entries() {
            w.write_record([
                system.to_string(),
                format!("{}", g.horizon),
                name,
                format!("{:.10e}", e.value),
                format!("{:.10e}", e.raw),
                e.n_samples.to_string(),
                e.rejected.to_string(),
                e.refinement_rounds.to_string(),
                format!("{}", e.inflation),
                g.provenance.seed.to_string(),
                format!("{:e}", g.provenance.lipschitz_step),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::toy::{DoubleIntegrator, Integrator1D, LinearBarrier, StaticSystem};

    fn v(xs: &[f64]) -> Vector {
        Vector::from_vec(xs.to_vec())
    }

    fn setup<'a>(
        model: &'a dyn Dynamics,
        input: &'a InputSet,
        h: &'a dyn Barrier,
        d: &'a WorkingDomain,
    ) -> MarginSetup<'a> {
        MarginSetup {
            model,
            input_set: input,
            barrier: h,
            domain: d,
            local_reach: LocalReach::ExactFlow,
            lipschitz_step: 1e-4,
            sup: SupConfig::default().with_samples(512).with_inflation(1.0),
        }
    }

    #[test]
    fn closed_form_examples() {
        let id = ClassK::identity();
        assert!((phi0_global(-1.0, 0.1, 1.0, 0.0, 1.0, &id).unwrap() - 0.9).abs() < 1e-15);
        assert!((phi1(-1.0, 0.1, 1.0, 1.0, &id).unwrap() - 0.9).abs() < 1e-15);
        assert!((phi3(-1.0, 0.1, 0.0, 1.0).unwrap() - 10.0).abs() < 1e-12);
        assert!((phi3(-1.0, 0.1, 1.0, 1.0).unwrap() - 9.95).abs() < 1e-12);
        assert!(phi3(0.0, 0.1, 1.0, 1.0).unwrap() <= 0.0);
        assert!(phi0_global(-1.0, 0.1, -1.0, 0.0, 1.0, &id).is_err());
        assert!(phi3(-1.0, 0.1, 0.0, 1.5).is_err());
    }

    #[test]
    fn l2_limit_is_continuous() {
        let a = nu0_global(0.1, 2.0, 1e-8, 3.0);
        let b = nu0_global(0.1, 2.0, 0.0, 3.0);
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("phi4g".parse::<Variant>().is_err());
    }

    #[test]
    fn integrator_local_constants() {
        let sys = Integrator1D::new();
        let h = LinearBarrier::new(vec![1.0], 0.0);
        let d = WorkingDomain::new(vec![-5.0], vec![5.0]).unwrap();
        let s = setup(&sys, sys.input_set(), &h, &d);
        let lc =
            local_constants(&s, &v(&[-1.0]), 0.1, &ClassK::identity(), Needs::ALL, None).unwrap();
        assert!((lc.nu1().unwrap() - 0.1).abs() < 1e-9);
        assert!((lc.nu2().unwrap() - 0.1).abs() < 1e-9);
        assert_eq!(lc.nu3().unwrap(), 0.0);
    }

    #[test]
    fn double_integrator_eta_is_one() {
        let sys = DoubleIntegrator::new();
        let h = LinearBarrier::new(vec![1.0, 0.0], 0.0);
        let d = WorkingDomain::new(vec![-5.0, -2.0], vec![5.0, 2.0]).unwrap();
        let s = setup(&sys, sys.input_set(), &h, &d);
        let e = eta(&s, &v(&[-1.0, 0.5]), 0.1).unwrap();
        assert!((e - 1.0).abs() < 1e-6, "{e}");
    }

    #[test]
    fn static_system_has_zero_local_margins() {
        let sys = StaticSystem::new();
        let h = LinearBarrier::new(vec![1.0], 0.0);
        let d = WorkingDomain::new(vec![-5.0], vec![5.0]).unwrap();
        let s = setup(&sys, sys.input_set(), &h, &d);
        let lc =
            local_constants(&s, &v(&[-2.0]), 0.1, &ClassK::identity(), Needs::ALL, None).unwrap();
        assert_eq!(lc.nu1().unwrap(), 0.0);
        assert_eq!(lc.nu2().unwrap(), 0.0);
        assert_eq!(lc.nu3().unwrap(), 0.0);
    }

    #[test]
    fn integrator_global_constants() {
        let sys = Integrator1D::new();
        let h = LinearBarrier::new(vec![1.0], 0.0);
        let d = WorkingDomain::new(vec![-5.0], vec![5.0]).unwrap();
        let s = setup(&sys, sys.input_set(), &h, &d);
        let g = global_constants(&s, 0.1, &ClassK::identity()).unwrap();
        assert!((g.l1() - 1.0).abs() < 1e-9 && g.l2().abs() < 1e-12);
        assert!((g.delta.value - 1.0).abs() < 1e-12);
        assert!((g.nu0() - 0.1).abs() < 1e-9);
        assert!((g.nu1() - 0.1).abs() < 1e-9);
        assert!((g.nu2() - 0.1).abs() < 1e-9);
        let f = MarginFunction::new(Variant::Phi1G, Gain::default_for(Variant::Phi1G))
            .unwrap()
            .with_globals(Arc::new(g.clone()));
        let pm = physical_margin(&s, &f, 0.1, &RaySearch::default()).unwrap();
        assert!((pm.value - 0.1).abs() < 1e-9);
        let inf = physical_margin_inf(&g, Variant::Phi1G).unwrap();
        assert!((inf.value - 0.1).abs() < 1e-9);
    }

    #[test]
    fn local_physical_margin_by_rays() {
        let sys = Integrator1D::new();
        let h = LinearBarrier::new(vec![1.0], 0.0);
        let d = WorkingDomain::new(vec![-5.0], vec![5.0]).unwrap();
        let s = setup(&sys, sys.input_set(), &h, &d);
        let f = MarginFunction::new(Variant::Phi1L, Gain::default_for(Variant::Phi1L)).unwrap();
        let search = RaySearch {
            rays: 8,
            ..RaySearch::default()
        };
        let pm = physical_margin(&s, &f, 0.1, &search).unwrap();
        assert!((pm.value - 0.1).abs() < 1e-6, "{}", pm.value);
    }

    #[test]
    fn gain_must_match_variant() {
        assert!(MarginFunction::new(Variant::Phi3L, Gain::Alpha(ClassK::identity())).is_err());
        assert!(MarginFunction::new(Variant::Phi1L, Gain::Gamma(1.0)).is_err());
        assert!(MarginFunction::new(Variant::Phi3G, Gain::Gamma(0.0)).is_err());
    }
}
