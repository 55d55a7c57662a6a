//! Property checks on margins, reach bounds, the safety filter and closed-loop
//! runs. Each check returns a [`Check`] with a pass flag and a one-line detail.

use std::fmt;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ScenarioConfig;
use crate::error::Result;
use crate::integrate::rk4_step;
use crate::margins::{local_constants, Gain, GlobalConstants, Needs, Variant};
use crate::model::{lie_derivatives, ClassK};
use crate::qp::{solve_filter, Constraint, QpProblem, QpStatus};
use crate::reach::{delta_sup, BoxRegion};
use crate::sim::{min_h_over_trace, plant_globals, prepare_margins_with, run_with, SimConfig};
use crate::sup::SupConfig;
use crate::systems::{Plant, SystemId};
use crate::{InputSet, Vector};

/// Absolute tolerance of every inequality checked here.
pub const TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(
            f,
            "[{tag}] {}: {} ({:.1} s)",
            self.name, self.detail, self.seconds
        )
    }
}

fn timed(name: String, body: impl FnOnce() -> Result<(bool, String)>) -> Check {
    let started = Instant::now();
    let (passed, detail) = match body() {
        Ok(v) => v,
        Err(e) => (false, format!("error: {e}")),
    };
    Check {
        name,
        passed,
        detail,
        seconds: started.elapsed().as_secs_f64(),
    }
}

/// Sizes of the property suite.
#[derive(Debug, Clone)]
pub struct VerifyConfig {
    pub scenario: ScenarioConfig,
    /// Random states per system and horizon for the margin inequalities.
    pub states: usize,
    pub horizons: Vec<f64>,
    /// Sample budget of local suprema.
    pub local_samples: usize,
    /// Random `(x_k, u)` pairs per system for the reach bound.
    pub reach_pairs: usize,
    /// Random `(x_k, u)` pairs per system for the one-period bound.
    pub chain_pairs: usize,
    /// Randomized initial states per system and variant.
    pub invariance_runs: usize,
    pub invariance_duration: f64,
    pub qp_problems: usize,
    pub seed: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioConfig::default(),
            states: 500,
            horizons: vec![0.001, 0.01, 0.1],
            local_samples: 256,
            reach_pairs: 200,
            chain_pairs: 100,
            invariance_runs: 20,
            invariance_duration: 5.0,
            qp_problems: 1000,
            seed: 0,
        }
    }
}

impl VerifyConfig {
    /// A small configuration for smoke runs.
    pub fn quick() -> Self {
        Self {
            states: 20,
            horizons: vec![0.01, 0.1],
            local_samples: 128,
            reach_pairs: 20,
            chain_pairs: 10,
            invariance_runs: 2,
            invariance_duration: 1.0,
            qp_problems: 100,
            ..Self::default()
        }
    }

    fn local_sup(&self) -> SupConfig {
        self.scenario.online_sup().with_samples(self.local_samples)
    }

    fn alpha(&self) -> Result<ClassK> {
        ClassK::linear(self.scenario.sim.alpha_slope)
    }
}

fn plant(id: SystemId, cfg: &VerifyConfig) -> Result<Plant> {
    Plant::build(id, &cfg.scenario)
}

fn globals_at(plant: &Plant, cfg: &VerifyConfig, horizon: f64) -> Result<Arc<GlobalConstants>> {
    let gain = Gain::Alpha(cfg.alpha()?);
    Ok(plant_globals(plant, horizon, &gain, &cfg.scenario.sup)?.remove(0))
}

/// `ν₃ ≤ ½ ν₁`, locally at random safe states and globally, for every horizon.
pub fn half_nu1_bound(id: SystemId, cfg: &VerifyConfig) -> Check {
    timed(format!("{id}: nu3 <= nu1/2"), || {
        let plant = plant(id, cfg)?;
        let alpha = cfg.alpha()?;
        let setup = plant.setup(0, &cfg.local_sup());
        let states = plant.random_safe_states(cfg.states, cfg.seed, 0.0);
        let needs = Needs {
            lipschitz: true,
            upsilon: false,
            psi: true,
        };
        let mut worst = f64::NEG_INFINITY;
        let mut failures = 0usize;
        let mut checked = 0usize;
        for &t in &cfg.horizons {
            let g = globals_at(&plant, cfg, t)?;
            let gap = g.nu3() - 0.5 * g.nu1();
            worst = worst.max(gap);
            failures += usize::from(gap > TOL);
            checked += 1;
            for x in &states {
                let c = local_constants(&setup, x, t, &alpha, needs, Some(&g))?;
                let gap = c.nu3()? - 0.5 * c.nu1()?;
                worst = worst.max(gap);
                failures += usize::from(gap > TOL);
                checked += 1;
            }
        }
        Ok((
            failures == 0,
            format!("{checked} comparisons, {failures} violations, max nu3 - nu1/2 = {worst:.3e}"),
        ))
    })
}

/// `ν₂ˡ ≤ ν₁ˡ ≤ ν₁ᵍ < ν₀ᵍ` at random safe states and `ν₂ᵍ ≤ ν₁ᵍ`.
pub fn ordering(id: SystemId, cfg: &VerifyConfig, horizon: f64) -> Check {
    timed(format!("{id}: margin ordering at T={horizon}"), || {
        let plant = plant(id, cfg)?;
        let alpha = cfg.alpha()?;
        let setup = plant.setup(0, &cfg.local_sup());
        let g = globals_at(&plant, cfg, horizon)?;
        let mut failures = Vec::new();
        if g.nu2() > g.nu1() + TOL {
            failures.push(format!("nu2g {:.4e} > nu1g {:.4e}", g.nu2(), g.nu1()));
        }
        if !(g.nu1() < g.nu0()) {
            failures.push(format!("nu1g {:.4e} >= nu0g {:.4e}", g.nu1(), g.nu0()));
        }
        let states = plant.random_safe_states(cfg.states, cfg.seed, 0.0);
        let mut bad_states = 0usize;
        for x in &states {
            let c = local_constants(&setup, x, horizon, &alpha, Needs::ALL, Some(&g))?;
            let (n1, n2) = (c.nu1()?, c.nu2()?);
            let ok = n2 <= n1 + TOL && n1 <= g.nu1() + TOL;
            if !ok {
                if bad_states == 0 {
                    failures.push(format!(
                        "at {:?}: nu2l {n2:.4e}, nu1l {n1:.4e}, nu1g {:.4e}",
                        x.as_slice(),
                        g.nu1()
                    ));
                }
                bad_states += 1;
            }
        }
        let detail = if failures.is_empty() {
            format!(
                "{} states; nu0g {:.4e}, nu1g {:.4e}, nu2g {:.4e}",
                states.len(),
                g.nu0(),
                g.nu1(),
                g.nu2()
            )
        } else {
            format!("{bad_states} bad states; {}", failures.join("; "))
        };
        Ok((failures.is_empty(), detail))
    })
}

fn random_input(input: &InputSet, rng: &mut ChaCha8Rng) -> Vector {
    let t: Vec<f64> = (0..input.dim()).map(|_| rng.random::<f64>()).collect();
    input.from_unit(&t)
}

/// Dense constant-input flow without retraction, `steps + 1` states.
fn dense_flow(plant: &Plant, x: &Vector, u: &Vector, horizon: f64, steps: usize) -> Vec<Vector> {
    let model = plant.model.as_ref();
    let dt = horizon / steps as f64;
    let mut out = Vec::with_capacity(steps + 1);
    out.push(x.clone());
    for i in 0..steps {
        let next = rk4_step(|z| model.velocity(z, u), &out[i], dt);
        out.push(next);
    }
    out
}

/// `||x(t_k + τ) - x_k|| ≤ τΔ` along dense flows, with `Δ` the velocity bound
/// over a box enclosing every flow.
pub fn reach_bound(id: SystemId, cfg: &VerifyConfig, horizon: f64) -> Check {
    timed(format!("{id}: flow stays within tau*Delta"), || {
        let plant = plant(id, cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
        let states = plant.random_safe_states(cfg.reach_pairs, cfg.seed, 0.0);
        let steps = 200;
        let flows: Vec<Vec<Vector>> = states
            .iter()
            .map(|x| {
                let u = random_input(&plant.input_set, &mut rng);
                dense_flow(&plant, x, &u, horizon, steps)
            })
            .collect();
        let n = plant.model.dim_state();
        let mut lo = Vector::from_element(n, f64::INFINITY);
        let mut hi = Vector::from_element(n, f64::NEG_INFINITY);
        for p in flows.iter().flatten() {
            for i in 0..n {
                lo[i] = lo[i].min(p[i]);
                hi[i] = hi[i].max(p[i]);
            }
        }
        let pad = 1e-6;
        lo.add_scalar_mut(-pad);
        hi.add_scalar_mut(pad);
        let region = BoxRegion::new(lo, hi, None)?;
        let sup = cfg.scenario.sup.clone().with_inflation(1.0);
        let delta = delta_sup(plant.model.as_ref(), &plant.input_set, &region, &sup)?.value;
        let mut worst = f64::NEG_INFINITY;
        let mut failures = 0usize;
        for flow in &flows {
            for (i, p) in flow.iter().enumerate().skip(1) {
                let tau = horizon * i as f64 / steps as f64;
                let gap = (p - &flow[0]).norm() - tau * delta;
                worst = worst.max(gap);
                failures += usize::from(gap > TOL);
            }
        }
        Ok((
            failures == 0,
            format!(
                "{} flows, Delta {delta:.4e}, {failures} violations, max gap {worst:.3e}",
                flows.len()
            ),
        ))
    })
}

/// A constant input satisfying `L_f h + L_g h·u ≤ φ₃ˡ` from a safe `x_k`
/// keeps `h(x(τ)) ≤ (1 - γτ/T) h(x_k) + (τ/2) η (τ - T)` over the period.
pub fn one_period_bound(id: SystemId, cfg: &VerifyConfig, horizon: f64) -> Check {
    timed(format!("{id}: one-period bound under phi3l"), || {
        let plant = plant(id, cfg)?;
        let alpha = cfg.alpha()?;
        let gamma = cfg.scenario.sim.gamma;
        let setup = plant.setup(0, &cfg.local_sup());
        let barrier = plant.barriers[0].as_ref();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xc4a1);
        let states = plant.random_safe_states(cfg.chain_pairs, cfg.seed.wrapping_add(1), 0.0);
        let needs = Needs {
            lipschitz: false,
            upsilon: false,
            psi: true,
        };
        let steps = 100;
        let (mut pairs, mut infeasible, mut failures) = (0usize, 0usize, 0usize);
        let mut worst = f64::NEG_INFINITY;
        for x in &states {
            let c = local_constants(&setup, x, horizon, &alpha, needs, None)?;
            let eta = c.eta()?;
            let h0 = barrier.value(x);
            let phi = -(gamma / horizon) * h0 - 0.5 * horizon * eta;
            let (lfh, lgh) = lie_derivatives(plant.model.as_ref(), barrier, x)?;
            let problem = QpProblem {
                u_nom: random_input(&plant.input_set, &mut rng),
                constraints: vec![Constraint {
                    a: lgh,
                    b: phi - lfh,
                }],
                input_set: plant.input_set.clone(),
            };
            let sol = solve_filter(&problem)?;
            if sol.status != QpStatus::Optimal {
                infeasible += 1;
                continue;
            }
            pairs += 1;
            for (i, p) in dense_flow(&plant, x, &sol.u, horizon, steps)
                .iter()
                .enumerate()
                .skip(1)
            {
                let tau = horizon * i as f64 / steps as f64;
                let bound = (1.0 - gamma * tau / horizon) * h0 + 0.5 * tau * eta * (tau - horizon);
                let gap = barrier.value(p) - bound;
                let gap = if gap.is_nan() { f64::INFINITY } else { gap };
                worst = worst.max(gap);
                failures += usize::from(gap > TOL);
            }
        }
        Ok((
            failures == 0 && pairs > 0,
            format!(
                "{pairs} pairs ({infeasible} infeasible skipped), {failures} violations, max gap {worst:.3e}"
            ),
        ))
    })
}

/// Runs from random safe states: every run without a relaxed QP step must
/// keep `h ≤ 0` on the dense grid. Relaxed runs are counted, not judged.
pub fn forward_invariance(id: SystemId, variant: Variant, cfg: &VerifyConfig) -> Check {
    timed(format!("{id}/{variant}: forward invariance"), || {
        let plant = plant(id, cfg)?;
        let horizon = cfg.scenario.sim.horizon;
        let mut sim = SimConfig::new(variant, horizon, cfg.invariance_duration);
        sim.gain = match variant.uses_gamma() {
            true => Gain::Gamma(cfg.scenario.sim.gamma),
            false => Gain::Alpha(cfg.alpha()?),
        };
        sim.substeps = cfg.scenario.sim.substeps;
        sim.online_sup = cfg.local_sup();
        sim.offline_sup = cfg.scenario.sup.clone();
        sim.stop_at_goal = false;
        let globals = if variant.is_global() || variant == Variant::Phi1L {
            Some(plant_globals(&plant, horizon, &sim.gain, &sim.offline_sup)?)
        } else {
            None
        };
        let margins = prepare_margins_with(&plant, &sim, globals.as_deref())?;
        let starts = plant.random_safe_states(cfg.invariance_runs, cfg.seed ^ 0x1a, 0.0);
        let (mut judged, mut relaxed, mut unsafe_runs) = (0usize, 0usize, 0usize);
        let mut worst = f64::NEG_INFINITY;
        for (i, x0) in starts.iter().enumerate() {
            sim.x0 = Some(x0.clone());
            sim.seed = cfg.seed + i as u64;
            let trace = run_with(&plant, &sim, &margins)?;
            if trace.relaxations() > 0 {
                relaxed += 1;
                continue;
            }
            judged += 1;
            let m = min_h_over_trace(&trace);
            worst = worst.max(m);
            unsafe_runs += usize::from(m > TOL);
        }
        Ok((
            unsafe_runs == 0,
            format!(
                "{judged} runs judged, {relaxed} with relaxed steps excluded, {unsafe_runs} unsafe, max h {worst:.3e}"
            ),
        ))
    })
}

/// Grid minimizer of `||u - u_nom||` over the feasible set. Each candidate
/// face (rows held with equality, box faces included) is gridded in its own
/// affine coordinates and refined around the incumbent, so slanted faces are
/// resolved without staircase error.
fn grid_projection(problem: &QpProblem) -> Option<Vector> {
    let m = problem.input_set.dim();
    let (lo, hi) = (problem.input_set.lo(), problem.input_set.hi());
    let mut rows: Vec<(Vector, f64)> = problem
        .constraints
        .iter()
        .map(|c| (c.a.clone(), c.b))
        .collect();
    for j in 0..m {
        let e = Vector::from_fn(m, |i, _| if i == j { 1.0 } else { 0.0 });
        rows.push((e.clone(), hi[j]));
        rows.push((-e, -lo[j]));
    }
    let feasible = |u: &Vector| rows.iter().all(|(a, b)| a.dot(u) - b <= 1e-10);
    let radius = lo.abs().sup(&hi.abs()).norm();
    let mut best: Option<(f64, Vector)> = None;
    let offer = |u: Vector, best: &mut Option<(f64, Vector)>| {
        let cost = (&u - &problem.u_nom).norm_squared();
        if feasible(&u) && best.as_ref().is_none_or(|b| cost < b.0) {
            *best = Some((cost, u));
        }
    };
    for face in face_sets(rows.len(), m) {
        let k = face.len();
        let a = crate::Matrix::from_fn(k, m, |r, c| rows[face[r]].0[c]);
        let b = Vector::from_fn(k, |r, _| rows[face[r]].1);
        let eig = (a.transpose() * &a).symmetric_eigen();
        let scale = eig.eigenvalues.amax().max(1.0);
        let null: Vec<usize> = (0..m)
            .filter(|&i| eig.eigenvalues[i] <= 1e-10 * scale)
            .collect();
        if m - null.len() != k {
            continue;
        }
        let base = if k == 0 {
            Vector::zeros(m)
        } else {
            let Some(y) = (&a * a.transpose()).lu().solve(&b) else {
                continue;
            };
            a.transpose() * y
        };
        let d = null.len();
        if d == 0 {
            offer(base, &mut best);
            continue;
        }
        let basis = crate::Matrix::from_fn(m, d, |r, c| eig.eigenvectors[(r, null[c])]);
        let per_axis: usize = match d {
            1 => 101,
            2 => 33,
            _ => 17,
        };
        let mut center = Vector::zeros(d);
        let mut half = radius + base.norm();
        let mut face_best: Option<(f64, Vector)> = None;
        while half > 1e-8 {
            let step = 2.0 * half / (per_axis - 1) as f64;
            let mut improved = false;
            for idx in 0..per_axis.pow(d as u32) {
                let mut rest = idx;
                let z = Vector::from_fn(d, |i, _| {
                    let j = rest % per_axis;
                    rest /= per_axis;
                    center[i] - half + step * j as f64
                });
                let u = &base + &basis * &z;
                let cost = (&u - &problem.u_nom).norm_squared();
                if feasible(&u) && face_best.as_ref().is_none_or(|f| cost < f.0) {
                    face_best = Some((cost, z));
                    improved = true;
                }
            }
            let Some((_, z)) = face_best.as_ref() else {
                break;
            };
            if improved {
                center = z.clone();
            }
            half = 3.0 * step;
        }
        if let Some((_, z)) = face_best {
            offer(&base + &basis * z, &mut best);
        }
    }
    best.map(|(_, u)| u)
}

/// Every subset of `0..n` with at most `k` elements.
fn face_sets(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..k {
        let mut next = Vec::new();
        for s in &frontier {
            let start = s.last().map_or(0, |&l: &usize| l + 1);
            for i in start..n {
                let mut t: Vec<usize> = s.clone();
                t.push(i);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Random small QPs against grid search, with KKT residuals.
pub fn qp_oracle(cfg: &VerifyConfig) -> Check {
    timed("filter QP against grid search".into(), || {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9b);
        let (mut worst_gap, mut worst_kkt) = (0.0_f64, 0.0_f64);
        let (mut failures, mut compared, mut infeasible) = (0usize, 0usize, 0usize);
        for _ in 0..cfg.qp_problems {
            let m = rng.random_range(1..=3);
            let k = rng.random_range(1..=3);
            let half: Vec<f64> = (0..m).map(|_| rng.random_range(0.2..2.0)).collect();
            let input_set = InputSet::new(half.iter().map(|h| -h).collect(), half.clone())?;
            let anchor = random_input(&input_set, &mut rng);
            let constraints = (0..k)
                .map(|_| {
                    let a = Vector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
                    let slack = rng.random_range(-0.2..0.5);
                    let b = a.dot(&anchor) + slack;
                    Constraint { a, b }
                })
                .collect();
            let u_nom = Vector::from_fn(m, |i, _| rng.random_range(-2.5..2.5) * half[i]);
            let problem = QpProblem {
                u_nom,
                constraints,
                input_set,
            };
            let sol = solve_filter(&problem)?;
            match (sol.status, grid_projection(&problem)) {
                (QpStatus::Optimal, Some(g)) => {
                    compared += 1;
                    let gap = (&sol.u - &g).norm();
                    let kkt = sol.kkt_residual(&problem);
                    worst_gap = worst_gap.max(gap);
                    worst_kkt = worst_kkt.max(kkt);
                    failures += usize::from(gap > 2e-3 || kkt > 1e-8);
                }
                (QpStatus::InfeasibleRelaxed, None) => infeasible += 1,
                _ => failures += 1,
            }
        }
        Ok((
            failures == 0,
            format!(
                "{compared} compared, {infeasible} infeasible, {failures} mismatches, max |u - u_grid| {worst_gap:.2e}, max KKT residual {worst_kkt:.2e}"
            ),
        ))
    })
}

/// Sup estimates only bound from above when they are inflated, not deflated.
pub fn conservative_settings(cfg: &VerifyConfig) -> Check {
    timed("sup inflation >= 1".into(), || {
        let inflation = cfg.scenario.sup.inflation;
        Ok((inflation >= 1.0, format!("inflation {inflation}")))
    })
}

/// The full property suite.
pub fn suite(cfg: &VerifyConfig) -> Vec<Check> {
    let systems = [SystemId::Unicycle, SystemId::Spacecraft];
    let horizon = cfg.scenario.sim.horizon;
    let mut out = vec![conservative_settings(cfg)];
    for id in systems {
        out.push(ordering(id, cfg, horizon));
        out.push(half_nu1_bound(id, cfg));
    }
    for id in [
        SystemId::DoubleIntegrator,
        SystemId::Unicycle,
        SystemId::Spacecraft,
    ] {
        out.push(reach_bound(id, cfg, horizon));
        out.push(one_period_bound(id, cfg, horizon));
    }
    for id in systems {
        for v in Variant::ALL {
            out.push(forward_invariance(id, v, cfg));
        }
    }
    out.push(qp_oracle(cfg));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_agrees_with_a_known_projection() {
        let problem = QpProblem {
            u_nom: Vector::from_vec(vec![1.0, 1.0]),
            constraints: vec![Constraint {
                a: Vector::from_vec(vec![1.0, 1.0]),
                b: 1.0,
            }],
            input_set: InputSet::symmetric(2, 1.0).unwrap(),
        };
        let g = grid_projection(&problem).unwrap();
        assert!((g - Vector::from_vec(vec![0.5, 0.5])).norm() < 1e-4);
    }

    #[test]
    fn quick_double_integrator_checks_pass() {
        let cfg = VerifyConfig::quick();
        for c in [
            reach_bound(SystemId::DoubleIntegrator, &cfg, 0.1),
            one_period_bound(SystemId::DoubleIntegrator, &cfg, 0.1),
            qp_oracle(&cfg),
            conservative_settings(&cfg),
        ] {
            assert!(c.passed, "{c}");
        }
    }

    #[test]
    fn deflated_sup_settings_fail() {
        let mut cfg = VerifyConfig::quick();
        cfg.scenario.sup.inflation = 0.5;
        assert!(!conservative_settings(&cfg).passed);
    }
}
