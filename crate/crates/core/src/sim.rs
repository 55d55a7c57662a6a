//! Zero-order-hold closed loop: sample `x_k`, build the margin rows, solve the
//! filter QP, hold `u_k` for one period and integrate densely with RK4.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use crate::error::{non_finite, Error, Result};
use crate::integrate::rk4_step;
use crate::margins::{global_constants, phi3, Gain, GlobalConstants, MarginFunction, Variant};
use crate::model::{hdot, lie_derivatives};
use crate::qp::{build_constraint, solve_filter, Constraint, QpProblem, QpStatus};
use crate::sup::SupConfig;
use crate::systems::Plant;
use crate::Vector;

/// Slack allowed when testing domain membership of integrated states.
pub const DOMAIN_SLACK: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub variant: Variant,
    pub gain: Gain,
    pub horizon: f64,
    pub duration: f64,
    pub substeps: usize,
    pub seed: u64,
    /// Settings of per-step local suprema.
    pub online_sup: SupConfig,
    /// Settings of the one-off global constants.
    pub offline_sup: SupConfig,
    /// `γ` of the auxiliary `ψ ≡ 0` rows.
    pub aux_gamma: f64,
    /// Overrides the plant's initial state.
    pub x0: Option<Vector>,
    pub stop_at_goal: bool,
    /// `false` applies the clamped nominal input with no filtering.
    pub filter: bool,
}

impl SimConfig {
    pub fn new(variant: Variant, horizon: f64, duration: f64) -> Self {
        Self {
            variant,
            gain: Gain::default_for(variant),
            horizon,
            duration,
            substeps: 50,
            seed: 0,
            online_sup: crate::config::ScenarioConfig::default().online_sup(),
            offline_sup: SupConfig::default(),
            aux_gamma: 1.0,
            x0: None,
            stop_at_goal: true,
            filter: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "T must be positive, got {}",
                self.horizon
            )));
        }
        if self.substeps < 10 {
            return Err(Error::InvalidParameter(format!(
                "substeps must be at least 10, got {}",
                self.substeps
            )));
        }
        if !(self.duration >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "duration must be nonnegative, got {}",
                self.duration
            )));
        }
        self.online_sup.validate()?;
        self.offline_sup.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubstepRecord {
    pub t: f64,
    pub x: Vector,
    pub u: Vector,
    /// Largest primary barrier value.
    pub h: f64,
    /// `ḣ` of the primary row attaining `h`.
    pub hdot: f64,
    /// Largest auxiliary barrier value (`-∞` without auxiliary rows).
    pub h_aux: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeriodRecord {
    pub k: usize,
    pub t: f64,
    pub x: Vector,
    pub u_nom: Vector,
    pub u: Vector,
    /// Per primary row.
    pub phi: Vec<f64>,
    pub nu: Vec<f64>,
    pub status: QpStatus,
    pub violation: f64,
    pub active: Vec<usize>,
    /// Seconds spent evaluating margins.
    pub margin_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    ReachedGoal,
    /// Time budget exhausted.
    TimeUp,
    LeftDomain,
    /// A margin could not be evaluated at `x_k` (e.g. `h` undefined there).
    MarginFailure(String),
}

#[derive(Debug, Clone)]
pub struct SimTrace {
    pub system: String,
    pub variant: Variant,
    pub horizon: f64,
    pub seed: u64,
    pub dim_state: usize,
    pub dim_input: usize,
    pub substeps: Vec<SubstepRecord>,
    pub periods: Vec<PeriodRecord>,
    pub outcome: Outcome,
}

impl SimTrace {
    pub fn reached_goal(&self) -> bool {
        self.outcome == Outcome::ReachedGoal
    }

    pub fn relaxations(&self) -> usize {
        self.periods
            .iter()
            .filter(|p| p.status == QpStatus::InfeasibleRelaxed)
            .count()
    }

    pub fn final_state(&self) -> &Vector {
        &self.substeps.last().expect("trace is never empty").x
    }

    pub fn file_name(&self) -> String {
        trace_file_name(&self.system, self.variant, self.horizon, self.seed)
    }

    /// CSV with one row per substep.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string()];
        header.extend((0..self.dim_state).map(|i| format!("x{}", i + 1)));
        header.extend((0..self.dim_input).map(|i| format!("u{}", i + 1)));
        header.extend(["h", "hdot", "phi", "nu", "qp_status", "qp_violation"].map(String::from));
        w.write_record(&header)?;
        let per = if self.periods.is_empty() {
            1
        } else {
            (self.substeps.len() - 1)
                .div_ceil(self.periods.len())
                .max(1)
        };
        for (i, s) in self.substeps.iter().enumerate() {
            let period = if i == 0 {
                self.periods.first()
            } else {
                self.periods.get((i - 1) / per)
            };
            let mut rec: Vec<String> = vec![fmt(s.t)];
            rec.extend(s.x.iter().map(|v| fmt(*v)));
            rec.extend(s.u.iter().map(|v| fmt(*v)));
            rec.push(fmt(s.h));
            rec.push(fmt(s.hdot));
            match period {
                Some(p) => {
                    let row = binding_row(&p.phi);
                    rec.push(fmt(p.phi.get(row).copied().unwrap_or(f64::NAN)));
                    rec.push(fmt(p.nu.get(row).copied().unwrap_or(f64::NAN)));
                    rec.push(p.status.as_str().to_string());
                    rec.push(fmt(p.violation));
                }
                None => rec.extend(["nan", "nan", "none", "0"].map(String::from)),
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(self.file_name());
        self.write_csv(std::fs::File::create(&path)?)?;
        Ok(path)
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.12e}")
}

/// Row with the smallest `φ`: the tightest constraint.
fn binding_row(phi: &[f64]) -> usize {
    phi.iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map_or(0, |(i, _)| i)
}

pub fn trace_file_name(system: &str, variant: Variant, horizon: f64, seed: u64) -> String {
    format!("{system}_{variant}_T{horizon}_seed{seed}.csv")
}

/// An undefined barrier value only occurs deep inside the unsafe set.
fn unsafe_if_nan(h: f64) -> f64 {
    if h.is_nan() {
        f64::INFINITY
    } else {
        h
    }
}

/// `max h` over every row and every substep; the run was safe iff this is `<= 0`.
pub fn min_h_over_trace(trace: &SimTrace) -> f64 {
    trace
        .substeps
        .iter()
        .map(|s| unsafe_if_nan(s.h.max(s.h_aux)))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// `max h` over primary rows: closest approach to the obstacle boundary.
pub fn closest_approach(trace: &SimTrace) -> f64 {
    trace
        .substeps
        .iter()
        .map(|s| unsafe_if_nan(s.h))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Global constants for every primary row of `plant`, if the variant needs them.
pub fn plant_globals(
    plant: &Plant,
    horizon: f64,
    gain: &Gain,
    sup: &SupConfig,
) -> Result<Vec<Arc<GlobalConstants>>> {
    let alpha = match gain {
        Gain::Alpha(a) => a.clone(),
        Gain::Gamma(_) => crate::model::ClassK::identity(),
    };
    (0..plant.barriers.len())
        .map(|row| global_constants(&plant.setup(row, sup), horizon, &alpha).map(Arc::new))
        .collect()
}

/// Margin functions for each primary row. Global variants and `φ₁ˡ` get
/// global constants (the latter uses them as caps).
pub fn prepare_margins(plant: &Plant, cfg: &SimConfig) -> Result<Vec<MarginFunction>> {
    let needs_globals = cfg.variant.is_global() || cfg.variant == Variant::Phi1L;
    let globals = if needs_globals {
        Some(plant_globals(
            plant,
            cfg.horizon,
            &cfg.gain,
            &cfg.offline_sup,
        )?)
    } else {
        None
    };
    prepare_margins_with(plant, cfg, globals.as_deref())
}

pub fn prepare_margins_with(
    plant: &Plant,
    cfg: &SimConfig,
    globals: Option<&[Arc<GlobalConstants>]>,
) -> Result<Vec<MarginFunction>> {
    (0..plant.barriers.len())
        .map(|row| {
            let f = MarginFunction::new(cfg.variant, cfg.gain.clone())?;
            Ok(match globals {
                Some(g) => f.with_globals(g[row].clone()),
                None => f,
            })
        })
        .collect()
}

fn record(plant: &Plant, t: f64, x: &Vector, u: &Vector) -> Result<SubstepRecord> {
    let mut h = f64::NEG_INFINITY;
    let mut hd = f64::NAN;
    for b in &plant.barriers {
        let v = b.value(x);
        if v.is_nan() || v > h {
            h = v;
            hd = hdot(plant.model.as_ref(), b.as_ref(), x, u).unwrap_or(f64::NAN);
            if v.is_nan() {
                break;
            }
        }
    }
    let h_aux = plant
        .auxiliary
        .iter()
        .map(|b| b.value(x))
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(SubstepRecord {
        t,
        x: x.clone(),
        u: u.clone(),
        h,
        hdot: hd,
        h_aux,
    })
}

fn in_domain(plant: &Plant, x: &Vector) -> bool {
    let (lo, hi) = (plant.domain.lo(), plant.domain.hi());
    (0..x.len()).all(|i| x[i] >= lo[i] - DOMAIN_SLACK && x[i] <= hi[i] + DOMAIN_SLACK)
}

/// Runs the closed loop with prepared margin functions.
pub fn run_with(plant: &Plant, cfg: &SimConfig, margins: &[MarginFunction]) -> Result<SimTrace> {
    cfg.validate()?;
    if margins.len() != plant.barriers.len() {
        return Err(Error::Dimension {
            expected: plant.barriers.len(),
            got: margins.len(),
        });
    }
    let model = plant.model.as_ref();
    let t_step = cfg.horizon;
    let dt = t_step / cfg.substeps as f64;
    let periods = (cfg.duration / t_step - 1e-9).ceil().max(0.0) as usize;
    let mut x = cfg.x0.clone().unwrap_or_else(|| plant.x0.clone());
    model.project(&mut x);
    let zero_u = Vector::zeros(plant.input_set.dim());
    let mut trace = SimTrace {
        system: plant.id.name().to_string(),
        variant: cfg.variant,
        horizon: cfg.horizon,
        seed: cfg.seed,
        dim_state: model.dim_state(),
        dim_input: model.dim_input(),
        substeps: vec![record(plant, 0.0, &x, &zero_u)?],
        periods: Vec::with_capacity(periods),
        outcome: Outcome::TimeUp,
    };
    let setups: Vec<_> = (0..plant.barriers.len())
        .map(|row| {
            let mut s = plant.setup(row, &cfg.online_sup);
            s.sup.seed = cfg.seed;
            s
        })
        .collect();
    for k in 0..periods {
        let t_k = k as f64 * t_step;
        if cfg.stop_at_goal && plant.goal.reached(&x) {
            trace.outcome = Outcome::ReachedGoal;
            return Ok(trace);
        }
        let u_nom = plant.nominal.eval(&x, &plant.input_set);
        let started = Instant::now();
        let mut constraints = Vec::new();
        let mut phis = Vec::new();
        let mut nus = Vec::new();
        for (setup, margin) in setups.iter().zip(margins) {
            match build_constraint(setup, margin, &x, t_step) {
                Ok(c) => {
                    phis.push(c.phi);
                    nus.push(c.nu);
                    constraints.push(c.row);
                }
                Err(e @ Error::NonFinite { .. }) | Err(e @ Error::EmptyRegion(_)) => {
                    trace.outcome = Outcome::MarginFailure(e.to_string());
                    return Ok(trace);
                }
                Err(e) => return Err(e),
            }
        }
        for b in &plant.auxiliary {
            let (lfh, lgh) = lie_derivatives(model, b.as_ref(), &x)?;
            let phi = phi3(b.value(&x), t_step, 0.0, cfg.aux_gamma)?;
            constraints.push(Constraint {
                a: lgh,
                b: phi - lfh,
            });
        }
        let margin_seconds = started.elapsed().as_secs_f64();
        let (u, status, violation, active) = if cfg.filter {
            let sol = solve_filter(&QpProblem {
                u_nom: u_nom.clone(),
                constraints,
                input_set: plant.input_set.clone(),
            })?;
            if sol.status == QpStatus::InfeasibleRelaxed {
                log::debug!("step {k} (t = {t_k}): QP relaxed by {}", sol.violation);
            }
            (sol.u, sol.status, sol.violation, sol.active)
        } else {
            (u_nom.clone(), QpStatus::Optimal, 0.0, Vec::new())
        };
        trace.periods.push(PeriodRecord {
            k,
            t: t_k,
            x: x.clone(),
            u_nom,
            u: u.clone(),
            phi: phis,
            nu: nus,
            status,
            violation,
            active,
            margin_seconds,
        });
        for j in 1..=cfg.substeps {
            x = rk4_step(|z| model.velocity(z, &u), &x, dt);
            model.project(&mut x);
            if x.iter().any(|v| !v.is_finite()) {
                return Err(non_finite("integrated state", &x));
            }
            let t = if j == cfg.substeps {
                (k + 1) as f64 * t_step
            } else {
                t_k + j as f64 * dt
            };
            trace.substeps.push(record(plant, t, &x, &u)?);
            if !in_domain(plant, &x) {
                trace.outcome = Outcome::LeftDomain;
                return Ok(trace);
            }
        }
    }
    if cfg.stop_at_goal && plant.goal.reached(&x) {
        trace.outcome = Outcome::ReachedGoal;
    }
    Ok(trace)
}

/// Prepares margins (computing global constants when needed) and runs.
pub fn run(plant: &Plant, cfg: &SimConfig) -> Result<SimTrace> {
    cfg.validate()?;
    let margins = prepare_margins(plant, cfg)?;
    run_with(plant, cfg, &margins)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::{integrator_plant, static_plant};

    #[test]
    fn static_system_does_not_move() {
        let plant = static_plant();
        let cfg = SimConfig::new(Variant::Phi3L, 0.1, 1.0);
        let trace = run(&plant, &cfg).unwrap();
        assert!(trace.substeps.iter().all(|s| s.x == plant.x0));
        assert_eq!(trace.periods.len(), 10);
    }

    #[test]
    fn integrator_approaches_boundary_from_below() {
        let plant = integrator_plant();
        let cfg = SimConfig::new(Variant::Phi3L, 0.1, 2.0);
        let trace = run(&plant, &cfg).unwrap();
        let top = min_h_over_trace(&trace);
        assert!(top <= 1e-9, "{top}");
        assert!(top > -1e-6, "{top}");
    }

    #[test]
    fn input_is_held_within_each_period() {
        let plant = integrator_plant();
        let cfg = SimConfig::new(Variant::Phi2L, 0.1, 0.5);
        let trace = run(&plant, &cfg).unwrap();
        for (k, p) in trace.periods.iter().enumerate() {
            for s in &trace.substeps[1 + k * 50..1 + (k + 1) * 50] {
                assert_eq!(s.u, p.u);
            }
        }
        let ts: Vec<f64> = trace.substeps.iter().map(|s| s.t).collect();
        assert!(ts.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn csv_has_declared_header() {
        let plant = integrator_plant();
        let trace = run(&plant, &SimConfig::new(Variant::Phi3L, 0.1, 0.2)).unwrap();
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,x1,u1,h,hdot,phi,nu,qp_status,qp_violation\n"));
        assert_eq!(text.lines().count(), 1 + trace.substeps.len());
        assert_eq!(trace.file_name(), "integrator_phi3l_T0.1_seed0.csv");
    }
}
