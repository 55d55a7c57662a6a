//! Tables of global controller and physical margins, closed-loop summaries and
//! their CSV forms.

use std::io::Write;

use crate::config::ScenarioConfig;
use crate::error::Result;
use crate::margins::{physical_margin_inf, GlobalConstants, InfMethod, Variant};
use crate::model::ClassK;
use crate::sim::{closest_approach, min_h_over_trace, run, Outcome, SimConfig, SimTrace};
use crate::sup::SupConfig;
use crate::systems::{Plant, SystemId};

/// One row of the controller-margin table.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginRow {
    pub variant: Variant,
    pub nu: f64,
    pub samples: usize,
    pub inflation: f64,
    pub seed: u64,
}

/// Global constants of the first barrier row of `plant` at horizon `T`.
pub fn plant_constants(
    plant: &Plant,
    horizon: f64,
    alpha: &ClassK,
    sup: &SupConfig,
) -> Result<GlobalConstants> {
    crate::margins::global_constants(&plant.setup(0, sup), horizon, alpha)
}

/// `ν₀ᵍ ... ν₃ᵍ` from one set of global constants.
pub fn margin_rows(globals: &GlobalConstants) -> Result<Vec<MarginRow>> {
    let p = &globals.provenance;
    Variant::GLOBAL
        .iter()
        .map(|&v| {
            Ok(MarginRow {
                variant: v,
                nu: globals.nu(v)?,
                samples: p.samples,
                inflation: p.inflation,
                seed: p.seed,
            })
        })
        .collect()
}

pub fn write_margin_rows<W: Write>(out: W, rows: &[MarginRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["variant", "nu", "samples", "inflation", "seed"])?;
    for r in rows {
        w.write_record([
            r.variant.nu_name(),
            format!("{:.6e}", r.nu),
            r.samples.to_string(),
            r.inflation.to_string(),
            r.seed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One row of the physical-margin table.
#[derive(Debug, Clone, PartialEq)]
pub struct PhysicalRow {
    pub variant: Variant,
    pub horizon: f64,
    pub delta_inf: f64,
    pub method: InfMethod,
}

/// `δ^inf` of every global variant from one set of global constants.
pub fn physical_rows(globals: &GlobalConstants) -> Result<Vec<PhysicalRow>> {
    Variant::GLOBAL
        .iter()
        .map(|&v| {
            let d = physical_margin_inf(globals, v)?;
            Ok(PhysicalRow {
                variant: v,
                horizon: globals.horizon,
                delta_inf: d.value,
                method: d.method,
            })
        })
        .collect()
}

pub fn write_physical_rows<W: Write>(out: W, rows: &[PhysicalRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["variant", "T", "delta_inf"])?;
    for r in rows {
        w.write_record([
            r.variant.name().to_string(),
            r.horizon.to_string(),
            format!("{:.6e}", r.delta_inf),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Outcome of one closed-loop run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub system: SystemId,
    pub variant: Variant,
    pub horizon: f64,
    pub seed: u64,
    pub outcome: Outcome,
    pub final_time: f64,
    /// Largest primary `h` on the dense grid.
    pub closest_approach: f64,
    /// Largest `h` over every row, auxiliary ones included.
    pub max_h: f64,
    pub relaxations: usize,
    pub mean_margin_seconds: f64,
}

impl RunSummary {
    pub fn of(system: SystemId, trace: &SimTrace) -> Self {
        let steps = trace.periods.len().max(1) as f64;
        Self {
            system,
            variant: trace.variant,
            horizon: trace.horizon,
            seed: trace.seed,
            outcome: trace.outcome.clone(),
            final_time: trace.substeps.last().map_or(0.0, |s| s.t),
            closest_approach: closest_approach(trace),
            max_h: min_h_over_trace(trace),
            relaxations: trace.relaxations(),
            mean_margin_seconds: trace.periods.iter().map(|p| p.margin_seconds).sum::<f64>()
                / steps,
        }
    }

    pub fn reached_goal(&self) -> bool {
        self.outcome == Outcome::ReachedGoal
    }

    pub fn outcome_name(&self) -> &'static str {
        match self.outcome {
            Outcome::ReachedGoal => "reached_goal",
            Outcome::TimeUp => "time_up",
            Outcome::LeftDomain => "left_domain",
            Outcome::MarginFailure(_) => "margin_failure",
        }
    }
}

/// Writes summaries; wall-time columns are left out when `timings` is false
/// so that repeated runs produce identical bytes.
pub fn write_summaries<W: Write>(out: W, rows: &[RunSummary], timings: bool) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![
        "system",
        "variant",
        "T",
        "seed",
        "outcome",
        "reached_goal",
        "final_time",
        "closest_approach",
        "max_h",
        "relaxations",
    ];
    if timings {
        header.push("mean_margin_seconds");
    }
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.system.name().to_string(),
            r.variant.name().to_string(),
            r.horizon.to_string(),
            r.seed.to_string(),
            r.outcome_name().to_string(),
            r.reached_goal().to_string(),
            format!("{:.6}", r.final_time),
            format!("{:.6e}", r.closest_approach),
            format!("{:.6e}", r.max_h),
            r.relaxations.to_string(),
        ];
        if timings {
            rec.push(format!("{:.6e}", r.mean_margin_seconds));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Simulation settings for `plant` under `config`.
pub fn sim_config(
    plant: &Plant,
    config: &ScenarioConfig,
    variant: Variant,
    horizon: f64,
    seed: u64,
) -> Result<SimConfig> {
    let sim = &config.sim;
    let mut cfg = SimConfig::new(variant, horizon, plant.duration);
    cfg.gain = if variant.uses_gamma() {
        crate::margins::Gain::Gamma(sim.gamma)
    } else {
        crate::margins::Gain::Alpha(ClassK::linear(sim.alpha_slope)?)
    };
    cfg.substeps = sim.substeps;
    cfg.seed = seed;
    cfg.online_sup = config.online_sup().with_seed(seed);
    cfg.offline_sup = config.sup.clone();
    cfg.aux_gamma = sim.gamma;
    Ok(cfg)
}

/// Runs `variant` on the plant `system` with the scenario's settings.
pub fn simulate(
    system: SystemId,
    config: &ScenarioConfig,
    variant: Variant,
    horizon: f64,
    seed: u64,
) -> Result<SimTrace> {
    let plant = Plant::build(system, config)?;
    run(&plant, &sim_config(&plant, config, variant, horizon, seed)?)
}

/// Variants run by the corridor scenario.
pub const CORRIDOR_VARIANTS: [Variant; 3] = [Variant::Phi2L, Variant::Phi3L, Variant::Phi3G];

/// Runs the two-obstacle corridor for each variant of [`CORRIDOR_VARIANTS`].
pub fn corridor(config: &ScenarioConfig, seed: u64) -> Result<Vec<RunSummary>> {
    CORRIDOR_VARIANTS
        .iter()
        .map(|&v| {
            let trace = simulate(SystemId::Corridor, config, v, config.sim.horizon, seed)?;
            Ok(RunSummary::of(SystemId::Corridor, &trace))
        })
        .collect()
}
