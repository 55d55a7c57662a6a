//! Command-line front end: margin tables, closed-loop runs, sweeps and the
//! property suite.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use zoh_cbf::margins::write_provenance;
use zoh_cbf::report::{
    self, margin_rows, physical_rows, plant_constants, write_margin_rows, write_physical_rows,
    write_summaries, RunSummary,
};
use zoh_cbf::verify::{self, VerifyConfig};
use zoh_cbf::{ClassK, Plant, ScenarioConfig, SystemId, Variant};

#[derive(Parser, Debug)]
#[command(
    name = "zoh-cbf",
    version,
    about = "Zero-order-hold control barrier function margins and simulations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct Common {
    /// unicycle, corridor, spacecraft, integrator, double-integrator or static.
    #[arg(long, global = true)]
    system: Option<SystemId>,
    /// Margin variants, comma separated, or `all`.
    #[arg(long, global = true, value_delimiter = ',')]
    variant: Vec<String>,
    /// Sampling periods, comma separated.
    #[arg(long = "T", global = true, value_delimiter = ',')]
    horizons: Vec<f64>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Scenario file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, env = "ZOH_CBF_OUT")]
    out: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Global controller margins nu0g..nu3g at one sampling period.
    MarginsTable,
    /// Global physical margins delta^inf for several sampling periods.
    PhysicalTable,
    /// Closed-loop runs; one trace file per variant.
    Simulate,
    /// Runs every (variant, T, seed) combination in parallel.
    Sweep {
        /// Number of seeds, starting at --seed.
        #[arg(long, default_value_t = 1)]
        runs: u64,
        /// Also write the trace of every run.
        #[arg(long)]
        traces: bool,
    },
    /// Two-obstacle corridor with phi2l, phi3l and phi3g.
    Corridor,
    /// Property suite; exits with 1 when a property fails.
    Verify {
        /// Small sample sizes for a fast smoke run.
        #[arg(long)]
        quick: bool,
    },
}

/// Failure classes mapped to exit codes.
enum Failure {
    Usage(anyhow::Error),
    Run(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Run(e.into())
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(anyhow::anyhow!(msg.into()))
}

struct Session {
    common: Common,
    config: ScenarioConfig,
}

impl Session {
    fn new(common: Common) -> Result<Self, Failure> {
        let mut config = match &common.config {
            Some(path) => ScenarioConfig::load(path).map_err(|e| Failure::Usage(e.into()))?,
            None => ScenarioConfig::default(),
        };
        if let Some(seed) = common.seed {
            config.sup.seed = seed;
            config.sim.seed = seed;
        }
        if let Some(w) = common.workers {
            config.sup.workers = w;
            if w > 0 {
                // Fails only if a pool already exists, which is harmless.
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(w)
                    .build_global();
            }
        }
        Ok(Self { common, config })
    }

    fn system(&self) -> Result<SystemId, Failure> {
        self.common
            .system
            .ok_or_else(|| usage("--system is required for this command"))
    }

    fn variants(&self, default: &[Variant]) -> Result<Vec<Variant>, Failure> {
        if self.common.variant.is_empty() {
            return Ok(default.to_vec());
        }
        let mut out = Vec::new();
        for name in &self.common.variant {
            if name == "all" {
                out.extend(Variant::ALL);
            } else {
                out.push(
                    name.parse::<Variant>()
                        .map_err(|e| usage(format!("--variant: {e}")))?,
                );
            }
        }
        out.dedup();
        Ok(out)
    }

    fn horizons(&self, default: &[f64]) -> Result<Vec<f64>, Failure> {
        let hs = if self.common.horizons.is_empty() {
            default.to_vec()
        } else {
            self.common.horizons.clone()
        };
        if let Some(bad) = hs.iter().find(|t| !(**t > 0.0)) {
            return Err(usage(format!("--T must be positive, got {bad}")));
        }
        Ok(hs)
    }

    fn single_horizon(&self) -> Result<f64, Failure> {
        match self.horizons(&[self.config.sim.horizon])?.as_slice() {
            [t] => Ok(*t),
            _ => Err(usage("this command takes a single --T")),
        }
    }

    fn seed(&self) -> u64 {
        self.config.sim.seed
    }

    fn alpha(&self) -> anyhow::Result<ClassK> {
        Ok(ClassK::linear(self.config.sim.alpha_slope)?)
    }

    fn out_dir(&self) -> anyhow::Result<Option<&Path>> {
        match &self.common.out {
            Some(dir) => {
                fs::create_dir_all(dir)
                    .with_context(|| format!("cannot create {}", dir.display()))?;
                Ok(Some(dir.as_path()))
            }
            None => Ok(None),
        }
    }
}

/// Writes `body` to stdout and, when an output directory is set, to `name` in it.
fn emit(ctx: &Session, name: &str, body: &[u8]) -> anyhow::Result<()> {
    io::stdout().write_all(body)?;
    if let Some(dir) = ctx.out_dir()? {
        let path = dir.join(name);
        fs::write(&path, body).with_context(|| format!("cannot write {}", path.display()))?;
        log::info!("wrote {}", path.display());
    }
    Ok(())
}

fn margins_table(ctx: &Session) -> Result<(), Failure> {
    let system = ctx.system()?;
    let t = ctx.single_horizon()?;
    let plant = Plant::build(system, &ctx.config)?;
    let globals = plant_constants(&plant, t, &ctx.alpha()?, &ctx.config.sup)?;
    let mut table = Vec::new();
    write_margin_rows(&mut table, &margin_rows(&globals)?)?;
    emit(ctx, &format!("margins_{system}_T{t}.csv"), &table)?;
    if let Some(dir) = ctx.out_dir()? {
        let path = dir.join(format!("provenance_{system}_T{t}.csv"));
        write_provenance(File::create(&path)?, system.name(), &[&globals])?;
    }
    Ok(())
}

fn physical_table(ctx: &Session) -> Result<(), Failure> {
    let system = ctx.system()?;
    let horizons = ctx.horizons(&[0.1, 0.01, 0.001])?;
    let plant = Plant::build(system, &ctx.config)?;
    let alpha = ctx.alpha()?;
    let mut rows = Vec::new();
    let mut tables = Vec::new();
    for &t in &horizons {
        let g = plant_constants(&plant, t, &alpha, &ctx.config.sup)?;
        rows.extend(physical_rows(&g)?);
        tables.push(g);
    }
    let mut table = Vec::new();
    write_physical_rows(&mut table, &rows)?;
    emit(ctx, &format!("physical_{system}.csv"), &table)?;
    if let Some(dir) = ctx.out_dir()? {
        let path = dir.join(format!("provenance_{system}_physical.csv"));
        let refs: Vec<_> = tables.iter().collect();
        write_provenance(File::create(&path)?, system.name(), &refs)?;
    }
    Ok(())
}

fn trace_dir(ctx: &Session) -> anyhow::Result<PathBuf> {
    Ok(ctx
        .out_dir()?
        .map_or_else(|| PathBuf::from("."), Path::to_path_buf))
}

fn simulate(ctx: &Session) -> Result<(), Failure> {
    let system = ctx.system()?;
    let t = ctx.single_horizon()?;
    let variants = ctx.variants(&[Variant::Phi3L])?;
    let dir = trace_dir(ctx)?;
    fs::create_dir_all(&dir)?;
    let mut rows = Vec::new();
    for v in variants {
        let trace = report::simulate(system, &ctx.config, v, t, ctx.seed())?;
        let path = trace.save(&dir)?;
        log::info!("wrote {}", path.display());
        rows.push(RunSummary::of(system, &trace));
    }
    write_summaries(io::stdout(), &rows, false)?;
    Ok(())
}

fn sweep(ctx: &Session, runs: u64, traces: bool) -> Result<(), Failure> {
    let system = ctx.system()?;
    let variants = ctx.variants(&Variant::ALL)?;
    let horizons = ctx.horizons(&[ctx.config.sim.horizon])?;
    let base = ctx.seed();
    let mut keys = Vec::new();
    for &v in &variants {
        for &t in &horizons {
            for s in 0..runs {
                keys.push((v, t, base + s));
            }
        }
    }
    let dir = if traces { Some(trace_dir(ctx)?) } else { None };
    if let Some(d) = &dir {
        fs::create_dir_all(d)?;
    }
    let results: Vec<anyhow::Result<RunSummary>> = keys
        .par_iter()
        .map(|&(v, t, s)| {
            let trace = report::simulate(system, &ctx.config, v, t, s)?;
            if let Some(d) = &dir {
                trace.save(d)?;
            }
            Ok(RunSummary::of(system, &trace))
        })
        .collect();
    let rows = results.into_iter().collect::<anyhow::Result<Vec<_>>>()?;
    let mut table = Vec::new();
    write_summaries(&mut table, &rows, false)?;
    emit(ctx, &format!("sweep_{system}.csv"), &table)?;
    Ok(())
}

fn corridor(ctx: &Session) -> Result<(), Failure> {
    let rows = report::corridor(&ctx.config, ctx.seed())?;
    let mut table = Vec::new();
    write_summaries(&mut table, &rows, false)?;
    emit(ctx, "corridor.csv", &table)?;
    Ok(())
}

fn run_verify(ctx: &Session, quick: bool) -> Result<bool, Failure> {
    let mut cfg = if quick {
        VerifyConfig::quick()
    } else {
        VerifyConfig::default()
    };
    cfg.scenario = ctx.config.clone();
    cfg.seed = ctx.seed();
    let mut ok = true;
    let mut lines = Vec::new();
    for check in verify::suite(&cfg) {
        println!("{check}");
        ok &= check.passed;
        lines.push(check.to_string());
    }
    if let Some(dir) = ctx.out_dir()? {
        fs::write(dir.join("verify.txt"), lines.join("\n") + "\n")?;
    }
    Ok(ok)
}

fn dispatch(cli: Cli) -> Result<bool, Failure> {
    let ctx = Session::new(cli.common)?;
    match cli.command {
        Command::MarginsTable => margins_table(&ctx)?,
        Command::PhysicalTable => physical_table(&ctx)?,
        Command::Simulate => simulate(&ctx)?,
        Command::Sweep { runs, traces } => {
            if runs == 0 {
                return Err(usage("--runs must be positive"));
            }
            sweep(&ctx, runs, traces)?
        }
        Command::Corridor => corridor(&ctx)?,
        Command::Verify { quick } => return run_verify(&ctx, quick),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn command_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn parses_lists_and_variants() {
        let cli = Cli::try_parse_from([
            "zoh-cbf",
            "sweep",
            "--system",
            "unicycle",
            "--variant",
            "phi3l,phi2g",
            "--T",
            "0.1,0.01",
        ])
        .unwrap();
        assert_eq!(cli.common.horizons, vec![0.1, 0.01]);
        assert_eq!(cli.common.variant, vec!["phi3l", "phi2g"]);
        assert!(Cli::try_parse_from(["zoh-cbf", "simulate", "--bogus"]).is_err());
    }

    #[test]
    fn unknown_variant_is_a_usage_error() {
        let cli = Cli::try_parse_from(["zoh-cbf", "simulate", "--variant", "phi9"]).unwrap();
        let ctx = Session::new(cli.common).ok().unwrap();
        assert!(matches!(ctx.variants(&[]), Err(Failure::Usage(_))));
    }
}
