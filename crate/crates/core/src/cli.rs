//! Command-line front end: config loading, subcommand dispatch and report
//! files.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fluid::{
    certify_attractor, fluid_trajectory, minimize_sys_dual, solve_exact_joint, solve_fluid_relaxed,
    sys_dual_search_bound, write_fluid_csv, write_kkt_csv, FluidState,
};
use crate::index::{
    check_indexability, default_search_bound, lambda_grid, pow_index_table, whittle_index_table, write_index_csv,
    IndexTable, COARSE_GRID_POINTS, DEFAULT_RESOLUTION,
};
use crate::model::{make_scenario, replicate_system, ScenarioConfig, SystemSpec};
use crate::policies::{FawtMode, PolicyKind, DEFAULT_DPP_V};
use crate::sim::{run_experiment, write_aggregate_csv, write_runs_csv, ExperimentSpec, DEFAULT_HORIZON, DEFAULT_RUNS};

pub const OUTPUT_ENV: &str = "POW_RMAB_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    /// Cap `U` on penalty multipliers; defaults per scenario kind.
    pub u_cap: Option<f64>,
    #[serde(default = "default_resolution")]
    pub resolution: f64,
    /// Index search bound `M`; defaults per arm.
    pub search_bound: Option<f64>,
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            u_cap: None,
            resolution: default_resolution(),
            search_bound: None,
            grid_points: default_grid_points(),
        }
    }
}

fn default_resolution() -> f64 {
    DEFAULT_RESOLUTION
}

fn default_grid_points() -> usize {
    COARSE_GRID_POINTS
}

fn default_k_values() -> Vec<usize> {
    vec![1]
}

fn default_runs() -> usize {
    DEFAULT_RUNS
}

fn default_horizon() -> usize {
    DEFAULT_HORIZON
}

fn default_dpp_v() -> f64 {
    DEFAULT_DPP_V
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub policy: Option<PolicyKind>,
    pub policies: Option<Vec<PolicyKind>>,
    #[serde(default = "default_k_values")]
    pub k_values: Vec<usize>,
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_dpp_v")]
    pub dpp_v: f64,
    /// Defaults per scenario kind.
    pub fawt_mode: Option<FawtMode>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            policy: None,
            policies: None,
            k_values: default_k_values(),
            runs: default_runs(),
            horizon: default_horizon(),
            seed: 0,
            dpp_v: default_dpp_v(),
            fawt_mode: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: ScenarioConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub experiment: ExperimentConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let key = e
                .span()
                .map(|s| format!("bytes {}..{}", s.start, s.end))
                .unwrap_or_default();
            Error::config(key, e.message().to_string())
        })?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(path.display().to_string(), format!("cannot read config: {e}")))?;
        Self::from_toml(&text)
    }

    fn check(&self) -> Result<()> {
        self.scenario.check()?;
        if let Some(u) = self.solver.u_cap {
            if !(u > 0.0 && u.is_finite()) {
                return Err(Error::config("solver.u_cap", format!("{u} must be positive")));
            }
        }
        if !(self.solver.resolution > 0.0) {
            return Err(Error::config("solver.resolution", "must be positive"));
        }
        if let Some(m) = self.solver.search_bound {
            if !(m > 0.0 && m.is_finite()) {
                return Err(Error::config("solver.search_bound", format!("{m} must be positive")));
            }
        }
        if self.solver.grid_points < 2 {
            return Err(Error::config("solver.grid_points", "must be >= 2"));
        }
        let e = &self.experiment;
        if e.k_values.is_empty() || e.k_values.contains(&0) {
            return Err(Error::config(
                "experiment.k_values",
                "must be a non-empty list of positive integers",
            ));
        }
        if e.runs == 0 {
            return Err(Error::config("experiment.runs", "must be >= 1"));
        }
        if e.horizon == 0 {
            return Err(Error::config("experiment.horizon", "must be >= 1"));
        }
        if !(e.dpp_v > 0.0 && e.dpp_v.is_finite()) {
            return Err(Error::config("experiment.dpp_v", "must be positive"));
        }
        Ok(())
    }

    /// Policies to simulate; an error if none are configured.
    pub fn policies(&self) -> Result<Vec<PolicyKind>> {
        let e = &self.experiment;
        let list = match (&e.policy, &e.policies) {
            (Some(_), Some(_)) => {
                return Err(Error::config(
                    "experiment.policy",
                    "set either `policy` or `policies`, not both",
                ));
            }
            (Some(p), None) => vec![*p],
            (None, Some(ps)) => ps.clone(),
            (None, None) => Vec::new(),
        };
        if list.is_empty() {
            return Err(Error::config("experiment.policies", "no policies listed"));
        }
        Ok(list)
    }

    pub fn u_cap(&self) -> f64 {
        self.solver.u_cap.unwrap_or_else(|| self.scenario.kind.default_mu_cap())
    }

    pub fn fawt_mode(&self) -> FawtMode {
        self.experiment
            .fawt_mode
            .unwrap_or_else(|| FawtMode::for_kind(self.scenario.kind))
    }

    /// First 16 hex digits of the SHA-256 of the canonical (defaults filled
    /// in) scenario, solver and experiment sections. The output location is
    /// not part of it.
    pub fn config_hash(&self) -> String {
        #[derive(Serialize)]
        struct Canonical<'a> {
            scenario: &'a ScenarioConfig,
            solver: &'a SolverConfig,
            experiment: &'a ExperimentConfig,
        }
        let text = toml::to_string(&Canonical {
            scenario: &self.scenario,
            solver: &self.solver,
            experiment: &self.experiment,
        })
        .expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))[..16].to_string()
    }

    pub fn system(&self) -> Result<SystemSpec> {
        make_scenario(&self.scenario)
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "pow-rmab",
    version,
    about = "Penalty-optimal Whittle indices and simulations for constrained restless bandits"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment config (TOML).
    #[arg(long, short)]
    pub config: PathBuf,
    /// Output directory; overrides the config's `output.dir`.
    #[arg(long, env = OUTPUT_ENV)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// POW and Whittle index tables for every arm group.
    Index(Common),
    /// Nestedness check of POW activation sets on a lambda grid.
    Indexability(Common),
    /// Relaxed fluid LP: objective and multipliers.
    Fluid {
        #[command(flatten)]
        common: Common,
        /// Also minimize the dual over the capacity price.
        #[arg(long)]
        with_dual: bool,
    },
    /// Monte-Carlo runs at a single replication factor.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Replication factor; defaults to the first configured K.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Monte-Carlo runs over every configured K.
    SweepK(Common),
    /// Exact joint optimum (tiny systems only).
    Oracle {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        k: usize,
    },
    /// Fluid trajectory of the POW policy and its KKT certificate.
    Kkt {
        #[command(flatten)]
        common: Common,
        /// Maximum trajectory length.
        #[arg(long, default_value_t = 10_000)]
        steps: usize,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Index(c) | Command::Indexability(c) | Command::SweepK(c) => c,
            Command::Fluid { common, .. }
            | Command::Simulate { common, .. }
            | Command::Oracle { common, .. }
            | Command::Kkt { common, .. } => common,
        }
    }
}

struct Context {
    config: RunConfig,
    hash: String,
    out: PathBuf,
}

impl Context {
    fn new(common: &Common) -> Result<Self> {
        let config = RunConfig::load(&common.config)?;
        let out = common
            .out
            .clone()
            .or_else(|| config.output.dir.clone())
            .unwrap_or_else(|| PathBuf::from("out"));
        fs::create_dir_all(&out)?;
        Ok(Self {
            hash: config.config_hash(),
            config,
            out,
        })
    }

    fn create(&self, name: &str) -> Result<BufWriter<File>> {
        Ok(BufWriter::new(File::create(self.out.join(name))?))
    }
}

/// Per-group index tables, computed concurrently.
pub fn index_tables(config: &RunConfig, system: &SystemSpec, pow: bool) -> Result<Vec<IndexTable>> {
    let beta = system.discount;
    let u = config.u_cap();
    let res = config.solver.resolution;
    let arms: Vec<_> = system.group_arms().collect();
    arms.par_iter()
        .map(|arm| {
            if pow {
                let m = config
                    .solver
                    .search_bound
                    .unwrap_or_else(|| default_search_bound(arm, beta, u));
                pow_index_table(arm, beta, u, m, res)
            } else {
                let m = config
                    .solver
                    .search_bound
                    .unwrap_or_else(|| default_search_bound(arm, beta, 0.0));
                whittle_index_table(arm, beta, m, res)
            }
        })
        .collect()
}

/// Experiment description for the configured policies, with the index
/// tables they need.
pub fn experiment_spec(config: &RunConfig, k_values: Vec<usize>) -> Result<ExperimentSpec> {
    let policies = config.policies()?;
    let system = config.system()?;
    let pow_tables = if policies.contains(&PolicyKind::Pow) {
        Some(index_tables(config, &system, true)?)
    } else {
        None
    };
    let whittle_tables = if policies
        .iter()
        .any(|p| matches!(p, PolicyKind::Whittle | PolicyKind::Fawt))
    {
        Some(index_tables(config, &system, false)?)
    } else {
        None
    };
    let e = &config.experiment;
    let mut spec = ExperimentSpec::new(system, policies, k_values);
    spec.runs = e.runs;
    spec.horizon = e.horizon;
    spec.base_seed = e.seed;
    spec.dpp_v = e.dpp_v;
    spec.fawt_mode = config.fawt_mode();
    spec.pow_tables = pow_tables;
    spec.whittle_tables = whittle_tables;
    Ok(spec)
}

fn cmd_index(ctx: &Context) -> Result<()> {
    let system = ctx.config.system()?;
    let pow = index_tables(&ctx.config, &system, true)?;
    let whittle = index_tables(&ctx.config, &system, false)?;
    write_index_csv(ctx.create("index_pow.csv")?, &ctx.hash, &pow)?;
    write_index_csv(ctx.create("index_whittle.csv")?, &ctx.hash, &whittle)?;
    for (n, (p, w)) in pow.iter().zip(&whittle).enumerate() {
        println!(
            "arm {n}: {} states, POW indexable = {}, Whittle indexable = {}, clamped = {}",
            p.num_states(),
            p.indexable,
            w.indexable,
            p.any_clamped() || w.any_clamped()
        );
    }
    Ok(())
}

fn cmd_indexability(ctx: &Context) -> Result<()> {
    let system = ctx.config.system()?;
    let beta = system.discount;
    let u = ctx.config.u_cap();
    let points = ctx.config.solver.grid_points;
    let arms: Vec<_> = system.group_arms().collect();
    let reports = arms
        .par_iter()
        .map(|arm| {
            let m = ctx
                .config
                .solver
                .search_bound
                .unwrap_or_else(|| default_search_bound(arm, beta, u));
            check_indexability(arm, beta, u, &lambda_grid(m, points))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut w = csv::Writer::from_writer(ctx.create("indexability.csv")?);
    w.write_record([
        "config_hash",
        "arm_id",
        "indexable",
        "lambda_low",
        "lambda_high",
        "state",
    ])?;
    for (n, r) in reports.iter().enumerate() {
        println!(
            "arm {n}: indexable = {} ({} violations)",
            r.indexable,
            r.violations.len()
        );
        if r.violations.is_empty() {
            w.write_record([ctx.hash.as_str(), &n.to_string(), "true", "", "", ""])?;
        }
        for v in &r.violations {
            w.write_record([
                ctx.hash.clone(),
                n.to_string(),
                "false".into(),
                v.lambda_low.to_string(),
                v.lambda_high.to_string(),
                v.state.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn cmd_fluid(ctx: &Context, with_dual: bool) -> Result<()> {
    let system = ctx.config.system()?;
    let u = ctx.config.u_cap();
    let sol = solve_fluid_relaxed(&system, &FluidState::initial(&system), Some(u))?;
    write_fluid_csv(ctx.create("fluid.csv")?, &ctx.hash, &sol, system.discount)?;
    println!(
        "relaxed objective {} (per step {}), lambda* = {}",
        sol.objective,
        sol.per_step_value(system.discount),
        sol.lambda_star
    );
    if sol.overflow.iter().any(|o| *o > 1e-9) {
        println!(
            "budgets out of reach at U = {u}; overflow per group: {:?}",
            sol.overflow
        );
    }
    if with_dual {
        let (lambda, value) = minimize_sys_dual(&system, u, sys_dual_search_bound(&system, u))?;
        let mut w = csv::Writer::from_writer(ctx.create("sys_dual.csv")?);
        w.write_record(["config_hash", "lambda", "dual_value", "lp_objective", "gap"])?;
        w.write_record([
            ctx.hash.clone(),
            lambda.to_string(),
            value.to_string(),
            sol.objective.to_string(),
            (value - sol.objective).to_string(),
        ])?;
        w.flush()?;
        println!("dual minimum {value} at lambda = {lambda}");
    }
    Ok(())
}

fn simulate(ctx: &Context, k_values: Vec<usize>, with_fluid: bool) -> Result<()> {
    let spec = experiment_spec(&ctx.config, k_values)?;
    let result = run_experiment(&spec)?;
    let fluid = if with_fluid {
        let sol = solve_fluid_relaxed(
            &spec.system,
            &FluidState::initial(&spec.system),
            Some(ctx.config.u_cap()),
        )?;
        Some(sol.per_step_value(spec.system.discount))
    } else {
        None
    };
    let scenario = ctx.config.scenario.kind.as_str();
    write_runs_csv(ctx.create("runs.csv")?, &ctx.hash, scenario, &result)?;
    write_aggregate_csv(ctx.create("aggregate.csv")?, &ctx.hash, scenario, &result, fluid)?;
    for cell in &result.cells {
        println!(
            "{:>8} K={:<3} reward/K {:.6} (sd {:.6})  mean violation {:.6} (sd {:.6})",
            cell.policy.as_str(),
            cell.k,
            cell.stats.reward_per_unit.mean,
            cell.stats.reward_per_unit.std,
            cell.stats.mean_violation.mean,
            cell.stats.mean_violation.std
        );
    }
    if let Some(v) = fluid {
        println!("fluid per-unit value {v:.6}");
    }
    Ok(())
}

fn cmd_oracle(ctx: &Context, k: usize) -> Result<()> {
    let system = replicate_system(&ctx.config.system()?, k)?;
    let exact = solve_exact_joint(&system)?;
    let sol = solve_fluid_relaxed(&system, &FluidState::initial(&system), Some(ctx.config.u_cap()))?;
    let mut w = csv::Writer::from_writer(ctx.create("oracle.csv")?);
    w.write_record([
        "config_hash",
        "k",
        "exact_value",
        "randomized_upper_bound",
        "fluid_objective_scaled",
    ])?;
    let fluid_scaled = sol.objective * k as f64;
    w.write_record([
        ctx.hash.clone(),
        k.to_string(),
        exact.to_string(),
        "true".into(),
        fluid_scaled.to_string(),
    ])?;
    w.flush()?;
    println!("exact joint value {exact} (randomized policies, an upper bound for deterministic ones); relaxed bound {fluid_scaled}");
    Ok(())
}

fn cmd_kkt(ctx: &Context, steps: usize) -> Result<()> {
    let system = ctx.config.system()?;
    let tables = index_tables(&ctx.config, &system, true)?;
    let traj = fluid_trajectory(&system, &tables, &FluidState::initial(&system), steps)?;
    let last = traj.states.last().expect("trajectory is non-empty");
    match traj.converged_at {
        Some(t) => println!("fluid trajectory converged after {t} steps"),
        None => println!("fluid trajectory did not converge within {steps} steps; certifying its last state"),
    }
    let report = certify_attractor(&system, &tables, last, ctx.config.u_cap())?;
    write_kkt_csv(ctx.create("kkt.csv")?, &ctx.hash, &report)?;
    for (name, residual, ok) in report.rows() {
        if residual.is_nan() {
            println!("{name:<24} not evaluated");
        } else {
            println!("{name:<24} residual {residual:e}  {}", if ok { "ok" } else { "FAIL" });
        }
    }
    println!(
        "certificate {}",
        if report.all_ok() && traj.converged_at.is_some() {
            "holds"
        } else {
            "does not hold"
        }
    );
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<()> {
    let ctx = Context::new(cli.command.common())?;
    match &cli.command {
        Command::Index(_) => cmd_index(&ctx),
        Command::Indexability(_) => cmd_indexability(&ctx),
        Command::Fluid { with_dual, .. } => cmd_fluid(&ctx, *with_dual),
        Command::Simulate { k, .. } => {
            let k = k.unwrap_or(ctx.config.experiment.k_values[0]);
            if k == 0 {
                return Err(Error::InvalidArgument("--k must be >= 1".into()));
            }
            simulate(&ctx, vec![k], false)
        }
        Command::SweepK(_) => simulate(&ctx, ctx.config.experiment.k_values.clone(), true),
        Command::Oracle { k, .. } => cmd_oracle(&ctx, *k),
        Command::Kkt { steps, .. } => cmd_kkt(&ctx, *steps),
    }
}

/// Parses `args` and runs the subcommand; diagnostics go to stderr.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
