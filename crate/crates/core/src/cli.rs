//! Command-line front end: JSON configs in, CSV and JSON artifacts out.
//!
//! Exit codes: 0 success, 2 solver failure or failed check, 3 bad config.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::costexpr::ScalarFn;
use crate::fluxmodel::FluxModel;
use crate::groups::{marginal_cost, FractionField, Group, GroupError, GroupSpec};
use crate::junction::{self, Buffer, FluxBounds, Junction};
use crate::laxhopf::{BoundaryProfile, LaxSolution};
use crate::oracle::{self, BruteForceOptions, FvOptions};
use crate::planner::{self, CharacteristicField, Plan, PlannerOptions, Problem, SolveReport};

#[derive(Debug, Parser)]
#[command(name = "lwr-departures", version, about = "Optimal departure rates on a single LWR road")]
pub struct Cli {
    /// Worker threads (default: available cores). Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the constants and write the plan.
    Solve(RunArgs),
    /// Verify the optimality conditions of a plan directory.
    Check {
        /// Directory written by `solve`.
        plan_dir: PathBuf,
    },
    /// Cross-check a plan against the finite-volume and brute-force oracles.
    Oracle(RunArgs),
    /// Solve one intersection.
    Junction {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Overrides the seed of the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Refine grids (solve) or add a half-step FV run (oracle).
    #[arg(long)]
    pub refine: bool,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("check failed: {0}")]
    Violation(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 3,
            _ => 2,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupConfig {
    pub name: String,
    pub size: f64,
    pub phi: String,
    pub psi: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub arrival_cells: usize,
    pub departure_cells: usize,
    pub jacobian_step: f64,
    pub max_iterations: usize,
    pub starts: usize,
    pub seed: u64,
    pub residual_tol: f64,
    pub refine_tol: f64,
    pub max_refinements: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let p = PlannerOptions::default();
        Self {
            arrival_cells: p.arrival_cells,
            departure_cells: p.departure_cells,
            jacobian_step: p.jacobian_step,
            max_iterations: p.max_iterations,
            starts: p.starts,
            seed: p.seed,
            residual_tol: p.residual_tol,
            refine_tol: p.refine_tol,
            max_refinements: p.max_refinements,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CheckConfig {
    /// Allowed |ΔJ(i,t) − C_i| relative to 1 + C_i on the supports.
    pub marginal_tol: f64,
    pub support_samples: usize,
    pub off_support_samples: usize,
    pub shock_points: usize,
    /// Allowed relative error of ∫ū_i against G_i.
    pub mass_tol: f64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self { marginal_tol: 1e-3, support_samples: 400, off_support_samples: 500, shock_points: 1000, mass_tol: 1e-4 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    pub fv_dt: f64,
    pub bins: usize,
    pub starts: usize,
    /// FV cells per bin in the brute-force evaluator.
    pub resolution: usize,
    /// Brute force may beat the plan by at most this fraction.
    pub cost_margin: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { fv_dt: 1e-3, bins: 16, starts: 20, resolution: 16, cost_margin: 0.01 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProblemConfig {
    pub velocity: String,
    pub rho_jam: f64,
    pub length: f64,
    /// Departure window [t_lo, t_hi].
    pub window: (f64, f64),
    #[serde(default)]
    pub arrival_window: Option<(f64, f64)>,
    pub groups: Vec<GroupConfig>,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub check: CheckConfig,
    #[serde(default)]
    pub oracle: OracleConfig,
}

impl ProblemConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Parse, validate and assemble the problem.
    pub fn build(&self) -> Result<(Problem, PlannerOptions), CliError> {
        let cfg = |e: String| CliError::Config(e);
        if self.groups.is_empty() {
            return Err(cfg("no groups given".into()));
        }
        if !(self.window.0 < self.window.1) {
            return Err(cfg(format!("empty departure window {:?}", self.window)));
        }
        let model = FluxModel::parse(&self.velocity, self.rho_jam).map_err(|e| cfg(format!("velocity: {e}")))?;
        let phi_src = &self.groups[0].phi;
        let phi = ScalarFn::parse(phi_src, "t").map_err(|e| cfg(format!("group '{}' phi: {e}", self.groups[0].name)))?;
        for g in &self.groups[1..] {
            let other = ScalarFn::parse(&g.phi, "t").map_err(|e| cfg(format!("group '{}' phi: {e}", g.name)))?;
            if !same_function(&phi, &other, self.window) {
                return Err(cfg(format!(
                    "groups must share one departure cost: '{}' has phi = {} but '{}' has phi = {}",
                    self.groups[0].name, phi_src, g.name, g.phi
                )));
            }
        }
        let groups = self
            .groups
            .iter()
            .map(|g| Group::new(&g.name, g.size, &g.psi).map_err(|e| cfg(format!("group '{}': {e}", g.name))))
            .collect::<Result<Vec<_>, _>>()?;
        let spec = GroupSpec::new(phi_src, groups).map_err(|e| cfg(e.to_string()))?;
        let problem = Problem::new(spec, model, self.length).map_err(|e| cfg(e.to_string()))?;
        let s = &self.solver;
        let opts = PlannerOptions {
            departure_window: self.window,
            arrival_window: self.arrival_window,
            arrival_cells: s.arrival_cells,
            departure_cells: s.departure_cells,
            jacobian_step: s.jacobian_step,
            max_iterations: s.max_iterations,
            starts: s.starts,
            seed: s.seed,
            refine: false,
            refine_tol: s.refine_tol,
            max_refinements: s.max_refinements,
            residual_tol: s.residual_tol,
        };
        let arr = opts.arrival_window(&problem);
        problem.spec.check_assumptions(self.window, arr, 400).map_err(|e| cfg(format!("assumptions: {e}")))?;
        Ok((problem, opts))
    }
}

fn same_function(a: &ScalarFn, b: &ScalarFn, window: (f64, f64)) -> bool {
    let squash = |f: &ScalarFn| f.source().split_whitespace().collect::<String>();
    if squash(a) == squash(b) {
        return true;
    }
    (0..=200).all(|k| {
        let t = window.0 + (window.1 - window.0) * k as f64 / 200.0;
        match (a.value(t), b.value(t)) {
            (Ok(x), Ok(y)) => (x - y).abs() <= 1e-12 * (1.0 + x.abs()),
            _ => false,
        }
    })
}

pub fn run(cli: Cli) -> i32 {
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            log::warn!("thread pool: {e}");
        }
    }
    let result = match cli.command {
        Command::Solve(a) => cmd_solve(&a).map(|_| ()),
        Command::Check { plan_dir } => cmd_check(&plan_dir).map(|_| ()),
        Command::Oracle(a) => cmd_oracle(&a).map(|_| ()),
        Command::Junction { config, out } => cmd_junction(&config, out.as_deref()).map(|_| ()),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.11e}")
}

fn write_csv(path: &Path, header: &[String], rows: impl Iterator<Item = Vec<f64>>) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r.iter().map(|v| fmt(*v)))?;
    }
    w.flush()?;
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

/// Artifacts of a solve run.
pub struct SolveOutput {
    pub problem: Problem,
    pub opts: PlannerOptions,
    pub plan: Plan,
    pub report: SolveReport,
}

fn solve_config(config: &ProblemConfig, seed: Option<u64>, refine: bool) -> Result<SolveOutput, CliError> {
    let (problem, mut opts) = config.build()?;
    if let Some(s) = seed {
        opts.seed = s;
    }
    opts.refine = refine;
    let (plan, report) = planner::solve(&problem, &opts).map_err(|e| CliError::Solver(e.to_string()))?;
    Ok(SolveOutput { problem, opts, plan, report })
}

pub fn cmd_solve(args: &RunArgs) -> Result<SolveOutput, CliError> {
    let mut config = ProblemConfig::load(&args.config)?;
    let out = solve_config(&config, args.seed, args.refine)?;
    if let Some(s) = args.seed {
        config.solver.seed = s;
    }
    fs::create_dir_all(&args.out)?;
    write_plan(&args.out, &config, &out)?;
    log::info!("constants {:?}, masses {:?}", out.report.constants, out.report.kappa);
    Ok(out)
}

fn write_plan(dir: &Path, config: &ProblemConfig, out: &SolveOutput) -> Result<(), CliError> {
    let (problem, plan, report) = (&out.problem, &out.plan, &out.report);
    let n = problem.spec.len();
    let names: Vec<&str> = problem.spec.groups.iter().map(|g| g.name.as_str()).collect();
    write_json(&dir.join("config.json"), &serde_json::to_value(config).map_err(|e| CliError::Io(e.to_string()))?)?;
    write_json(
        &dir.join("constants.json"),
        &json!({
            "groups": names,
            "constants": report.constants,
            "kappa": report.kappa,
            "sizes": problem.spec.sizes(),
            "split_masses": plan.group_masses(),
            "cost": plan.cost,
            "residual": report.residual,
            "iterations": report.iterations,
            "distinct_roots": report.distinct_roots,
            "refinements": report.refinements,
            "starts": report.starts,
            "arrival_sets": plan.partition.sets,
            "departure_sets": plan.departure_sets,
            "log": report.log,
        }),
    )?;

    let p = &plan.departures;
    let mut header = vec!["t".to_string(), "u_bar".to_string()];
    header.extend((1..=n).map(|i| format!("u_bar_{i}")));
    write_csv(
        &dir.join("departures.csv"),
        &header,
        (0..p.cells()).map(|k| {
            let mut row = vec![p.node_time(k), p.rates()[k]];
            row.extend(plan.group_rates.iter().map(|r| r[k]));
            row
        }),
    )?;

    let mut header = vec!["t".to_string(), "u".to_string()];
    header.extend((1..=n).map(|i| format!("theta_{i}")));
    header.push("active".into());
    let cand = &plan.candidate;
    write_csv(
        &dir.join("arrivals.csv"),
        &header,
        cand.nodes.iter().map(|node| {
            let mut row = vec![node.t, node.flux];
            let g = if node.flux > 0.0 { node.active } else { None };
            row.extend((0..n).map(|i| if g == Some(i) { 1.0 } else { 0.0 }));
            row.push(g.map_or(0.0, |k| (k + 1) as f64));
            row
        }),
    )?;

    let field = CharacteristicField::new(cand, &problem.model);
    let mut rows = Vec::new();
    let support = cand.support();
    let span: f64 = support.iter().map(|(a, b)| b - a).sum();
    for (a, b) in support {
        let count = ((400.0 * (b - a) / span).ceil() as usize).max(2);
        for k in 0..=count {
            let t = a + (b - a) * k as f64 / count as f64;
            let eta = field.departure_of(t).map_err(|e| CliError::Solver(e.to_string()))?;
            let g = cand.group_at(t).or(cand.group_at(t - 1e-12)).map_or(0.0, |k| (k + 1) as f64);
            rows.push(vec![t, eta, g]);
        }
    }
    write_csv(&dir.join("trajectories.csv"), &["arrival".into(), "departure".into(), "group".into()], rows.into_iter())?;
    Ok(())
}

/// Outcome of the optimality checks.
#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub pass: bool,
    pub failures: Vec<String>,
    pub warnings: Vec<String>,
    pub constants: Vec<f64>,
    pub max_support_deviation: Vec<f64>,
    pub min_off_support_slack: Vec<f64>,
    pub support_samples: Vec<usize>,
    pub widest_characteristic_interval: f64,
    pub cell_width: f64,
    pub mass_errors: Vec<f64>,
}

struct LoadedPlan {
    config: ProblemConfig,
    constants: Vec<f64>,
    t_lo: f64,
    h: f64,
    group_rates: Vec<Vec<f64>>,
}

fn load_plan(dir: &Path) -> Result<LoadedPlan, CliError> {
    let config = ProblemConfig::load(&dir.join("config.json"))?;
    let text = fs::read_to_string(dir.join("constants.json"))?;
    let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| CliError::Io(e.to_string()))?;
    let constants: Vec<f64> = serde_json::from_value(v["constants"].clone()).map_err(|e| CliError::Io(format!("constants.json: {e}")))?;
    let mut rdr = csv::Reader::from_path(dir.join("departures.csv"))?;
    let n = config.groups.len();
    let mut times = Vec::new();
    let mut group_rates = vec![Vec::new(); n];
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != n + 2 {
            return Err(CliError::Io(format!("departures.csv: {} columns, expected {}", rec.len(), n + 2)));
        }
        let parse = |k: usize| rec[k].trim().parse::<f64>().map_err(|e| CliError::Io(format!("departures.csv: {e}")));
        times.push(parse(0)?);
        for (i, r) in group_rates.iter_mut().enumerate() {
            r.push(parse(i + 2)?.max(0.0));
        }
    }
    if times.len() < 2 {
        return Err(CliError::Io("departures.csv has fewer than two rows".into()));
    }
    let h = (times[times.len() - 1] - times[0]) / (times.len() - 1) as f64;
    Ok(LoadedPlan { config, constants, t_lo: times[0], h, group_rates })
}

pub fn cmd_check(dir: &Path) -> Result<CheckReport, CliError> {
    let plan = load_plan(dir)?;
    let (problem, opts) = plan.config.build()?;
    let report = check_plan(&problem, &opts, &plan.config.check, &plan.constants, plan.t_lo, plan.h, &plan.group_rates)?;
    write_json(&dir.join("report.json"), &serde_json::to_value(&report).map_err(|e| CliError::Io(e.to_string()))?)?;
    for w in &report.warnings {
        log::warn!("{w}");
    }
    if report.pass {
        Ok(report)
    } else {
        Err(CliError::Violation(report.failures.join("; ")))
    }
}

/// Evaluate (J2), (J3), shock-freeness and masses for per-group cell rates.
pub fn check_plan(
    problem: &Problem,
    opts: &PlannerOptions,
    tol: &CheckConfig,
    constants: &[f64],
    t_lo: f64,
    h: f64,
    group_rates: &[Vec<f64>],
) -> Result<CheckReport, CliError> {
    let n = problem.spec.len();
    if constants.len() != n || group_rates.len() != n {
        return Err(CliError::Io(format!("plan has {} constants and {} profiles for {n} groups", constants.len(), group_rates.len())));
    }
    let spec = &problem.spec;
    let mut failures = Vec::new();
    let mut warnings = Vec::new();
    let cells = group_rates[0].len();
    let masses: Vec<f64> = group_rates.iter().map(|r| r.iter().sum::<f64>() * h).collect();
    let mass_errors: Vec<f64> = masses.iter().zip(spec.sizes()).map(|(m, g)| (m - g).abs() / g).collect();

    let mut report = CheckReport {
        pass: true,
        failures: Vec::new(),
        warnings: Vec::new(),
        constants: constants.to_vec(),
        max_support_deviation: vec![0.0; n],
        min_off_support_slack: vec![f64::INFINITY; n],
        support_samples: vec![0; n],
        widest_characteristic_interval: 0.0,
        cell_width: h,
        mass_errors: mass_errors.clone(),
    };
    if masses.iter().all(|m| *m == 0.0) {
        report.warnings.push("plan is empty: conditions hold vacuously".into());
        return Ok(report);
    }
    for (i, e) in mass_errors.iter().enumerate() {
        if *e > tol.mass_tol {
            failures.push(format!("mass: group {} departs {:.6e} of {:.6e}", i + 1, masses[i], spec.groups[i].size));
        }
    }

    let (total, fractions) = FractionField::from_rates(t_lo, h, group_rates).map_err(|e| CliError::Solver(e.to_string()))?;
    let sol = LaxSolution::new(&problem.model, total.clone(), problem.length).map_err(|e| CliError::Solver(e.to_string()))?;
    let exit = fractions.at_exit(&sol).map_err(|e| CliError::Solver(e.to_string()))?;
    let rate_max = total.max_rate();
    let dj = |i: usize, t: f64| -> Result<f64, GroupError> {
        match marginal_cost(spec, &sol, &exit, i, t) {
            Err(GroupError::AmbiguousCharacteristic { .. }) => marginal_cost(spec, &sol, &exit, i, t + 0.25 * h),
            r => r,
        }
    };

    // (J2) on the supports
    for i in 0..n {
        let support: Vec<usize> = (0..cells).filter(|&k| group_rates[i][k] > 1e-12 * rate_max).collect();
        let stride = (support.len() / tol.support_samples.max(1)).max(1);
        for &k in support.iter().step_by(stride) {
            let t = t_lo + (k as f64 + 0.5) * h;
            match dj(i, t) {
                Ok(v) => {
                    report.max_support_deviation[i] = report.max_support_deviation[i].max((v - constants[i]).abs());
                    report.support_samples[i] += 1;
                }
                Err(e) => warnings.push(format!("group {} at t = {t}: {e}", i + 1)),
            }
        }
        let limit = tol.marginal_tol * (1.0 + constants[i].abs());
        if report.max_support_deviation[i] > limit {
            failures.push(format!(
                "J2: group {} marginal cost deviates from C by {:.3e} (> {:.3e}) on its support",
                i + 1,
                report.max_support_deviation[i],
                limit
            ));
        }
    }

    // (J3) off the supports, over the whole departure window
    let (w0, w1) = opts.departure_window;
    let samples = tol.off_support_samples.max(1);
    for i in 0..n {
        let mut used = 0;
        for k in 0..samples {
            let mut t = w0 + (w1 - w0) * (k as f64 + 0.5) / samples as f64;
            let cell = ((t - t_lo) / h).floor();
            if cell >= 0.0 && (cell as usize) < cells {
                if group_rates[i][cell as usize] > 1e-12 * rate_max {
                    continue;
                }
                t = t_lo + (cell + 0.5) * h;
            }
            match dj(i, t) {
                Ok(v) => {
                    report.min_off_support_slack[i] = report.min_off_support_slack[i].min(v - constants[i]);
                    used += 1;
                }
                Err(e) => warnings.push(format!("group {} at t = {t}: {e}", i + 1)),
            }
        }
        if used > 0 && report.min_off_support_slack[i] < -tol.marginal_tol {
            failures.push(format!(
                "J3: group {} could lower its cost off its support (slack {:.3e})",
                i + 1,
                report.min_off_support_slack[i]
            ));
        }
    }

    // shock scan over the arrival span
    let g_total = total.total();
    let first = sol.level_time(1e-9 * g_total, problem.length).map_err(|e| CliError::Solver(e.to_string()))?;
    let last = sol.level_time(g_total * (1.0 - 1e-9), problem.length).map_err(|e| CliError::Solver(e.to_string()))?;
    let points = tol.shock_points.max(1);
    for k in 0..points {
        let t = first + (last - first) * (k as f64 + 0.5) / points as f64;
        let ci = sol.backward_char_interval(t).map_err(|e| CliError::Solver(e.to_string()))?;
        report.widest_characteristic_interval = report.widest_characteristic_interval.max(ci.width());
    }
    if report.widest_characteristic_interval > h {
        failures.push(format!(
            "shock: backward characteristics span {:.3e} > cell width {h:.3e}",
            report.widest_characteristic_interval
        ));
    }

    report.pass = failures.is_empty();
    report.failures = failures;
    report.warnings = warnings;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleReport {
    pub constants: Vec<f64>,
    pub fv: Vec<FvComparison>,
    pub convergence_ratio: Option<f64>,
    pub brute_force: Option<BruteForceComparison>,
    pub notes: Vec<String>,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct FvComparison {
    pub dt: f64,
    pub l1_arrival: f64,
    pub mass_error: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct BruteForceComparison {
    pub bins: usize,
    /// Optimum on the coarse search evaluator.
    pub search_cost: f64,
    pub brute_cost: f64,
    pub plan_cost: f64,
    pub evaluations: usize,
    pub rates: Vec<Vec<f64>>,
}

/// FV propagation of a plan at cell width dt, compared with the candidate arrival flux.
pub fn fv_check(problem: &Problem, opts: &PlannerOptions, plan: &Plan, dt: f64) -> Result<FvComparison, CliError> {
    let (w0, w1) = opts.departure_window;
    let cells = ((w1 - w0) / dt).round() as usize;
    let profiles: Vec<BoundaryProfile> = plan
        .resample(problem, w0, dt, cells)
        .into_iter()
        .map(|r| BoundaryProfile::from_rates(w0, dt, r).map_err(|e| CliError::Solver(e.to_string())))
        .collect::<Result<_, _>>()?;
    let run = oracle::fv_propagate(&problem.model, problem.length, &profiles, &FvOptions::new(dt)).map_err(|e| CliError::Solver(e.to_string()))?;
    let l1 = run.l1_distance(|t| plan.candidate.flux_exact(problem, t));
    Ok(FvComparison { dt, l1_arrival: l1, mass_error: (run.arrived - run.departed).abs(), steps: run.steps })
}

/// Brute-force search on the coarse bin grid, then the plan and the best
/// bin profile both costed by FV at `fv_dt`.
pub fn brute_force_check(problem: &Problem, opts: &PlannerOptions, plan: &Plan, oc: &OracleConfig, seed: u64) -> Result<BruteForceComparison, CliError> {
    let bo = BruteForceOptions { bins: oc.bins, starts: oc.starts, seed, resolution: oc.resolution, ..Default::default() };
    let brute = oracle::brute_force_optimize(&problem.spec, &problem.model, problem.length, opts.departure_window, &bo)
        .map_err(|e| CliError::Solver(e.to_string()))?;
    let solver = |e: oracle::OracleError| CliError::Solver(e.to_string());
    let fv = FvOptions::new(oc.fv_dt);
    let brute_cost = oracle::fv_cost(&problem.spec, &problem.model, problem.length, &brute.profiles(), &fv).map_err(solver)?.total;
    let profiles = (0..problem.spec.len())
        .map(|i| plan.group_profile(i).map_err(|e| CliError::Solver(e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    let plan_cost = oracle::fv_cost(&problem.spec, &problem.model, problem.length, &profiles, &fv).map_err(solver)?.total;
    Ok(BruteForceComparison {
        bins: oc.bins,
        search_cost: brute.cost,
        brute_cost,
        plan_cost,
        evaluations: brute.evaluations,
        rates: brute.rates,
    })
}

pub fn cmd_oracle(args: &RunArgs) -> Result<OracleReport, CliError> {
    let config = ProblemConfig::load(&args.config)?;
    let out = solve_config(&config, args.seed, false)?;
    let (problem, opts, plan) = (&out.problem, &out.opts, &out.plan);
    let oc = &config.oracle;
    let mut fv = vec![fv_check(problem, opts, plan, oc.fv_dt)?];
    if args.refine {
        fv.push(fv_check(problem, opts, plan, oc.fv_dt / 2.0)?);
    }
    let convergence_ratio = (fv.len() == 2).then(|| fv[0].l1_arrival / fv[1].l1_arrival);
    let mut notes = Vec::new();
    let mut pass = true;
    let brute_force = if problem.spec.len() <= 2 {
        let b = brute_force_check(problem, opts, plan, oc, opts.seed)?;
        if b.plan_cost > b.brute_cost + oc.cost_margin * b.brute_cost.abs() {
            pass = false;
            notes.push(format!("brute force beats the plan: {:.6} < {:.6}", b.brute_cost, b.plan_cost));
        }
        Some(b)
    } else {
        notes.push(format!("{} groups: brute force skipped, FV comparison only", problem.spec.len()));
        None
    };
    let report = OracleReport { constants: out.report.constants.clone(), fv, convergence_ratio, brute_force, notes, pass };
    fs::create_dir_all(&args.out)?;
    write_json(&args.out.join("oracle_report.json"), &serde_json::to_value(&report).map_err(|e| CliError::Io(e.to_string()))?)?;
    if report.pass {
        Ok(report)
    } else {
        Err(CliError::Violation(report.notes.join("; ")))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoadConfig {
    pub velocity: String,
    pub rho_jam: f64,
    pub density: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BufferConfig {
    pub capacity: f64,
    #[serde(default = "default_buffer_dt")]
    pub dt: f64,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    /// Scale admission so that it spans the priority curve; false uses c_i·(capacity − Σq) as is.
    #[serde(default = "default_true")]
    pub scaled: bool,
}

fn default_buffer_dt() -> f64 {
    1e-5
}

fn default_horizon() -> f64 {
    0.05
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JunctionModel {
    Lp,
    Priority,
    Stopsign,
    Buffer,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JunctionConfig {
    pub model: JunctionModel,
    pub incoming: Vec<RoadConfig>,
    pub outgoing: Vec<RoadConfig>,
    pub priorities: Vec<f64>,
    pub turning: Vec<Vec<f64>>,
    #[serde(default)]
    pub buffer: Option<BufferConfig>,
}

#[derive(Debug, Clone, Serialize)]
pub struct JunctionReport {
    pub model: JunctionModel,
    pub bounds: FluxBounds,
    pub incoming: Vec<f64>,
    pub outgoing: Vec<f64>,
    pub admissible: bool,
    pub activity: junction::Activity,
    pub tie: Option<bool>,
    pub queues: Option<Vec<f64>>,
}

pub fn cmd_junction(config: &Path, out: Option<&Path>) -> Result<JunctionReport, CliError> {
    let text = fs::read_to_string(config).map_err(|e| CliError::Config(format!("{}: {e}", config.display())))?;
    let cfg: JunctionConfig = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", config.display())))?;
    let road = |r: &RoadConfig| -> Result<(FluxModel, f64), CliError> {
        Ok((FluxModel::parse(&r.velocity, r.rho_jam).map_err(|e| CliError::Config(e.to_string()))?, r.density))
    };
    let inc = cfg.incoming.iter().map(road).collect::<Result<Vec<_>, _>>()?;
    let outg = cfg.outgoing.iter().map(road).collect::<Result<Vec<_>, _>>()?;
    let j = Junction::new(cfg.priorities.clone(), cfg.turning.clone()).map_err(|e| CliError::Config(e.to_string()))?;
    if inc.len() != j.incoming() || outg.len() != j.outgoing() {
        return Err(CliError::Config(format!(
            "{} incoming and {} outgoing roads for a {}×{} turning matrix",
            inc.len(),
            outg.len(),
            j.incoming(),
            j.outgoing()
        )));
    }
    let bounds = FluxBounds::from_densities(&inc, &outg).map_err(|e| CliError::Config(e.to_string()))?;
    let shape = |e: junction::JunctionError| CliError::Config(e.to_string());
    let mut tie = None;
    let mut queues = None;
    let mut series = Vec::new();
    let (incoming, outgoing) = match cfg.model {
        JunctionModel::Lp => {
            let s = junction::solve_lp(&j, &bounds).map_err(shape)?;
            tie = Some(s.tie);
            let o = j.outgoing_fluxes(&s.fluxes);
            (s.fluxes, o)
        }
        JunctionModel::Priority => {
            let f = junction::solve_priority_curve(&j, &bounds).map_err(shape)?;
            let o = j.outgoing_fluxes(&f);
            (f, o)
        }
        JunctionModel::Stopsign => {
            let f = junction::solve_stop_sign(&j, &bounds).map_err(shape)?;
            let o = j.outgoing_fluxes(&f);
            (f, o)
        }
        JunctionModel::Buffer => {
            let bc = cfg.buffer.clone().ok_or_else(|| CliError::Config("buffer model needs a 'buffer' section".into()))?;
            let buf = if bc.scaled { Buffer::scaled(&j, &bounds, bc.capacity) } else { Buffer::unscaled(&j, bc.capacity) }.map_err(shape)?;
            let dt = bc.dt.min(buf.max_step(&j, &bounds));
            let (run, end) = junction::buffer_run(&j, &bounds, &buf, dt, bc.horizon).map_err(shape)?;
            let last = run.last().map(|r| r.1.clone()).ok_or_else(|| CliError::Config("buffer horizon shorter than one step".into()))?;
            let stride = (run.len() / 2000).max(1);
            series = run.into_iter().step_by(stride).collect();
            queues = Some(end.queues);
            (last.incoming, last.outgoing)
        }
    };
    let admissible = junction::admissible_within(&j, &bounds, &incoming, 1e-12);
    let report = JunctionReport {
        model: cfg.model,
        activity: junction::activity(&j, &bounds, &incoming, 1e-9),
        bounds,
        incoming,
        outgoing,
        admissible,
        tie,
        queues,
    };
    println!("model {:?}", report.model);
    for (i, f) in report.incoming.iter().enumerate() {
        println!("  in  {}: f = {}  (max {})", i + 1, fmt(*f), fmt(report.bounds.incoming[i]));
    }
    for (k, f) in report.outgoing.iter().enumerate() {
        println!("  out {}: f = {}  (max {})", k + 1, fmt(*f), fmt(report.bounds.outgoing[k]));
    }
    println!("  admissible: {}", report.admissible);
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("junction.json"), &serde_json::to_value(&report).map_err(|e| CliError::Io(e.to_string()))?)?;
        if !series.is_empty() {
            let (m, n) = (j.incoming(), j.outgoing());
            let mut header = vec!["t".to_string()];
            header.extend((1..=n).map(|k| format!("q_{k}")));
            header.extend((1..=m).map(|i| format!("f_in_{i}")));
            header.extend((1..=n).map(|k| format!("f_out_{k}")));
            write_csv(
                &dir.join("queues.csv"),
                &header,
                series.iter().map(|(t, s)| {
                    let mut row = vec![*t];
                    row.extend(&s.queues);
                    row.extend(&s.incoming);
                    row.extend(&s.outgoing);
                    row
                }),
            )?;
        }
    }
    if !report.admissible && cfg.model != JunctionModel::Buffer {
        return Err(CliError::Violation("solver returned a point outside the admissible region".into()));
    }
    Ok(report)
}
