//! Command-line front end. Every command writes one JSON or CSV artifact to
//! `--output` (stdout by default); diagnostics go to stderr.

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufReader, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::dynamics::{parse_rational, ExpandingMap, OrbitSeed, PeriodicOrbit, Rational};
use crate::entropy::{
    dynamical_ball_scan, partition_entropy, periodic_approximation, return_times, sturmian_sample, uniform_depth,
    zero_entropy_perturbation, ApproximationSchedule, EntropyEstimate, ReturnStatistics, TargetSet,
};
use crate::lax::{
    effective_observable, solve_subaction, verify_subaction, LaxError, SubActionReport, SubActionResult, DEFAULT_GRID,
    DEFAULT_MAX_ITER, DEFAULT_TOL,
};
use crate::locking::{
    compute_constants, far_point_violations, grid_sup, locking_perturbation, verify_locking, LockingConstants,
    ScheduleInputs, SmoothBump,
};
use crate::maxsearch::{
    linspace, maximize_among, maximize_over_orbits, theta_sweep, write_sweep_csv, MaximizationResult, DEFAULT_TIE_TOL,
};
use crate::observables::{parse_observable, Observable};
use crate::shadowing::{
    min_pairwise_distance, mine_recurrences, read_pseudo_orbit_csv, shadow, validate_exact, validate_pseudo_orbit,
    MiningReport, PseudoOrbit, ShadowResult, DEFAULT_FILTER_TOL, DEFAULT_MAX_RESULTS,
};

pub const DEFAULT_OBSERVABLE: &str = "cos(2*pi*x)";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Compute(String),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn compute(e: impl std::fmt::Display) -> CliError {
    CliError::Compute(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "ergopt", version, about = "Ergodic maximization for expanding circle maps")]
pub struct Cli {
    #[command(flatten)]
    pub config: RunConfig,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

/// Options shared by all commands.
#[derive(Debug, Clone, Args)]
pub struct RunConfig {
    /// Map specification, `linear:k=K` or `perturbed:k=K,a=A`.
    #[arg(long, global = true, default_value = "linear:k=2")]
    pub map: String,
    /// Observable expression in `x` [default: cos(2*pi*x)].
    #[arg(long, global = true)]
    pub obs: Option<String>,
    /// Grid size for sub-actions; a power of two.
    #[arg(long, global = true, default_value_t = DEFAULT_GRID)]
    pub n: usize,
    #[arg(long, global = true, default_value_t = 12)]
    pub max_period: usize,
    #[arg(long, global = true, default_value_t = DEFAULT_TIE_TOL)]
    pub tie_tol: f64,
    /// Sub-action convergence tolerance.
    #[arg(long, global = true, default_value_t = DEFAULT_TOL)]
    pub tol: f64,
    /// Bound on |F̄| along mined pseudo-orbits.
    #[arg(long, global = true, default_value_t = DEFAULT_FILTER_TOL)]
    pub filter_tol: f64,
    /// Output format; each command has its own default.
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
    /// Seed for randomized inputs.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Artifact path; stdout when absent.
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
    /// Also write the JSON summary here when the artifact is CSV.
    #[arg(long, global = true)]
    pub summary: Option<PathBuf>,
    /// Worker thread cap.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        for (name, v) in [
            ("tie-tol", self.tie_tol),
            ("tol", self.tol),
            ("filter-tol", self.filter_tol),
        ] {
            if !(v > 0.0) {
                return Err(usage(format!("--{name} must be positive, got {v}")));
            }
        }
        if self.n < 2 || !self.n.is_power_of_two() {
            return Err(usage(format!("--n must be a power of two, got {}", self.n)));
        }
        if self.max_period == 0 {
            return Err(usage("--max-period must be at least 1"));
        }
        if self.threads == Some(0) {
            return Err(usage("--threads must be at least 1"));
        }
        Ok(())
    }

    fn map(&self) -> Result<ExpandingMap, CliError> {
        self.map.parse().map_err(usage)
    }

    fn obs_text(&self) -> &str {
        self.obs.as_deref().unwrap_or(DEFAULT_OBSERVABLE)
    }

    fn observable(&self) -> Result<Observable, CliError> {
        parse_observable(self.obs_text()).map_err(usage)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Best periodic orbit average of the observable.
    Maximize,
    /// Solve for a normalized sub-action on the grid.
    Subaction,
    /// Check the sub-action against brute-force maximization.
    Verify {
        #[arg(long, default_value_t = 1e-5)]
        check_tol: f64,
    },
    /// Build and verify a locking perturbation at a periodic orbit.
    Lock {
        /// Any point of the target orbit.
        #[arg(long, default_value = "0")]
        target: String,
        /// Penalty weight; square root of delta when absent.
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long, default_value_t = 1e-9)]
        delta: f64,
        /// Jump budget.
        #[arg(long, default_value_t = 1)]
        jumps: usize,
        /// Separation scale; the orbit's own point spacing, or 1/2 for a fixed point.
        #[arg(long)]
        gamma_delta: Option<f64>,
        #[arg(long)]
        allow_infeasible: bool,
    },
    /// Shadow a pseudo-orbit by a true orbit.
    Shadow {
        /// Comma-separated points (decimals or p/q).
        #[arg(long, conflicts_with = "input", required_unless_present = "input")]
        points: Option<String>,
        /// Pseudo-orbit CSV file.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Treat the sequence as open rather than closed.
        #[arg(long)]
        open: bool,
    },
    /// Closed pseudo-orbits from recurrences of a forward orbit.
    Mine {
        #[arg(long)]
        start: String,
        #[arg(long, default_value_t = 100_000)]
        length: usize,
        #[arg(long, default_value_t = 1e-3)]
        delta: f64,
        #[arg(long, default_value_t = 1)]
        jumps: usize,
        /// Keep only pseudo-orbits with |F̄| <= filter-tol at every point.
        #[arg(long)]
        filter: bool,
        #[arg(long, default_value_t = DEFAULT_MAX_RESULTS)]
        max_results: usize,
    },
    /// Maximizing orbits of cos(2 pi (x - theta)) over a theta grid.
    Sweep {
        /// `start:end:count`.
        #[arg(long, default_value = "0:0.5:101")]
        thetas: String,
    },
    /// Partition entropy of an orbit sample or of uniform samples.
    Entropy {
        /// Orbit start; uniform random samples when absent.
        #[arg(long)]
        start: Option<String>,
        #[arg(long, default_value_t = 1_000_000)]
        samples: usize,
        /// Deepest partition level; chosen from the sample size when absent.
        #[arg(long)]
        depth: Option<usize>,
    },
    /// Returns of an orbit to a small ball.
    Returns {
        #[arg(long)]
        start: String,
        /// Ball centre; the start point when absent.
        #[arg(long)]
        w: Option<f64>,
        #[arg(long, default_value_t = 2.0)]
        q_factor: f64,
        #[arg(long = "big-n")]
        big_n: i32,
        #[arg(long, default_value_t = 0)]
        n0: i32,
        #[arg(long, default_value_t = 1_000_000)]
        length: usize,
        /// Also scan the dynamical ball V(w, L, eps) on a grid.
        #[arg(long, requires = "ball_eps")]
        ball_depth: Option<usize>,
        #[arg(long)]
        ball_eps: Option<f64>,
    },
    /// Periodic orbits approaching a target set, and the matching perturbation.
    Approx {
        /// Comma-separated target points.
        #[arg(long, conflicts_with = "sturmian", required_unless_present = "sturmian")]
        target: Option<String>,
        /// Slope of a Sturmian target sample.
        #[arg(long)]
        sturmian: Option<f64>,
        #[arg(long, default_value_t = 2000)]
        target_count: usize,
        #[arg(long, default_value_t = crate::entropy::DEFAULT_THETA)]
        theta: f64,
        /// Build the perturbation for this period.
        #[arg(long)]
        perturb: Option<usize>,
        #[arg(long, default_value_t = 0.5)]
        beta: f64,
        #[arg(long, default_value_t = 0.1)]
        gamma: f64,
    },
}

impl Command {
    fn default_format(&self) -> Format {
        match self {
            Command::Sweep { .. } => Format::Csv,
            _ => Format::Json,
        }
    }

    fn has_csv(&self) -> bool {
        !matches!(
            self,
            Command::Maximize | Command::Verify { .. } | Command::Lock { .. } | Command::Mine { .. }
        )
    }
}

/// A command's result: the JSON summary and, where defined, a CSV table.
struct Artifact {
    json: serde_json::Value,
    csv: Option<Vec<u8>>,
}

impl Artifact {
    fn json(v: impl Serialize) -> Result<Self, CliError> {
        Ok(Self {
            json: serde_json::to_value(v).map_err(compute)?,
            csv: None,
        })
    }

    fn with_csv(mut self, f: impl FnOnce(&mut Vec<u8>) -> Result<(), CliError>) -> Result<Self, CliError> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.csv = Some(buf);
        Ok(self)
    }
}

/// Parse arguments, run, and return the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = &cli.config;
    cfg.validate()?;
    let format = cfg.format.unwrap_or(cli.command.default_format());
    if format == Format::Csv && !cli.command.has_csv() {
        return Err(usage("this command has no CSV output"));
    }
    let result = match cfg.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(compute)?
            .install(|| execute(&cli.command, cfg)),
        None => execute(&cli.command, cfg),
    };
    // a failed computation may still leave a partial artifact worth keeping
    let (artifact, failure) = match result {
        Ok(a) => (a, None),
        Err(Failure {
            artifact: Some(a),
            error,
        }) => (a, Some(error)),
        Err(Failure { artifact: None, error }) => return Err(error),
    };
    emit(&artifact, format, cfg)?;
    failure.map_or(Ok(()), Err)
}

fn emit(artifact: &Artifact, format: Format, cfg: &RunConfig) -> Result<(), CliError> {
    let mut pretty = serde_json::to_vec_pretty(&artifact.json).map_err(compute)?;
    pretty.push(b'\n');
    let body = match format {
        Format::Json => &pretty,
        Format::Csv => artifact
            .csv
            .as_ref()
            .ok_or_else(|| usage("this command has no CSV output"))?,
    };
    match &cfg.output {
        Some(path) => File::create(path)?.write_all(body)?,
        None => io::stdout().lock().write_all(body)?,
    }
    if let (Format::Csv, Some(path)) = (format, &cfg.summary) {
        File::create(path)?.write_all(&pretty)?;
    }
    Ok(())
}

struct Failure {
    artifact: Option<Artifact>,
    error: CliError,
}

impl From<CliError> for Failure {
    fn from(error: CliError) -> Self {
        Self { artifact: None, error }
    }
}

fn execute(cmd: &Command, cfg: &RunConfig) -> Result<Artifact, Failure> {
    let map = cfg.map()?;
    Ok(match cmd {
        Command::Maximize => maximize_cmd(&map, cfg)?,
        Command::Subaction => return subaction_cmd(&map, cfg),
        Command::Verify { check_tol } => verify_cmd(&map, cfg, *check_tol)?,
        Command::Lock {
            target,
            epsilon,
            delta,
            jumps,
            gamma_delta,
            allow_infeasible,
        } => lock_cmd(
            &map,
            cfg,
            LockArgs {
                target,
                epsilon: *epsilon,
                delta: *delta,
                jumps: *jumps,
                gamma_delta: *gamma_delta,
                allow_infeasible: *allow_infeasible,
            },
        )?,
        Command::Shadow { points, input, open } => shadow_cmd(&map, points.as_deref(), input.as_ref(), *open)?,
        Command::Mine {
            start,
            length,
            delta,
            jumps,
            filter,
            max_results,
        } => mine_cmd(&map, cfg, start, *length, *delta, *jumps, *filter, *max_results)?,
        Command::Sweep { thetas } => sweep_cmd(&map, cfg, thetas)?,
        Command::Entropy { start, samples, depth } => entropy_cmd(&map, cfg, start.as_deref(), *samples, *depth)?,
        Command::Returns {
            start,
            w,
            q_factor,
            big_n,
            n0,
            length,
            ball_depth,
            ball_eps,
        } => returns_cmd(
            &map,
            start,
            *w,
            *q_factor,
            *big_n,
            *n0,
            *length,
            ball_depth.zip(*ball_eps),
        )?,
        Command::Approx {
            target,
            sturmian,
            target_count,
            theta,
            perturb,
            beta,
            gamma,
        } => approx_cmd(
            &map,
            cfg,
            ApproxArgs {
                target: target.as_deref(),
                sturmian: *sturmian,
                target_count: *target_count,
                theta: *theta,
                perturb: *perturb,
                beta: *beta,
                gamma: *gamma,
            },
        )?,
    })
}

#[derive(Serialize)]
struct MaximizeOut<'a> {
    map: String,
    observable: &'a str,
    #[serde(flatten)]
    result: &'a MaximizationResult,
}

fn maximize_cmd(map: &ExpandingMap, cfg: &RunConfig) -> Result<Artifact, CliError> {
    let obs = cfg.observable()?;
    let res = maximize_over_orbits(map, &obs, cfg.max_period, cfg.tie_tol).map_err(compute)?;
    Artifact::json(MaximizeOut {
        map: map.to_string(),
        observable: cfg.obs_text(),
        result: &res,
    })
}

#[derive(Serialize)]
struct SubactionOut<'a> {
    map: String,
    observable: &'a str,
    n: usize,
    tol: f64,
    alpha_est: f64,
    residual: f64,
    iterations: usize,
    lip_u: f64,
    converged: bool,
    sup_violation: f64,
}

fn subaction_summary<'a>(
    map: &ExpandingMap,
    cfg: &'a RunConfig,
    obs: &Observable,
    sub: &SubActionResult,
) -> SubactionOut<'a> {
    let eff = effective_observable(obs, sub, map);
    SubactionOut {
        map: map.to_string(),
        observable: cfg.obs_text(),
        n: sub.u.n,
        tol: cfg.tol,
        alpha_est: sub.alpha_est,
        residual: sub.residual,
        iterations: sub.iterations,
        lip_u: sub.lip_u,
        converged: sub.converged,
        sup_violation: eff.sup_violation,
    }
}

fn subaction_cmd(map: &ExpandingMap, cfg: &RunConfig) -> Result<Artifact, Failure> {
    let obs = cfg.observable()?;
    let (sub, error) = match solve_subaction(map, &obs, cfg.n, cfg.tol, DEFAULT_MAX_ITER) {
        Ok(s) => (s, None),
        Err(LaxError::NoConvergence { result, last_step }) => (
            *result,
            Some(compute(format!("no convergence; last step {last_step:e}"))),
        ),
        Err(e) => return Err(compute(e).into()),
    };
    let header = [
        ("n", sub.u.n.to_string()),
        ("map", map.to_string()),
        ("observable", cfg.obs_text().to_string()),
        ("alpha_est", sub.alpha_est.to_string()),
        ("residual", sub.residual.to_string()),
    ];
    let artifact = Artifact::json(subaction_summary(map, cfg, &obs, &sub))?
        .with_csv(|buf| sub.u.write_csv(&header, buf).map_err(compute))?;
    match error {
        None => Ok(artifact),
        Some(error) => Err(Failure {
            artifact: Some(artifact),
            error,
        }),
    }
}

#[derive(Serialize)]
struct VerifyOut<'a> {
    #[serde(flatten)]
    subaction: SubactionOut<'a>,
    alpha_brute: f64,
    report: SubActionReport,
}

fn verify_cmd(map: &ExpandingMap, cfg: &RunConfig, check_tol: f64) -> Result<Artifact, CliError> {
    let obs = cfg.observable()?;
    let sub = solve_subaction(map, &obs, cfg.n, cfg.tol, DEFAULT_MAX_ITER).map_err(compute)?;
    let brute = maximize_over_orbits(map, &obs, cfg.max_period, cfg.tie_tol).map_err(compute)?;
    let eff = effective_observable(&obs, &sub, map);
    let report = verify_subaction(&eff, &brute, check_tol);
    if !report.passed {
        eprintln!("warning: sub-action certificate failed");
    }
    Artifact::json(VerifyOut {
        subaction: subaction_summary(map, cfg, &obs, &sub),
        alpha_brute: brute.alpha,
        report,
    })
}

struct LockArgs<'a> {
    target: &'a str,
    epsilon: Option<f64>,
    delta: f64,
    jumps: usize,
    gamma_delta: Option<f64>,
    allow_infeasible: bool,
}

#[derive(Serialize)]
struct LockOut<'a> {
    map: String,
    observable: &'a str,
    target: PeriodicOrbit,
    constants: LockingConstants,
    g: SmoothBump,
    beta: f64,
    override_used: bool,
    locked: bool,
    #[serde(with = "crate::numfmt")]
    margin: f64,
    argmax_orbits: Vec<PeriodicOrbit>,
    target_average: f64,
    max_period: usize,
    far_point_violations: usize,
    grid_sup: f64,
}

/// The enumerated orbit of period at most `max_period` through `point`.
fn orbit_through(map: &ExpandingMap, point: &str, max_period: usize) -> Result<PeriodicOrbit, CliError> {
    let seed: OrbitSeed = point.parse().map_err(usage)?;
    if let (OrbitSeed::Exact(r), true) = (seed, map.is_linear()) {
        return PeriodicOrbit::from_exact_point(map, r)
            .filter(|o| o.period <= max_period)
            .ok_or_else(|| usage(format!("{point} is not periodic with period <= {max_period}")));
    }
    let x = seed.to_f64();
    map.prime_orbits(max_period)
        .map_err(compute)?
        .into_iter()
        .find(|o| o.distance_to(x) < 1e-9)
        .ok_or_else(|| usage(format!("{point} is not periodic with period <= {max_period}")))
}

fn lock_cmd(map: &ExpandingMap, cfg: &RunConfig, a: LockArgs) -> Result<Artifact, CliError> {
    let obs = cfg.observable()?;
    let orbit = orbit_through(map, a.target, cfg.max_period)?;
    let sub = solve_subaction(map, &obs, cfg.n, cfg.tol, DEFAULT_MAX_ITER).map_err(compute)?;
    let eff = effective_observable(&obs, &sub, map);
    let gamma_delta = a.gamma_delta.unwrap_or_else(|| {
        if orbit.period > 1 {
            min_pairwise_distance(&orbit.points)
        } else {
            0.5
        }
    });
    let consts = compute_constants(&ScheduleInputs {
        m: a.jumps,
        p: orbit.period,
        delta: a.delta,
        lip_fbar: eff.fbar.lipschitz(),
        lambda: map.lambda,
        lip_t: map.lip_t,
        gamma_delta,
        e0: map.e0,
        epsilon: a.epsilon,
    });
    for r in &consts.reasons {
        eprintln!("schedule: {r}");
    }
    let pert =
        locking_perturbation(map, &eff, &orbit, &consts, None, cfg.max_period, a.allow_infeasible).map_err(compute)?;
    let verdict = verify_locking(map, &pert, cfg.max_period, cfg.tie_tol).map_err(compute)?;
    Artifact::json(LockOut {
        map: map.to_string(),
        observable: cfg.obs_text(),
        target: orbit,
        far_point_violations: far_point_violations(&pert, cfg.n, 1e-9).len(),
        grid_sup: grid_sup(&pert, cfg.n),
        constants: consts,
        g: pert.g.clone(),
        beta: pert.beta,
        override_used: pert.override_used,
        locked: verdict.locked,
        margin: verdict.margin,
        argmax_orbits: verdict.argmax_orbits,
        target_average: verdict.target_average,
        max_period: verdict.max_period,
    })
}

/// Points given as text: exact when every entry is rational and the map is
/// linear.
fn pseudo_orbit_from(map: &ExpandingMap, texts: &[String], periodic: bool) -> Result<PseudoOrbit, CliError> {
    if texts.is_empty() {
        return Err(usage("no points given"));
    }
    if map.is_linear() {
        if let Ok(exact) = texts
            .iter()
            .map(|t| parse_rational(t))
            .collect::<Result<Vec<Rational>, _>>()
        {
            return Ok(validate_exact(map, &exact, periodic));
        }
    }
    let pts = texts
        .iter()
        .map(|t| t.trim().parse::<f64>().map_err(|_| usage(format!("bad point {t:?}"))))
        .collect::<Result<Vec<f64>, _>>()?;
    Ok(validate_pseudo_orbit(map, &pts, periodic))
}

#[derive(Serialize)]
struct ShadowOut {
    map: String,
    pseudo_orbit: PseudoOrbit,
    result: ShadowResult,
}

fn shadow_cmd(
    map: &ExpandingMap,
    points: Option<&str>,
    input: Option<&PathBuf>,
    open: bool,
) -> Result<Artifact, CliError> {
    let (texts, periodic) = match (points, input) {
        (Some(p), _) => (p.split(',').map(|s| s.trim().to_string()).collect(), None),
        (None, Some(path)) => {
            let f = File::open(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            read_pseudo_orbit_csv(BufReader::new(f)).map_err(usage)?
        }
        (None, None) => return Err(usage("give --points or --input")),
    };
    let periodic = if open { false } else { periodic.unwrap_or(true) };
    let po = pseudo_orbit_from(map, &texts, periodic)?;
    let res = shadow(map, &po).map_err(compute)?;
    let csv_rows: Vec<(usize, f64, f64, usize)> = po
        .points
        .iter()
        .zip(&res.trajectory)
        .zip(&res.branches)
        .enumerate()
        .map(|(i, ((&x, &y), &b))| (i, x, y, b))
        .collect();
    Artifact::json(ShadowOut {
        map: map.to_string(),
        pseudo_orbit: po,
        result: res,
    })?
    .with_csv(|buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["idx", "x", "y", "branch"]).map_err(compute)?;
        for r in csv_rows {
            w.serialize(r).map_err(compute)?;
        }
        w.flush()?;
        Ok(())
    })
}

#[allow(clippy::too_many_arguments)]
fn mine_cmd(
    map: &ExpandingMap,
    cfg: &RunConfig,
    start: &str,
    length: usize,
    delta: f64,
    jumps: usize,
    filter: bool,
    max_results: usize,
) -> Result<Artifact, CliError> {
    let seed: OrbitSeed = start.parse().map_err(usage)?;
    let eff = if filter {
        let obs = cfg.observable()?;
        let sub = solve_subaction(map, &obs, cfg.n, cfg.tol, DEFAULT_MAX_ITER).map_err(compute)?;
        Some(effective_observable(&obs, &sub, map))
    } else {
        None
    };
    let report: MiningReport = mine_recurrences(
        map,
        &seed,
        length,
        delta,
        jumps,
        eff.as_ref().map(|e| (e, cfg.filter_tol)),
        max_results,
    )
    .map_err(compute)?;
    Artifact::json(report)
}

fn parse_thetas(spec: &str) -> Result<Vec<f64>, CliError> {
    let bad = || usage(format!("--thetas expects start:end:count, got {spec:?}"));
    let parts: Vec<&str> = spec.split(':').collect();
    let [a, b, c] = parts[..] else { return Err(bad()) };
    let start: f64 = a.trim().parse().map_err(|_| bad())?;
    let end: f64 = b.trim().parse().map_err(|_| bad())?;
    let count: usize = c.trim().parse().map_err(|_| bad())?;
    Ok(linspace(start, end, count))
}

fn sweep_cmd(map: &ExpandingMap, cfg: &RunConfig, thetas: &str) -> Result<Artifact, CliError> {
    let grid = parse_thetas(thetas)?;
    let rows = theta_sweep(map, &grid, cfg.max_period, cfg.tie_tol).map_err(compute)?;
    Artifact::json(&rows)?.with_csv(|buf| write_sweep_csv(&rows, buf).map_err(compute))
}

#[derive(Serialize)]
struct EntropyOut {
    map: String,
    source: String,
    #[serde(flatten)]
    estimate: EntropyEstimate,
}

fn entropy_cmd(
    map: &ExpandingMap,
    cfg: &RunConfig,
    start: Option<&str>,
    samples: usize,
    depth: Option<usize>,
) -> Result<Artifact, CliError> {
    let (pts, source) = match start {
        Some(s) => {
            let seed: OrbitSeed = s.parse().map_err(usage)?;
            (map.forward_orbit(&seed, samples), format!("orbit of {s}"))
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            (
                (0..samples).map(|_| rng.gen::<f64>()).collect(),
                format!("uniform, seed {}", cfg.seed),
            )
        }
    };
    let depth = depth.unwrap_or_else(|| uniform_depth(map.degree(), samples.max(1)));
    let est = partition_entropy(map, &pts, depth).map_err(compute)?;
    let rows: Vec<_> = est.per_depth.clone();
    Artifact::json(EntropyOut {
        map: map.to_string(),
        source,
        estimate: est,
    })?
    .with_csv(|buf| {
        let mut w = csv::Writer::from_writer(buf);
        for r in &rows {
            w.serialize(r).map_err(compute)?;
        }
        w.flush()?;
        Ok(())
    })
}

#[derive(Serialize)]
struct BallScan {
    depth: usize,
    eps: f64,
    grid: usize,
    points: usize,
    max_distance: f64,
    /// `lambda^L eps`.
    bound: f64,
}

#[derive(Serialize)]
struct ReturnsOut {
    map: String,
    start: String,
    #[serde(flatten)]
    stats: ReturnStatistics,
    #[serde(skip_serializing_if = "Option::is_none")]
    ball: Option<BallScan>,
}

#[allow(clippy::too_many_arguments)]
fn returns_cmd(
    map: &ExpandingMap,
    start: &str,
    w: Option<f64>,
    q_factor: f64,
    big_n: i32,
    n0: i32,
    length: usize,
    ball: Option<(usize, f64)>,
) -> Result<Artifact, CliError> {
    if !(q_factor > 1.0) {
        return Err(usage("--q-factor must exceed 1"));
    }
    let seed: OrbitSeed = start.parse().map_err(usage)?;
    let w = w.unwrap_or_else(|| seed.to_f64());
    let stats = return_times(map, &seed, w, q_factor, big_n, n0, length).map_err(compute)?;
    let ball = ball.map(|(l, eps)| {
        let grid = 1 << 20;
        let (points, max_distance) = dynamical_ball_scan(map, w, l, eps, grid);
        BallScan {
            depth: l,
            eps,
            grid,
            points,
            max_distance,
            bound: map.lambda.powi(l as i32) * eps,
        }
    });
    let times = stats.return_times.clone();
    Artifact::json(ReturnsOut {
        map: map.to_string(),
        start: start.to_string(),
        stats,
        ball,
    })?
    .with_csv(|buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["index", "t", "gap"]).map_err(compute)?;
        for (i, &t) in times.iter().enumerate() {
            let gap = if i == 0 {
                String::new()
            } else {
                (t - times[i - 1]).to_string()
            };
            w.write_record([i.to_string(), t.to_string(), gap]).map_err(compute)?;
        }
        w.flush()?;
        Ok(())
    })
}

struct ApproxArgs<'a> {
    target: Option<&'a str>,
    sturmian: Option<f64>,
    target_count: usize,
    theta: f64,
    perturb: Option<usize>,
    beta: f64,
    gamma: f64,
}

#[derive(Serialize)]
struct PerturbationOut {
    n: usize,
    beta: f64,
    budget: f64,
    budget_fallback: bool,
    bump: SmoothBump,
    base: MaximizationResult,
    perturbed: MaximizationResult,
}

#[derive(Serialize)]
struct ApproxOut<'a> {
    map: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    observable: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    alpha: Option<f64>,
    #[serde(flatten)]
    schedule: &'a ApproximationSchedule,
    #[serde(skip_serializing_if = "Option::is_none")]
    perturbation: Option<PerturbationOut>,
}

fn approx_cmd(map: &ExpandingMap, cfg: &RunConfig, a: ApproxArgs) -> Result<Artifact, CliError> {
    let points: Vec<f64> = match (a.target, a.sturmian) {
        (Some(t), _) => t
            .split(',')
            .map(|s| s.parse::<OrbitSeed>().map(|p| p.to_f64()).map_err(usage))
            .collect::<Result<_, _>>()?,
        (None, Some(omega)) => sturmian_sample(omega, a.target_count),
        (None, None) => return Err(usage("give --target or --sturmian")),
    };
    let target = TargetSet::new(&points).map_err(usage)?;
    // an explicitly given observable enables the constant estimate
    let obs = cfg.obs.as_ref().map(|_| cfg.observable()).transpose()?;
    let base = match &obs {
        Some(f) => Some(maximize_over_orbits(map, f, cfg.max_period, cfg.tie_tol).map_err(compute)?),
        None => None,
    };
    let maximizing = obs.as_ref().zip(base.as_ref().map(|b| b.alpha));
    let sched = periodic_approximation(map, &target, cfg.max_period, a.theta, maximizing).map_err(compute)?;
    if !sched.theta_admissible {
        eprintln!("warning: theta = {} is not below min(e0, lambda, e0 / Lip T)", a.theta);
    }
    let perturbation = match a.perturb {
        Some(n) => {
            let f = obs.clone().unwrap_or_else(|| Observable::constant(0.0));
            let p = zero_entropy_perturbation(&f, &sched, n, a.beta, a.gamma).map_err(compute)?;
            let orbits = map.prime_orbits(cfg.max_period).map_err(compute)?;
            let base = maximize_among(&orbits, &f, cfg.max_period, cfg.tie_tol).map_err(compute)?;
            let perturbed = maximize_among(&orbits, &p.observable, cfg.max_period, cfg.tie_tol).map_err(compute)?;
            Some(PerturbationOut {
                n,
                beta: p.beta,
                budget: p.budget,
                budget_fallback: p.budget_fallback,
                bump: p.bump,
                base,
                perturbed,
            })
        }
        None => None,
    };
    Artifact::json(ApproxOut {
        map: map.to_string(),
        observable: obs.as_ref().map(|_| cfg.obs_text()),
        alpha: base.as_ref().map(|b| b.alpha),
        schedule: &sched,
        perturbation,
    })?
    .with_csv(|buf| sched.write_csv(buf).map_err(compute))
}
