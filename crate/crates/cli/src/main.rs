//! Command-line front end: reads a problem config, runs one estimator or
//! solver and writes CSV tables plus a JSON manifest into the output directory.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use exitrate::action::{hovering_rate_oracle, rate, ActionOptions};
use exitrate::config::{MatrixSpec, ProblemConfig};
use exitrate::game::{nash_iterate, profile_rows, GameConfig};
use exitrate::generator::{
    discretize_generator, eigenvalue_asymptotics, principal_eigenvalue, EigenOptions, GridPolicy,
    GridSpec,
};
use exitrate::invariant::{equilibrium_in_domain, invariance_kernel, kernel_is_empty};
use exitrate::mc::{exit_rate_mc, MIN_PATHS};
use exitrate::output::{write_json, Table};
use exitrate::verify::{run_suite, Suite};
use exitrate::Error;

const EXIT_USAGE: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_VERIFY: u8 = 4;

#[derive(Debug, Parser)]
#[command(name = "exitrate", version, about = "Exit rates and Nash feedback gains for noisy linear systems")]
struct Cli {
    /// Problem configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads, a number or `auto`.
    #[arg(long, global = true, default_value = "auto")]
    threads: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Monte Carlo survival probabilities and the fitted exit rate.
    Simulate(SimulateArgs),
    /// Exit rate from minimal actions over a horizon schedule.
    Rate(RateArgs),
    /// Principal eigenvalue of the discretized generator.
    Eigen(EigenArgs),
    /// Discrete invariance kernel.
    Kernel(KernelArgs),
    /// Best-response iteration for the feedback game.
    Nash(NashArgs),
    /// Acceptance suite: `quick` or `full`.
    Verify { suite: String },
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Horizons, comma separated.
    #[arg(long = "T", value_delimiter = ',')]
    horizons: Option<Vec<f64>>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    paths: Option<usize>,
}

#[derive(Debug, Args)]
struct RateArgs {
    /// Horizon schedule, comma separated.
    #[arg(long = "T", value_delimiter = ',')]
    schedule: Option<Vec<f64>>,
    #[arg(long)]
    n_per_t: Option<f64>,
    #[arg(long)]
    starts: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
}

#[derive(Debug, Args)]
struct EigenArgs {
    /// Nodes per axis, comma separated or a single count for all axes.
    #[arg(long, value_delimiter = ',')]
    nodes: Option<Vec<usize>>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
}

#[derive(Debug, Args)]
struct KernelArgs {
    #[arg(long, value_delimiter = ',')]
    nodes: Option<Vec<usize>>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
}

#[derive(Debug, Args)]
struct NashArgs {
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    max_rounds: Option<usize>,
    #[arg(long)]
    probes: Option<usize>,
}

/// A failure with its process exit status.
#[derive(Debug)]
struct Failure {
    status: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            status: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Config(_)
            | Error::EllipticityViolated { .. }
            | Error::InconsistentDimensions(_)
            | Error::InvalidEpsilon(_)
            | Error::InvalidDomain(_)
            | Error::EmptyDeflation { .. }
            | Error::DimensionMismatch { .. }
            | Error::Precondition(_)
            | Error::GridTooCoarse(_)
            | Error::IncompatibleGrid(_) => EXIT_USAGE,
            _ => EXIT_NUMERICAL,
        };
        Self {
            status,
            message: e.to_string(),
        }
    }
}

type CmdResult<T = ()> = Result<T, Failure>;

#[derive(Debug, Serialize)]
struct RunManifest {
    command: String,
    config: Option<String>,
    config_hash: Option<String>,
    parameters: Value,
    version: String,
    seed: u64,
    duration_seconds: f64,
    files: Vec<String>,
}

/// Loaded config with the hash of its bytes.
struct Problem {
    path: PathBuf,
    hash: String,
    cfg: ProblemConfig,
}

fn load(path: Option<&Path>) -> CmdResult<Problem> {
    let path = path.ok_or_else(|| Failure::usage("--config is required for this command"))?;
    let bytes = std::fs::read(path)
        .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    let text = String::from_utf8(bytes.clone())
        .map_err(|_| Failure::usage(format!("{}: not UTF-8", path.display())))?;
    let cfg = ProblemConfig::from_json(&text)
        .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    cfg.validate()
        .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    Ok(Problem {
        path: path.to_path_buf(),
        hash: hex::encode(Sha256::digest(&bytes)),
        cfg,
    })
}

/// Collects output files and writes them with the manifest.
struct Output {
    dir: PathBuf,
    files: Vec<String>,
}

impl Output {
    fn new(dir: &Path) -> CmdResult<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Failure {
            status: EXIT_NUMERICAL,
            message: format!("{}: {e}", dir.display()),
        })?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn table(&mut self, name: &str, t: &Table) -> CmdResult {
        t.write(&self.dir.join(name))?;
        self.files.push(name.into());
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, v: &T) -> CmdResult {
        write_json(&self.dir.join(name), v)?;
        self.files.push(name.into());
        Ok(())
    }

    fn text(&mut self, name: &str, s: &str) -> CmdResult {
        std::fs::write(self.dir.join(name), s).map_err(Error::from)?;
        self.files.push(name.into());
        Ok(())
    }
}

fn require_positive(name: &str, v: f64) -> CmdResult {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Failure::usage(format!("{name} must be positive, got {v}")))
    }
}

fn nodes_for(nodes: Vec<usize>, dim: usize) -> CmdResult<Vec<usize>> {
    match nodes.len() {
        1 => Ok(vec![nodes[0]; dim]),
        n if n == dim => Ok(nodes),
        n => Err(Failure::usage(format!(
            "nodes: expected 1 or {dim} counts, got {n}"
        ))),
    }
}

fn simulate(p: &Problem, a: SimulateArgs, seed: u64, out: &mut Output) -> CmdResult<Value> {
    let s = &p.cfg.simulate;
    let horizons = a
        .horizons
        .or_else(|| s.horizons.clone())
        .unwrap_or_else(|| vec![1.0, 2.0, 3.0, 4.0]);
    let dt = a.dt.or(s.dt).unwrap_or(1e-3);
    let paths = a.paths.or(s.paths).unwrap_or(10_000);
    if paths < MIN_PATHS {
        return Err(Failure::usage(format!("paths must be >= {MIN_PATHS}, got {paths}")));
    }
    require_positive("dt", dt)?;
    let sys = p.cfg.system()?;
    let prof = p.cfg.profile(&sys)?;
    let x0 = p.cfg.initial_state()?;
    let est = exit_rate_mc(&sys, &prof, &p.cfg.domain, &x0, &horizons, dt, paths, seed)?;
    out.table("survival.csv", &est.to_table())?;
    out.json("exit_rate.json", &est)?;
    Ok(json!({ "T": horizons, "dt": dt, "paths": paths, "x0": x0 }))
}

fn rate_cmd(p: &Problem, a: RateArgs, seed: u64, out: &mut Output) -> CmdResult<Value> {
    let r = &p.cfg.rate;
    let schedule = a
        .schedule
        .or_else(|| r.schedule.clone())
        .unwrap_or_else(|| vec![5.0, 10.0, 20.0]);
    let n_per_t = a.n_per_t.or(r.n_per_t).unwrap_or(10.0);
    let defaults = ActionOptions::default();
    let opts = ActionOptions {
        tol: a.tol.or(r.tol).unwrap_or(defaults.tol),
        max_iters: a.max_iters.or(r.max_iters).unwrap_or(defaults.max_iters),
        starts: a.starts.or(r.starts).unwrap_or(defaults.starts),
        seed,
        warm_start: None,
    };
    let sys = p.cfg.system()?;
    let prof = p.cfg.profile(&sys)?;
    let x0 = p.cfg.initial_state()?;
    let est = rate(&sys, &prof, &p.cfg.domain, &x0, &schedule, n_per_t, &opts)?;
    let resolution = if sys.dim() == 1 { 2001 } else { 201 };
    let hover = hovering_rate_oracle(&sys, &prof, &p.cfg.domain, resolution)?;
    out.table("rate.csv", &est.to_table())?;
    out.json("rate.json", &json!({ "path_opt": est, "hover_oracle": hover }))?;
    Ok(json!({
        "T": schedule,
        "n_per_t": n_per_t,
        "starts": opts.starts,
        "tol": opts.tol,
        "max_iters": opts.max_iters,
        "x0": x0,
        "hover_resolution": resolution,
    }))
}

fn eigen(p: &Problem, a: EigenArgs, out: &mut Output) -> CmdResult<Value> {
    let e = &p.cfg.eigen;
    let sys = p.cfg.system()?;
    let prof = p.cfg.profile(&sys)?;
    let dom = &p.cfg.domain;
    let defaults = EigenOptions::default();
    let opts = EigenOptions {
        tol: a.tol.or(e.tol).unwrap_or(defaults.tol),
        max_iters: a.max_iters.or(e.max_iters).unwrap_or(defaults.max_iters),
        ..defaults
    };
    let default_nodes = if sys.dim() == 1 { 2001 } else { 201 };
    let nodes = nodes_for(
        a.nodes.or_else(|| e.nodes.clone()).unwrap_or_else(|| vec![default_nodes]),
        sys.dim(),
    )?;
    let grid = GridSpec::for_domain(dom, &nodes)?;
    let op = discretize_generator(&sys, &prof, dom, &grid)?;
    let pe = principal_eigenvalue(&op, &opts)?;
    let mut t = Table::new(["epsilon", "lambda", "eps_lambda", "residual", "iterations"]);
    t.push_numbers(&[
        sys.epsilon(),
        pe.lambda,
        sys.epsilon() * pe.lambda,
        pe.residual,
        pe.iterations as f64,
    ]);
    out.table("eigenvalue.csv", &t)?;
    out.table("eigenfunction.csv", &pe.eigenfunction.to_table())?;
    let mut params = json!({
        "nodes": nodes,
        "tol": opts.tol,
        "max_iters": opts.max_iters,
        "upwinded": op.upwinded(),
        "peclet_warning": op.peclet_warning(),
    });
    if let Some(eps_list) = &e.eps_list {
        let policy = GridPolicy {
            h_over_eps: e.h_over_eps.unwrap_or(GridPolicy::default().h_over_eps),
            ..GridPolicy::default()
        };
        let asym = eigenvalue_asymptotics(&sys, &prof, dom, eps_list, &policy, &opts)?;
        out.table("asymptotics.csv", &asym.to_table())?;
        out.json("asymptotics.json", &asym)?;
        params["eps_list"] = json!(eps_list);
        params["h_over_eps"] = json!(policy.h_over_eps);
    }
    Ok(params)
}

fn kernel(p: &Problem, a: KernelArgs, out: &mut Output) -> CmdResult<Value> {
    let k = &p.cfg.kernel;
    let sys = p.cfg.system()?;
    let prof = p.cfg.profile(&sys)?;
    let dom = &p.cfg.domain;
    let default_nodes = if sys.dim() == 1 { 201 } else { 101 };
    let nodes = nodes_for(
        a.nodes.or_else(|| k.nodes.clone()).unwrap_or_else(|| vec![default_nodes]),
        sys.dim(),
    )?;
    let dt = a.dt.or(k.dt).unwrap_or(0.05);
    let max_iters = a.max_iters.or(k.max_iters).unwrap_or(100_000);
    require_positive("dt", dt)?;
    let grid = GridSpec::for_domain(dom, &nodes)?;
    let field = invariance_kernel(&sys, &prof, dom, &grid, dt, max_iters)?;
    out.table("kernel.csv", &field.to_table())?;
    out.json(
        "kernel.json",
        &json!({
            "members": field.members(),
            "empty": kernel_is_empty(&field)?,
            "iterations": field.iterations,
            "converged": field.converged,
            "equilibrium_in_domain": equilibrium_in_domain(&sys, &prof, dom)?,
        }),
    )?;
    Ok(json!({ "nodes": nodes, "dt": dt, "max_iters": max_iters }))
}

fn matrices(specs: &[MatrixSpec]) -> CmdResult<Vec<nalgebra::DMatrix<f64>>> {
    specs
        .iter()
        .map(|m| m.to_matrix().map_err(Failure::from))
        .collect()
}

/// Expands a 1x1 bound to the shape of the player's gain.
fn fit_bounds(
    bounds: Vec<nalgebra::DMatrix<f64>>,
    template: &[nalgebra::DMatrix<f64>],
    key: &str,
) -> CmdResult<Vec<nalgebra::DMatrix<f64>>> {
    if bounds.len() != template.len() {
        return Err(Failure::usage(format!(
            "key `game.{key}`: expected {} entries, got {}",
            template.len(),
            bounds.len()
        )));
    }
    Ok(bounds
        .into_iter()
        .zip(template)
        .map(|(b, t)| {
            if b.shape() == (1, 1) && t.shape() != (1, 1) {
                nalgebra::DMatrix::from_element(t.nrows(), t.ncols(), b[(0, 0)])
            } else {
                b
            }
        })
        .collect())
}

fn nash(p: &Problem, a: NashArgs, seed: u64, out: &mut Output) -> CmdResult<Value> {
    let g = &p.cfg.game;
    let sys = p.cfg.system()?;
    let init = p.cfg.profile(&sys)?;
    let mut cfg = GameConfig::uniform_bounds(&sys, -1.0, 1.0);
    if let Some(lo) = &g.lower {
        cfg.lower = fit_bounds(matrices(lo)?, &cfg.lower, "lower")?;
    }
    if let Some(hi) = &g.upper {
        cfg.upper = fit_bounds(matrices(hi)?, &cfg.upper, "upper")?;
    }
    cfg.eta = a.eta.or(g.eta).unwrap_or(cfg.eta);
    cfg.max_rounds = a.max_rounds.or(g.max_rounds).unwrap_or(cfg.max_rounds);
    cfg.probes = a.probes.or(g.probes).unwrap_or(cfg.probes);
    cfg.seed = seed;
    cfg.x0 = Some(p.cfg.initial_state()?);
    let r = &p.cfg.rate;
    if let Some(s) = &r.schedule {
        cfg.rate.schedule = s.clone();
    }
    cfg.rate.n_per_t = r.n_per_t.unwrap_or(cfg.rate.n_per_t);
    cfg.rate.action.starts = r.starts.unwrap_or(cfg.rate.action.starts);
    cfg.rate.action.tol = r.tol.unwrap_or(cfg.rate.action.tol);
    cfg.rate.action.max_iters = r.max_iters.unwrap_or(cfg.rate.action.max_iters);
    cfg.rate.action.seed = seed;

    let res = nash_iterate(&sys, &p.cfg.domain, &init, &cfg)?;
    let mut t = Table::new(["player", "row", "col", "gain"]);
    for (i, k) in res.profile.gains().iter().enumerate() {
        for r in 0..k.nrows() {
            for c in 0..k.ncols() {
                t.push_numbers(&[(i + 1) as f64, r as f64, c as f64, k[(r, c)]]);
            }
        }
    }
    out.table("gains.csv", &t)?;
    out.json("nash.json", &res)?;
    let mut final_cfg = p.cfg.clone();
    final_cfg.gains = Some(
        profile_rows(&res.profile)
            .into_iter()
            .map(MatrixSpec::Rows)
            .collect(),
    );
    out.json("final_config.json", &final_cfg)?;
    Ok(json!({
        "lower": cfg.lower.iter().map(|m| m.as_slice().to_vec()).collect::<Vec<_>>(),
        "upper": cfg.upper.iter().map(|m| m.as_slice().to_vec()).collect::<Vec<_>>(),
        "eta": cfg.eta,
        "max_rounds": cfg.max_rounds,
        "probes": cfg.probes,
        "T": cfg.rate.schedule,
        "n_per_t": cfg.rate.n_per_t,
    }))
}

fn verify(suite: &str, seed: u64, out: &mut Output) -> CmdResult<bool> {
    let suite = Suite::parse(suite).map_err(|e| Failure::usage(e.to_string()))?;
    let reports = run_suite(suite, seed)?;
    let mut all = true;
    for r in &reports {
        println!("{}", r.summary());
        all &= r.passed;
        for (name, contents) in &r.files {
            out.text(name, contents)?;
        }
    }
    out.json("verify.json", &reports)?;
    Ok(all)
}

fn configure_threads(spec: &str) -> CmdResult {
    let n = match spec {
        "auto" => 0,
        s => s
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Failure::usage(format!("--threads: expected a positive count or `auto`, got `{s}`")))?,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::usage(format!("--threads: {e}")))
}

fn run(cli: Cli) -> CmdResult<bool> {
    configure_threads(&cli.threads)?;
    let start = Instant::now();
    let mut out = Output::new(&cli.out)?;
    let mut passed = true;
    let (name, problem, params) = match cli.command {
        Command::Verify { suite } => {
            passed = verify(&suite, cli.seed, &mut out)?;
            ("verify", None, json!({ "suite": suite }))
        }
        cmd => {
            let p = load(cli.config.as_deref())?;
            let (name, params) = match cmd {
                Command::Simulate(a) => ("simulate", simulate(&p, a, cli.seed, &mut out)?),
                Command::Rate(a) => ("rate", rate_cmd(&p, a, cli.seed, &mut out)?),
                Command::Eigen(a) => ("eigen", eigen(&p, a, &mut out)?),
                Command::Kernel(a) => ("kernel", kernel(&p, a, &mut out)?),
                Command::Nash(a) => ("nash", nash(&p, a, cli.seed, &mut out)?),
                Command::Verify { .. } => unreachable!(),
            };
            (name, Some(p), params)
        }
    };
    let manifest = RunManifest {
        command: name.into(),
        config: problem.as_ref().map(|p| p.path.display().to_string()),
        config_hash: problem.as_ref().map(|p| p.hash.clone()),
        parameters: params,
        version: env!("CARGO_PKG_VERSION").into(),
        seed: cli.seed,
        duration_seconds: start.elapsed().as_secs_f64(),
        files: out.files.clone(),
    };
    write_json(&out.dir.join("manifest.json"), &manifest)?;
    Ok(passed)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let status = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(status);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("verification failed");
            ExitCode::from(EXIT_VERIFY)
        }
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.status)
        }
    }
}
