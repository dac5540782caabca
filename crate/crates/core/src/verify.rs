//! Reference checks A1–A9 with fixed problems, seeds and tolerances.
//!
//! Every criterion returns a report and the result files it would write. The
//! files never contain timings, so reruns with the same seed can be compared
//! byte for byte (A9).

use std::fmt;
use std::path::Path;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::action::{
    action_gradient, action_value, hovering_rate_oracle, rate, rate_domain_sensitivity,
    ActionOptions, DiscretePath, Endpoint,
};
use crate::error::{Error, Result};
use crate::game::{nash_iterate, GameConfig};
use crate::generator::{
    discretize_generator, eigenvalue_asymptotics, principal_eigenvalue, EigenOptions, GridPolicy,
    GridSpec,
};
use crate::invariant::{invariance_kernel, kernel_is_empty};
use crate::mc::{exit_rate_mc, mean_exit_time, tube_probability, TubeSampling};
use crate::model::{Domain, FeedbackProfile, MultiChannelSystem};
use crate::output::Table;
use crate::rng::CounterRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Criterion {
    A1,
    A2,
    A3,
    A4,
    A5,
    A6,
    A7,
    A8,
    A9,
}

impl Criterion {
    pub const ALL: [Criterion; 9] = [
        Criterion::A1,
        Criterion::A2,
        Criterion::A3,
        Criterion::A4,
        Criterion::A5,
        Criterion::A6,
        Criterion::A7,
        Criterion::A8,
        Criterion::A9,
    ];

    pub fn title(self) -> &'static str {
        match self {
            Criterion::A1 => "Dirichlet Laplacian eigenvalues",
            Criterion::A2 => "Monte Carlo and PDE exit rates agree",
            Criterion::A3 => "small-noise limit of the scaled eigenvalue",
            Criterion::A4 => "action gradient against finite differences",
            Criterion::A5 => "invariance kernel and mean exit times",
            Criterion::A6 => "rate sensitivity to domain perturbation",
            Criterion::A7 => "tube probability lower bound",
            Criterion::A8 => "two-player scalar Nash equilibrium",
            Criterion::A9 => "byte-identical reruns",
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

/// Named groups of criteria.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Quick,
    Full,
}

impl Suite {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "quick" => Ok(Suite::Quick),
            "full" => Ok(Suite::Full),
            other => Err(Error::Config(format!(
                "unknown suite `{other}` (expected `quick` or `full`)"
            ))),
        }
    }

    pub fn criteria(self) -> &'static [Criterion] {
        match self {
            Suite::Quick => &Criterion::ALL[..4],
            Suite::Full => &Criterion::ALL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub expected: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Check {
    fn rel(name: &str, value: f64, expected: f64, tol: f64) -> Self {
        Self {
            name: name.into(),
            value,
            expected,
            tolerance: tol,
            passed: (value - expected).abs() <= tol * expected.abs(),
        }
    }

    fn at_most(name: &str, value: f64, bound: f64) -> Self {
        Self {
            name: name.into(),
            value,
            expected: bound,
            tolerance: 0.0,
            passed: value <= bound,
        }
    }

    fn at_least(name: &str, value: f64, bound: f64) -> Self {
        Self {
            name: name.into(),
            value,
            expected: bound,
            tolerance: 0.0,
            passed: value >= bound,
        }
    }

    fn holds(name: &str, ok: bool) -> Self {
        Self {
            name: name.into(),
            value: if ok { 1.0 } else { 0.0 },
            expected: 1.0,
            tolerance: 0.0,
            passed: ok,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CriterionReport {
    pub id: Criterion,
    pub title: String,
    pub seed: u64,
    pub passed: bool,
    pub checks: Vec<Check>,
    /// Result files as `(name, contents)`.
    #[serde(skip)]
    pub files: Vec<(String, String)>,
}

impl CriterionReport {
    fn new(id: Criterion, seed: u64, checks: Vec<Check>, tables: Vec<(String, Table)>) -> Self {
        let mut r = Self {
            id,
            title: id.title().into(),
            seed,
            passed: checks.iter().all(|c| c.passed),
            checks,
            files: Vec::new(),
        };
        let mut json = serde_json::to_string_pretty(&r).expect("report serializes");
        json.push('\n');
        r.files.push((format!("{id}.json"), json));
        for (name, t) in tables {
            r.files.push((format!("{id}_{name}.csv"), t.to_csv()));
        }
        r
    }

    /// One line: id, PASS/FAIL, title and every check.
    pub fn summary(&self) -> String {
        let mut s = format!(
            "{} {} {}:",
            self.id,
            if self.passed { "PASS" } else { "FAIL" },
            self.title
        );
        for c in &self.checks {
            s.push_str(&format!(
                " [{} {} {:.6e} vs {:.6e}{}]",
                if c.passed { "ok" } else { "FAILED" },
                c.name,
                c.value,
                c.expected,
                if c.tolerance > 0.0 {
                    format!(" rel {}", c.tolerance)
                } else {
                    String::new()
                }
            ));
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, contents) in &self.files {
            std::fs::write(dir.join(name), contents)?;
        }
        Ok(())
    }
}

fn scalar(a: f64, eps: f64) -> Result<(MultiChannelSystem, FeedbackProfile)> {
    let sys = MultiChannelSystem::scalar(a, &[], 1.0, eps)?;
    let prof = FeedbackProfile::zeros(&sys);
    Ok((sys, prof))
}

fn brownian(d: usize, eps: f64) -> Result<(MultiChannelSystem, FeedbackProfile)> {
    let sys = MultiChannelSystem::new(
        DMatrix::zeros(d, d),
        vec![],
        DMatrix::identity(d, d),
        eps,
    )?;
    let prof = FeedbackProfile::zeros(&sys);
    Ok((sys, prof))
}

fn laplacian_eigenvalue(d: usize, eps: f64, nodes: usize) -> Result<f64> {
    let (sys, prof) = brownian(d, eps)?;
    let dom = Domain::new_box(vec![0.0; d], vec![1.0; d])?;
    let grid = GridSpec::uniform(&dom, nodes)?;
    let op = discretize_generator(&sys, &prof, &dom, &grid)?;
    Ok(principal_eigenvalue(&op, &EigenOptions::default())?.lambda)
}

fn a1(seed: u64) -> Result<CriterionReport> {
    let pi2 = std::f64::consts::PI.powi(2);
    let l1 = laplacian_eigenvalue(1, 0.1, 2001)?;
    let l2 = laplacian_eigenvalue(2, 0.1, 301)?;
    let checks = vec![
        Check::rel("lambda_1d", l1, 0.1 * pi2 / 2.0, 1e-4),
        Check::rel("lambda_2d", l2, 0.1 * pi2, 1e-3),
    ];
    Ok(CriterionReport::new(Criterion::A1, seed, checks, vec![]))
}

fn a2(seed: u64) -> Result<CriterionReport> {
    let eps = 0.4;
    let pde = laplacian_eigenvalue(1, eps, 2001)?;
    let (sys, prof) = brownian(1, eps)?;
    let dom = Domain::interval(0.0, 1.0)?;
    let mc = exit_rate_mc(
        &sys,
        &prof,
        &dom,
        &[0.5],
        &[1.0, 2.0, 3.0, 4.0],
        1e-4,
        200_000,
        seed,
    )?;
    let checks = vec![Check::rel("lambda_mc_vs_pde", mc.lambda_hat, pde, 0.10)];
    Ok(CriterionReport::new(
        Criterion::A2,
        seed,
        checks,
        vec![("survival".into(), mc.to_table())],
    ))
}

/// Horizon schedule shared by the path-optimizer criteria.
const SCHEDULE: [f64; 4] = [5.0, 10.0, 20.0, 40.0];
const N_PER_T: f64 = 10.0;

fn a3(seed: u64) -> Result<CriterionReport> {
    let (sys, prof) = scalar(1.0, 0.1)?;
    let dom = Domain::interval(1.0, 3.0)?;
    let oracle = hovering_rate_oracle(&sys, &prof, &dom, 2001)?.value;
    let opts = ActionOptions {
        seed,
        ..Default::default()
    };
    let r = rate(&sys, &prof, &dom, &[2.0], &SCHEDULE, N_PER_T, &opts)?;
    let asym = eigenvalue_asymptotics(
        &sys,
        &prof,
        &dom,
        &[0.2, 0.1, 0.05],
        &GridPolicy::default(),
        &EigenOptions::default(),
    )?;
    let last = asym.rows.last().expect("three rows").eps_lambda;
    let checks = vec![
        Check::rel("hover_oracle", oracle, 0.5, 1e-9),
        Check::rel("path_opt_rate", r.value, 0.5, 0.02),
        Check::holds("eps_lambda_decreasing", asym.decreasing),
        Check::rel("eps_lambda_at_0.05", last, 0.5, 0.20),
    ];
    Ok(CriterionReport::new(
        Criterion::A3,
        seed,
        checks,
        vec![("rate".into(), r.to_table()), ("asymptotics".into(), asym.to_table())],
    ))
}

/// Worst relative deviation between the analytic gradient and central
/// differences over random paths.
fn gradient_error(sys: &MultiChannelSystem, rng: &CounterRng, stream: u64, paths: usize) -> Result<f64> {
    let prof = FeedbackProfile::zeros(sys);
    let d = sys.dim();
    let mut worst = 0.0f64;
    for p in 0..paths as u64 {
        let key = stream * 1_000_000 + p * 1000;
        let n = 8 + (rng.uniform_in(key, 0, 0.0, 24.0) as usize);
        let horizon = rng.uniform_in(key, 1, 0.5, 2.0);
        let end = if rng.uniform_in(key, 2, 0.0, 1.0) < 0.5 {
            Endpoint::Free
        } else {
            Endpoint::Fixed
        };
        let mut path = DiscretePath::constant(horizon, n, &vec![0.0; d]);
        for k in 0..=n {
            for (j, v) in path.point_mut(k).iter_mut().enumerate() {
                *v = rng.uniform_in(key, 3 + (k * d + j) as u64, -2.0, 2.0);
            }
        }
        let g = action_gradient(sys, &prof, &path, end)?;
        let h = 1e-6;
        let mut diff = 0.0f64;
        let mut scale = 0.0f64;
        for (k, gk) in g.iter().enumerate() {
            for j in 0..d {
                let mut plus = path.clone();
                plus.point_mut(k + 1)[j] += h;
                let mut minus = path.clone();
                minus.point_mut(k + 1)[j] -= h;
                let fd = (action_value(sys, &prof, &plus)? - action_value(sys, &prof, &minus)?)
                    / (2.0 * h);
                diff = diff.max((fd - gk[j]).abs());
                scale = scale.max(gk[j].abs());
            }
        }
        worst = worst.max(diff / scale.max(1e-12));
    }
    Ok(worst)
}

fn a4(seed: u64) -> Result<CriterionReport> {
    let rng = CounterRng::new(seed);
    let stable = MultiChannelSystem::scalar(-1.0, &[], 0.7, 0.1)?;
    let unstable = MultiChannelSystem::scalar(1.0, &[], 1.3, 0.1)?;
    let saddle = MultiChannelSystem::new(
        DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.0, -1.0]),
        vec![],
        DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.4, 0.8]),
        0.1,
    )?;
    let checks = vec![
        Check::at_most("rel_err_1d_stable", gradient_error(&stable, &rng, 0, 100)?, 1e-5),
        Check::at_most("rel_err_1d_unstable", gradient_error(&unstable, &rng, 1, 100)?, 1e-5),
        Check::at_most("rel_err_2d_saddle", gradient_error(&saddle, &rng, 2, 100)?, 1e-5),
    ];
    Ok(CriterionReport::new(Criterion::A4, seed, checks, vec![]))
}

fn a5(seed: u64) -> Result<CriterionReport> {
    let sweep = [0.2, 0.1, 0.05];
    let mut table = Table::new([
        "case",
        "epsilon",
        "mean_exit_time",
        "half_width",
        "censored_fraction",
    ]);
    let mut run = |a: f64, lo: f64, hi: f64, x0: f64, dt: f64, t_max: f64, paths: usize| -> Result<(bool, Vec<f64>)> {
        let (sys, prof) = scalar(a, 0.1)?;
        let dom = Domain::interval(lo, hi)?;
        let grid = GridSpec::uniform(&dom, 201)?;
        let kernel = invariance_kernel(&sys, &prof, &dom, &grid, 0.05, 100_000)?;
        let empty = kernel_is_empty(&kernel)?;
        let mut means = Vec::new();
        for &eps in &sweep {
            let s = sys.with_epsilon(eps)?;
            let m = mean_exit_time(&s, &prof, &dom, &[x0], dt, t_max, paths, seed)?;
            table.push_numbers(&[a, eps, m.mean, m.half_width, m.censored_fraction]);
            means.push(m.mean);
        }
        Ok((empty, means))
    };
    let (unstable_empty, um) = run(1.0, 1.0, 3.0, 2.0, 1e-3, 50.0, 2000)?;
    let (stable_empty, sm) = run(-1.0, -1.0, 1.0, 0.0, 1e-2, 2000.0, 400)?;
    let spread = |v: &[f64]| {
        v.iter().copied().fold(0.0, f64::max) / v.iter().copied().fold(f64::INFINITY, f64::min)
    };
    let checks = vec![
        Check::holds("unstable_kernel_empty", unstable_empty),
        Check::at_most("unstable_mean_exit_spread", spread(&um), 2.0),
        Check::holds("stable_kernel_nonempty", !stable_empty),
        Check::at_least("stable_mean_exit_growth", sm[2] / sm[0], 5.0),
    ];
    Ok(CriterionReport::new(
        Criterion::A5,
        seed,
        checks,
        vec![("mean_exit".into(), table)],
    ))
}

fn a6(seed: u64) -> Result<CriterionReport> {
    let (sys, prof) = scalar(1.0, 0.1)?;
    let dom = Domain::interval(1.0, 3.0)?;
    let opts = ActionOptions {
        seed,
        ..Default::default()
    };
    let mut table = Table::new(["delta", "rate_inflated", "rate_deflated", "gap"]);
    let mut gaps = Vec::new();
    let mut first = None;
    for delta in [0.1, 0.05, 0.025] {
        let s = rate_domain_sensitivity(&sys, &prof, &dom, &[2.0], delta, &SCHEDULE, N_PER_T, &opts)?;
        table.push_numbers(&[delta, s.inflated.value, s.deflated.value, s.gap]);
        gaps.push(s.gap);
        first.get_or_insert((s.inflated.value, s.deflated.value));
    }
    let (inflated, deflated) = first.expect("three deltas");
    let checks = vec![
        Check::holds("gap_decreasing", gaps.windows(2).all(|w| w[1] < w[0])),
        Check::rel("rate_inflated_0.1", inflated, 0.405, 0.03),
        Check::rel("rate_deflated_0.1", deflated, 0.605, 0.03),
    ];
    Ok(CriterionReport::new(
        Criterion::A6,
        seed,
        checks,
        vec![("sensitivity".into(), table)],
    ))
}

fn a7(seed: u64) -> Result<CriterionReport> {
    let (sys, prof) = scalar(0.0, 0.1)?;
    let reference = DiscretePath::from_fn(1.0, 100, 1, |t, x| x[0] = t);
    let est = tube_probability(
        &sys,
        &prof,
        &reference,
        0.3,
        1e-3,
        200_000,
        seed,
        TubeSampling::Auto { min_hits: 30 },
    )?;
    let bound = (-(0.5 + 0.1) / 0.1f64).exp();
    let mut table = Table::new(["probability", "std_error", "hits", "n_paths", "bound"]);
    table.push_numbers(&[
        est.probability,
        est.std_error,
        est.hits as f64,
        est.n_paths as f64,
        bound,
    ]);
    let checks = vec![Check::at_least("tube_probability", est.probability, bound)];
    Ok(CriterionReport::new(
        Criterion::A7,
        seed,
        checks,
        vec![("tube".into(), table)],
    ))
}

fn a8(seed: u64) -> Result<CriterionReport> {
    let sys = MultiChannelSystem::scalar(1.0, &[1.0, 1.0], 1.0, 0.1)?;
    let dom = Domain::interval(1.0, 3.0)?;
    let mut cfg = GameConfig::uniform_bounds(&sys, -0.25, 0.25);
    cfg.seed = seed;
    cfg.rate.action.seed = seed;
    cfg.probes = 32;
    cfg.eta = 1e-3;
    let g = nash_iterate(&sys, &dom, &FeedbackProfile::zeros(&sys), &cfg)?;
    // pattern search stops once the step is below 1e-4 of the box width
    let resolution = 1e-4 * 0.5;
    let mut table = Table::new(["round", "player", "old_rate", "new_rate", "gain"]);
    for m in &g.history {
        table.push_numbers(&[
            m.round as f64,
            m.player as f64,
            m.old_rate,
            m.new_rate,
            m.gain[(0, 0)],
        ]);
    }
    let k1 = g.profile.gain(0)[(0, 0)];
    let k2 = g.profile.gain(1)[(0, 0)];
    let checks = vec![
        Check::holds("converged", g.converged),
        Check::at_most("gain_1_error", (k1 + 0.25).abs(), resolution),
        Check::at_most("gain_2_error", (k2 + 0.25).abs(), resolution),
        Check::rel("rate", g.rate, 0.125, 0.03),
        Check::at_most("nash_residual", g.residual, 1e-3),
    ];
    Ok(CriterionReport::new(
        Criterion::A8,
        seed,
        checks,
        vec![("history".into(), table)],
    ))
}

/// Runs one of A1–A8.
pub fn run_criterion(id: Criterion, seed: u64) -> Result<CriterionReport> {
    match id {
        Criterion::A1 => a1(seed),
        Criterion::A2 => a2(seed),
        Criterion::A3 => a3(seed),
        Criterion::A4 => a4(seed),
        Criterion::A5 => a5(seed),
        Criterion::A6 => a6(seed),
        Criterion::A7 => a7(seed),
        Criterion::A8 => a8(seed),
        Criterion::A9 => Err(Error::Precondition(
            "A9 compares reruns; use determinism_check".into(),
        )),
    }
}

/// Reruns every criterion behind `first` with its seed and compares the
/// result files byte for byte.
pub fn determinism_check(first: &[CriterionReport]) -> Result<CriterionReport> {
    let seed = first.first().map_or(0, |r| r.seed);
    let mut checks = Vec::new();
    for r in first {
        let again = run_criterion(r.id, r.seed)?;
        checks.push(Check::holds(&format!("{}_identical", r.id), again.files == r.files));
    }
    Ok(CriterionReport::new(Criterion::A9, seed, checks, vec![]))
}

/// Runs a suite; A9 reruns everything that came before it.
pub fn run_suite(suite: Suite, seed: u64) -> Result<Vec<CriterionReport>> {
    let mut out = Vec::new();
    for &id in suite.criteria() {
        if id == Criterion::A9 {
            let r = determinism_check(&out)?;
            out.push(r);
        } else {
            out.push(run_criterion(id, seed)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suites_by_name() {
        assert_eq!(Suite::parse("quick").unwrap().criteria().len(), 4);
        assert_eq!(Suite::parse("full").unwrap().criteria().len(), 9);
        assert!(matches!(Suite::parse("nightly"), Err(Error::Config(_))));
    }

    #[test]
    fn reports_are_reproducible() {
        let a = run_criterion(Criterion::A4, 5).unwrap();
        let b = run_criterion(Criterion::A4, 5).unwrap();
        assert!(a.passed);
        assert_eq!(a.files, b.files);
        assert!(a.summary().starts_with("A4 PASS"));
        let d = determinism_check(&[a]).unwrap();
        assert!(d.passed && d.checks.len() == 1);
    }

    #[test]
    fn a9_is_not_a_standalone_run() {
        assert!(run_criterion(Criterion::A9, 0).is_err());
    }
}
