//! Monte Carlo realization of the controlled diffusion
//!
//! ```text
//! x_{k+1} = x_k + A_cl x_k dt + sqrt(eps * dt) * sigma * xi_k
//! ```
//!
//! with `xi_k` drawn from [`CounterRng`] keyed by `(seed, path, step)`. Exit is
//! detected on the time grid only (no Brownian-bridge correction), which
//! biases exit times upward by `O(sqrt(dt))`: for a scalar Brownian motion the
//! domain effectively widens by about `0.5826 * sqrt(eps * dt)` per side.
//!
//! Paths are independent work items. Results are collected in path order and
//! reduced serially, so estimates do not depend on the worker count.

use rayon::prelude::*;
use serde::Serialize;

use crate::action::DiscretePath;
use crate::dynamics::{closed_loop_matrix, time_grid, Trajectory};
use crate::error::{Error, Result};
use crate::linalg::{compensated_sum, Dense};
use crate::model::{Domain, FeedbackProfile, MultiChannelSystem};
use crate::output::Table;
use crate::rng::CounterRng;

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

/// Minimum sample count accepted by the probability estimators.
pub const MIN_PATHS: usize = 100;

/// Outcome of one simulated exit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum ExitSample {
    /// Left the open domain at grid time `tau`, first outside state `point`.
    Exited { tau: f64, point: Vec<f64> },
    /// Still inside at the censoring horizon.
    Censored { t_max: f64 },
}

impl ExitSample {
    /// Exit time, or the censoring horizon.
    pub fn time(&self) -> f64 {
        match self {
            ExitSample::Exited { tau, .. } => *tau,
            ExitSample::Censored { t_max } => *t_max,
        }
    }

    pub fn is_censored(&self) -> bool {
        matches!(self, ExitSample::Censored { .. })
    }

    pub fn exit_point(&self) -> Option<&[f64]> {
        match self {
            ExitSample::Exited { point, .. } => Some(point),
            ExitSample::Censored { .. } => None,
        }
    }

    /// `tau > t`, counting censored samples as survivors.
    pub fn survives(&self, t: f64) -> bool {
        match self {
            ExitSample::Exited { tau, .. } => *tau > t,
            ExitSample::Censored { t_max } => *t_max >= t,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SurvivalEstimate {
    pub horizon: f64,
    pub p_hat: f64,
    /// 95% normal-approximation half-width.
    pub half_width: f64,
    pub n_paths: usize,
    pub seed: u64,
}

/// Euler–Maruyama stepper for one closed loop.
struct Stepper {
    acl: Dense,
    sigma: Dense,
    eps: f64,
    rng: CounterRng,
    drift: Vec<f64>,
    xi: Vec<f64>,
    kick: Vec<f64>,
}

impl Stepper {
    fn new(sys: &MultiChannelSystem, prof: &FeedbackProfile, seed: u64) -> Result<Self> {
        let acl = closed_loop_matrix(sys, prof)?;
        let d = sys.dim();
        Ok(Self {
            acl: Dense::from_matrix(&acl),
            sigma: Dense::from_matrix(sys.sigma()),
            eps: sys.epsilon(),
            rng: CounterRng::new(seed),
            drift: vec![0.0; d],
            xi: vec![0.0; d],
            kick: vec![0.0; d],
        })
    }

    /// Advances `x` by `h` using the normals of `(path, step)`; `shift` is an
    /// extra deterministic drift.
    #[inline]
    fn step(&mut self, x: &mut [f64], h: f64, path: u64, step: u64, shift: Option<&[f64]>) {
        self.acl.mul_vec(x, &mut self.drift);
        if let Some(c) = shift {
            for (dr, ci) in self.drift.iter_mut().zip(c) {
                *dr += ci;
            }
        }
        if self.eps > 0.0 {
            self.rng.normals(path, step, &mut self.xi);
            self.sigma.mul_vec(&self.xi, &mut self.kick);
            let s = (self.eps * h).sqrt();
            for ((xi, dr), k) in x.iter_mut().zip(&self.drift).zip(&self.kick) {
                *xi += dr * h + s * k;
            }
        } else {
            for (xi, dr) in x.iter_mut().zip(&self.drift) {
                *xi += dr * h;
            }
        }
    }
}

fn check_dim(sys: &MultiChannelSystem, x: &[f64]) -> Result<()> {
    if x.len() != sys.dim() {
        return Err(Error::DimensionMismatch {
            expected: sys.dim(),
            got: x.len(),
        });
    }
    Ok(())
}

fn check_step(dt: f64, horizon: f64) -> Result<()> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::Precondition(format!("dt must be positive, got {dt}")));
    }
    if !(horizon.is_finite() && horizon >= 0.0) {
        return Err(Error::Precondition(format!(
            "horizon must be nonnegative, got {horizon}"
        )));
    }
    Ok(())
}

fn check_paths(n_paths: usize) -> Result<()> {
    if n_paths < MIN_PATHS {
        return Err(Error::Precondition(format!(
            "paths must be >= {MIN_PATHS}, got {n_paths}"
        )));
    }
    Ok(())
}

/// One Euler–Maruyama path (path index 0 of `seed`) on `[0, horizon]`.
pub fn simulate_sde(
    sys: &MultiChannelSystem,
    prof: &FeedbackProfile,
    x0: &[f64],
    horizon: f64,
    dt: f64,
    seed: u64,
) -> Result<Trajectory> {
    simulate_path(sys, prof, x0, horizon, dt, seed, 0)
}

/// Path `path` of the ensemble keyed by `seed`.
pub fn simulate_path(
    sys: &MultiChannelSystem,
    prof: &FeedbackProfile,
    x0: &[f64],
    horizon: f64,
    dt: f64,
    seed: u64,
    path: u64,
) -> Result<Trajectory> {
    check_dim(sys, x0)?;
    check_step(dt, horizon)?;
    if dt > horizon {
        return Err(Error::Precondition(format!("dt {dt} exceeds T {horizon}")));
    }
    let mut st = Stepper::new(sys, prof, seed)?;
    let times = time_grid(horizon, dt);
    let mut states = Vec::with_capacity(times.len());
    let mut x = x0.to_vec();
    states.push(x.clone());
    for (k, w) in times.windows(2).enumerate() {
        st.step(&mut x, w[1] - w[0], path, k as u64, None);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::PathDiverged {
                path,
                step: k as u64 + 1,
            });
        }
        states.push(x.clone());
    }
    Ok(Trajectory { times, states })
}

fn exit_path(
    st: &mut Stepper,
    dom: &Domain,
    x0: &[f64],
    dt: f64,
    steps: u64,
    t_max: f64,
    path: u64,
) -> Result<ExitSample> {
    let mut x = x0.to_vec();
    for k in 1..=steps {
        st.step(&mut x, dt, path, k - 1, None);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::PathDiverged { path, step: k });
        }
        if dom.signed_distance(&x) >= 0.0 {
            return Ok(ExitSample::Exited {
                tau: k as f64 * dt,
                point: x,
            });
        }
    }
    Ok(ExitSample::Censored { t_max })
}

fn grid_steps(t_max: f64, dt: f64) -> u64 {
    (t_max / dt + 1e-9).floor() as u64
}

fn check_start(dom: &Domain, x0: &[f64]) -> Result<()> {
    if !dom.contains(x0)? {
        return Err(Error::Precondition(
            "initial state must lie in the open domain".into(),
        ));
    }
    Ok(())
}

/// First grid time `k*dt` at which path 0 of `seed` is outside the open domain.
pub fn sample_exit(
    sys: &MultiChannelSystem,
    prof: &FeedbackProfile,
    dom: &Domain,
    x0: &[f64],
    dt: f64,
    t_max: f64,
    seed: u64,
) -> Result<ExitSample> {
    check_dim(sys, x0)?;
    check_step(dt, t_max)?;
    check_start(dom, x0)?;
    let mut st = Stepper::new(sys, prof, seed)?;
    exit_path(&mut st, dom, x0, dt, grid_steps(t_max, dt), t_max, 0)
}

/// Exit samples for paths `0..n_paths`, in path order.
#[allow(clippy::too_many_arguments)]
pub fn sample_exits(
    sys: &MultiChannelSystem,
    prof: &FeedbackProfile,
    dom: &Domain,
    x0: &[f64],
    dt: f64,
    t_max: f64,
    n_paths: usize,
    seed: u64,
) -> Result<Vec<ExitSample>> {
    check_dim(sys, x0)?;
    check_step(dt, t_max)?;
    check_start(dom, x0)?;
    // validate the profile once before fanning out
    Stepper::new(sys, prof, seed)?;
    let steps = grid_steps(t_max, dt);
    (0..n_paths as u64)
        .into_par_iter()
        .map_init(
            || Stepper::new(sys, prof, seed).expect("validated above"),
            |st, path| exit_path(st, dom, x0, dt, steps, t_max, path),
        )
        .collect()
}

fn survival_from(samples: &[ExitSample], horizon: f64, seed: u64) -> SurvivalEstimate {
    let n = samples.len();
    let alive = samples.iter().filter(|s| s.survives(horizon)).count();
    let p = alive as f64 / n as f64;
    SurvivalEstimate {
        horizon,
        p_hat: p,
        half_width: Z95 * (p * (1.0 - p) / n as f64).sqrt(),
        n_paths: n,
        seed,
    }
}

/// `P{tau > T}` with a 95% confidence half-width.
#[allow(clippy::too_many_arguments)]
pub fn survival_probability(
    sys: &MultiChannelSystem,
    prof: &FeedbackProfile,
    dom: &Domain,
    x0: &[f64],
    horizon: f64,
    dt: f64,
    n_paths: usize,
    seed: u64,
) -> Result<SurvivalEstimate> {
    check_paths(n_paths)?;
    let samples = sample_exits(sys, prof, dom, x0, dt, horizon, n_paths, seed)?;
    Ok(survival_from(&samples, horizon, seed))
}

/// Decay rate of the survival probability fitted over several horizons.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExitRateEstimate {
    /// Least-squares slope of `-log p_hat(T)` against `T`.
    pub lambda_hat: f64,
    /// `eps * lambda_hat`.
    pub scaled_rate: f64,
    /// Delta-method 95% half-width of `lambda_hat` (horizons treated as
    /// independent, so this is approximate).
    pub half_width: f64,
    /// RMS residual of the linear fit.
    pub fit_residual: f64,
    pub table: Vec<SurvivalEstimate>,
    pub epsilon: f64,
    pub n_paths: usize,
    pub seed: u64,
}

impl ExitRateEstimate {
    /// CSV `T,p_hat,half_width,minus_log_p_over_T`.
    pub fn to_table(&self) -> Table {
        let mut t = Table::new(["T", "p_hat", "half_width", "minus_log_p_over_T"]);
        for s in &self.table {
            let r = if s.horizon > 0.0 {
                -s.p_hat.ln() / s.horizon
            } else {
                0.0
            };
            t.push_numbers(&[s.horizon, s.p_hat, s.half_width, r]);
        }
        t
    }
}

/// Fits `-log P{tau > T}` against `T`; the slope estimates the principal
/// eigenvalue of `-L`.
#[allow(clippy::too_many_arguments)]
pub fn exit_rate_mc(
    sys: &MultiChannelSystem,
    prof: &FeedbackProfile,
    dom: &Domain,
    x0: &[f64],
    horizons: &[f64],
    dt: f64,
    n_paths: usize,
    seed: u64,
) -> Result<ExitRateEstimate> {
    if horizons.len() < 2 {
        return Err(Error::Precondition("need at least two horizons".into()));
    }
    check_paths(n_paths)?;
    let t_max = horizons.iter().copied().fold(0.0, f64::max);
    let samples = sample_exits(sys, prof, dom, x0, dt, t_max, n_paths, seed)?;
    let table: Vec<SurvivalEstimate> = horizons
        .iter()
        .map(|&t| survival_from(&samples, t, seed))
        .collect();
    if let Some(s) = table.iter().find(|s| s.p_hat == 0.0) {
        return Err(Error::NoSurvivors { horizon: s.horizon });
    }
    let ys: Vec<f64> = table.iter().map(|s| -s.p_hat.ln()).collect();
    let (slope, residual) = linear_fit(horizons, &ys);
    // var(-log p) ~ (1 - p) / (n p)
    let tbar = horizons.iter().sum::<f64>() / horizons.len() as f64;
    let sxx: f64 = horizons.iter().map(|t| (t - tbar) * (t - tbar)).sum();
    let var: f64 = horizons
        .iter()
        .zip(&table)
        .map(|(t, s)| {
            let w = (t - tbar) / sxx;
            w * w * (1.0 - s.p_hat) / (n_paths as f64 * s.p_hat)
        })
        .sum();
    Ok(ExitRateEstimate {
        lambda_hat: slope,
        scaled_rate: sys.epsilon() * slope,
        half_width: Z95 * var.sqrt(),
        fit_residual: residual,
        table,
        epsilon: sys.epsilon(),
        n_paths,
        seed,
    })
}

/// Least-squares slope with intercept and the RMS residual.
pub(crate) fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let xbar = xs.iter().sum::<f64>() / n;
    let ybar = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - xbar) * (x - xbar)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - xbar) * (y - ybar)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = ybar - slope * xbar;
    let rss: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let r = y - intercept - slope * x;
            r * r
        })
        .sum();
    (slope, (rss / n).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeanExitTime {
    /// Sample mean of `min(tau, t_max)`.
    pub mean: f64,
    pub std_error: f64,
    pub half_width: f64,
    pub censored_fraction: f64,
    /// Set when at least half the paths were censored; `mean` then only
    /// bounds the true mean from below.
    pub lower_bound_only: bool,
    pub t_max: f64,
    pub n_paths: usize,
    pub seed: u64,
}

/// Mean exit time with censored paths counted at `t_max`.
#[allow(clippy::too_many_arguments)]
pub fn mean_exit_time(
    sys: &MultiChannelSystem,
    prof: &FeedbackProfile,
    dom: &Domain,
    x0: &[f64],
    dt: f64,
    t_max: f64,
    n_paths: usize,
    seed: u64,
) -> Result<MeanExitTime> {
    if n_paths < 2 {
        return Err(Error::Precondition("need at least two paths".into()));
    }
    let samples = sample_exits(sys, prof, dom, x0, dt, t_max, n_paths, seed)?;
    let n = n_paths as f64;
    let mean = compensated_sum(samples.iter().map(ExitSample::time)) / n;
    let var = compensated_sum(samples.iter().map(|s| (s.time() - mean).powi(2))) / (n - 1.0);
    let censored = samples.iter().filter(|s| s.is_censored()).count() as f64 / n;
    let se = (var / n).sqrt();
    Ok(MeanExitTime {
        mean,
        std_error: se,
        half_width: Z95 * se,
        censored_fraction: censored,
        lower_bound_only: censored >= 0.5,
        t_max,
        n_paths,
        seed,
    })
}

/// One row of a noise-level sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpsSweepRow {
    pub epsilon: f64,
    pub lambda_hat: f64,
    pub scaled_rate: f64,
    pub half_width: f64,
}

/// [`exit_rate_mc`] repeated over noise levels.
#[allow(clippy::too_many_arguments)]
pub fn exit_rate_eps_sweep(
    sys: &MultiChannelSystem,
    prof: &FeedbackProfile,
    dom: &Domain,
    x0: &[f64],
    eps_list: &[f64],
    horizons: &[f64],
    dt: f64,
    n_paths: usize,
    seed: u64,
) -> Result<Vec<EpsSweepRow>> {
    eps_list
        .iter()
        .map(|&eps| {
            let s = sys.with_epsilon(eps)?;
            let r = exit_rate_mc(&s, prof, dom, x0, horizons, dt, n_paths, seed)?;
            Ok(EpsSweepRow {
                epsilon: eps,
                lambda_hat: r.lambda_hat,
                scaled_rate: r.scaled_rate,
                half_width: r.half_width,
            })
        })
        .collect()
}

/// CSV `epsilon,lambda_hat,eps_lambda_hat,half_width`.
pub fn eps_sweep_table(rows: &[EpsSweepRow]) -> Table {
    let mut t = Table::new(["epsilon", "lambda_hat", "eps_lambda_hat", "half_width"]);
    for r in rows {
        t.push_numbers(&[r.epsilon, r.lambda_hat, r.scaled_rate, r.half_width]);
    }
    t
}

/// How [`tube_probability`] samples paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TubeSampling {
    /// Plain simulation of the diffusion.
    Crude,
    /// Simulate with the drift shifted onto the reference path and reweight
    /// by the Girsanov likelihood ratio.
    Importance,
    /// Crude first; switch to importance sampling below `min_hits` hits.
    Auto { min_hits: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TubeEstimate {
    pub probability: f64,
    pub std_error: f64,
    /// Paths that stayed in the tube (unweighted).
    pub hits: usize,
    pub n_paths: usize,
    pub method: TubeSampling,
    pub seed: u64,
}

/// Common time grid of a simulation refining a reference path.
struct TubeGrid {
    per_interval: usize,
    h: f64,
}

fn tube_grid(reference: &DiscretePath, dt: f64) -> Result<TubeGrid> {
    let coarse = reference.dt();
    let m = (coarse / dt).round();
    if m < 1.0 || ((m * dt) - coarse).abs() > 1e-9 * coarse {
        return Err(Error::IncompatibleGrid(format!(
            "dt {dt} does not divide the reference step {coarse}"
        )));
    }
    Ok(TubeGrid {
        per_interval: m as usize,
        h: coarse / m,
    })
}

/// Sup-norm distance between a simulated path and a reference, evaluated at
/// every simulation step against the piecewise-linear reference.
#[allow(clippy::too_many_arguments)]
fn tube_path(
    st: &mut Stepper,
    references: &[&DiscretePath],
    grid: &TubeGrid,
    delta: f64,
    path: u64,
    importance: Option<(&Dense, &mut Vec<f64>)>,
) -> (bool, f64) {
    let r0 = references[0];
    let d = r0.dim();
    let n = r0.intervals();
    let m = grid.per_interval;
    let h = grid.h;
    let mut x = r0.point(0).to_vec();
    let mut phi = vec![0.0; d];
    let mut shift = vec![0.0; d];
    let mut log_w = 0.0;
    // per reference: still within delta at every step so far
    let mut inside = vec![true; references.len()];
    let (sigma_inv, theta) = match importance {
        Some((s, t)) => (Some(s), Some(t)),
        None => (None, None),
    };
    let mut theta = theta;
    let mut step = 0u64;
    for k in 0..n {
        for j in 0..m {
            if let (Some(sinv), Some(theta)) = (sigma_inv, theta.as_deref_mut()) {
                // c = phi' - A_cl phi(t_j), so the shifted mean follows phi
                let a = r0.point(k);
                let b = r0.point(k + 1);
                let s = j as f64 / m as f64;
                for i in 0..d {
                    phi[i] = a[i] + (b[i] - a[i]) * s;
                }
                st.acl.mul_vec(&phi, &mut shift);
                for i in 0..d {
                    shift[i] = (b[i] - a[i]) / r0.dt() - shift[i];
                }
                sinv.mul_vec(&shift, theta);
                let scale = (h / st.eps).sqrt();
                st.step(&mut x, h, path, step, Some(&shift));
                // st.xi holds the normals just used
                let mut dot = 0.0;
                let mut m2 = 0.0;
                for (t, xi) in theta.iter().zip(&st.xi) {
                    let mi = t * scale;
                    dot += mi * xi;
                    m2 += mi * mi;
                }
                log_w += -dot - 0.5 * m2;
            } else {
                st.step(&mut x, h, path, step, None);
            }
            step += 1;
            let s = (j + 1) as f64 / m as f64;
            let mut any = false;
            for (r, ok) in references.iter().zip(inside.iter_mut()) {
                if !*ok {
                    continue;
                }
                let a = r.point(k);
                let b = r.point(k + 1);
                let dist2: f64 = (0..d)
                    .map(|i| {
                        let p = a[i] + (b[i] - a[i]) * s;
                        (x[i] - p) * (x[i] - p)
                    })
                    .sum();
                if dist2.sqrt() >= delta || !dist2.is_finite() {
                    *ok = false;
                } else {
                    any = true;
                }
            }
            if !any {
                return (false, log_w);
            }
        }
    }
    (true, log_w)
}

fn check_reference(sys: &MultiChannelSystem, reference: &DiscretePath, delta: f64) -> Result<()> {
    if reference.dim() != sys.dim() {
        return Err(Error::DimensionMismatch {
            expected: sys.dim(),
            got: reference.dim(),
        });
    }
    if !(delta.is_finite() && delta > 0.0) {
        return Err(Error::Precondition(format!("delta must be positive, got {delta}")));
    }
    Ok(())
}

/// `P{ sup_t |x(t) - phi(t)| < delta }` for a reference path `phi` starting at
/// the initial state.
#[allow(clippy::too_many_arguments)]
pub fn tube_probability(
    sys: &MultiChannelSystem,
    prof: &FeedbackProfile,
    reference: &DiscretePath,
    delta: f64,
    dt: f64,
    n_paths: usize,
    seed: u64,
    sampling: TubeSampling,
) -> Result<TubeEstimate> {
    check_reference(sys, reference, delta)?;
    check_paths(n_paths)?;
    let grid = tube_grid(reference, dt)?;
    Stepper::new(sys, prof, seed)?;
    match sampling {
        TubeSampling::Crude => {
            let hits: Vec<bool> = (0..n_paths as u64)
                .into_par_iter()
                .map_init(
                    || Stepper::new(sys, prof, seed).expect("validated above"),
                    |st, p| tube_path(st, &[reference], &grid, delta, p, None).0,
                )
                .collect();
            let k = hits.iter().filter(|&&h| h).count();
            let p = k as f64 / n_paths as f64;
            Ok(TubeEstimate {
                probability: p,
                std_error: (p * (1.0 - p) / n_paths as f64).sqrt(),
                hits: k,
                n_paths,
                method: TubeSampling::Crude,
                seed,
            })
        }
        TubeSampling::Importance => {
            if sys.epsilon() <= 0.0 {
                return Err(Error::Precondition(
                    "importance sampling needs epsilon > 0".into(),
                ));
            }
            let sigma_inv = sys
                .sigma()
                .clone()
                .try_inverse()
                .ok_or_else(|| Error::Precondition("sigma is singular".into()))?;
            let sigma_inv = Dense::from_matrix(&sigma_inv);
            let d = sys.dim();
            let out: Vec<(bool, f64)> = (0..n_paths as u64)
                .into_par_iter()
                .map_init(
                    || {
                        (
                            Stepper::new(sys, prof, seed).expect("validated above"),
                            vec![0.0; d],
                        )
                    },
                    |(st, theta), p| {
                        tube_path(st, &[reference], &grid, delta, p, Some((&sigma_inv, theta)))
                    },
                )
                .collect();
            let n = n_paths as f64;
            let weights: Vec<f64> = out
                .iter()
                .map(|&(hit, lw)| if hit { lw.exp() } else { 0.0 })
                .collect();
            let mean = compensated_sum(weights.iter().copied()) / n;
            let var = compensated_sum(weights.iter().map(|w| (w - mean).powi(2))) / (n - 1.0);
            Ok(TubeEstimate {
                probability: mean,
                std_error: (var / n).sqrt(),
                hits: out.iter().filter(|o| o.0).count(),
                n_paths,
                method: TubeSampling::Importance,
                seed,
            })
        }
        TubeSampling::Auto { min_hits } => {
            let crude = tube_probability(
                sys,
                prof,
                reference,
                delta,
                dt,
                n_paths,
                seed,
                TubeSampling::Crude,
            )?;
            if crude.hits >= min_hits {
                Ok(crude)
            } else {
                tube_probability(
                    sys,
                    prof,
                    reference,
                    delta,
                    dt,
                    n_paths,
                    seed,
                    TubeSampling::Importance,
                )
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EscapeEstimate {
    pub probability: f64,
    pub std_error: f64,
    pub n_paths: usize,
    pub seed: u64,
}

/// `P{ inf_{phi in family} sup_t |x(t) - phi(t)| >= delta }`: the chance of
/// leaving the `delta`-neighborhood of a finite family of reference paths.
///
/// The distance to a set of paths is the infimum over its members. For a
/// finite subfamily of a larger set this overestimates the true escape
/// probability, so upper bounds checked against it are conservative.
#[allow(clippy::too_many_arguments)]
pub fn set_escape_probability(
    sys: &MultiChannelSystem,
    prof: &FeedbackProfile,
    family: &[DiscretePath],
    delta: f64,
    dt: f64,
    n_paths: usize,
    seed: u64,
) -> Result<EscapeEstimate> {
    let first = family
        .first()
        .ok_or_else(|| Error::Precondition("empty path family".into()))?;
    check_reference(sys, first, delta)?;
    check_paths(n_paths)?;
    for p in family {
        if p.intervals() != first.intervals()
            || p.horizon() != first.horizon()
            || p.point(0) != first.point(0)
        {
            return Err(Error::IncompatibleGrid(
                "family members must share grid and initial state".into(),
            ));
        }
    }
    let grid = tube_grid(first, dt)?;
    Stepper::new(sys, prof, seed)?;
    let refs: Vec<&DiscretePath> = family.iter().collect();
    let escaped: Vec<bool> = (0..n_paths as u64)
        .into_par_iter()
        .map_init(
            || Stepper::new(sys, prof, seed).expect("validated above"),
            |st, p| !tube_path(st, &refs, &grid, delta, p, None).0,
        )
        .collect();
    let k = escaped.iter().filter(|&&e| e).count();
    let p = k as f64 / n_paths as f64;
    Ok(EscapeEstimate {
        probability: p,
        std_error: (p * (1.0 - p) / n_paths as f64).sqrt(),
        n_paths,
        seed,
    })
}

/// Sup-norm distance between two paths on a common grid.
pub fn path_distance(a: &DiscretePath, b: &DiscretePath) -> Result<f64> {
    if a.intervals() != b.intervals() || a.dim() != b.dim() {
        return Err(Error::IncompatibleGrid("paths differ in grid or dimension".into()));
    }
    Ok((0..=a.intervals())
        .map(|k| {
            a.point(k)
                .iter()
                .zip(b.point(k))
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        })
        .fold(0.0, f64::max))
}

/// Distance from a path to a finite set of paths: the infimum over members.
pub fn distance_to_set(path: &DiscretePath, set: &[DiscretePath]) -> Result<f64> {
    let mut best = f64::INFINITY;
    for s in set {
        best = best.min(path_distance(path, s)?);
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::flow;

    fn scalar(a: f64, eps: f64) -> (MultiChannelSystem, FeedbackProfile) {
        let sys = MultiChannelSystem::scalar(a, &[], 1.0, eps).unwrap();
        let prof = FeedbackProfile::zeros(&sys);
        (sys, prof)
    }

    #[test]
    fn zero_noise_tracks_the_flow() {
        let (sys, prof) = scalar(-1.0, 0.0);
        let dt = 1e-3;
        let em = simulate_sde(&sys, &prof, &[1.0], 1.0, dt, 3).unwrap();
        let rk = flow(&sys, &prof, &[1.0], 1.0, dt).unwrap();
        let sup = em
            .states
            .iter()
            .zip(&rk.states)
            .map(|(a, b)| (a[0] - b[0]).abs())
            .fold(0.0, f64::max);
        // Euler global error for x' = -x on [0, 1] is about dt * t e^{-t} / 2
        assert!(sup <= 0.5 * dt, "sup {sup}");
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let (sys, prof) = scalar(0.3, 0.5);
        let a = simulate_sde(&sys, &prof, &[0.2], 1.0, 1e-2, 9).unwrap();
        let b = simulate_sde(&sys, &prof, &[0.2], 1.0, 1e-2, 9).unwrap();
        assert_eq!(a, b);
        let c = simulate_sde(&sys, &prof, &[0.2], 1.0, 1e-2, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn brownian_variance_grows_linearly() {
        let sys = MultiChannelSystem::new(
            nalgebra::DMatrix::zeros(2, 2),
            vec![],
            nalgebra::DMatrix::identity(2, 2),
            1.0,
        )
        .unwrap();
        let prof = FeedbackProfile::zeros(&sys);
        let n = 100_000usize;
        let horizon = 0.5;
        let finals: Vec<Vec<f64>> = (0..n as u64)
            .into_par_iter()
            .map(|p| {
                simulate_path(&sys, &prof, &[0.0, 0.0], horizon, 0.05, 77, p)
                    .unwrap()
                    .final_state()
                    .to_vec()
            })
            .collect();
        for j in 0..2 {
            let m = finals.iter().map(|x| x[j]).sum::<f64>() / n as f64;
            let v = finals.iter().map(|x| (x[j] - m).powi(2)).sum::<f64>() / (n - 1) as f64;
            // standard error of a normal sample variance: T * sqrt(2 / (n - 1))
            let se = horizon * (2.0 / (n - 1) as f64).sqrt();
            assert!((v - horizon).abs() < 3.0 * se, "coord {j}: var {v}");
        }
    }

    #[test]
    fn huge_box_censors() {
        let (sys, prof) = scalar(0.0, 1.0);
        let dom = Domain::interval(-1e6, 1e6).unwrap();
        let s = sample_exit(&sys, &prof, &dom, &[0.0], 1e-3, 0.1, 1).unwrap();
        assert_eq!(s, ExitSample::Censored { t_max: 0.1 });
        assert!(s.exit_point().is_none());
    }

    #[test]
    fn noiseless_exit_matches_deterministic() {
        let (sys, prof) = scalar(1.0, 0.0);
        let dom = Domain::interval(0.0, 2.0).unwrap();
        let dt = 1e-3;
        let s = sample_exit(&sys, &prof, &dom, &[1.0], dt, 5.0, 1).unwrap();
        let tau = s.time();
        assert!(!s.is_censored());
        assert!((tau - std::f64::consts::LN_2).abs() <= dt, "{tau}");
        assert!(s.exit_point().unwrap()[0] >= 2.0);
    }

    #[test]
    fn start_outside_is_rejected() {
        let (sys, prof) = scalar(1.0, 0.1);
        let dom = Domain::interval(0.0, 2.0).unwrap();
        assert!(matches!(
            sample_exit(&sys, &prof, &dom, &[2.0], 1e-3, 1.0, 0),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn brownian_mean_exit_time() {
        // (eps/2) u'' = -1 on (-1, 1): u(0) = 1/eps = 1
        let (sys, prof) = scalar(0.0, 1.0);
        let dom = Domain::interval(-1.0, 1.0).unwrap();
        let dt = 1e-3;
        let r = mean_exit_time(&sys, &prof, &dom, &[0.0], dt, 50.0, 100_000, 5).unwrap();
        assert_eq!(r.censored_fraction, 0.0);
        assert!(!r.lower_bound_only);
        // grid monitoring widens each side by ~0.5826 sqrt(eps dt)
        let shift = 0.5826 * dt.sqrt();
        let corrected = (1.0 + shift).powi(2);
        assert!(
            (r.mean - corrected).abs() < 3.0 * r.std_error,
            "mean {} corrected {corrected} se {}",
            r.mean,
            r.std_error
        );
        assert!((r.mean - 1.0).abs() < 3.0 * r.std_error + (corrected - 1.0));
    }

    #[test]
    fn noiseless_interior_equilibrium_is_censored() {
        let (sys, prof) = scalar(-1.0, 0.0);
        let dom = Domain::interval(-1.0, 1.0).unwrap();
        let r = mean_exit_time(&sys, &prof, &dom, &[0.5], 1e-2, 20.0, 200, 0).unwrap();
        assert_eq!(r.mean, 20.0);
        assert_eq!(r.censored_fraction, 1.0);
        assert!(r.lower_bound_only);
    }

    #[test]
    fn sliver_domain_exits_immediately() {
        let (sys, prof) = scalar(0.0, 1.0);
        let dom = Domain::interval(0.5 - 1e-4, 0.5 + 1e-4).unwrap();
        let r = mean_exit_time(&sys, &prof, &dom, &[0.5], 1e-3, 1.0, 1000, 0).unwrap();
        assert!(r.mean < 2e-3, "{}", r.mean);
        let s = survival_probability(&sys, &prof, &dom, &[0.5], 0.1, 1e-3, 1000, 0).unwrap();
        assert!(s.p_hat < 0.01);
    }

    #[test]
    fn zero_horizon_survival_is_one() {
        let (sys, prof) = scalar(0.0, 1.0);
        let dom = Domain::interval(0.0, 1.0).unwrap();
        let s = survival_probability(&sys, &prof, &dom, &[0.5], 0.0, 1e-3, 100, 0).unwrap();
        assert_eq!(s.p_hat, 1.0);
        assert_eq!(s.half_width, 0.0);
    }

    #[test]
    fn too_few_paths_rejected() {
        let (sys, prof) = scalar(0.0, 1.0);
        let dom = Domain::interval(0.0, 1.0).unwrap();
        let err = survival_probability(&sys, &prof, &dom, &[0.5], 1.0, 1e-3, 0, 0).unwrap_err();
        assert!(err.to_string().contains("paths must be >= 100"));
    }

    #[test]
    fn survival_decays_at_heat_kernel_rate() {
        // Dirichlet heat kernel on (0, 1): P{tau > T} ~ (4/pi) e^{-eps pi^2 T / 2}
        let (sys, prof) = scalar(0.0, 0.5);
        let dom = Domain::interval(0.0, 1.0).unwrap();
        let r = exit_rate_mc(&sys, &prof, &dom, &[0.5], &[0.5, 1.0, 1.5, 2.0], 1e-4, 40_000, 3)
            .unwrap();
        let oracle = 0.5 * std::f64::consts::PI.powi(2) / 2.0;
        assert!(
            (r.lambda_hat - oracle).abs() < 0.1 * oracle,
            "{} vs {oracle}",
            r.lambda_hat
        );
        assert_eq!(r.to_table().header()[3], "minus_log_p_over_T");
    }

    #[test]
    fn no_exits_gives_zero_rate() {
        let (sys, prof) = scalar(0.0, 1e-6);
        let dom = Domain::interval(-10.0, 10.0).unwrap();
        let r = exit_rate_mc(&sys, &prof, &dom, &[0.0], &[0.5, 1.0], 1e-2, 200, 0).unwrap();
        assert_eq!(r.lambda_hat, 0.0);
        assert!(r.table.iter().all(|s| s.p_hat == 1.0));
    }

    #[test]
    fn long_horizon_without_survivors_errors() {
        let (sys, prof) = scalar(0.0, 1.0);
        let dom = Domain::interval(0.0, 0.2).unwrap();
        let err = exit_rate_mc(&sys, &prof, &dom, &[0.1], &[1.0, 5.0], 1e-3, 100, 0).unwrap_err();
        assert!(matches!(err, Error::NoSurvivors { .. }));
        assert!(exit_rate_mc(&sys, &prof, &dom, &[0.1], &[1.0], 1e-3, 100, 0).is_err());
    }

    #[test]
    fn stable_equilibrium_has_negligible_scaled_rate() {
        let (sys, prof) = scalar(-1.0, 0.05);
        let dom = Domain::interval(-1.0, 1.0).unwrap();
        let r = exit_rate_mc(&sys, &prof, &dom, &[0.0], &[2.0, 4.0, 6.0], 1e-2, 2000, 1).unwrap();
        assert!(r.scaled_rate.abs() <= 0.02, "{}", r.scaled_rate);
    }

    #[test]
    fn survival_antitone_in_horizon_and_domain() {
        let (sys, prof) = scalar(0.5, 0.3);
        let small = Domain::interval(0.0, 1.0).unwrap();
        let large = Domain::interval(-0.5, 1.5).unwrap();
        let mut last = 1.0;
        for t in [0.25, 0.5, 1.0, 2.0] {
            let s = survival_probability(&sys, &prof, &small, &[0.5], t, 1e-3, 500, 8).unwrap();
            let l = survival_probability(&sys, &prof, &large, &[0.5], t, 1e-3, 500, 8).unwrap();
            assert!(s.p_hat <= last);
            assert!(s.p_hat <= l.p_hat, "common random numbers");
            last = s.p_hat;
        }
    }

    #[test]
    fn estimates_ignore_worker_count() {
        let (sys, prof) = scalar(0.2, 0.4);
        let dom = Domain::interval(0.0, 1.0).unwrap();
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| mean_exit_time(&sys, &prof, &dom, &[0.5], 1e-3, 5.0, 500, 21).unwrap())
        };
        assert_eq!(run(1), run(3));
    }

    #[test]
    fn tube_grid_must_refine_reference() {
        let (sys, prof) = scalar(0.0, 0.1);
        let reference = DiscretePath::from_fn(1.0, 10, 1, |t, x| x[0] = t);
        assert!(matches!(
            tube_probability(&sys, &prof, &reference, 0.3, 0.03, 100, 0, TubeSampling::Crude),
            Err(Error::IncompatibleGrid(_))
        ));
    }

    #[test]
    fn wide_tube_is_almost_sure() {
        let (sys, prof) = scalar(0.0, 0.1);
        let reference = DiscretePath::from_fn(0.01, 10, 1, |_, x| x[0] = 0.0);
        let r = tube_probability(&sys, &prof, &reference, 5.0, 1e-4, 1000, 0, TubeSampling::Crude)
            .unwrap();
        assert_eq!(r.probability, 1.0);
    }

    #[test]
    fn tube_concentrates_on_flow_as_noise_vanishes() {
        let (sys, prof) = scalar(-1.0, 1e-5);
        let tr = flow(&sys, &prof, &[1.0], 1.0, 0.01).unwrap();
        let reference = DiscretePath::from_trajectory(&tr).unwrap();
        let r = tube_probability(&sys, &prof, &reference, 0.05, 1e-3, 1000, 0, TubeSampling::Crude)
            .unwrap();
        assert!(r.probability > 0.99, "{}", r.probability);
    }

    #[test]
    fn importance_sampling_agrees_with_crude() {
        let (sys, prof) = scalar(0.0, 0.1);
        let reference = DiscretePath::from_fn(1.0, 50, 1, |t, x| x[0] = t);
        let crude = tube_probability(&sys, &prof, &reference, 0.3, 2e-3, 100_000, 4, TubeSampling::Crude)
            .unwrap();
        let is = tube_probability(
            &sys,
            &prof,
            &reference,
            0.3,
            2e-3,
            20_000,
            4,
            TubeSampling::Importance,
        )
        .unwrap();
        let tol = 3.0 * (crude.std_error.powi(2) + is.std_error.powi(2)).sqrt();
        assert!(
            (crude.probability - is.probability).abs() < tol,
            "crude {} is {}",
            crude.probability,
            is.probability
        );
        // the shifted sampler hits far more often
        assert!(is.hits as f64 / 20_000.0 > 10.0 * crude.hits as f64 / 100_000.0);
    }

    #[test]
    fn escape_from_zero_action_tube_is_rare() {
        // Family of paths with action below alpha: the resting path and slow
        // straight lines. Escape from this finite family bounds escape from the
        // full sublevel set from above.
        let (sys, prof) = scalar(0.0, 0.01);
        let alpha = 0.05;
        let gamma = 0.01;
        let family: Vec<DiscretePath> = [-0.2, 0.0, 0.2]
            .iter()
            .map(|&v| DiscretePath::from_fn(1.0, 20, 1, move |t, x| x[0] = v * t))
            .collect();
        for p in &family {
            let s = crate::action::action_value(&sys, &prof, p).unwrap();
            assert!(s < alpha);
        }
        let e = set_escape_probability(&sys, &prof, &family, 0.3, 1e-3, 20_000, 2).unwrap();
        let bound = (-(alpha - gamma) / sys.epsilon()).exp();
        assert!(e.probability <= bound, "{} > {bound}", e.probability);
    }

    #[test]
    fn set_distance_is_infimum() {
        let a = DiscretePath::from_fn(1.0, 4, 1, |t, x| x[0] = t);
        let b = DiscretePath::from_fn(1.0, 4, 1, |_, x| x[0] = 0.0);
        let c = DiscretePath::from_fn(1.0, 4, 1, |t, x| x[0] = 0.9 * t);
        assert_eq!(path_distance(&a, &b).unwrap(), 1.0);
        assert!((distance_to_set(&a, &[b, c]).unwrap() - 0.1).abs() < 1e-12);
    }
}
