//! The large-deviation action of a path against the closed-loop drift and its
//! minimization over paths confined to the closed domain.
//!
//! A path is sampled at `N + 1` equally spaced times. Each interval contributes
//! the midpoint residual
//!
//! ```text
//! v_k = (x_{k+1} - x_k) / dt - A_cl (x_k + x_{k+1}) / 2
//! S   = 1/2 * sum_k v_k^T P v_k * dt,        P = (sigma sigma^T)^{-1}
//! ```

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::dynamics::{closed_loop_matrix, Rk4, Trajectory};
use crate::error::{Error, Result};
use crate::linalg::Dense;
use crate::model::{Domain, FeedbackProfile, MultiChannelSystem};
use crate::output::{coord_header, Table};
use crate::rng::CounterRng;

/// Closure-membership tolerance for path points and endpoints.
pub const CLOSURE_TOL: f64 = 1e-9;

/// `N + 1` states at times `k * T / N`, stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretePath {
    horizon: f64,
    intervals: usize,
    dim: usize,
    data: Vec<f64>,
}

impl DiscretePath {
    pub fn new(horizon: f64, points: Vec<Vec<f64>>) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::Precondition(format!("horizon must be positive, got {horizon}")));
        }
        if points.len() < 2 {
            return Err(Error::Precondition("a path needs at least one interval".into()));
        }
        let dim = points[0].len();
        if dim == 0 || points.iter().any(|p| p.len() != dim) {
            return Err(Error::InconsistentDimensions("path points differ in length".into()));
        }
        Ok(Self {
            horizon,
            intervals: points.len() - 1,
            dim,
            data: points.concat(),
        })
    }

    /// Samples `f(t, out)` at the grid times.
    pub fn from_fn(
        horizon: f64,
        intervals: usize,
        dim: usize,
        f: impl Fn(f64, &mut [f64]),
    ) -> Self {
        assert!(horizon > 0.0 && intervals >= 1 && dim >= 1);
        let mut data = vec![0.0; (intervals + 1) * dim];
        for (k, x) in data.chunks_mut(dim).enumerate() {
            f(horizon * k as f64 / intervals as f64, x);
        }
        Self {
            horizon,
            intervals,
            dim,
            data,
        }
    }

    /// The constant path at `x`.
    pub fn constant(horizon: f64, intervals: usize, x: &[f64]) -> Self {
        Self::from_fn(horizon, intervals, x.len(), |_, out| out.copy_from_slice(x))
    }

    /// Converts a trajectory sampled on a uniform grid.
    pub fn from_trajectory(tr: &Trajectory) -> Result<Self> {
        let n = tr.times.len();
        if n < 2 {
            return Err(Error::Precondition("trajectory has a single sample".into()));
        }
        let horizon = tr.times[n - 1];
        let h = horizon / (n - 1) as f64;
        for (k, t) in tr.times.iter().enumerate() {
            if (t - k as f64 * h).abs() > 1e-9 * horizon.max(1.0) {
                return Err(Error::IncompatibleGrid("trajectory grid is not uniform".into()));
            }
        }
        Self::new(horizon, tr.states.clone())
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn intervals(&self) -> usize {
        self.intervals
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.intervals as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        self.horizon * k as f64 / self.intervals as f64
    }

    pub fn point(&self, k: usize) -> &[f64] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn point_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Time-dilated copy on a new grid: `phi_new(t) = phi(t * T / T_new)`,
    /// linearly interpolated.
    pub fn dilate(&self, horizon: f64, intervals: usize) -> Self {
        let n = self.intervals;
        let d = self.dim;
        Self::from_fn(horizon, intervals, d, |t, out| {
            let s = (t / horizon * n as f64).clamp(0.0, n as f64);
            let k = (s.floor() as usize).min(n - 1);
            let w = s - k as f64;
            let a = self.point(k);
            let b = self.point(k + 1);
            for j in 0..d {
                out[j] = a[j] + w * (b[j] - a[j]);
            }
        })
    }

    /// Every point lies in the closure of `dom` within [`CLOSURE_TOL`].
    pub fn is_feasible(&self, dom: &Domain) -> bool {
        self.points().all(|p| dom.signed_distance(p) <= CLOSURE_TOL)
    }

    /// CSV `t,x1,...,xd`.
    pub fn to_table(&self) -> Table {
        let mut header = vec!["t".to_string()];
        header.extend(coord_header("x", self.dim));
        let mut t = Table::new(header);
        let mut row = Vec::with_capacity(self.dim + 1);
        for (k, p) in self.points().enumerate() {
            row.clear();
            row.push(self.time(k));
            row.extend_from_slice(p);
            t.push_numbers(&row);
        }
        t
    }
}

/// Whether the final point of a path is free or pinned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Endpoint {
    Free,
    Fixed,
}

/// Closed-loop drift and noise precision, ready for repeated evaluation.
struct ActionKernel {
    acl: Dense,
    prec: Dense,
    d: usize,
}

impl ActionKernel {
    fn new(sys: &MultiChannelSystem, prof: &FeedbackProfile) -> Result<Self> {
        let acl = closed_loop_matrix(sys, prof)?;
        Ok(Self {
            acl: Dense::from_matrix(&acl),
            prec: Dense::from_matrix(sys.precision()),
            d: sys.dim(),
        })
    }

    /// Action of the flat point array `x` and, optionally, its gradient with
    /// respect to every point.
    fn eval(&self, x: &[f64], dt: f64, mut grad: Option<&mut [f64]>) -> f64 {
        let d = self.d;
        let n = x.len() / d - 1;
        let mut mid = vec![0.0; d];
        let mut am = vec![0.0; d];
        let mut v = vec![0.0; d];
        let mut pv = vec![0.0; d];
        let mut atpv = vec![0.0; d];
        if let Some(g) = grad.as_deref_mut() {
            g.iter_mut().for_each(|e| *e = 0.0);
        }
        let mut s = 0.0;
        for k in 0..n {
            let a = &x[k * d..(k + 1) * d];
            let b = &x[(k + 1) * d..(k + 2) * d];
            for j in 0..d {
                mid[j] = 0.5 * (a[j] + b[j]);
            }
            self.acl.mul_vec(&mid, &mut am);
            for j in 0..d {
                v[j] = (b[j] - a[j]) / dt - am[j];
            }
            self.prec.mul_vec(&v, &mut pv);
            s += v.iter().zip(&pv).map(|(p, q)| p * q).sum::<f64>();
            if let Some(g) = grad.as_deref_mut() {
                self.acl.mul_transpose_vec(&pv, &mut atpv);
                for j in 0..d {
                    let half = 0.5 * dt * atpv[j];
                    g[k * d + j] -= pv[j] + half;
                    g[(k + 1) * d + j] += pv[j] - half;
                }
            }
        }
        0.5 * s * dt
    }
}

/// Discretized action of `path`.
pub fn action_value(
    sys: &MultiChannelSystem,
    prof: &FeedbackProfile,
    path: &DiscretePath,
) -> Result<f64> {
    check_path_dim(sys, path)?;
    Ok(ActionKernel::new(sys, prof)?.eval(&path.data, path.dt(), None))
}

/// Gradient of [`action_value`] with respect to the movable points: indices
/// `1..=N` for a free end, `1..N` for a fixed end.
pub fn action_gradient(
    sys: &MultiChannelSystem,
    prof: &FeedbackProfile,
    path: &DiscretePath,
    end: Endpoint,
) -> Result<Vec<Vec<f64>>> {
    check_path_dim(sys, path)?;
    let k = ActionKernel::new(sys, prof)?;
    let mut g = vec![0.0; path.data.len()];
    k.eval(&path.data, path.dt(), Some(&mut g));
    let last = match end {
        Endpoint::Free => path.intervals,
        Endpoint::Fixed => path.intervals - 1,
    };
    Ok((1..=last)
        .map(|i| g[i * path.dim..(i + 1) * path.dim].to_vec())
        .collect())
}

fn check_path_dim(sys: &MultiChannelSystem, path: &DiscretePath) -> Result<()> {
    if path.dim() != sys.dim() {
        return Err(Error::DimensionMismatch {
            expected: sys.dim(),
            got: path.dim(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionOptions {
    /// Stop when the norm of the projected gradient step falls below this.
    pub tol: f64,
    pub max_iters: usize,
    /// Number of initial paths; the warm start, if any, counts as one.
    pub starts: usize,
    /// Seed for the random constant-path starts.
    pub seed: u64,
    pub warm_start: Option<DiscretePath>,
}

impl Default for ActionOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iters: 50_000,
            starts: 8,
            seed: 0,
            warm_start: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionMinimum {
    pub path: DiscretePath,
    pub value: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
    /// Index of the start that produced the best path.
    pub start: usize,
}

/// Accelerated projected gradient with backtracking and function-value
/// restarts. Only points `first..=last` move. Returns the best iterate.
struct Descent<'a> {
    kernel: &'a ActionKernel,
    dom: &'a Domain,
    dt: f64,
    first: usize,
    last: usize,
    lipschitz: f64,
}

struct DescentResult {
    x: Vec<f64>,
    value: f64,
    iterations: usize,
    grad_norm: f64,
    converged: bool,
}

impl Descent<'_> {
    fn project(&self, x: &mut [f64]) {
        let d = self.kernel.d;
        for k in self.first..=self.last {
            self.dom.project_in_place(&mut x[k * d..(k + 1) * d]);
        }
    }

    fn run(&self, mut x: Vec<f64>, tol: f64, max_iters: usize) -> DescentResult {
        let d = self.kernel.d;
        let range = self.first * d..(self.last + 1) * d;
        self.project(&mut x);
        let mut fx = self.kernel.eval(&x, self.dt, None);
        let mut best = (fx, x.clone());
        let mut y = x.clone();
        let mut z = x.clone();
        let mut g = vec![0.0; x.len()];
        let mut t = 1.0f64;
        // start below the global bound; backtracking only ever raises it
        let mut lip = 0.25 * self.lipschitz;
        let mut grad_norm = f64::INFINITY;
        let mut converged = false;
        let mut iterations = 0;
        while iterations < max_iters {
            iterations += 1;
            let fy = self.kernel.eval(&y, self.dt, Some(&mut g));
            let fz = loop {
                z.copy_from_slice(&y);
                for i in range.clone() {
                    z[i] -= g[i] / lip;
                }
                self.project(&mut z);
                let mut lin = 0.0;
                let mut sq = 0.0;
                for i in range.clone() {
                    let dz = z[i] - y[i];
                    lin += g[i] * dz;
                    sq += dz * dz;
                }
                let fz = self.kernel.eval(&z, self.dt, None);
                grad_norm = lip * sq.sqrt();
                if fz <= fy + lin + 0.5 * lip * sq + 1e-15 * fy.abs() || lip >= self.lipschitz {
                    break fz;
                }
                lip = (2.0 * lip).min(self.lipschitz);
            };
            if fz > fx {
                // momentum overshoot: restart from the current iterate
                if t > 1.0 {
                    t = 1.0;
                    y.copy_from_slice(&x);
                    continue;
                }
            }
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let beta = (t - 1.0) / t_next;
            for i in 0..x.len() {
                y[i] = z[i] + beta * (z[i] - x[i]);
            }
            std::mem::swap(&mut x, &mut z);
            fx = fz;
            t = t_next;
            if fx < best.0 {
                best.0 = fx;
                best.1.copy_from_slice(&x);
            }
            if grad_norm < tol {
                converged = true;
                break;
            }
        }
        DescentResult {
            x: best.1,
            value: best.0,
            iterations,
            grad_norm,
            converged,
        }
    }
}

/// Upper bound on the Lipschitz constant of the action gradient.
fn lipschitz_bound(kernel: &ActionKernel, dt: f64) -> f64 {
    let inf_norm = |m: &Dense| {
        (0..m.rows())
            .map(|i| (0..m.cols()).map(|j| m.get(i, j).abs()).sum::<f64>())
            .fold(0.0, f64::max)
    };
    let one_norm = |m: &Dense| {
        (0..m.cols())
            .map(|j| (0..m.rows()).map(|i| m.get(i, j).abs()).sum::<f64>())
            .fold(0.0, f64::max)
    };
    // ||M||_2 <= sqrt(||M||_1 ||M||_inf)
    let a = (inf_norm(&kernel.acl) * one_norm(&kernel.acl)).sqrt();
    let p = (inf_norm(&kernel.prec) * one_norm(&kernel.prec)).sqrt();
    dt * p * (2.0 / dt + a).powi(2)
}

/// Minimizes the action over paths from `x0` (to `x_end`, if given) that stay
/// in the closed domain. Multi-start: warm start, the projected noise-free
/// flow, the constant path (or straight line), and constant paths at random
/// points of the domain.
#[allow(clippy::too_many_arguments)]
pub fn minimize_action(
    sys: &MultiChannelSystem,
    prof: &FeedbackProfile,
    dom: &Domain,
    x0: &[f64],
    x_end: Option<&[f64]>,
    horizon: f64,
    intervals: usize,
    opts: &ActionOptions,
) -> Result<ActionMinimum> {
    let d = sys.dim();
    if dom.dim() != d || x0.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: if dom.dim() != d { dom.dim() } else { x0.len() },
        });
    }
    if intervals < 1 || !(horizon.is_finite() && horizon > 0.0) {
        return Err(Error::Precondition("need T > 0 and N >= 1".into()));
    }
    if dom.signed_distance(x0) > CLOSURE_TOL {
        return Err(Error::Precondition("x0 lies outside the closed domain".into()));
    }
    if let Some(y) = x_end {
        if y.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: y.len(),
            });
        }
        if dom.signed_distance(y) > CLOSURE_TOL {
            return Err(Error::Precondition("x_end lies outside the closed domain".into()));
        }
    }
    if x_end.is_some() && intervals < 2 {
        return Err(Error::Precondition("a pinned path needs N >= 2".into()));
    }
    let kernel = ActionKernel::new(sys, prof)?;
    let dt = horizon / intervals as f64;
    let x0 = dom.project(x0);
    let x_end = x_end.map(|y| dom.project(y));

    let starts = initial_paths(&kernel, dom, &x0, x_end.as_deref(), horizon, intervals, opts)?;
    let descent = Descent {
        kernel: &kernel,
        dom,
        dt,
        first: 1,
        last: if x_end.is_some() { intervals - 1 } else { intervals },
        lipschitz: lipschitz_bound(&kernel, dt),
    };
    let results: Vec<DescentResult> = starts
        .into_par_iter()
        .map(|p| descent.run(p, opts.tol, opts.max_iters))
        .collect();
    let (start, best) = results
        .into_iter()
        .enumerate()
        .min_by(|a, b| a.1.value.total_cmp(&b.1.value).then(a.0.cmp(&b.0)))
        .expect("at least one start");
    Ok(ActionMinimum {
        path: DiscretePath {
            horizon,
            intervals,
            dim: d,
            data: best.x,
        },
        value: best.value,
        iterations: best.iterations,
        grad_norm: best.grad_norm,
        converged: best.converged,
        start,
    })
}

fn initial_paths(
    kernel: &ActionKernel,
    dom: &Domain,
    x0: &[f64],
    x_end: Option<&[f64]>,
    horizon: f64,
    intervals: usize,
    opts: &ActionOptions,
) -> Result<Vec<Vec<f64>>> {
    let d = kernel.d;
    let n = intervals;
    let total = opts.starts.max(1);
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(total);
    if let Some(w) = &opts.warm_start {
        if w.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: w.dim(),
            });
        }
        let w = if w.intervals() == n && w.horizon() == horizon {
            w.clone()
        } else {
            w.dilate(horizon, n)
        };
        out.push(w.data);
    }
    // noise-free flow on the path grid
    let acl = DMatrix::from_fn(d, d, |i, j| kernel.acl.get(i, j));
    let mut rk = Rk4::new(&acl);
    let mut flow = Vec::with_capacity((n + 1) * d);
    flow.extend_from_slice(x0);
    let mut next = vec![0.0; d];
    for k in 0..n {
        rk.step(&flow[k * d..(k + 1) * d], horizon / n as f64, &mut next);
        if next.iter().any(|v| !v.is_finite()) {
            next.copy_from_slice(&flow[k * d..(k + 1) * d]);
        }
        dom.project_in_place(&mut next);
        flow.extend_from_slice(&next);
    }
    out.push(flow);
    out.push(DiscretePath::constant(horizon, n, x0).data);
    let (lo, hi) = dom.bounding_box();
    let rng = CounterRng::new(opts.seed);
    let mut stream = 0u64;
    while out.len() < total {
        let mut y: Vec<f64> = (0..d)
            .map(|j| rng.uniform_in(stream, j as u64, lo[j], hi[j]))
            .collect();
        stream += 1;
        dom.project_in_place(&mut y);
        let mut p = DiscretePath::constant(horizon, n, &y).data;
        p[..d].copy_from_slice(x0);
        out.push(p);
    }
    out.truncate(total);
    if let Some(y) = x_end {
        // bend every start so it ends at x_end
        for p in &mut out {
            let shift: Vec<f64> = (0..d).map(|j| y[j] - p[n * d + j]).collect();
            for k in 1..=n {
                let w = k as f64 / n as f64;
                for j in 0..d {
                    p[k * d + j] += w * shift[j];
                }
            }
            p[n * d..].copy_from_slice(y);
        }
    }
    for p in &mut out {
        p[..d].copy_from_slice(x0);
    }
    Ok(out)
}

/// Horizon schedule and optimizer settings for [`rate`].
#[derive(Debug, Clone, PartialEq)]
pub struct RateOptions {
    pub schedule: Vec<f64>,
    /// Path intervals per unit of time.
    pub n_per_t: f64,
    pub action: ActionOptions,
}

impl Default for RateOptions {
    fn default() -> Self {
        Self {
            schedule: vec![5.0, 10.0, 20.0],
            n_per_t: 10.0,
            action: ActionOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RateMethod {
    PathOpt,
    Pde,
    Mc,
    HoverOracle,
}

/// Minimal action per unit time, with the evidence behind it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateEstimate {
    pub value: f64,
    pub method: RateMethod,
    pub horizons_used: Vec<f64>,
    /// `S*(T)` per horizon.
    pub s_star: Vec<f64>,
    pub iterations: Vec<usize>,
    pub grad_norms: Vec<f64>,
    /// `S*(T)/T` is neither nondecreasing nor nonincreasing.
    pub non_monotone: bool,
    /// Some horizon stopped at the iteration cap.
    pub partial: bool,
}

impl RateEstimate {
    pub fn s_over_t(&self) -> Vec<f64> {
        self.s_star
            .iter()
            .zip(&self.horizons_used)
            .map(|(s, t)| s / t)
            .collect()
    }

    /// CSV `T,S_star,S_star_over_T`.
    pub fn to_table(&self) -> Table {
        let mut t = Table::new(["T", "S_star", "S_star_over_T"]);
        for (h, s) in self.horizons_used.iter().zip(&self.s_star) {
            t.push_numbers(&[*h, *s, s / h]);
        }
        t
    }
}

fn is_monotone(xs: &[f64]) -> bool {
    let tol = 1e-9;
    let up = xs.windows(2).all(|w| w[1] >= w[0] - tol * w[0].abs().max(1.0));
    let down = xs.windows(2).all(|w| w[1] <= w[0] + tol * w[0].abs().max(1.0));
    up || down
}

#[allow(clippy::too_many_arguments)]
fn rate_impl(
    sys: &MultiChannelSystem,
    prof: &FeedbackProfile,
    dom: &Domain,
    x0: &[f64],
    x_end: Option<&[f64]>,
    schedule: &[f64],
    n_per_t: f64,
    opts: &ActionOptions,
) -> Result<RateEstimate> {
    if schedule.len() < 3 {
        return Err(Error::Precondition("horizon schedule needs at least 3 entries".into()));
    }
    if schedule.windows(2).any(|w| w[1] <= w[0]) || schedule[0] <= 0.0 {
        return Err(Error::Precondition("horizon schedule must increase from T > 0".into()));
    }
    if !(n_per_t.is_finite() && n_per_t > 0.0) {
        return Err(Error::Precondition("intervals per unit time must be positive".into()));
    }
    let mut s_star = Vec::with_capacity(schedule.len());
    let mut iterations = Vec::new();
    let mut grad_norms = Vec::new();
    let mut partial = false;
    let mut o = opts.clone();
    for &t in schedule {
        let n = ((t * n_per_t).round() as usize).max(2);
        let m = minimize_action(sys, prof, dom, x0, x_end, t, n, &o)?;
        s_star.push(m.value);
        iterations.push(m.iterations);
        grad_norms.push(m.grad_norm);
        partial |= !m.converged;
        o.warm_start = Some(m.path);
    }
    let k = schedule.len();
    // tail slope: the constant boundary-layer cost cancels
    let slope = (s_star[k - 1] - s_star[k - 2]) / (schedule[k - 1] - schedule[k - 2]);
    let per_t: Vec<f64> = s_star.iter().zip(schedule).map(|(s, t)| s / t).collect();
    Ok(RateEstimate {
        value: slope.max(0.0),
        method: RateMethod::PathOpt,
        horizons_used: schedule.to_vec(),
        s_star,
        iterations,
        grad_norms,
        non_monotone: !is_monotone(&per_t),
        partial,
    })
}

/// Exit rate from minimal actions over an increasing horizon schedule. Each
/// horizon is warm-started from the previous optimum, time-dilated. The
/// reported value is the slope of `S*(T)` over the last two horizons.
pub fn rate(
    sys: &MultiChannelSystem,
    prof: &FeedbackProfile,
    dom: &Domain,
    x0: &[f64],
    schedule: &[f64],
    n_per_t: f64,
    opts: &ActionOptions,
) -> Result<RateEstimate> {
    rate_impl(sys, prof, dom, x0, None, schedule, n_per_t, opts)
}

/// As [`rate`], with paths pinned to `x_end` at the final time.
#[allow(clippy::too_many_arguments)]
pub fn endpoint_rate(
    sys: &MultiChannelSystem,
    prof: &FeedbackProfile,
    dom: &Domain,
    x0: &[f64],
    x_end: &[f64],
    schedule: &[f64],
    n_per_t: f64,
    opts: &ActionOptions,
) -> Result<RateEstimate> {
    rate_impl(sys, prof, dom, x0, Some(x_end), schedule, n_per_t, opts)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HoverPoint {
    pub value: f64,
    pub point: Vec<f64>,
}

/// Minimum over the closed domain of the per-time action of a resting path,
/// `1/2 (A_cl x)^T P (A_cl x)`. A grid search with `resolution` nodes per axis
/// picks the lexicographically first minimizer, then projected gradient
/// descent polishes it (the objective is convex on a convex set).
pub fn hovering_rate_oracle(
    sys: &MultiChannelSystem,
    prof: &FeedbackProfile,
    dom: &Domain,
    resolution: usize,
) -> Result<HoverPoint> {
    let d = sys.dim();
    if dom.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: dom.dim(),
        });
    }
    let resolution = resolution.max(2);
    let acl = closed_loop_matrix(sys, prof)?;
    let m = acl.transpose() * sys.precision() * &acl;
    let m = (&m + m.transpose()) * 0.5;
    let md = Dense::from_matrix(&m);
    let f = |x: &[f64]| 0.5 * md.quad_form(x);
    let (lo, hi) = dom.bounding_box();
    let total = resolution
        .checked_pow(d as u32)
        .filter(|&t| t <= 50_000_000)
        .ok_or_else(|| Error::Precondition("hover grid too large".into()))?;
    let mut idx = vec![0usize; d];
    let mut x = vec![0.0; d];
    let mut best = (f64::INFINITY, vec![0.0; d]);
    for _ in 0..total {
        for j in 0..d {
            x[j] = lo[j] + (hi[j] - lo[j]) * idx[j] as f64 / (resolution - 1) as f64;
        }
        dom.project_in_place(&mut x);
        let v = f(&x);
        if v < best.0 {
            best = (v, x.clone());
        }
        // odometer increment, last axis fastest (lexicographic order)
        for j in (0..d).rev() {
            idx[j] += 1;
            if idx[j] < resolution {
                break;
            }
            idx[j] = 0;
        }
    }
    let lmax = m.symmetric_eigenvalues().iter().copied().fold(0.0, f64::max);
    let mut y = best.1;
    if lmax > 0.0 {
        let mut g = vec![0.0; d];
        let mut next = vec![0.0; d];
        for _ in 0..100_000 {
            md.mul_vec(&y, &mut g);
            for j in 0..d {
                next[j] = y[j] - g[j] / lmax;
            }
            dom.project_in_place(&mut next);
            let step = next
                .iter()
                .zip(&y)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if f(&next) <= f(&y) {
                y.copy_from_slice(&next);
            }
            if step < 1e-15 * (1.0 + y.iter().map(|v| v.abs()).fold(0.0, f64::max)) {
                break;
            }
        }
    }
    Ok(HoverPoint {
        value: f(&y).max(0.0),
        point: y,
    })
}

/// Rates on the inflated and deflated domains `D_{+delta}` and `D_{-delta}`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DomainSensitivity {
    pub delta: f64,
    pub inflated: RateEstimate,
    pub deflated: RateEstimate,
    pub gap: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn rate_domain_sensitivity(
    sys: &MultiChannelSystem,
    prof: &FeedbackProfile,
    dom: &Domain,
    x0: &[f64],
    delta: f64,
    schedule: &[f64],
    n_per_t: f64,
    opts: &ActionOptions,
) -> Result<DomainSensitivity> {
    if !(delta.is_finite() && delta > 0.0) {
        return Err(Error::Precondition(format!("delta must be positive, got {delta}")));
    }
    let inner = dom.perturb(-delta)?;
    let outer = dom.perturb(delta)?;
    if inner.signed_distance(x0) > CLOSURE_TOL {
        return Err(Error::Precondition("x0 must lie in the deflated domain".into()));
    }
    let inflated = rate(sys, prof, &outer, x0, schedule, n_per_t, opts)?;
    let deflated = rate(sys, prof, &inner, x0, schedule, n_per_t, opts)?;
    let gap = (inflated.value - deflated.value).abs();
    Ok(DomainSensitivity {
        delta,
        inflated,
        deflated,
        gap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::flow;

    fn scalar(a: f64, sigma: f64) -> (MultiChannelSystem, FeedbackProfile) {
        let sys = MultiChannelSystem::scalar(a, &[], sigma, 0.1).unwrap();
        let prof = FeedbackProfile::zeros(&sys);
        (sys, prof)
    }

    #[test]
    fn flow_has_vanishing_action() {
        let (sys, prof) = scalar(-1.0, 1.0);
        let tr = flow(&sys, &prof, &[1.0], 1.0, 1.0 / 4096.0).unwrap();
        let p = DiscretePath::from_trajectory(&tr).unwrap();
        assert_eq!(p.intervals(), 4096);
        assert!(action_value(&sys, &prof, &p).unwrap() < 1e-6);
    }

    #[test]
    fn unit_speed_line_has_half_action() {
        let (sys, prof) = scalar(0.0, 1.0);
        for n in [1, 7, 100] {
            let p = DiscretePath::from_fn(1.0, n, 1, |t, x| x[0] = t);
            let s = action_value(&sys, &prof, &p).unwrap();
            assert!((s - 0.5).abs() < 1e-14, "N={n}: {s}");
        }
    }

    #[test]
    fn doubling_sigma_quarters_action_and_gradient() {
        let (s1, prof) = scalar(0.7, 1.0);
        let (s2, _) = scalar(0.7, 2.0);
        let p = DiscretePath::from_fn(2.0, 13, 1, |t, x| x[0] = (3.0 * t).sin());
        let a1 = action_value(&s1, &prof, &p).unwrap();
        let a2 = action_value(&s2, &prof, &p).unwrap();
        assert!((a2 - a1 / 4.0).abs() < 1e-12 * a1);
        let g1 = action_gradient(&s1, &prof, &p, Endpoint::Free).unwrap();
        let g2 = action_gradient(&s2, &prof, &p, Endpoint::Free).unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert!((b[0] - a[0] / 4.0).abs() < 1e-12 * (1.0 + a[0].abs()));
        }
    }

    #[test]
    fn gradient_vanishes_at_rest_on_equilibrium() {
        let (sys, prof) = scalar(-2.0, 1.0);
        let p = DiscretePath::constant(1.0, 10, &[0.0]);
        let g = action_gradient(&sys, &prof, &p, Endpoint::Fixed).unwrap();
        assert_eq!(g.len(), 9);
        assert!(g.iter().all(|v| v[0] == 0.0));
    }

    #[test]
    fn dilation_preserves_shape() {
        let p = DiscretePath::from_fn(1.0, 10, 1, |t, x| x[0] = t);
        let q = p.dilate(2.0, 40);
        assert_eq!(q.intervals(), 40);
        for k in 0..=40 {
            assert!((q.point(k)[0] - q.time(k) / 2.0).abs() < 1e-14);
        }
    }

    #[test]
    fn stable_rest_at_equilibrium() {
        let (sys, prof) = scalar(-1.0, 1.0);
        let dom = Domain::interval(-1.0, 1.0).unwrap();
        let m = minimize_action(&sys, &prof, &dom, &[0.0], None, 5.0, 50, &Default::default())
            .unwrap();
        assert!(m.value <= 1e-8);
    }

    #[test]
    fn unstable_free_end_relaxes_along_the_flow() {
        // rest on x = 1 at cost 1/2 per time, then leave along the smooth-fit
        // arc cosh(t), which reaches x = 3 at acosh 3 for cost (1 - e^{-2s})/4
        let (sys, prof) = scalar(1.0, 1.0);
        let dom = Domain::interval(1.0, 3.0).unwrap();
        let t = 20.0;
        let m = minimize_action(&sys, &prof, &dom, &[1.0], None, t, 2000, &Default::default())
            .unwrap();
        let s = 3f64.acosh();
        let oracle = 0.5 * (t - s) + 0.25 * (1.0 - (-2.0 * s).exp());
        assert!((m.value - oracle).abs() < 1e-3 * oracle, "{} vs {oracle}", m.value);
        assert!(m.path.is_feasible(&dom));
    }

    #[test]
    fn free_drift_endpoint_is_a_straight_line() {
        let (sys, prof) = scalar(0.0, 1.0);
        let dom = Domain::interval(-100.0, 100.0).unwrap();
        let m = minimize_action(
            &sys,
            &prof,
            &dom,
            &[0.0],
            Some(&[1.0]),
            1.0,
            50,
            &Default::default(),
        )
        .unwrap();
        assert!((m.value - 0.5).abs() < 1e-3);
        for (k, p) in m.path.points().enumerate() {
            assert!((p[0] - m.path.time(k)).abs() < 1e-4);
        }
    }

    #[test]
    fn infeasible_endpoints_rejected() {
        let (sys, prof) = scalar(0.0, 1.0);
        let dom = Domain::interval(0.0, 1.0).unwrap();
        let o = ActionOptions::default();
        assert!(minimize_action(&sys, &prof, &dom, &[2.0], None, 1.0, 10, &o).is_err());
        assert!(minimize_action(&sys, &prof, &dom, &[0.5], Some(&[-1.0]), 1.0, 10, &o).is_err());
    }

    #[test]
    fn hovering_oracle_examples() {
        let (sys, prof) = scalar(1.0, 1.0);
        let dom = Domain::interval(1.0, 3.0).unwrap();
        let h = hovering_rate_oracle(&sys, &prof, &dom, 201).unwrap();
        assert!((h.value - 0.5).abs() < 1e-12);
        assert!((h.point[0] - 1.0).abs() < 1e-12);
        let (sys2, prof2) = scalar(2.0, 2.0);
        let h2 = hovering_rate_oracle(&sys2, &prof2, &dom, 201).unwrap();
        assert!((h2.value - 0.5).abs() < 1e-12);
        let inner = Domain::interval(-1.0, 1.0).unwrap();
        assert_eq!(hovering_rate_oracle(&sys, &prof, &inner, 201).unwrap().value, 0.0);
    }

    #[test]
    fn interior_equilibrium_rate_is_zero() {
        let (sys, prof) = scalar(-1.0, 1.0);
        let dom = Domain::interval(-1.0, 1.0).unwrap();
        let r = rate(&sys, &prof, &dom, &[0.5], &[2.0, 4.0, 8.0], 10.0, &Default::default())
            .unwrap();
        assert!(r.value <= 1e-6, "{}", r.value);
        assert_eq!(r.to_table().len(), 3);
    }

    #[test]
    fn short_schedule_rejected() {
        let (sys, prof) = scalar(1.0, 1.0);
        let dom = Domain::interval(1.0, 3.0).unwrap();
        assert!(rate(&sys, &prof, &dom, &[2.0], &[1.0, 2.0], 10.0, &Default::default()).is_err());
    }
}
