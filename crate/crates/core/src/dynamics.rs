//! The noise-free closed loop `x' = A_cl x` and its exit behavior.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::Dense;
use crate::model::{Domain, FeedbackProfile, MultiChannelSystem};
use crate::output::{coord_header, Table};

/// Closed-loop matrix `A + sum_i B_i K_i`.
pub fn closed_loop_matrix(
    sys: &MultiChannelSystem,
    prof: &FeedbackProfile,
) -> Result<DMatrix<f64>> {
    if prof.players() != sys.players() {
        return Err(Error::InconsistentDimensions(format!(
            "profile has {} gains, system has {} players",
            prof.players(),
            sys.players()
        )));
    }
    let mut acl = sys.a().clone();
    for (b, k) in sys.b().iter().zip(prof.gains()) {
        if b.ncols() != k.nrows() || k.ncols() != sys.dim() {
            return Err(Error::InconsistentDimensions(format!(
                "B is {}x{} but K is {}x{}",
                b.nrows(),
                b.ncols(),
                k.nrows(),
                k.ncols()
            )));
        }
        acl += b * k;
    }
    Ok(acl)
}

/// Sampled states on an increasing time grid starting at 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn dim(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }

    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("trajectory is never empty")
    }

    /// CSV with header `t,x1,...,xd`.
    pub fn to_table(&self) -> Table {
        let mut header = vec!["t".to_string()];
        header.extend(coord_header("x", self.dim()));
        let mut t = Table::new(header);
        let mut row = Vec::with_capacity(self.dim() + 1);
        for (time, x) in self.times.iter().zip(&self.states) {
            row.clear();
            row.push(*time);
            row.extend_from_slice(x);
            t.push_numbers(&row);
        }
        t
    }
}

/// Number of steps and the step grid `k*dt`, with the final point at `t_end`.
pub(crate) fn time_grid(t_end: f64, dt: f64) -> Vec<f64> {
    let n = ((t_end / dt) - 1e-9).ceil().max(1.0) as usize;
    let mut times: Vec<f64> = (0..n).map(|k| k as f64 * dt).collect();
    times.push(t_end);
    times
}

/// One classical Runge–Kutta step of `x' = A x`.
pub(crate) struct Rk4 {
    a: Dense,
    k: [Vec<f64>; 4],
    tmp: Vec<f64>,
}

impl Rk4 {
    pub(crate) fn new(acl: &DMatrix<f64>) -> Self {
        let d = acl.nrows();
        Self {
            a: Dense::from_matrix(acl),
            k: [vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]],
            tmp: vec![0.0; d],
        }
    }

    pub(crate) fn step(&mut self, x: &[f64], h: f64, out: &mut [f64]) {
        let [k1, k2, k3, k4] = &mut self.k;
        self.a.mul_vec(x, k1);
        for ((t, xi), k) in self.tmp.iter_mut().zip(x).zip(k1.iter()) {
            *t = xi + 0.5 * h * k;
        }
        self.a.mul_vec(&self.tmp, k2);
        for ((t, xi), k) in self.tmp.iter_mut().zip(x).zip(k2.iter()) {
            *t = xi + 0.5 * h * k;
        }
        self.a.mul_vec(&self.tmp, k3);
        for ((t, xi), k) in self.tmp.iter_mut().zip(x).zip(k3.iter()) {
            *t = xi + h * k;
        }
        self.a.mul_vec(&self.tmp, k4);
        for (j, o) in out.iter_mut().enumerate() {
            *o = x[j] + h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
    }
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if !(v.is_finite() && v > 0.0) {
        return Err(Error::Precondition(format!("{name} must be positive, got {v}")));
    }
    Ok(())
}

/// Fixed-step RK4 integration of the closed loop from `x0` over `[0, t_end]`.
pub fn flow(
    sys: &MultiChannelSystem,
    prof: &FeedbackProfile,
    x0: &[f64],
    t_end: f64,
    dt: f64,
) -> Result<Trajectory> {
    check_positive("t_end", t_end)?;
    check_positive("dt", dt)?;
    if dt > t_end {
        return Err(Error::Precondition(format!("dt {dt} exceeds t_end {t_end}")));
    }
    if x0.len() != sys.dim() {
        return Err(Error::DimensionMismatch {
            expected: sys.dim(),
            got: x0.len(),
        });
    }
    let acl = closed_loop_matrix(sys, prof)?;
    flow_matrix(&acl, x0, t_end, dt)
}

pub(crate) fn flow_matrix(
    acl: &DMatrix<f64>,
    x0: &[f64],
    t_end: f64,
    dt: f64,
) -> Result<Trajectory> {
    let times = time_grid(t_end, dt);
    let mut rk = Rk4::new(acl);
    let mut states = Vec::with_capacity(times.len());
    states.push(x0.to_vec());
    for w in times.windows(2) {
        let h = w[1] - w[0];
        let mut next = vec![0.0; x0.len()];
        rk.step(states.last().unwrap(), h, &mut next);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::TrajectoryDiverged { t: w[1] });
        }
        states.push(next);
    }
    Ok(Trajectory { times, states })
}

/// Boundary tolerance of the crossing refinement.
pub const EXIT_TOLERANCE: f64 = 1e-10;

/// First time the noise-free closed loop leaves the closed domain, or `None`
/// if it stays in `D ∪ ∂D` up to `t_max`.
///
/// The state is checked on the RK4 grid; the crossing inside the first
/// offending step is refined by bisection on the sub-step length. Excursions
/// shorter than one step are not seen.
pub fn deterministic_exit_time(
    sys: &MultiChannelSystem,
    prof: &FeedbackProfile,
    dom: &Domain,
    x0: &[f64],
    t_max: f64,
    dt: f64,
) -> Result<Option<f64>> {
    check_positive("t_max", t_max)?;
    check_positive("dt", dt)?;
    if !dom.contains_closed(x0, EXIT_TOLERANCE)? {
        return Err(Error::Precondition(
            "initial state lies outside the closed domain".into(),
        ));
    }
    let acl = closed_loop_matrix(sys, prof)?;
    let mut rk = Rk4::new(&acl);
    let d = x0.len();
    let mut x = x0.to_vec();
    let mut next = vec![0.0; d];
    let times = time_grid(t_max, dt.min(t_max));
    for w in times.windows(2) {
        let h = w[1] - w[0];
        rk.step(&x, h, &mut next);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::TrajectoryDiverged { t: w[1] });
        }
        if dom.signed_distance(&next) > 0.0 {
            // bisection on the sub-step length
            let (mut lo, mut hi) = (0.0, h);
            let mut probe = vec![0.0; d];
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                rk.step(&x, mid, &mut probe);
                let s = dom.signed_distance(&probe);
                if s > 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                }
                if s.abs() <= EXIT_TOLERANCE || hi - lo <= f64::EPSILON * w[1].max(1.0) {
                    break;
                }
            }
            return Ok(Some(w[0] + 0.5 * (lo + hi)));
        }
        std::mem::swap(&mut x, &mut next);
    }
    Ok(None)
}
