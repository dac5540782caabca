//! The noncooperative exit-rate game: every player owns one input channel and
//! picks its feedback gain from a box to minimize the exit rate of the closed
//! loop.
//!
//! Best responses use a pattern search with complete polling over the gain
//! entries. Poll directions are ordered `-e_0, -e_1, ..., -e_{m-1}, +e_{m-1},
//! ..., +e_0`, which is lexicographic order of the perturbation vectors, and
//! ties keep the earliest direction. Players move round-robin in index order.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::action::{rate, RateOptions};
use crate::error::{Error, Result};
use crate::model::{Domain, FeedbackProfile, MultiChannelSystem};
use crate::rng::CounterRng;

#[derive(Debug, Clone, PartialEq)]
pub struct GameConfig {
    /// Entrywise gain bounds per player.
    pub lower: Vec<DMatrix<f64>>,
    pub upper: Vec<DMatrix<f64>>,
    pub rate: RateOptions,
    /// Initial state of the rate paths; the domain center when `None`.
    pub x0: Option<Vec<f64>>,
    /// A round whose largest improvement is below `eta` ends the iteration.
    pub eta: f64,
    pub max_rounds: usize,
    /// Random gains per player in [`nash_residual`].
    pub probes: usize,
    pub seed: u64,
    /// A poll point must beat the incumbent by more than this.
    pub accept_tol: f64,
}

impl GameConfig {
    /// Same scalar interval `[lo, hi]` for every entry of every player's gain.
    pub fn uniform_bounds(sys: &MultiChannelSystem, lo: f64, hi: f64) -> Self {
        let shape = |b: &DMatrix<f64>| (b.ncols(), sys.dim());
        Self {
            lower: sys
                .b()
                .iter()
                .map(|b| {
                    let (r, c) = shape(b);
                    DMatrix::from_element(r, c, lo)
                })
                .collect(),
            upper: sys
                .b()
                .iter()
                .map(|b| {
                    let (r, c) = shape(b);
                    DMatrix::from_element(r, c, hi)
                })
                .collect(),
            rate: RateOptions::default(),
            x0: None,
            eta: 1e-3,
            max_rounds: 20,
            probes: 32,
            seed: 0,
            accept_tol: 1e-7,
        }
    }

    fn validate(&self, sys: &MultiChannelSystem) -> Result<()> {
        if self.lower.len() != sys.players() || self.upper.len() != sys.players() {
            return Err(Error::InconsistentDimensions(format!(
                "gain bounds given for {} / {} players, system has {}",
                self.lower.len(),
                self.upper.len(),
                sys.players()
            )));
        }
        for (i, (lo, hi)) in self.lower.iter().zip(&self.upper).enumerate() {
            let b = &sys.b()[i];
            if lo.shape() != (b.ncols(), sys.dim()) || hi.shape() != lo.shape() {
                return Err(Error::InconsistentDimensions(format!(
                    "gain bounds of player {i} have the wrong shape"
                )));
            }
            if lo.iter().zip(hi.iter()).any(|(l, h)| !(l <= h) || !l.is_finite() || !h.is_finite()) {
                return Err(Error::Precondition(format!(
                    "gain box of player {i} is empty"
                )));
            }
        }
        if !(self.eta > 0.0) {
            return Err(Error::Precondition(format!("eta must be positive, got {}", self.eta)));
        }
        Ok(())
    }

    fn within_bounds(&self, prof: &FeedbackProfile) -> bool {
        prof.gains()
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(k, (lo, hi))| {
                k.iter()
                    .zip(lo.iter().zip(hi.iter()))
                    .all(|(v, (l, h))| *v >= l - 1e-12 && *v <= h + 1e-12)
            })
    }

    fn start(&self, dom: &Domain) -> Vec<f64> {
        self.x0.clone().unwrap_or_else(|| dom.center())
    }
}

/// Exit rate of the closed loop under `prof`, as seen by `player`. All
/// players share the one closed loop, so the value does not depend on the
/// index beyond its validity.
pub fn player_rate(
    sys: &MultiChannelSystem,
    dom: &Domain,
    prof: &FeedbackProfile,
    player: usize,
    x0: &[f64],
    opts: &RateOptions,
) -> Result<f64> {
    if player >= sys.players() {
        return Err(Error::Precondition(format!(
            "player {player} out of range for {} players",
            sys.players()
        )));
    }
    Ok(rate(sys, prof, dom, x0, &opts.schedule, opts.n_per_t, &opts.action)?.value)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BestResponse {
    #[serde(serialize_with = "ser_matrix")]
    pub gain: DMatrix<f64>,
    pub rate: f64,
    pub incumbent_rate: f64,
    pub evaluations: usize,
    /// The player's input matrix is zero: the objective ignores the gain.
    pub no_influence: bool,
    /// An objective evaluation failed; `gain` is the best feasible iterate.
    pub aborted: Option<String>,
}

fn rate_at(
    sys: &MultiChannelSystem,
    dom: &Domain,
    prof: &FeedbackProfile,
    player: usize,
    gain: DMatrix<f64>,
    x0: &[f64],
    opts: &RateOptions,
) -> Result<f64> {
    let p = prof.with_gain(player, gain)?;
    player_rate(sys, dom, &p, player, x0, opts)
}

/// Pattern search for player `player`'s gain with the other gains fixed.
pub fn best_response(
    sys: &MultiChannelSystem,
    dom: &Domain,
    prof: &FeedbackProfile,
    player: usize,
    cfg: &GameConfig,
) -> Result<BestResponse> {
    cfg.validate(sys)?;
    if player >= sys.players() {
        return Err(Error::Precondition(format!("player {player} out of range")));
    }
    let x0 = cfg.start(dom);
    let mut gain = prof.gain(player).clone();
    let incumbent_rate = rate_at(sys, dom, prof, player, gain.clone(), &x0, &cfg.rate)?;
    if sys.b()[player].iter().all(|&v| v == 0.0) {
        return Ok(BestResponse {
            gain,
            rate: incumbent_rate,
            incumbent_rate,
            evaluations: 1,
            no_influence: true,
            aborted: None,
        });
    }
    let lo = &cfg.lower[player];
    let hi = &cfg.upper[player];
    let m = gain.len();
    let widths: Vec<f64> = (0..m).map(|e| hi[e] - lo[e]).collect();
    let movable: Vec<usize> = (0..m).filter(|&e| widths[e] > 0.0).collect();
    // poll directions as (entry, sign), in lexicographic order of perturbations
    let mut dirs: Vec<(usize, f64)> = movable.iter().map(|&e| (e, -1.0)).collect();
    dirs.extend(movable.iter().rev().map(|&e| (e, 1.0)));

    let mut best = incumbent_rate;
    let mut evaluations = 1;
    let mut scale = 0.25;
    let mut aborted = None;
    while scale >= 1e-4 && !dirs.is_empty() {
        let polls: Vec<DMatrix<f64>> = dirs
            .iter()
            .map(|&(e, s)| {
                let mut g = gain.clone();
                g[e] = (g[e] + s * scale * widths[e]).clamp(lo[e], hi[e]);
                g
            })
            .collect();
        let values: Vec<Option<Result<f64>>> = polls
            .par_iter()
            .map(|g| {
                if *g == gain {
                    None
                } else {
                    Some(rate_at(sys, dom, prof, player, g.clone(), &x0, &cfg.rate))
                }
            })
            .collect();
        let mut pick: Option<(usize, f64)> = None;
        for (k, v) in values.into_iter().enumerate() {
            match v {
                None => {}
                Some(Ok(r)) => {
                    evaluations += 1;
                    if pick.is_none_or(|(_, b)| r < b) {
                        pick = Some((k, r));
                    }
                }
                Some(Err(e)) => {
                    aborted = Some(e.to_string());
                }
            }
        }
        if aborted.is_some() {
            break;
        }
        match pick {
            Some((k, r)) if r < best - cfg.accept_tol => {
                gain = polls[k].clone();
                best = r;
            }
            _ => scale *= 0.5,
        }
    }
    Ok(BestResponse {
        gain,
        rate: best,
        incumbent_rate,
        evaluations,
        no_influence: false,
        aborted,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Move {
    pub round: usize,
    pub player: usize,
    pub old_rate: f64,
    pub new_rate: f64,
    #[serde(serialize_with = "ser_matrix")]
    pub gain: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GameResult {
    #[serde(serialize_with = "ser_profile")]
    pub profile: FeedbackProfile,
    /// Shared closed-loop rate at the final profile.
    pub rate: f64,
    pub history: Vec<Move>,
    pub rounds: usize,
    pub converged: bool,
    pub residual: f64,
}

/// Round-robin best responses until a round improves no player by `eta`.
pub fn nash_iterate(
    sys: &MultiChannelSystem,
    dom: &Domain,
    init: &FeedbackProfile,
    cfg: &GameConfig,
) -> Result<GameResult> {
    cfg.validate(sys)?;
    if !cfg.within_bounds(init) {
        return Err(Error::Precondition("initial profile violates the gain bounds".into()));
    }
    let x0 = cfg.start(dom);
    let mut prof = init.clone();
    let mut current = player_rate(sys, dom, &prof, 0, &x0, &cfg.rate)?;
    let mut history = Vec::new();
    let mut converged = false;
    let mut rounds = 0;
    while rounds < cfg.max_rounds {
        rounds += 1;
        let mut biggest = 0.0f64;
        for i in 0..sys.players() {
            let br = best_response(sys, dom, &prof, i, cfg)?;
            if let Some(msg) = br.aborted {
                return Err(Error::PartialResult(format!(
                    "best response of player {i} aborted: {msg}"
                )));
            }
            if br.rate < current - cfg.accept_tol {
                biggest = biggest.max(current - br.rate);
                history.push(Move {
                    round: rounds,
                    player: i,
                    old_rate: current,
                    new_rate: br.rate,
                    gain: br.gain.clone(),
                });
                prof = prof.with_gain(i, br.gain)?;
                current = br.rate;
            }
        }
        if biggest < cfg.eta {
            converged = true;
            break;
        }
    }
    let residual = nash_residual(sys, dom, &prof, cfg)?.residual;
    Ok(GameResult {
        profile: prof,
        rate: current,
        history,
        rounds,
        converged,
        residual,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NashResidual {
    pub residual: f64,
    pub per_player: Vec<f64>,
}

/// Largest unilateral improvement found by random in-bounds probes and a
/// fresh best response, per player.
pub fn nash_residual(
    sys: &MultiChannelSystem,
    dom: &Domain,
    prof: &FeedbackProfile,
    cfg: &GameConfig,
) -> Result<NashResidual> {
    cfg.validate(sys)?;
    let x0 = cfg.start(dom);
    let base = player_rate(sys, dom, prof, 0, &x0, &cfg.rate)?;
    let rng = CounterRng::new(cfg.seed);
    let mut per_player = Vec::with_capacity(sys.players());
    for i in 0..sys.players() {
        if sys.b()[i].iter().all(|&v| v == 0.0) {
            per_player.push(0.0);
            continue;
        }
        let (lo, hi) = (&cfg.lower[i], &cfg.upper[i]);
        let probes: Vec<DMatrix<f64>> = (0..cfg.probes)
            .map(|p| {
                let mut g = lo.clone();
                for e in 0..g.len() {
                    let index = (p * g.len() + e) as u64;
                    g[e] = rng.uniform_in(i as u64, index, lo[e], hi[e]);
                }
                g
            })
            .collect();
        let rates: Vec<f64> = probes
            .into_par_iter()
            .map(|g| rate_at(sys, dom, prof, i, g, &x0, &cfg.rate))
            .collect::<Result<_>>()?;
        let br = best_response(sys, dom, prof, i, cfg)?;
        let best = rates.iter().copied().fold(br.rate, f64::min);
        per_player.push((base - best).max(0.0));
    }
    Ok(NashResidual {
        residual: per_player.iter().copied().fold(0.0, f64::max),
        per_player,
    })
}

/// `sum_i [ r(a) - r(b_i, a_{-i}) ]`.
pub fn ekeland_gap(
    sys: &MultiChannelSystem,
    dom: &Domain,
    a: &FeedbackProfile,
    b: &FeedbackProfile,
    x0: &[f64],
    opts: &RateOptions,
) -> Result<f64> {
    if a.players() != sys.players() || b.players() != sys.players() {
        return Err(Error::InconsistentDimensions("profiles differ in player count".into()));
    }
    let base = player_rate(sys, dom, a, 0, x0, opts)?;
    let mut gap = 0.0;
    for i in 0..sys.players() {
        if a.gain(i) == b.gain(i) {
            continue;
        }
        gap += base - rate_at(sys, dom, a, i, b.gain(i).clone(), x0, opts)?;
    }
    Ok(gap)
}

/// Gains as nested rows, the layout of the `gains` configuration key.
pub fn profile_rows(prof: &FeedbackProfile) -> Vec<Vec<Vec<f64>>> {
    prof.gains().iter().map(matrix_rows).collect()
}

pub(crate) fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn ser_matrix<S: serde::Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    matrix_rows(m).serialize(s)
}

fn ser_profile<S: serde::Serializer>(
    p: &FeedbackProfile,
    s: S,
) -> std::result::Result<S::Ok, S::Error> {
    profile_rows(p).serialize(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_game() -> (MultiChannelSystem, Domain, GameConfig) {
        let sys = MultiChannelSystem::scalar(1.0, &[1.0, 1.0], 1.0, 0.1).unwrap();
        let dom = Domain::interval(1.0, 3.0).unwrap();
        let mut cfg = GameConfig::uniform_bounds(&sys, -0.25, 0.25);
        cfg.rate.action.starts = 4;
        (sys, dom, cfg)
    }

    #[test]
    fn player_rate_examples() {
        let (sys, dom, cfg) = scalar_game();
        let x0 = [2.0];
        for (k, want) in [(-0.5, 0.0), (-0.25, 0.125), (0.0, 0.5)] {
            let p = FeedbackProfile::scalar(&sys, &[k, k]).unwrap();
            let r = player_rate(&sys, &dom, &p, 1, &x0, &cfg.rate).unwrap();
            assert!((r - want).abs() <= 0.02 * want + 1e-6, "k={k}: {r}");
        }
        let p = FeedbackProfile::zeros(&sys);
        assert!(player_rate(&sys, &dom, &p, 2, &x0, &cfg.rate).is_err());
    }

    #[test]
    fn best_response_hits_the_left_bound() {
        let (sys, dom, cfg) = scalar_game();
        let p = FeedbackProfile::scalar(&sys, &[0.0, -0.25]).unwrap();
        let br = best_response(&sys, &dom, &p, 0, &cfg).unwrap();
        assert_eq!(br.gain[(0, 0)], -0.25);
        assert!((br.rate - 0.125).abs() < 0.02 * 0.125);
        assert!(br.rate <= br.incumbent_rate);
        assert!(!br.no_influence);
    }

    #[test]
    fn silent_player_has_no_influence() {
        let sys = MultiChannelSystem::scalar(1.0, &[0.0], 1.0, 0.1).unwrap();
        let dom = Domain::interval(1.0, 3.0).unwrap();
        let mut cfg = GameConfig::uniform_bounds(&sys, -1.0, 1.0);
        cfg.rate.action.starts = 2;
        cfg.probes = 4;
        let p = FeedbackProfile::scalar(&sys, &[0.3]).unwrap();
        let br = best_response(&sys, &dom, &p, 0, &cfg).unwrap();
        assert!(br.no_influence);
        assert_eq!(br.gain[(0, 0)], 0.3);
        assert_eq!(nash_residual(&sys, &dom, &p, &cfg).unwrap().residual, 0.0);
    }

    #[test]
    fn zero_rounds_returns_init() {
        let (sys, dom, mut cfg) = scalar_game();
        cfg.max_rounds = 0;
        cfg.probes = 2;
        let init = FeedbackProfile::zeros(&sys);
        let g = nash_iterate(&sys, &dom, &init, &cfg).unwrap();
        assert!(!g.converged);
        assert!(g.history.is_empty());
        assert_eq!(g.profile, init);
    }

    #[test]
    fn out_of_bounds_init_rejected() {
        let (sys, dom, cfg) = scalar_game();
        let init = FeedbackProfile::scalar(&sys, &[0.5, 0.0]).unwrap();
        assert!(nash_iterate(&sys, &dom, &init, &cfg).is_err());
    }

    #[test]
    fn reachable_zero_drift_gives_zero_rate() {
        let (sys, dom, mut cfg) = scalar_game();
        cfg = GameConfig {
            lower: vec![DMatrix::from_element(1, 1, -1.0); 2],
            upper: vec![DMatrix::from_element(1, 1, 0.0); 2],
            probes: 4,
            ..cfg
        };
        let init = FeedbackProfile::zeros(&sys);
        let g = nash_iterate(&sys, &dom, &init, &cfg).unwrap();
        assert!(g.converged);
        assert!(g.rate < 1e-6, "{}", g.rate);
    }

    #[test]
    fn ekeland_gap_of_identical_profiles_is_zero() {
        let (sys, dom, cfg) = scalar_game();
        let p = FeedbackProfile::scalar(&sys, &[0.1, -0.2]).unwrap();
        assert_eq!(ekeland_gap(&sys, &dom, &p, &p, &[2.0], &cfg.rate).unwrap(), 0.0);
    }

    #[test]
    fn transcript_serializes_gains_as_rows() {
        let (sys, _, _) = scalar_game();
        let p = FeedbackProfile::scalar(&sys, &[0.1, -0.2]).unwrap();
        assert_eq!(profile_rows(&p), vec![vec![vec![0.1]], vec![vec![-0.2]]]);
    }
}
