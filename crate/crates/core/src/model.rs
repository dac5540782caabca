//! Problem data: the noisy multi-channel plant, the players' feedback gains
//! and the bounded domain the state must stay in.
//!
//! The plant is
//!
//! ```text
//! dx = (A + sum_i B_i K_i) x dt + sqrt(eps) * sigma dW
//! ```
//!
//! with a constant diffusion matrix `sigma`. Construction validates shapes and
//! uniform ellipticity (`sigma * sigma^T >= kappa I`, `kappa > 0`); every other
//! module relies on the precomputed noise precision `(sigma sigma^T)^{-1}`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest admissible eigenvalue of `sigma * sigma^T`.
pub const ELLIPTICITY_FLOOR: f64 = 1e-12;

/// Diagnostics produced by [`validate_system`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SystemReport {
    pub dim: usize,
    pub players: usize,
    pub input_dims: Vec<usize>,
    /// Least eigenvalue of `sigma * sigma^T`.
    pub kappa: f64,
    pub epsilon: f64,
    /// `epsilon == 0`: the deterministic limit. Allowed for simulation, rejected
    /// by the eigensolver.
    pub deterministic: bool,
}

/// Checks the standing assumptions on the system data and reports `kappa`.
pub fn validate_system(
    a: &DMatrix<f64>,
    b: &[DMatrix<f64>],
    sigma: &DMatrix<f64>,
    epsilon: f64,
) -> Result<SystemReport> {
    let d = a.nrows();
    if d == 0 || a.ncols() != d {
        return Err(Error::InconsistentDimensions(format!(
            "A must be square and nonempty, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if sigma.nrows() != d || sigma.ncols() != d {
        return Err(Error::InconsistentDimensions(format!(
            "sigma must be {d}x{d}, got {}x{}",
            sigma.nrows(),
            sigma.ncols()
        )));
    }
    let mut input_dims = Vec::with_capacity(b.len());
    for (i, bi) in b.iter().enumerate() {
        if bi.nrows() != d {
            return Err(Error::InconsistentDimensions(format!(
                "B[{i}] must have {d} rows, got {}",
                bi.nrows()
            )));
        }
        input_dims.push(bi.ncols());
    }
    let all_finite = a.iter().chain(sigma.iter()).all(|v| v.is_finite())
        && b.iter().all(|m| m.iter().all(|v| v.is_finite()));
    if !all_finite {
        return Err(Error::InconsistentDimensions(
            "matrix entries must be finite".into(),
        ));
    }
    if !epsilon.is_finite() || epsilon < 0.0 {
        return Err(Error::InvalidEpsilon(epsilon));
    }
    let diffusion = sigma * sigma.transpose();
    let kappa = diffusion
        .clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    if !(kappa > ELLIPTICITY_FLOOR) {
        return Err(Error::EllipticityViolated { kappa });
    }
    Ok(SystemReport {
        dim: d,
        players: b.len(),
        input_dims,
        kappa,
        epsilon,
        deterministic: epsilon == 0.0,
    })
}

/// The linear plant, its input channels and its noise.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiChannelSystem {
    a: DMatrix<f64>,
    b: Vec<DMatrix<f64>>,
    sigma: DMatrix<f64>,
    epsilon: f64,
    diffusion: DMatrix<f64>,
    precision: DMatrix<f64>,
    report: SystemReport,
}

impl MultiChannelSystem {
    pub fn new(
        a: DMatrix<f64>,
        b: Vec<DMatrix<f64>>,
        sigma: DMatrix<f64>,
        epsilon: f64,
    ) -> Result<Self> {
        let report = validate_system(&a, &b, &sigma, epsilon)?;
        let diffusion = &sigma * sigma.transpose();
        let precision = diffusion
            .clone()
            .cholesky()
            .ok_or(Error::EllipticityViolated {
                kappa: report.kappa,
            })?
            .inverse();
        // exact symmetry keeps quadratic forms reproducible
        let precision = (&precision + precision.transpose()) * 0.5;
        Ok(Self {
            a,
            b,
            sigma,
            epsilon,
            diffusion,
            precision,
            report,
        })
    }

    /// Scalar convenience constructor: `dx = (a + sum b_i k_i) x dt + sqrt(eps) s dW`.
    pub fn scalar(a: f64, b: &[f64], sigma: f64, epsilon: f64) -> Result<Self> {
        Self::new(
            DMatrix::from_element(1, 1, a),
            b.iter().map(|&bi| DMatrix::from_element(1, 1, bi)).collect(),
            DMatrix::from_element(1, 1, sigma),
            epsilon,
        )
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Result<Self> {
        if !epsilon.is_finite() || epsilon < 0.0 {
            return Err(Error::InvalidEpsilon(epsilon));
        }
        let mut out = self.clone();
        out.epsilon = epsilon;
        out.report.epsilon = epsilon;
        out.report.deterministic = epsilon == 0.0;
        Ok(out)
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn players(&self) -> usize {
        self.b.len()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &[DMatrix<f64>] {
        &self.b
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// `sigma * sigma^T`.
    pub fn diffusion(&self) -> &DMatrix<f64> {
        &self.diffusion
    }

    /// `(sigma * sigma^T)^{-1}`, the metric of the action functional.
    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    pub fn kappa(&self) -> f64 {
        self.report.kappa
    }

    pub fn report(&self) -> &SystemReport {
        &self.report
    }
}

/// One constant gain matrix per player, `K_i` of shape `r_i x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackProfile {
    gains: Vec<DMatrix<f64>>,
}

impl FeedbackProfile {
    pub fn new(sys: &MultiChannelSystem, gains: Vec<DMatrix<f64>>) -> Result<Self> {
        if gains.len() != sys.players() {
            return Err(Error::InconsistentDimensions(format!(
                "{} gains for {} players",
                gains.len(),
                sys.players()
            )));
        }
        for (i, (k, b)) in gains.iter().zip(sys.b()).enumerate() {
            if k.nrows() != b.ncols() || k.ncols() != sys.dim() {
                return Err(Error::InconsistentDimensions(format!(
                    "K[{i}] must be {}x{}, got {}x{}",
                    b.ncols(),
                    sys.dim(),
                    k.nrows(),
                    k.ncols()
                )));
            }
            if k.iter().any(|v| !v.is_finite()) {
                return Err(Error::InconsistentDimensions(format!(
                    "K[{i}] has non-finite entries"
                )));
            }
        }
        Ok(Self { gains })
    }

    /// All-zero gains (open loop).
    pub fn zeros(sys: &MultiChannelSystem) -> Self {
        Self {
            gains: sys
                .b()
                .iter()
                .map(|b| DMatrix::zeros(b.ncols(), sys.dim()))
                .collect(),
        }
    }

    pub fn scalar(sys: &MultiChannelSystem, gains: &[f64]) -> Result<Self> {
        Self::new(
            sys,
            gains
                .iter()
                .map(|&k| DMatrix::from_element(1, 1, k))
                .collect(),
        )
    }

    pub fn gains(&self) -> &[DMatrix<f64>] {
        &self.gains
    }

    pub fn gain(&self, player: usize) -> &DMatrix<f64> {
        &self.gains[player]
    }

    pub fn players(&self) -> usize {
        self.gains.len()
    }

    /// The profile `(K_i, K_{-i})`: player `i` deviates, everyone else stays put.
    pub fn with_gain(&self, player: usize, gain: DMatrix<f64>) -> Result<Self> {
        let old = self.gains.get(player).ok_or_else(|| {
            Error::Precondition(format!("player index {player} out of range"))
        })?;
        if old.shape() != gain.shape() {
            return Err(Error::InconsistentDimensions(format!(
                "K[{player}] must be {}x{}, got {}x{}",
                old.nrows(),
                old.ncols(),
                gain.nrows(),
                gain.ncols()
            )));
        }
        let mut gains = self.gains.clone();
        gains[player] = gain;
        Ok(Self { gains })
    }
}

/// The geometric shape of a domain as written in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Shape {
    Box { lower: Vec<f64>, upper: Vec<f64> },
    Ball { center: Vec<f64>, radius: f64 },
}

/// A bounded open domain: an axis-aligned box or a Euclidean ball.
///
/// Inflation and deflation are tracked as a signed margin on top of the base
/// shape, so `perturb(+d)` followed by `perturb(-d)` restores the original
/// parameters bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Shape", into = "Shape")]
pub struct Domain {
    shape: Shape,
    margin: f64,
}

impl TryFrom<Shape> for Domain {
    type Error = Error;

    fn try_from(shape: Shape) -> Result<Self> {
        Domain::new(shape)
    }
}

impl From<Domain> for Shape {
    fn from(d: Domain) -> Shape {
        d.effective_shape()
    }
}

impl Domain {
    pub fn new(shape: Shape) -> Result<Self> {
        match &shape {
            Shape::Box { lower, upper } => {
                if lower.is_empty() || lower.len() != upper.len() {
                    return Err(Error::InvalidDomain(format!(
                        "box corners must have equal nonzero length, got {} and {}",
                        lower.len(),
                        upper.len()
                    )));
                }
                for (j, (l, u)) in lower.iter().zip(upper).enumerate() {
                    if !(l.is_finite() && u.is_finite() && u > l) {
                        return Err(Error::InvalidDomain(format!(
                            "box side {j} is [{l}, {u}], needs lower < upper"
                        )));
                    }
                }
            }
            Shape::Ball { center, radius } => {
                if center.is_empty() || center.iter().any(|c| !c.is_finite()) {
                    return Err(Error::InvalidDomain("ball center must be finite".into()));
                }
                if !(radius.is_finite() && *radius > 0.0) {
                    return Err(Error::InvalidDomain(format!(
                        "ball radius must be positive, got {radius}"
                    )));
                }
            }
        }
        Ok(Self { shape, margin: 0.0 })
    }

    pub fn new_box(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        Self::new(Shape::Box { lower, upper })
    }

    pub fn new_ball(center: Vec<f64>, radius: f64) -> Result<Self> {
        Self::new(Shape::Ball { center, radius })
    }

    /// The one-dimensional interval `(lower, upper)`.
    pub fn interval(lower: f64, upper: f64) -> Result<Self> {
        Self::new_box(vec![lower], vec![upper])
    }

    pub fn dim(&self) -> usize {
        match &self.shape {
            Shape::Box { lower, .. } => lower.len(),
            Shape::Ball { center, .. } => center.len(),
        }
    }

    pub fn margin(&self) -> f64 {
        self.margin
    }

    pub fn is_ball(&self) -> bool {
        matches!(self.shape, Shape::Ball { .. })
    }

    /// Shape parameters with the inflation margin applied.
    pub fn effective_shape(&self) -> Shape {
        match &self.shape {
            Shape::Box { lower, upper } => Shape::Box {
                lower: lower.iter().map(|l| l - self.margin).collect(),
                upper: upper.iter().map(|u| u + self.margin).collect(),
            },
            Shape::Ball { center, radius } => Shape::Ball {
                center: center.clone(),
                radius: radius + self.margin,
            },
        }
    }

    /// Smallest half side length (box) or the radius (ball), margin included.
    pub fn inradius(&self) -> f64 {
        match &self.shape {
            Shape::Box { lower, upper } => {
                lower
                    .iter()
                    .zip(upper)
                    .map(|(l, u)| 0.5 * (u - l))
                    .fold(f64::INFINITY, f64::min)
                    + self.margin
            }
            Shape::Ball { radius, .. } => radius + self.margin,
        }
    }

    pub fn center(&self) -> Vec<f64> {
        match &self.shape {
            Shape::Box { lower, upper } => {
                lower.iter().zip(upper).map(|(l, u)| 0.5 * (l + u)).collect()
            }
            Shape::Ball { center, .. } => center.clone(),
        }
    }

    /// Axis-aligned bounding box `(lower, upper)` of the closed domain.
    pub fn bounding_box(&self) -> (Vec<f64>, Vec<f64>) {
        match &self.shape {
            Shape::Box { lower, upper } => (
                lower.iter().map(|l| l - self.margin).collect(),
                upper.iter().map(|u| u + self.margin).collect(),
            ),
            Shape::Ball { center, radius } => {
                let r = radius + self.margin;
                (
                    center.iter().map(|c| c - r).collect(),
                    center.iter().map(|c| c + r).collect(),
                )
            }
        }
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Membership in the open domain.
    pub fn contains(&self, x: &[f64]) -> Result<bool> {
        self.check_dim(x)?;
        Ok(self.signed_distance(x) < 0.0)
    }

    /// Membership in the closure, with an absolute tolerance.
    pub fn contains_closed(&self, x: &[f64], tol: f64) -> Result<bool> {
        self.check_dim(x)?;
        Ok(self.signed_distance(x) <= tol)
    }

    /// Negative inside, zero on the boundary, positive outside.
    ///
    /// Inside, the magnitude is the Euclidean distance to the boundary. Outside
    /// a box it is the largest per-axis excess rather than the true distance.
    /// Panics if `x` has the wrong length; use [`Domain::contains`] for a
    /// checked test.
    pub fn signed_distance(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.dim(), "point dimension");
        match &self.shape {
            Shape::Box { lower, upper } => {
                let mut s = f64::NEG_INFINITY;
                for ((&xi, l), u) in x.iter().zip(lower).zip(upper) {
                    s = s.max((l - self.margin) - xi).max(xi - (u + self.margin));
                }
                s
            }
            Shape::Ball { center, radius } => {
                let r2: f64 = x
                    .iter()
                    .zip(center)
                    .map(|(xi, ci)| (xi - ci) * (xi - ci))
                    .sum();
                r2.sqrt() - (radius + self.margin)
            }
        }
    }

    /// Euclidean projection onto the closed domain, in place.
    pub fn project_in_place(&self, x: &mut [f64]) {
        match &self.shape {
            Shape::Box { lower, upper } => {
                for ((xi, l), u) in x.iter_mut().zip(lower).zip(upper) {
                    *xi = xi.clamp(l - self.margin, u + self.margin);
                }
            }
            Shape::Ball { center, radius } => {
                let r = radius + self.margin;
                let n2: f64 = x
                    .iter()
                    .zip(center)
                    .map(|(xi, ci)| (xi - ci) * (xi - ci))
                    .sum();
                let n = n2.sqrt();
                if n > r {
                    let s = r / n;
                    for (xi, ci) in x.iter_mut().zip(center) {
                        *xi = ci + (*xi - ci) * s;
                    }
                }
            }
        }
    }

    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        self.project_in_place(&mut y);
        y
    }

    /// `D_{+delta}` for `delta > 0`, `D_{-|delta|}` for `delta < 0`.
    pub fn perturb(&self, delta: f64) -> Result<Self> {
        if !delta.is_finite() {
            return Err(Error::InvalidDomain(format!("non-finite delta {delta}")));
        }
        let base = match &self.shape {
            Shape::Box { lower, upper } => lower
                .iter()
                .zip(upper)
                .map(|(l, u)| 0.5 * (u - l))
                .fold(f64::INFINITY, f64::min),
            Shape::Ball { radius, .. } => *radius,
        };
        let margin = self.margin + delta;
        if base + margin <= 0.0 {
            return Err(Error::EmptyDeflation { delta });
        }
        Ok(Self {
            shape: self.shape.clone(),
            margin,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eye(d: usize) -> DMatrix<f64> {
        DMatrix::identity(d, d)
    }

    #[test]
    fn identity_sigma_has_unit_kappa() {
        let r = validate_system(&DMatrix::zeros(2, 2), &[], &eye(2), 0.1).unwrap();
        assert!((r.kappa - 1.0).abs() < 1e-14);
        assert_eq!(r.players, 0);
    }

    #[test]
    fn zero_sigma_is_rejected() {
        let err = validate_system(&DMatrix::zeros(2, 2), &[], &DMatrix::zeros(2, 2), 0.1)
            .unwrap_err();
        assert!(matches!(err, Error::EllipticityViolated { .. }));
        assert!(err.to_string().contains("ellipticity violated"));
    }

    #[test]
    fn diagonal_sigma_kappa() {
        // sigma sigma^T = diag(4, 0.25)
        let sigma = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![2.0, 0.5]));
        let r = validate_system(&DMatrix::zeros(2, 2), &[], &sigma, 1.0).unwrap();
        assert!((r.kappa - 0.25).abs() < 1e-14);
    }

    #[test]
    fn shape_mismatch_is_named() {
        let err = validate_system(
            &DMatrix::zeros(2, 2),
            &[DMatrix::zeros(3, 1)],
            &eye(2),
            1.0,
        )
        .unwrap_err();
        assert!(err.to_string().contains("inconsistent dimensions"));
        let err = MultiChannelSystem::new(DMatrix::zeros(2, 3), vec![], eye(2), 1.0).unwrap_err();
        assert!(matches!(err, Error::InconsistentDimensions(_)));
    }

    #[test]
    fn negative_epsilon_rejected() {
        let err = MultiChannelSystem::scalar(1.0, &[], 1.0, -0.1).unwrap_err();
        assert!(matches!(err, Error::InvalidEpsilon(_)));
    }

    #[test]
    fn precision_inverts_diffusion() {
        let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, -0.2, 0.8]);
        let sys = MultiChannelSystem::new(DMatrix::zeros(2, 2), vec![], sigma, 1.0).unwrap();
        let p = sys.precision() * sys.diffusion();
        assert!((p - eye(2)).norm() < 1e-12);
    }

    #[test]
    fn gain_shapes_checked() {
        let sys = MultiChannelSystem::new(
            DMatrix::zeros(2, 2),
            vec![DMatrix::zeros(2, 1)],
            eye(2),
            1.0,
        )
        .unwrap();
        assert!(FeedbackProfile::new(&sys, vec![DMatrix::zeros(1, 2)]).is_ok());
        assert!(FeedbackProfile::new(&sys, vec![DMatrix::zeros(2, 2)]).is_err());
        assert!(FeedbackProfile::new(&sys, vec![]).is_err());
        let p = FeedbackProfile::zeros(&sys);
        assert!(p.with_gain(0, DMatrix::zeros(2, 1)).is_err());
        assert!(p.with_gain(1, DMatrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn box_membership_is_open() {
        let d = Domain::new_box(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        assert!(d.contains(&[0.5, 0.5]).unwrap());
        assert!(!d.contains(&[1.0, 0.5]).unwrap());
        assert!(d.contains_closed(&[1.0, 0.5], 1e-12).unwrap());
        assert!(matches!(
            d.contains(&[0.5]),
            Err(Error::DimensionMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn ball_membership() {
        let d = Domain::new_ball(vec![0.0, 0.0], 2.0).unwrap();
        assert!(d.contains(&[1.9, 0.0]).unwrap());
        assert!(!d.contains(&[2.0, 0.0]).unwrap());
        assert!(!d.contains(&[1.5, 1.5]).unwrap());
    }

    #[test]
    fn box_inflate_and_deflate() {
        let d = Domain::interval(0.0, 1.0).unwrap();
        let up = d.perturb(0.1).unwrap();
        assert_eq!(
            up.effective_shape(),
            Shape::Box {
                lower: vec![-0.1],
                upper: vec![1.1]
            }
        );
        let down = d.perturb(-0.1).unwrap();
        assert_eq!(
            down.effective_shape(),
            Shape::Box {
                lower: vec![0.1],
                upper: vec![0.9]
            }
        );
        assert!(matches!(
            d.perturb(-0.6),
            Err(Error::EmptyDeflation { .. })
        ));
        assert_eq!(up.perturb(-0.1).unwrap(), d);
    }

    #[test]
    fn degenerate_domains_rejected() {
        assert!(Domain::interval(1.0, 1.0).is_err());
        assert!(Domain::new_ball(vec![0.0], 0.0).is_err());
        assert!(Domain::new_box(vec![0.0], vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn projection_lands_in_closure() {
        let b = Domain::new_ball(vec![1.0, 0.0], 1.0).unwrap();
        let p = b.project(&[4.0, 4.0]);
        assert!(b.signed_distance(&p).abs() < 1e-12);
        let x = Domain::interval(1.0, 3.0).unwrap();
        assert_eq!(x.project(&[0.0]), vec![1.0]);
        assert_eq!(x.project(&[2.5]), vec![2.5]);
    }

    #[test]
    fn domain_json_round_trip() {
        let json = r#"{"kind":"ball","center":[0.0,1.0],"radius":2.0}"#;
        let d: Domain = serde_json::from_str(json).unwrap();
        assert_eq!(d, Domain::new_ball(vec![0.0, 1.0], 2.0).unwrap());
        let bad = r#"{"kind":"box","lower":[1.0],"upper":[0.0]}"#;
        assert!(serde_json::from_str::<Domain>(bad).is_err());
    }
}
