//! JSON problem configuration.
//!
//! ```json
//! {
//!   "A": [[1.0]],
//!   "B": [[[1.0]], [[1.0]]],
//!   "sigma": [[1.0]],
//!   "epsilon": 0.1,
//!   "domain": { "kind": "box", "lower": [1.0], "upper": [3.0] },
//!   "gains": [[[0.0]], [[0.0]]]
//! }
//! ```
//!
//! Matrices are lists of rows; a bare number stands for a 1x1 matrix. `gains`
//! defaults to zeros. Optional sections `x0`, `simulate`, `rate`, `eigen`,
//! `kernel` and `game` set per-command defaults.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Domain, FeedbackProfile, MultiChannelSystem};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    Scalar(f64),
    Rows(Vec<Vec<f64>>),
}

impl MatrixSpec {
    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        match self {
            MatrixSpec::Scalar(v) => Ok(DMatrix::from_element(1, 1, *v)),
            MatrixSpec::Rows(rows) => {
                let r = rows.len();
                let c = rows.first().map_or(0, Vec::len);
                if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
                    return Err(Error::Config("matrix rows must be nonempty and equally long".into()));
                }
                Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
            }
        }
    }

    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        MatrixSpec::Rows(
            (0..m.nrows())
                .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
                .collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub horizons: Option<Vec<f64>>,
    pub dt: Option<f64>,
    pub paths: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateSection {
    pub schedule: Option<Vec<f64>>,
    pub n_per_t: Option<f64>,
    pub starts: Option<usize>,
    pub tol: Option<f64>,
    pub max_iters: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EigenSection {
    pub nodes: Option<Vec<usize>>,
    pub tol: Option<f64>,
    pub max_iters: Option<usize>,
    /// Optional noise sweep, decreasing.
    pub eps_list: Option<Vec<f64>>,
    pub h_over_eps: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSection {
    pub nodes: Option<Vec<usize>>,
    pub dt: Option<f64>,
    pub max_iters: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GameSection {
    pub lower: Option<Vec<MatrixSpec>>,
    pub upper: Option<Vec<MatrixSpec>>,
    pub eta: Option<f64>,
    pub max_rounds: Option<usize>,
    pub probes: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    #[serde(rename = "A")]
    pub a: MatrixSpec,
    #[serde(rename = "B", default)]
    pub b: Vec<MatrixSpec>,
    pub sigma: MatrixSpec,
    pub epsilon: f64,
    pub domain: Domain,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gains: Option<Vec<MatrixSpec>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    #[serde(default)]
    pub simulate: SimulateSection,
    #[serde(default)]
    pub rate: RateSection,
    #[serde(default)]
    pub eigen: EigenSection,
    #[serde(default)]
    pub kernel: KernelSection,
    #[serde(default)]
    pub game: GameSection,
}

impl ProblemConfig {
    /// Parses JSON text; errors name the line, column and key path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            Error::Config(format!(
                "line {} column {}: key `{}`: {}",
                inner.line(),
                inner.column(),
                path,
                inner
            ))
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn system(&self) -> Result<MultiChannelSystem> {
        let b = self
            .b
            .iter()
            .map(MatrixSpec::to_matrix)
            .collect::<Result<Vec<_>>>()?;
        MultiChannelSystem::new(self.a.to_matrix()?, b, self.sigma.to_matrix()?, self.epsilon)
    }

    pub fn profile(&self, sys: &MultiChannelSystem) -> Result<FeedbackProfile> {
        match &self.gains {
            None => Ok(FeedbackProfile::zeros(sys)),
            Some(g) => FeedbackProfile::new(
                sys,
                g.iter().map(MatrixSpec::to_matrix).collect::<Result<_>>()?,
            ),
        }
    }

    /// Configured initial state, else the domain center.
    pub fn initial_state(&self) -> Result<Vec<f64>> {
        let x0 = self.x0.clone().unwrap_or_else(|| self.domain.center());
        if x0.len() != self.domain.dim() {
            return Err(Error::Config(format!(
                "key `x0`: expected {} entries, got {}",
                self.domain.dim(),
                x0.len()
            )));
        }
        Ok(x0)
    }

    /// Full validation: builds the system, the profile and the initial state.
    pub fn validate(&self) -> Result<()> {
        let sys = self.system()?;
        if self.domain.dim() != sys.dim() {
            return Err(Error::Config(format!(
                "key `domain`: dimension {} differs from the state dimension {}",
                self.domain.dim(),
                sys.dim()
            )));
        }
        self.profile(&sys)?;
        self.initial_state()?;
        Ok(())
    }
}
