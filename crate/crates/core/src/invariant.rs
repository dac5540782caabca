//! Grid approximation of the largest closed subset of the closed domain that
//! the noise-free closed loop never leaves.
//!
//! Starting from every grid node of the closed domain, a node is discarded
//! when its image under `exp(A_cl dt)` leaves the closed domain or when no
//! corner of the grid cell containing the image survives. The second test is
//! positivity of the multilinear interpolant of the membership indicator, an
//! outer approximation. Sweeps update all nodes from the previous membership
//! and stop at a fixpoint.
//!
//! A node whose image stays in its own cell supports itself, so `dt` should
//! move states by more than a cell where the flow is nonzero.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::dynamics::closed_loop_matrix;
use crate::error::{Error, Result};
use crate::linalg::{expm, Dense};
use crate::model::{Domain, FeedbackProfile, MultiChannelSystem, Shape};
use crate::output::{coord_header, Table};

pub use crate::generator::GridSpec;

/// Tolerance for "image stays in the closed domain".
pub const IMAGE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KernelField {
    pub grid: GridSpec,
    /// Per grid node: inside the closed domain.
    pub in_domain: Vec<bool>,
    /// Per grid node: survived the iteration.
    pub member: Vec<bool>,
    pub dt: f64,
    pub iterations: usize,
    /// The iteration reached a fixpoint.
    pub converged: bool,
}

impl KernelField {
    pub fn members(&self) -> usize {
        self.member.iter().filter(|&&m| m).count()
    }

    /// CSV `x1,...,xd,member` over the nodes of the closed domain.
    pub fn to_table(&self) -> Table {
        let d = self.grid.dim();
        let mut header = coord_header("x", d);
        header.push("member".into());
        let mut t = Table::new(header);
        let mut x = vec![0.0; d];
        for (node, (&inside, &m)) in self.in_domain.iter().zip(&self.member).enumerate() {
            if !inside {
                continue;
            }
            self.grid.coord(node, &mut x);
            let mut row: Vec<String> = x.iter().map(|&v| crate::output::fmt_num(v)).collect();
            row.push(if m { "1" } else { "0" }.to_string());
            t.push_raw(row);
        }
        t
    }
}

/// Operator 2-norm via the singular values.
fn norm2(m: &DMatrix<f64>) -> f64 {
    m.singular_values().iter().copied().fold(0.0, f64::max)
}

pub fn invariance_kernel(
    sys: &MultiChannelSystem,
    prof: &FeedbackProfile,
    dom: &Domain,
    grid: &GridSpec,
    dt: f64,
    max_iters: usize,
) -> Result<KernelField> {
    let d = sys.dim();
    if dom.dim() != d || grid.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: if dom.dim() != d { dom.dim() } else { grid.dim() },
        });
    }
    let acl = closed_loop_matrix(sys, prof)?;
    if !(dt.is_finite() && dt > 0.0) || norm2(&acl) * dt >= 0.5 {
        return Err(Error::Precondition(format!(
            "need 0 < dt and ||A_cl|| dt < 0.5, got dt = {dt}"
        )));
    }
    let step = Dense::from_matrix(&expm(&(&acl * dt)));
    let total = grid.len();
    let corners = 1usize << d;

    // image cell of each node, or None when the image leaves the closed domain
    let cells: Vec<Option<Vec<usize>>> = (0..total)
        .into_par_iter()
        .map(|node| {
            let x = grid.point(node);
            let mut y = vec![0.0; d];
            step.mul_vec(&x, &mut y);
            if dom.signed_distance(&y) > IMAGE_TOL {
                return None;
            }
            let mut cell = vec![0; d];
            grid.cell_of(&y, &mut cell);
            let mut m = vec![0; d];
            Some(
                (0..corners)
                    .map(|c| {
                        for j in 0..d {
                            m[j] = cell[j] + ((c >> j) & 1);
                        }
                        grid.linear_index(&m)
                    })
                    .collect(),
            )
        })
        .collect();
    let in_domain: Vec<bool> = (0..total)
        .map(|node| dom.signed_distance(&grid.point(node)) <= IMAGE_TOL)
        .collect();
    let mut member = in_domain.clone();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iters {
        iterations += 1;
        let next: Vec<bool> = (0..total)
            .into_par_iter()
            .map(|node| {
                member[node]
                    && cells[node]
                        .as_ref()
                        .is_some_and(|cs| cs.iter().any(|&c| member[c]))
            })
            .collect();
        if next == member {
            converged = true;
            break;
        }
        member = next;
    }
    Ok(KernelField {
        grid: grid.clone(),
        in_domain,
        member,
        dt,
        iterations,
        converged,
    })
}

/// Whether no node survived. Refuses kernels that stopped before a fixpoint.
pub fn kernel_is_empty(kernel: &KernelField) -> Result<bool> {
    if !kernel.converged {
        return Err(Error::PartialResult(format!(
            "kernel iteration stopped after {} sweeps without a fixpoint",
            kernel.iterations
        )));
    }
    Ok(kernel.members() == 0)
}

/// Node-wise `a => b` on identical grids.
pub fn kernel_subset(a: &KernelField, b: &KernelField) -> Result<bool> {
    if a.grid != b.grid {
        return Err(Error::IncompatibleGrid("kernels live on different grids".into()));
    }
    Ok(a.member.iter().zip(&b.member).all(|(&x, &y)| !x || y))
}

/// Whether an equilibrium of the closed loop lies in the closed domain. The
/// equilibria are the null space of `A_cl`: only the origin when it is
/// nonsingular.
pub fn equilibrium_in_domain(
    sys: &MultiChannelSystem,
    prof: &FeedbackProfile,
    dom: &Domain,
) -> Result<bool> {
    let d = sys.dim();
    if dom.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: dom.dim(),
        });
    }
    let acl = closed_loop_matrix(sys, prof)?;
    let svd = acl.clone().svd(false, true);
    let vt = svd.v_t.as_ref().expect("requested V^T");
    let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let cut = 1e-10 * smax.max(1.0);
    let null: Vec<Vec<f64>> = svd
        .singular_values
        .iter()
        .enumerate()
        .filter(|(_, &s)| s <= cut)
        .map(|(i, _)| vt.row(i).iter().copied().collect())
        .collect();
    // square A_cl: rank deficiency shows up as small singular values
    let zero = vec![0.0; d];
    if null.is_empty() {
        return Ok(dom.signed_distance(&zero) <= IMAGE_TOL);
    }
    match dom.effective_shape() {
        Shape::Ball { center, radius } => {
            // distance from the center to the null space
            let mut proj = vec![0.0; d];
            for n in &null {
                let c: f64 = n.iter().zip(&center).map(|(a, b)| a * b).sum();
                for j in 0..d {
                    proj[j] += c * n[j];
                }
            }
            let dist = proj
                .iter()
                .zip(&center)
                .map(|(p, c)| (p - c) * (p - c))
                .sum::<f64>()
                .sqrt();
            Ok(dist <= radius + IMAGE_TOL)
        }
        Shape::Box { lower, upper } if null.len() == 1 => {
            // intersect the line {t n} with the box axis by axis
            let n = &null[0];
            let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
            for j in 0..d {
                if n[j].abs() <= 1e-14 {
                    if lower[j] > IMAGE_TOL || upper[j] < -IMAGE_TOL {
                        return Ok(false);
                    }
                } else {
                    let (a, b) = (lower[j] / n[j], upper[j] / n[j]);
                    lo = lo.max(a.min(b));
                    hi = hi.min(a.max(b));
                }
            }
            Ok(lo <= hi + IMAGE_TOL)
        }
        Shape::Box { .. } => {
            // alternating projections between the subspace and the box
            let mut x = dom.center();
            for _ in 0..100_000 {
                let mut p = vec![0.0; d];
                for n in &null {
                    let c: f64 = n.iter().zip(&x).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        p[j] += c * n[j];
                    }
                }
                let q = dom.project(&p);
                let gap = q
                    .iter()
                    .zip(&p)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                if gap <= 1e-10 {
                    return Ok(true);
                }
                let moved = q
                    .iter()
                    .zip(&x)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                if moved <= 1e-15 {
                    return Ok(false);
                }
                x = q;
            }
            Ok(false)
        }
    }
}
