//! Finite-difference generator of the diffusion with zero Dirichlet data and
//! its principal eigenpair.
//!
//! ```text
//! L u = (eps/2) sum_jk (sigma sigma^T)_jk d_j d_k u + (A_cl x) . grad u
//! ```
//!
//! Diffusion uses second-order central differences (the 4-point cross stencil
//! for mixed terms). Drift is central unless the mesh Peclet number of an axis
//! exceeds one at a node, where it switches to first-order upwinding.

use faer::prelude::*;
use faer::sparse::{SparseColMat, Triplet};
use faer::Mat;
use rayon::prelude::*;
use serde::Serialize;

use crate::dynamics::closed_loop_matrix;
use crate::error::{Error, Result};
use crate::linalg::Dense;
use crate::model::{Domain, FeedbackProfile, MultiChannelSystem};
use crate::output::{coord_header, Table};

/// Minimum number of interior nodes per axis.
pub const MIN_INTERIOR: usize = 3;

/// Tensor grid over a bounding box, boundary nodes included. Nodes are
/// numbered with the last axis varying fastest.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridSpec {
    lower: Vec<f64>,
    upper: Vec<f64>,
    nodes: Vec<usize>,
}

impl GridSpec {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, nodes: Vec<usize>) -> Result<Self> {
        if lower.len() != upper.len() || lower.len() != nodes.len() || lower.is_empty() {
            return Err(Error::InconsistentDimensions(
                "grid bounds and node counts differ in length".into(),
            ));
        }
        for j in 0..nodes.len() {
            if !(upper[j] > lower[j]) {
                return Err(Error::InvalidDomain(format!("grid axis {j} is empty")));
            }
            if nodes[j] < MIN_INTERIOR + 2 {
                return Err(Error::GridTooCoarse(format!(
                    "axis {j} has {} nodes, need at least {}",
                    nodes[j],
                    MIN_INTERIOR + 2
                )));
            }
        }
        Ok(Self {
            lower,
            upper,
            nodes,
        })
    }

    /// Grid over the bounding box of `dom`.
    pub fn for_domain(dom: &Domain, nodes: &[usize]) -> Result<Self> {
        let (lo, hi) = dom.bounding_box();
        Self::new(lo, hi, nodes.to_vec())
    }

    /// `n` nodes on every axis.
    pub fn uniform(dom: &Domain, n: usize) -> Result<Self> {
        Self::for_domain(dom, &vec![n; dom.dim()])
    }

    /// Spacing at most `h` on every axis.
    pub fn with_spacing(dom: &Domain, h: f64) -> Result<Self> {
        if !(h.is_finite() && h > 0.0) {
            return Err(Error::Precondition(format!("spacing must be positive, got {h}")));
        }
        let (lo, hi) = dom.bounding_box();
        let nodes = lo
            .iter()
            .zip(&hi)
            .map(|(l, u)| ((u - l) / h - 1e-9).ceil() as usize + 1)
            .collect();
        Self::new(lo, hi, nodes)
    }

    pub fn dim(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        (self.upper[axis] - self.lower[axis]) / (self.nodes[axis] - 1) as f64
    }

    /// Total number of nodes.
    pub fn len(&self) -> usize {
        self.nodes.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stride(&self, axis: usize) -> usize {
        self.nodes[axis + 1..].iter().product()
    }

    pub fn multi_index(&self, mut idx: usize, out: &mut [usize]) {
        for j in (0..self.dim()).rev() {
            out[j] = idx % self.nodes[j];
            idx /= self.nodes[j];
        }
    }

    pub fn linear_index(&self, multi: &[usize]) -> usize {
        multi
            .iter()
            .zip(&self.nodes)
            .fold(0, |acc, (&i, &n)| acc * n + i)
    }

    pub fn axis_coord(&self, axis: usize, i: usize) -> f64 {
        if i + 1 == self.nodes[axis] {
            self.upper[axis]
        } else {
            self.lower[axis] + i as f64 * self.spacing(axis)
        }
    }

    pub fn coord(&self, idx: usize, out: &mut [f64]) {
        let mut m = vec![0; self.dim()];
        self.multi_index(idx, &mut m);
        for j in 0..self.dim() {
            out[j] = self.axis_coord(j, m[j]);
        }
    }

    pub fn point(&self, idx: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.dim()];
        self.coord(idx, &mut x);
        x
    }

    /// Grid cell containing `y` (lower-corner multi-index), clamped to the grid.
    pub(crate) fn cell_of(&self, y: &[f64], out: &mut [usize]) {
        for j in 0..self.dim() {
            let s = ((y[j] - self.lower[j]) / self.spacing(j)).floor();
            out[j] = s.clamp(0.0, (self.nodes[j] - 2) as f64) as usize;
        }
    }
}

/// Compressed sparse rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    n_rows: usize,
    n_cols: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseMatrix {
    /// Builds from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(n_rows: usize, n_cols: usize, mut t: Vec<(usize, usize, f64)>) -> Self {
        t.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = vec![0; n_rows + 1];
        let mut cols: Vec<usize> = Vec::with_capacity(t.len());
        let mut vals: Vec<f64> = Vec::with_capacity(t.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in t {
            assert!(r < n_rows && c < n_cols, "triplet out of range");
            if last == Some((r, c)) {
                *vals.last_mut().expect("nonempty") += v;
            } else {
                cols.push(c);
                vals.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..n_rows {
            row_ptr[r + 1] += row_ptr[r];
        }
        Self {
            n_rows,
            n_cols,
            row_ptr,
            cols,
            vals,
        }
    }

    pub fn diagonal(d: &[f64]) -> Self {
        Self::from_triplets(
            d.len(),
            d.len(),
            d.iter().enumerate().map(|(i, &v)| (i, i, v)).collect(),
        )
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.cols[span.clone()]
            .iter()
            .copied()
            .zip(self.vals[span].iter().copied())
    }

    pub fn mul_vec(&self, x: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate().take(self.n_rows) {
            *o = self.row(r).map(|(c, v)| v * x[c]).sum();
        }
    }

    pub fn norm_inf(&self) -> f64 {
        (0..self.n_rows)
            .map(|r| self.row(r).map(|(_, v)| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    fn shifted_faer(&self, shift: f64) -> Option<SparseColMat<usize, f64>> {
        let mut t: Vec<Triplet<usize, usize, f64>> = Vec::with_capacity(self.nnz() + self.n_rows);
        for r in 0..self.n_rows {
            for (c, v) in self.row(r) {
                t.push(Triplet::new(r, c, v));
            }
            t.push(Triplet::new(r, r, -shift));
        }
        SparseColMat::<usize, f64>::try_new_from_triplets(self.n_rows, self.n_cols, &t).ok()
    }
}

/// Generator restricted to the unknown (interior) nodes. Rows keep full-grid
/// column indices so the stencil can also be applied to sampled functions
/// with nonzero boundary values.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteOperator {
    grid: GridSpec,
    unknowns: Vec<usize>,
    unknown_of: Vec<Option<usize>>,
    stencil: SparseMatrix,
    upwinded: usize,
    drift_axes: usize,
}

impl DiscreteOperator {
    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    /// Number of unknowns.
    pub fn len(&self) -> usize {
        self.unknowns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.unknowns.is_empty()
    }

    /// Full-grid index of every unknown.
    pub fn unknown_nodes(&self) -> &[usize] {
        &self.unknowns
    }

    pub fn unknown_of(&self, node: usize) -> Option<usize> {
        self.unknown_of[node]
    }

    /// Node/axis pairs where the Peclet guard switched to upwinding.
    pub fn upwinded(&self) -> usize {
        self.upwinded
    }

    /// Set when every node/axis with nonzero drift was upwinded.
    pub fn peclet_warning(&self) -> Option<String> {
        if self.drift_axes > 0 && self.upwinded == self.drift_axes {
            Some(format!(
                "mesh Peclet guard active on all {} node/axis pairs; accuracy is first order",
                self.upwinded
            ))
        } else {
            None
        }
    }

    /// `L` applied to samples of a function on every grid node.
    pub fn apply_to_samples(&self, samples: &[f64]) -> Result<Vec<f64>> {
        if samples.len() != self.grid.len() {
            return Err(Error::DimensionMismatch {
                expected: self.grid.len(),
                got: samples.len(),
            });
        }
        let mut out = vec![0.0; self.len()];
        self.stencil.mul_vec(samples, &mut out);
        Ok(out)
    }

    /// `L` applied to values on the unknowns, zero on the Dirichlet nodes.
    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                got: v.len(),
            });
        }
        let mut full = vec![0.0; self.grid.len()];
        for (&node, &x) in self.unknowns.iter().zip(v) {
            full[node] = x;
        }
        self.apply_to_samples(&full)
    }

    /// `-L` on the unknowns with the Dirichlet columns eliminated.
    pub fn negated_matrix(&self) -> SparseMatrix {
        let mut t = Vec::with_capacity(self.stencil.nnz());
        for r in 0..self.len() {
            for (c, v) in self.stencil.row(r) {
                if let Some(u) = self.unknown_of[c] {
                    t.push((r, u, -v));
                }
            }
        }
        SparseMatrix::from_triplets(self.len(), self.len(), t)
    }

    /// Off-diagonal entries among unknowns are all nonnegative.
    pub fn off_diagonals_nonnegative(&self) -> bool {
        (0..self.len()).all(|r| {
            self.stencil.row(r).all(|(c, v)| {
                c == self.unknowns[r] || self.unknown_of[c].is_none() || v >= -1e-14 * v.abs().max(1.0)
            })
        })
    }
}

/// Assembles the generator on the unknown nodes of `grid`: nodes strictly
/// inside the open domain whose indices are interior on every axis.
pub fn discretize_generator(
    sys: &MultiChannelSystem,
    prof: &FeedbackProfile,
    dom: &Domain,
    grid: &GridSpec,
) -> Result<DiscreteOperator> {
    let d = sys.dim();
    if dom.dim() != d || grid.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: if dom.dim() != d { dom.dim() } else { grid.dim() },
        });
    }
    let acl = Dense::from_matrix(&closed_loop_matrix(sys, prof)?);
    let eps = sys.epsilon();
    let cov = Dense::from_matrix(sys.diffusion());
    let total = grid.len();

    let mut unknowns = Vec::new();
    let mut unknown_of = vec![None; total];
    let mut m = vec![0usize; d];
    let mut x = vec![0.0; d];
    for node in 0..total {
        grid.multi_index(node, &mut m);
        if m.iter().zip(grid.nodes()).any(|(&i, &n)| i == 0 || i + 1 == n) {
            continue;
        }
        grid.coord(node, &mut x);
        if dom.signed_distance(&x) < 0.0 {
            unknown_of[node] = Some(unknowns.len());
            unknowns.push(node);
        }
    }
    if unknowns.is_empty() {
        return Err(Error::GridTooCoarse("no grid node lies inside the domain".into()));
    }

    let h: Vec<f64> = (0..d).map(|j| grid.spacing(j)).collect();
    let strides: Vec<usize> = (0..d).map(|j| grid.stride(j)).collect();
    let rows: Vec<(Vec<(usize, usize, f64)>, usize, usize)> = unknowns
        .par_iter()
        .enumerate()
        .map(|(r, &node)| {
            let mut x = vec![0.0; d];
            let mut b = vec![0.0; d];
            grid.coord(node, &mut x);
            acl.mul_vec(&x, &mut b);
            let mut t = Vec::with_capacity(1 + 2 * d + 4 * d * d);
            let mut upwinded = 0;
            let mut drift_axes = 0;
            for j in 0..d {
                let ajj = 0.5 * eps * cov.get(j, j);
                let dif = ajj / (h[j] * h[j]);
                let (up, dn) = (node + strides[j], node - strides[j]);
                t.push((r, up, dif));
                t.push((r, dn, dif));
                t.push((r, node, -2.0 * dif));
                if b[j] != 0.0 {
                    drift_axes += 1;
                }
                if b[j].abs() * h[j] > eps * cov.get(j, j) {
                    upwinded += 1;
                    let c = b[j] / h[j];
                    if b[j] > 0.0 {
                        t.push((r, up, c));
                        t.push((r, node, -c));
                    } else {
                        t.push((r, node, c));
                        t.push((r, dn, -c));
                    }
                } else if b[j] != 0.0 {
                    let c = 0.5 * b[j] / h[j];
                    t.push((r, up, c));
                    t.push((r, dn, -c));
                }
                for k in j + 1..d {
                    let ajk = 0.5 * eps * cov.get(j, k);
                    if ajk == 0.0 {
                        continue;
                    }
                    // 2 a_jk d_j d_k u by the 4-point cross stencil
                    let c = 2.0 * ajk / (4.0 * h[j] * h[k]);
                    let (sj, sk) = (strides[j], strides[k]);
                    t.push((r, node + sj + sk, c));
                    t.push((r, node - sj - sk, c));
                    t.push((r, node + sj - sk, -c));
                    t.push((r, node - sj + sk, -c));
                }
            }
            (t, upwinded, drift_axes)
        })
        .collect();
    let mut triplets = Vec::new();
    let mut upwinded = 0;
    let mut drift_axes = 0;
    for (t, u, a) in rows {
        triplets.extend(t);
        upwinded += u;
        drift_axes += a;
    }
    Ok(DiscreteOperator {
        grid: grid.clone(),
        stencil: SparseMatrix::from_triplets(unknowns.len(), total, triplets),
        unknowns,
        unknown_of,
        upwinded,
        drift_axes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EigenOptions {
    /// Relative residual target, `||K v - lambda v|| <= tol * max(1, |lambda|)`
    /// plus a roundoff floor proportional to `||K||`.
    pub tol: f64,
    pub max_iters: usize,
    /// Shift for the first factorization.
    pub initial_shift: f64,
}

impl Default for EigenOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iters: 1000,
            initial_shift: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EigenPair {
    pub lambda: f64,
    /// Max-normalized, largest entry `+1`.
    pub vector: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
    pub factorizations: usize,
}

/// Shift the Rayleigh quotient every this many iterations.
const SHIFT_EVERY: usize = 5;

/// Eigenvalue of `k` closest to the initial shift (the smallest one for the
/// negated generator), by shifted inverse iteration with a sparse LU.
pub fn principal_eigenpair(k: &SparseMatrix, opts: &EigenOptions) -> Result<EigenPair> {
    let n = k.n_rows();
    if n == 0 || k.n_cols() != n {
        return Err(Error::Precondition("eigensolver needs a nonempty square matrix".into()));
    }
    let floor = 16.0 * f64::EPSILON * k.norm_inf();
    let mut factorizations = 0;
    let factor = |shift: f64, count: &mut usize| {
        let mut s = shift;
        for attempt in 0..8 {
            *count += 1;
            if let Some(lu) = k.shifted_faer(s).and_then(|m| m.sp_lu().ok()) {
                return Ok((lu, s));
            }
            s += 1e-8 * s.abs().max(1.0) * (attempt + 1) as f64;
        }
        Err(Error::FactorizationFailed { shift })
    };
    let (mut lu, mut shift) = factor(opts.initial_shift, &mut factorizations)?;
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut kv = vec![0.0; n];
    let mut residual = f64::INFINITY;
    for it in 1..=opts.max_iters {
        let mut b = Mat::<f64>::from_fn(n, 1, |i, _| v[i]);
        lu.solve_in_place(b.as_mut());
        let w: Vec<f64> = b.col(0).iter().copied().collect();
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !norm.is_finite() || norm == 0.0 {
            // shift landed on an eigenvalue; nudge and refactor
            let (l, s) = factor(shift + 1e-7 * shift.abs().max(1.0), &mut factorizations)?;
            lu = l;
            shift = s;
            continue;
        }
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / norm;
        }
        k.mul_vec(&v, &mut kv);
        let lambda: f64 = v.iter().zip(&kv).map(|(a, b)| a * b).sum();
        residual = kv
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - lambda * b).powi(2))
            .sum::<f64>()
            .sqrt();
        if residual <= opts.tol * lambda.abs().max(1.0) + floor {
            normalize_positive(&mut v);
            return Ok(EigenPair {
                lambda,
                vector: v,
                residual,
                iterations: it,
                factorizations,
            });
        }
        // move the shift only once the vector is close to an eigenvector
        if it % SHIFT_EVERY == 0 && residual < 0.1 * lambda.abs().max(1e-300) && lambda != shift {
            let (l, s) = factor(lambda, &mut factorizations)?;
            lu = l;
            shift = s;
        }
    }
    Err(Error::EigenNotConverged {
        iterations: opts.max_iters,
        residual,
    })
}

fn normalize_positive(v: &mut [f64]) {
    let (mut idx, mut best) = (0, 0.0);
    for (i, x) in v.iter().enumerate() {
        if x.abs() > best {
            best = x.abs();
            idx = i;
        }
    }
    let s = if v[idx] < 0.0 { -1.0 / best } else { 1.0 / best };
    for x in v.iter_mut() {
        *x *= s;
    }
}

/// Values on the unknowns of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    pub grid: GridSpec,
    /// Full-grid index of each value.
    pub nodes: Vec<usize>,
    pub values: Vec<f64>,
}

impl GridField {
    /// CSV `x1,...,xd,value`.
    pub fn to_table(&self) -> Table {
        let d = self.grid.dim();
        let mut header = coord_header("x", d);
        header.push("value".into());
        let mut t = Table::new(header);
        let mut row = vec![0.0; d + 1];
        for (&node, &v) in self.nodes.iter().zip(&self.values) {
            self.grid.coord(node, &mut row[..d]);
            row[d] = v;
            t.push_numbers(&row);
        }
        t
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrincipalEigen {
    pub lambda: f64,
    pub eigenfunction: GridField,
    pub residual: f64,
    pub iterations: usize,
}

/// Smallest eigenvalue of `-L` and its eigenfunction.
pub fn principal_eigenvalue(op: &DiscreteOperator, opts: &EigenOptions) -> Result<PrincipalEigen> {
    let pair = principal_eigenpair(&op.negated_matrix(), opts)?;
    Ok(PrincipalEigen {
        lambda: pair.lambda,
        eigenfunction: GridField {
            grid: op.grid.clone(),
            nodes: op.unknowns.clone(),
            values: pair.vector,
        },
        residual: pair.residual,
        iterations: pair.iterations,
    })
}

/// Spacing rule for noise sweeps: `h = h_over_eps * eps` per axis, with node
/// counts clamped to `[min_nodes, max_nodes]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GridPolicy {
    pub h_over_eps: f64,
    pub min_nodes: usize,
    pub max_nodes: usize,
}

impl Default for GridPolicy {
    fn default() -> Self {
        Self {
            h_over_eps: 0.02,
            min_nodes: 101,
            max_nodes: 8001,
        }
    }
}

impl GridPolicy {
    pub fn grid(&self, dom: &Domain, eps: f64) -> Result<GridSpec> {
        let (lo, hi) = dom.bounding_box();
        let h = self.h_over_eps * eps;
        let nodes = lo
            .iter()
            .zip(&hi)
            .map(|(l, u)| {
                let n = ((u - l) / h - 1e-9).ceil() as usize + 1;
                n.clamp(self.min_nodes.max(MIN_INTERIOR + 2), self.max_nodes.max(MIN_INTERIOR + 2))
            })
            .collect();
        GridSpec::new(lo, hi, nodes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AsymptoticsRow {
    pub epsilon: f64,
    pub lambda: f64,
    pub eps_lambda: f64,
    pub nodes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Asymptotics {
    pub rows: Vec<AsymptoticsRow>,
    /// Linear extrapolation of `eps * lambda` to `eps = 0` from the last two rows.
    pub extrapolated: f64,
    /// `eps * lambda` decreases along the sweep.
    pub decreasing: bool,
}

impl Asymptotics {
    /// CSV `epsilon,lambda,eps_lambda`.
    pub fn to_table(&self) -> Table {
        let mut t = Table::new(["epsilon", "lambda", "eps_lambda"]);
        for r in &self.rows {
            t.push_numbers(&[r.epsilon, r.lambda, r.eps_lambda]);
        }
        t
    }
}

/// `eps * lambda_eps` over a decreasing noise sweep, solved in parallel.
pub fn eigenvalue_asymptotics(
    sys: &MultiChannelSystem,
    prof: &FeedbackProfile,
    dom: &Domain,
    eps_list: &[f64],
    policy: &GridPolicy,
    opts: &EigenOptions,
) -> Result<Asymptotics> {
    if eps_list.len() < 2 {
        return Err(Error::Precondition("need at least two noise levels".into()));
    }
    if eps_list.windows(2).any(|w| w[1] >= w[0]) || eps_list.iter().any(|&e| !(e > 0.0)) {
        return Err(Error::Precondition("noise levels must be positive and decreasing".into()));
    }
    let rows: Vec<AsymptoticsRow> = eps_list
        .par_iter()
        .map(|&eps| {
            let s = sys.with_epsilon(eps)?;
            let grid = policy.grid(dom, eps)?;
            let op = discretize_generator(&s, prof, dom, &grid)?;
            let e = principal_eigenvalue(&op, opts)?;
            Ok(AsymptoticsRow {
                epsilon: eps,
                lambda: e.lambda,
                eps_lambda: eps * e.lambda,
                nodes: grid.nodes().to_vec(),
            })
        })
        .collect::<Result<_>>()?;
    let k = rows.len();
    let (e1, y1) = (rows[k - 2].epsilon, rows[k - 2].eps_lambda);
    let (e2, y2) = (rows[k - 1].epsilon, rows[k - 1].eps_lambda);
    let extrapolated = (e1 * y2 - e2 * y1) / (e1 - e2);
    let decreasing = rows.windows(2).all(|w| w[1].eps_lambda < w[0].eps_lambda);
    Ok(Asymptotics {
        rows,
        extrapolated,
        decreasing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use std::f64::consts::PI;

    fn brownian(d: usize, eps: f64) -> (MultiChannelSystem, FeedbackProfile) {
        let sys = MultiChannelSystem::new(
            DMatrix::zeros(d, d),
            vec![],
            DMatrix::identity(d, d),
            eps,
        )
        .unwrap();
        let prof = FeedbackProfile::zeros(&sys);
        (sys, prof)
    }

    #[test]
    fn laplacian_stencil_rows() {
        let (sys, prof) = brownian(1, 0.3);
        let dom = Domain::interval(0.0, 1.0).unwrap();
        let grid = GridSpec::uniform(&dom, 11).unwrap();
        let op = discretize_generator(&sys, &prof, &dom, &grid).unwrap();
        assert_eq!(op.len(), 9);
        let h = 0.1;
        let k = op.negated_matrix();
        let row: Vec<(usize, f64)> = k.row(4).collect();
        let s = 0.15 / (h * h);
        assert_eq!(row.len(), 3);
        assert!((row[0].1 + s).abs() < 1e-9 && (row[1].1 - 2.0 * s).abs() < 1e-9);
        assert!((row[2].1 + s).abs() < 1e-9);
        assert!(op.off_diagonals_nonnegative());
    }

    #[test]
    fn constants_and_quadratics() {
        let (sys, prof) = brownian(1, 0.4);
        let dom = Domain::interval(-1.0, 2.0).unwrap();
        let grid = GridSpec::uniform(&dom, 31).unwrap();
        let op = discretize_generator(&sys, &prof, &dom, &grid).unwrap();
        let ones = vec![1.0; grid.len()];
        assert!(op.apply_to_samples(&ones).unwrap().iter().all(|v| v.abs() < 1e-10));
        let q: Vec<f64> = (0..grid.len()).map(|i| grid.point(i)[0].powi(2)).collect();
        for v in op.apply_to_samples(&q).unwrap() {
            assert!((v - 0.4).abs() < 1e-9, "{v}");
        }
    }

    #[test]
    fn drift_and_mixed_terms_exact_on_quadratics() {
        // L x1 x2 = (eps/2) * 2 (s s^T)_12 + (A x)_1 x2 + (A x)_2 x1
        let a = DMatrix::from_row_slice(2, 2, &[0.3, -0.2, 0.1, -0.4]);
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5, 0.8]);
        let sys = MultiChannelSystem::new(a.clone(), vec![], s.clone(), 0.5).unwrap();
        let prof = FeedbackProfile::zeros(&sys);
        let dom = Domain::new_box(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        let grid = GridSpec::uniform(&dom, 21).unwrap();
        let op = discretize_generator(&sys, &prof, &dom, &grid).unwrap();
        assert_eq!(op.upwinded(), 0);
        let cov = &s * s.transpose();
        let f: Vec<f64> = (0..grid.len())
            .map(|i| {
                let x = grid.point(i);
                x[0] * x[1]
            })
            .collect();
        let out = op.apply_to_samples(&f).unwrap();
        for (r, &node) in op.unknown_nodes().iter().enumerate() {
            let x = grid.point(node);
            let b0 = a[(0, 0)] * x[0] + a[(0, 1)] * x[1];
            let b1 = a[(1, 0)] * x[0] + a[(1, 1)] * x[1];
            let exact = 0.5 * cov[(0, 1)] + b0 * x[1] + b1 * x[0];
            assert!((out[r] - exact).abs() < 1e-9, "{} vs {exact}", out[r]);
        }
    }

    #[test]
    fn strong_drift_upwinds() {
        let sys = MultiChannelSystem::scalar(50.0, &[], 1.0, 0.01).unwrap();
        let prof = FeedbackProfile::zeros(&sys);
        let dom = Domain::interval(1.0, 3.0).unwrap();
        let grid = GridSpec::uniform(&dom, 21).unwrap();
        let op = discretize_generator(&sys, &prof, &dom, &grid).unwrap();
        assert_eq!(op.upwinded(), op.len());
        assert!(op.peclet_warning().is_some());
        assert!(op.off_diagonals_nonnegative());
    }

    #[test]
    fn diagonal_matrix_eigenpair() {
        let k = SparseMatrix::diagonal(&[1.0, 2.0]);
        let e = principal_eigenpair(&k, &EigenOptions::default()).unwrap();
        assert!((e.lambda - 1.0).abs() < 1e-12);
        assert!((e.vector[0] - 1.0).abs() < 1e-12 && e.vector[1].abs() < 1e-6);
    }

    #[test]
    fn one_dimensional_dirichlet_laplacian() {
        let (sys, prof) = brownian(1, 0.1);
        let dom = Domain::interval(0.0, 1.0).unwrap();
        let grid = GridSpec::uniform(&dom, 2001).unwrap();
        let op = discretize_generator(&sys, &prof, &dom, &grid).unwrap();
        let e = principal_eigenvalue(&op, &EigenOptions::default()).unwrap();
        let exact = 0.1 * PI * PI / 2.0;
        assert!((e.lambda - exact).abs() < 1e-4 * exact, "{}", e.lambda);
        assert!(e.eigenfunction.min() > 0.0);
        // sin(pi x) peaks at 1 in the middle
        let mid = e.eigenfunction.values[999];
        assert!((mid - 1.0).abs() < 1e-6);
    }

    #[test]
    fn second_order_under_refinement() {
        let sys = MultiChannelSystem::scalar(0.7, &[], 1.0, 0.5).unwrap();
        let prof = FeedbackProfile::zeros(&sys);
        let dom = Domain::interval(0.5, 2.0).unwrap();
        let lam = |n: usize| {
            let grid = GridSpec::uniform(&dom, n).unwrap();
            let op = discretize_generator(&sys, &prof, &dom, &grid).unwrap();
            principal_eigenvalue(&op, &EigenOptions::default()).unwrap().lambda
        };
        let (a, b, c) = (lam(41), lam(81), lam(161));
        let ratio = (a - b) / (b - c);
        assert!((ratio - 4.0).abs() < 0.3, "ratio {ratio}");
    }

    #[test]
    fn ball_is_masked() {
        let (sys, prof) = brownian(2, 1.0);
        let dom = Domain::new_ball(vec![0.0, 0.0], 1.0).unwrap();
        let grid = GridSpec::uniform(&dom, 41).unwrap();
        let op = discretize_generator(&sys, &prof, &dom, &grid).unwrap();
        for &n in op.unknown_nodes() {
            assert!(dom.contains(&grid.point(n)).unwrap());
        }
        // disk: (1/2) j_{0,1}^2 with j_{0,1} = 2.404825557695773; staircase error O(h)
        let e = principal_eigenvalue(&op, &EigenOptions::default()).unwrap();
        let exact = 0.5 * 2.404825557695773f64.powi(2);
        assert!((e.lambda - exact).abs() < 0.1 * exact, "{}", e.lambda);
    }

    #[test]
    fn coarse_grid_rejected() {
        let dom = Domain::interval(0.0, 1.0).unwrap();
        assert!(matches!(GridSpec::uniform(&dom, 4), Err(Error::GridTooCoarse(_))));
    }

    #[test]
    fn pure_diffusion_sweep_vanishes() {
        let (sys, prof) = brownian(1, 0.2);
        let dom = Domain::interval(0.0, 1.0).unwrap();
        let policy = GridPolicy {
            h_over_eps: 0.05,
            min_nodes: 201,
            max_nodes: 2001,
        };
        let a = eigenvalue_asymptotics(
            &sys,
            &prof,
            &dom,
            &[0.2, 0.1, 0.05],
            &policy,
            &EigenOptions::default(),
        )
        .unwrap();
        for r in &a.rows {
            let exact = r.epsilon * r.epsilon * PI * PI / 2.0;
            assert!((r.eps_lambda - exact).abs() < 1e-4 * exact);
        }
        assert!(a.decreasing);
        assert_eq!(a.to_table().header().join(","), "epsilon,lambda,eps_lambda");
    }

    #[test]
    fn stable_equilibrium_rate_decays_fast() {
        let sys = MultiChannelSystem::scalar(-1.0, &[], 1.0, 0.2).unwrap();
        let prof = FeedbackProfile::zeros(&sys);
        let dom = Domain::interval(-1.0, 1.0).unwrap();
        let a = eigenvalue_asymptotics(
            &sys,
            &prof,
            &dom,
            &[0.2, 0.1, 0.05],
            &GridPolicy::default(),
            &EigenOptions::default(),
        )
        .unwrap();
        assert!(a.decreasing);
        // Kramers: lambda ~ e^{-1/eps}; eps*lambda at 0.05 is about 1e-9
        assert!(a.rows[2].eps_lambda < 1e-6, "{:?}", a.rows);
        assert!(a.rows[1].eps_lambda < 0.05 * a.rows[0].eps_lambda);
    }
}
