//! Small dense kernels for the hot loops, plus the matrix exponential.

use nalgebra::DMatrix;

/// Row-major copy of a small dense matrix. Hot loops index this directly
/// instead of going through `nalgebra` allocations.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Dense {
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let (rows, cols) = m.shape();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(m[(i, j)]);
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// `out = self * x`
    #[inline]
    pub fn mul_vec(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate().take(self.rows) {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }

    /// `out = self^T * x`
    #[inline]
    pub fn mul_transpose_vec(&self, x: &[f64], out: &mut [f64]) {
        out[..self.cols].iter_mut().for_each(|o| *o = 0.0);
        for (i, &xi) in x.iter().enumerate().take(self.rows) {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * xi;
            }
        }
    }

    /// `x^T * self * x` for a square matrix.
    #[inline]
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        let mut s = 0.0;
        for (i, &xi) in x.iter().enumerate().take(self.rows) {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            let r: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum();
            s += xi * r;
        }
        s
    }
}

/// Matrix exponential by scaling and squaring of a degree-18 Taylor polynomial.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "expm needs a square matrix");
    let norm = a.iter().map(|v| v.abs()).sum::<f64>().max(0.0);
    let mut squarings = 0u32;
    let mut scale = 1.0;
    while norm * scale > 0.5 {
        scale *= 0.5;
        squarings += 1;
    }
    let x = a * scale;
    let mut term = DMatrix::<f64>::identity(n, n);
    let mut sum = term.clone();
    for k in 1..=18 {
        term = &term * &x / k as f64;
        sum += &term;
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    sum
}

/// Neumaier-compensated running sum. Order-dependent, so callers feed it in a
/// fixed (index) order.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

pub fn compensated_sum<I: IntoIterator<Item = f64>>(xs: I) -> f64 {
    let mut s = CompensatedSum::default();
    for x in xs {
        s.add(x);
    }
    s.value()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expm_scalar_matches_exp() {
        for a in [-10.0, -1.0, 0.0, 0.3, 2.5] {
            let m = DMatrix::from_element(1, 1, a);
            let e = expm(&m)[(0, 0)];
            assert!((e - f64::exp(a)).abs() <= 1e-13 * f64::exp(a).max(1.0), "{a}");
        }
    }

    #[test]
    fn expm_rotation_is_orthogonal() {
        let t = 0.7;
        let m = DMatrix::from_row_slice(2, 2, &[0.0, t, -t, 0.0]);
        let e = expm(&m);
        let expected = DMatrix::from_row_slice(2, 2, &[t.cos(), t.sin(), -t.sin(), t.cos()]);
        assert!((e - expected).norm() < 1e-14);
    }

    #[test]
    fn expm_agrees_with_eigendecomposition() {
        // symmetric matrix: exp via spectral decomposition as an independent route
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 0.4, -0.2, 0.4, -0.5, 0.3, -0.2, 0.3, 0.8]);
        let eig = m.clone().symmetric_eigen();
        let d = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::exp));
        let oracle = &eig.eigenvectors * d * eig.eigenvectors.transpose();
        assert!((expm(&m) - oracle).norm() < 1e-12);
    }

    #[test]
    fn dense_kernels() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let d = Dense::from_matrix(&m);
        let mut out = [0.0; 2];
        d.mul_vec(&[1.0, 0.0, -1.0], &mut out);
        assert_eq!(out, [-2.0, -2.0]);
        let mut outt = [0.0; 3];
        d.mul_transpose_vec(&[1.0, 1.0], &mut outt);
        assert_eq!(outt, [5.0, 7.0, 9.0]);
        let s = Dense::from_matrix(&DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]));
        assert_eq!(s.quad_form(&[1.0, -1.0]), 3.0);
    }

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let xs = [1e16, 1.0, -1e16, 1.0];
        assert_eq!(compensated_sum(xs), 2.0);
    }
}
