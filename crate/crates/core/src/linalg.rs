//! Compressed-row sparse matrices, small dense matrices and linear solvers.

use faer::prelude::*;
use faer::sparse::{SparseColMat, Triplet};
use faer::Col;

use crate::error::{Error, Result};

/// Row-major dense matrix for elemental algebra and test oracles.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        let mut m = Self::zeros(r, c);
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), c, "ragged rows");
            m.data[i * c..(i + 1) * c].copy_from_slice(row);
        }
        m
    }

    pub fn from_array4(a: &[[f64; 4]; 4]) -> Self {
        let mut m = Self::zeros(4, 4);
        for i in 0..4 {
            m.data[i * 4..i * 4 + 4].copy_from_slice(&a[i]);
        }
        m
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Self {
        assert_eq!(self.cols, other.rows, "inner dimensions differ");
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        out
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, x.len());
        (0..self.rows)
            .map(|i| (0..self.cols).map(|j| self[(i, j)] * x[j]).sum())
            .collect()
    }

    pub fn scale(&self, s: f64) -> Self {
        DenseMatrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| v * s).collect() }
    }

    pub fn add(&self, other: &DenseMatrix) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &DenseMatrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Solves a square system by Gaussian elimination with partial pivoting.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let n = self.rows;
        if self.cols != n || b.len() != n {
            return Err(Error::Dimension { expected: n, got: b.len() });
        }
        let mut a = self.data.clone();
        let mut x = b.to_vec();
        for k in 0..n {
            let p = (k..n)
                .max_by(|&i, &j| a[i * n + k].abs().total_cmp(&a[j * n + k].abs()))
                .unwrap();
            if a[p * n + k] == 0.0 {
                return Err(Error::Singular(format!("zero pivot in column {k}")));
            }
            if p != k {
                for j in 0..n {
                    a.swap(k * n + j, p * n + j);
                }
                x.swap(k, p);
            }
            for i in k + 1..n {
                let f = a[i * n + k] / a[k * n + k];
                if f != 0.0 {
                    for j in k..n {
                        a[i * n + j] -= f * a[k * n + j];
                    }
                    x[i] -= f * x[k];
                }
            }
        }
        for k in (0..n).rev() {
            let s: f64 = (k + 1..n).map(|j| a[k * n + j] * x[j]).sum();
            x[k] = (x[k] - s) / a[k * n + k];
        }
        Ok(x)
    }
}

impl std::ops::Index<(usize, usize)> for DenseMatrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Compressed sparse row matrix with sorted, unique column indices per row.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    data: Vec<f64>,
}

impl CsrMatrix {
    pub fn new(
        nrows: usize,
        ncols: usize,
        indptr: Vec<usize>,
        indices: Vec<usize>,
        data: Vec<f64>,
    ) -> Result<Self> {
        if indptr.len() != nrows + 1 || indices.len() != data.len() || indptr[nrows] != data.len() {
            return Err(Error::Invariant("inconsistent CSR arrays".into()));
        }
        for i in 0..nrows {
            let row = &indices[indptr[i]..indptr[i + 1]];
            if row.windows(2).any(|w| w[0] >= w[1]) || row.iter().any(|&j| j >= ncols) {
                return Err(Error::Invariant(format!("row {i} has unsorted or invalid columns")));
            }
        }
        Ok(CsrMatrix { nrows, ncols, indptr, indices, data })
    }

    /// Sums duplicate entries; summation follows the input order, so the result is reproducible.
    pub fn from_triplets(nrows: usize, ncols: usize, trip: &[(usize, usize, f64)]) -> Self {
        let mut counts = vec![0usize; nrows + 1];
        for &(i, j, _) in trip {
            assert!(i < nrows && j < ncols, "triplet ({i}, {j}) out of bounds");
            counts[i + 1] += 1;
        }
        for i in 0..nrows {
            counts[i + 1] += counts[i];
        }
        // stable bucket by row keeps input order within each row
        let mut next = counts.clone();
        let mut cols = vec![0usize; trip.len()];
        let mut vals = vec![0.0; trip.len()];
        for &(i, j, v) in trip {
            cols[next[i]] = j;
            vals[next[i]] = v;
            next[i] += 1;
        }
        let mut indptr = Vec::with_capacity(nrows + 1);
        let mut indices = Vec::with_capacity(trip.len());
        let mut data = Vec::with_capacity(trip.len());
        indptr.push(0);
        let mut order: Vec<usize> = Vec::new();
        for i in 0..nrows {
            let (s, e) = (counts[i], counts[i + 1]);
            order.clear();
            order.extend(s..e);
            order.sort_by_key(|&k| cols[k]);
            let mut last = usize::MAX;
            for &k in &order {
                if cols[k] == last {
                    *data.last_mut().unwrap() += vals[k];
                } else {
                    indices.push(cols[k]);
                    data.push(vals[k]);
                    last = cols[k];
                }
            }
            indptr.push(indices.len());
        }
        CsrMatrix { nrows, ncols, indptr, indices, data }
    }

    pub fn identity(n: usize) -> Self {
        CsrMatrix {
            nrows: n,
            ncols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            data: vec![1.0; n],
        }
    }

    pub fn diagonal(d: &[f64]) -> Self {
        let mut m = Self::identity(d.len());
        m.data.copy_from_slice(d);
        m
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.data.len()
    }

    pub fn indptr(&self) -> &[usize] {
        &self.indptr
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let r = self.indptr[i]..self.indptr[i + 1];
        (&self.indices[r.clone()], &self.data[r])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (c, v) = self.row(i);
        c.binary_search(&j).map_or(0.0, |k| v[k])
    }

    /// Position of entry (i, j) in the value array.
    pub fn position(&self, i: usize, j: usize) -> Option<usize> {
        let (c, _) = self.row(i);
        c.binary_search(&j).ok().map(|k| self.indptr[i] + k)
    }

    /// Replaces each diagonal entry by minus the sum of the off-diagonal entries of its row.
    pub fn zero_row_sum_diagonal(&mut self) {
        self.set_row_sums(&vec![0.0; self.nrows]);
    }

    /// Sets each diagonal entry so that row `i` sums to `target[i]`.
    pub fn set_row_sums(&mut self, target: &[f64]) {
        assert_eq!(target.len(), self.nrows, "one target per row");
        for i in 0..self.nrows {
            let (lo, hi) = (self.indptr[i], self.indptr[i + 1]);
            let mut off = 0.0;
            let mut d = None;
            for k in lo..hi {
                if self.indices[k] == i {
                    d = Some(k);
                } else {
                    off += self.data[k];
                }
            }
            if let Some(k) = d {
                self.data[k] = target[i] - off;
            }
        }
    }

    /// `Σ_j a_ij (x_j − x_i)`: equals `A x` when rows sum to zero, with pairwise cancellation
    /// between symmetric entries.
    pub fn difference_apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.nrows)
            .map(|i| {
                let (c, v) = self.row(i);
                c.iter().zip(v).filter(|(&j, _)| j != i).map(|(&j, &a)| a * (x[j] - x[i])).sum()
            })
            .collect()
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.nrows.min(self.ncols)).map(|i| self.get(i, i)).collect()
    }

    pub fn spmv(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.ncols {
            return Err(Error::Dimension { expected: self.ncols, got: x.len() });
        }
        Ok(self.mul_vec(x))
    }

    pub(crate) fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.nrows)
            .map(|i| {
                let (c, v) = self.row(i);
                c.iter().zip(v).map(|(&j, &a)| a * x[j]).sum()
            })
            .collect()
    }

    pub fn transpose_apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.nrows {
            return Err(Error::Dimension { expected: self.nrows, got: x.len() });
        }
        let mut y = vec![0.0; self.ncols];
        for i in 0..self.nrows {
            let (c, v) = self.row(i);
            for (&j, &a) in c.iter().zip(v) {
                y[j] += a * x[i];
            }
        }
        Ok(y)
    }

    pub fn transpose(&self) -> CsrMatrix {
        let mut trip = Vec::with_capacity(self.nnz());
        for i in 0..self.nrows {
            let (c, v) = self.row(i);
            for (&j, &a) in c.iter().zip(v) {
                trip.push((j, i, a));
            }
        }
        CsrMatrix::from_triplets(self.ncols, self.nrows, &trip)
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut d = DenseMatrix::zeros(self.nrows, self.ncols);
        for i in 0..self.nrows {
            let (c, v) = self.row(i);
            for (&j, &a) in c.iter().zip(v) {
                d[(i, j)] = a;
            }
        }
        d
    }

    /// `|A||x| + |b|`, the scale of the componentwise backward error.
    pub fn abs_apply(&self, x: &[f64], b: &[f64]) -> Vec<f64> {
        (0..self.nrows)
            .map(|i| {
                let (c, v) = self.row(i);
                c.iter().zip(v).map(|(&j, &a)| (a * x[j]).abs()).sum::<f64>() + b[i].abs()
            })
            .collect()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.nrows).map(|i| self.row(i).1.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        self.transpose_apply(&vec![1.0; self.nrows]).expect("matching dimensions")
    }

    /// Largest off-diagonal entry (−∞ for diagonal matrices).
    pub fn max_offdiag(&self) -> f64 {
        let mut m = f64::NEG_INFINITY;
        for i in 0..self.nrows {
            let (c, v) = self.row(i);
            for (&j, &a) in c.iter().zip(v) {
                if i != j {
                    m = m.max(a);
                }
            }
        }
        m
    }

    pub fn count_positive_offdiag(&self) -> usize {
        let mut n = 0;
        for i in 0..self.nrows {
            let (c, v) = self.row(i);
            n += c.iter().zip(v).filter(|(&j, &a)| j != i && a > 0.0).count();
        }
        n
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        if self.nrows != self.ncols {
            return false;
        }
        for i in 0..self.nrows {
            let (c, v) = self.row(i);
            for (&j, &a) in c.iter().zip(v) {
                if (a - self.get(j, i)).abs() > tol * a.abs().max(1.0) {
                    return false;
                }
            }
        }
        true
    }

    /// `self + s·other`, pattern is the union.
    pub fn add_scaled(&self, other: &CsrMatrix, s: f64) -> CsrMatrix {
        assert_eq!((self.nrows, self.ncols), (other.nrows, other.ncols));
        let mut trip = Vec::with_capacity(self.nnz() + other.nnz());
        for (m, f) in [(self, 1.0), (other, s)] {
            for i in 0..m.nrows {
                let (c, v) = m.row(i);
                for (&j, &a) in c.iter().zip(v) {
                    trip.push((i, j, f * a));
                }
            }
        }
        CsrMatrix::from_triplets(self.nrows, self.ncols, &trip)
    }

    pub fn scaled(&self, s: f64) -> CsrMatrix {
        let mut m = self.clone();
        m.data.iter_mut().for_each(|v| *v *= s);
        m
    }

    /// Sparse product `self · other`.
    pub fn matmul(&self, other: &CsrMatrix) -> CsrMatrix {
        assert_eq!(self.ncols, other.nrows);
        let mut trip = Vec::new();
        for i in 0..self.nrows {
            let (c, v) = self.row(i);
            for (&k, &a) in c.iter().zip(v) {
                let (c2, v2) = other.row(k);
                for (&j, &b) in c2.iter().zip(v2) {
                    trip.push((i, j, a * b));
                }
            }
        }
        CsrMatrix::from_triplets(self.nrows, other.ncols, &trip)
    }
}

/// Diagonal dominance, sign and positivity scans of an M-matrix sufficient condition.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MMatrixScan {
    pub weakly_diag_dominant: bool,
    pub strict_rows: usize,
    pub offdiag_nonpositive: bool,
    pub diag_positive: bool,
}

impl MMatrixScan {
    pub fn passes(&self) -> bool {
        self.weakly_diag_dominant && self.strict_rows > 0 && self.offdiag_nonpositive && self.diag_positive
    }
}

pub fn m_matrix_scan(a: &CsrMatrix, tol: f64) -> MMatrixScan {
    let mut dd = true;
    let mut strict = 0;
    let mut offneg = true;
    let mut diagpos = true;
    for i in 0..a.nrows() {
        let (c, v) = a.row(i);
        let mut d = 0.0;
        let mut off = 0.0;
        let mut scale = 0.0f64;
        for (&j, &x) in c.iter().zip(v) {
            scale = scale.max(x.abs());
            if j == i {
                d = x;
            } else {
                off += x.abs();
                if x > 0.0 {
                    offneg = false;
                }
            }
        }
        if d <= 0.0 {
            diagpos = false;
        }
        if d < off - tol * scale {
            dd = false;
        }
        if d > off + tol * scale {
            strict += 1;
        }
    }
    MMatrixScan { weakly_diag_dominant: dd, strict_rows: strict, offdiag_nonpositive: offneg, diag_positive: diagpos }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    /// Direct LU up to `DIRECT_LIMIT` unknowns, iterative above.
    Auto,
    DirectLu,
    Cg,
    BiCgStab,
}

pub const DIRECT_LIMIT: usize = 1_000_000;

#[derive(Clone, Copy, Debug)]
pub struct SolveOptions {
    pub method: Method,
    pub rtol: f64,
    pub max_iter: Option<usize>,
    /// Caller asserts symmetry, so `Auto` may pick CG for large systems.
    pub symmetric: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions { method: Method::Auto, rtol: 1e-10, max_iter: None, symmetric: false }
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

fn residual(a: &CsrMatrix, x: &[f64], b: &[f64]) -> Vec<f64> {
    let ax = a.mul_vec(x);
    b.iter().zip(ax).map(|(bi, ai)| bi - ai).collect()
}

/// Solves `A x = b` with the residual contract `‖Ax − b‖ ≤ rtol ‖b‖`.
pub fn solve(a: &CsrMatrix, b: &[f64], opts: &SolveOptions) -> Result<Vec<f64>> {
    if a.nrows() != a.ncols() {
        return Err(Error::Dimension { expected: a.nrows(), got: a.ncols() });
    }
    if b.len() != a.nrows() {
        return Err(Error::Dimension { expected: a.nrows(), got: b.len() });
    }
    let method = match opts.method {
        Method::Auto if a.nrows() <= DIRECT_LIMIT => Method::DirectLu,
        Method::Auto if opts.symmetric => Method::Cg,
        Method::Auto => Method::BiCgStab,
        m => m,
    };
    match method {
        Method::DirectLu => LuSolver::factor(a)?.solve_with_tol(b, opts.rtol),
        Method::Cg => cg(a, b, opts),
        _ => bicgstab(a, b, opts),
    }
}

/// Sparse LU factorisation reused across right-hand sides.
pub struct LuSolver {
    a: CsrMatrix,
    lu: faer::sparse::linalg::solvers::Lu<usize, f64>,
}

impl LuSolver {
    pub fn factor(a: &CsrMatrix) -> Result<Self> {
        let n = a.nrows();
        let mut trip = Vec::with_capacity(a.nnz());
        for i in 0..n {
            let (c, v) = a.row(i);
            for (&j, &x) in c.iter().zip(v) {
                trip.push(Triplet::new(i, j, x));
            }
        }
        let m = SparseColMat::<usize, f64>::try_new_from_triplets(n, a.ncols(), &trip)
            .map_err(|e| Error::Invariant(format!("sparse conversion failed: {e:?}")))?;
        let lu = m.sp_lu().map_err(|e| Error::Singular(format!("{e:?}")))?;
        Ok(LuSolver { a: a.clone(), lu })
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        self.solve_with_tol(b, 1e-10)
    }

    /// LU solve followed by up to three refinement sweeps until the residual contract holds.
    pub fn solve_with_tol(&self, b: &[f64], rtol: f64) -> Result<Vec<f64>> {
        let n = self.a.nrows();
        if b.len() != n {
            return Err(Error::Dimension { expected: n, got: b.len() });
        }
        let bn = norm(b);
        if bn == 0.0 {
            return Ok(vec![0.0; n]);
        }
        let apply = |r: &[f64]| -> Vec<f64> {
            let rc = Col::<f64>::from_fn(n, |i| r[i]);
            let x = self.lu.solve(&rc);
            (0..n).map(|i| x[i]).collect()
        };
        let mut x = apply(b);
        let mut r = residual(&self.a, &x, b);
        let mut rn = norm(&r);
        for _ in 0..6 {
            if !rn.is_finite() || x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Singular("non-finite LU solution".into()));
            }
            if rn <= 1e-15 * bn {
                break;
            }
            let dx = apply(&r);
            let trial: Vec<f64> = x.iter().zip(&dx).map(|(xi, d)| xi + d).collect();
            let tr = residual(&self.a, &trial, b);
            let tn = norm(&tr);
            if !(tn < 0.5 * rn) {
                if tn < rn {
                    (x, rn) = (trial, tn);
                }
                break;
            }
            (x, r, rn) = (trial, tr, tn);
        }
        let scale = norm(&self.a.abs_apply(&x, b));
        if rn <= rtol * scale {
            Ok(x)
        } else {
            Err(Error::Singular(format!("LU residual {:e} above tolerance", rn / scale)))
        }
    }
}

/// Minimum-norm least-squares solution of a symmetric positive semidefinite system, dropping
/// eigenvalues below `rel_cut` times the largest.
pub fn symmetric_pinv_solve(a: &DenseMatrix, b: &[f64], rel_cut: f64) -> Result<Vec<f64>> {
    let n = a.rows;
    if a.cols != n || b.len() != n {
        return Err(Error::Dimension { expected: n, got: b.len() });
    }
    let m = Mat::<f64>::from_fn(n, n, |i, j| 0.5 * (a[(i, j)] + a[(j, i)]));
    let evd = m
        .self_adjoint_eigen(faer::Side::Lower)
        .map_err(|e| Error::Singular(format!("eigendecomposition failed: {e:?}")))?;
    let u = evd.U();
    let s = evd.S().column_vector();
    let smax = (0..n).map(|i| s[i].abs()).fold(0.0, f64::max);
    let mut x = vec![0.0; n];
    for k in 0..n {
        if s[k] <= rel_cut * smax {
            continue;
        }
        let c: f64 = (0..n).map(|i| u[(i, k)] * b[i]).sum::<f64>() / s[k];
        for (i, xi) in x.iter_mut().enumerate() {
            *xi += c * u[(i, k)];
        }
    }
    Ok(x)
}

fn jacobi(a: &CsrMatrix) -> Result<Vec<f64>> {
    a.diag()
        .into_iter()
        .enumerate()
        .map(|(i, d)| {
            if d == 0.0 {
                Err(Error::Singular(format!("zero diagonal in row {i}")))
            } else {
                Ok(1.0 / d)
            }
        })
        .collect()
}

/// Jacobi-preconditioned conjugate gradients.
pub fn cg(a: &CsrMatrix, b: &[f64], opts: &SolveOptions) -> Result<Vec<f64>> {
    let n = b.len();
    let dinv = jacobi(a)?;
    let max_iter = opts.max_iter.unwrap_or(10 * n.max(10));
    let bn = norm(b);
    let mut x = vec![0.0; n];
    if bn == 0.0 {
        return Ok(x);
    }
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&dinv).map(|(r, d)| r * d).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    for it in 0..max_iter {
        let ap = a.mul_vec(&p);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            return Err(Error::Singular(format!("CG breakdown at iteration {it}")));
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if norm(&r) <= opts.rtol * bn {
            // recompute the true residual to guard against drift
            let tr = norm(&residual(a, &x, b));
            if tr <= opts.rtol * bn {
                return Ok(x);
            }
            r = residual(a, &x, b);
        }
        for i in 0..n {
            z[i] = r[i] * dinv[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::NotConverged { iterations: max_iter, residual: norm(&residual(a, &x, b)) / bn })
}

/// Jacobi-preconditioned BiCGStab.
pub fn bicgstab(a: &CsrMatrix, b: &[f64], opts: &SolveOptions) -> Result<Vec<f64>> {
    let n = b.len();
    let dinv = jacobi(a)?;
    let max_iter = opts.max_iter.unwrap_or(10 * n.max(10));
    let bn = norm(b);
    let mut x = vec![0.0; n];
    if bn == 0.0 {
        return Ok(x);
    }
    let mut r = b.to_vec();
    let mut r0 = r.clone();
    let mut rho = 1.0;
    let mut alpha = 1.0;
    let mut omega = 1.0;
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let prec = |y: &[f64]| -> Vec<f64> { y.iter().zip(&dinv).map(|(a, b)| a * b).collect() };
    for _ in 0..max_iter {
        let rho_new = dot(&r0, &r);
        if rho_new == 0.0 || omega == 0.0 {
            // restart from the current iterate
            r = residual(a, &x, b);
            r0 = r.clone();
            rho = 1.0;
            alpha = 1.0;
            omega = 1.0;
            v.iter_mut().for_each(|e| *e = 0.0);
            p.iter_mut().for_each(|e| *e = 0.0);
            continue;
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        let ph = prec(&p);
        v = a.mul_vec(&ph);
        let r0v = dot(&r0, &v);
        if r0v == 0.0 {
            return Err(Error::Singular("BiCGStab breakdown".into()));
        }
        alpha = rho / r0v;
        let s: Vec<f64> = r.iter().zip(&v).map(|(r, v)| r - alpha * v).collect();
        if norm(&s) <= opts.rtol * bn {
            for i in 0..n {
                x[i] += alpha * ph[i];
            }
            if norm(&residual(a, &x, b)) <= opts.rtol * bn {
                return Ok(x);
            }
            r = residual(a, &x, b);
            continue;
        }
        let sh = prec(&s);
        let t = a.mul_vec(&sh);
        let tt = dot(&t, &t);
        omega = if tt == 0.0 { 0.0 } else { dot(&t, &s) / tt };
        for i in 0..n {
            x[i] += alpha * ph[i] + omega * sh[i];
            r[i] = s[i] - omega * t[i];
        }
        if norm(&r) <= opts.rtol * bn && norm(&residual(a, &x, b)) <= opts.rtol * bn {
            return Ok(x);
        }
    }
    Err(Error::NotConverged { iterations: max_iter, residual: norm(&residual(a, &x, b)) / bn })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lap1d(n: usize) -> CsrMatrix {
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 2.0));
            if i > 0 {
                t.push((i, i - 1, -1.0));
            }
            if i + 1 < n {
                t.push((i, i + 1, -1.0));
            }
        }
        CsrMatrix::from_triplets(n, n, &t)
    }

    #[test]
    fn identity_spmv() {
        let x = vec![1.0, -2.0, 3.5];
        assert_eq!(CsrMatrix::identity(3).spmv(&x).unwrap(), x);
        assert!(CsrMatrix::identity(3).spmv(&[1.0]).is_err());
    }

    #[test]
    fn random_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let mut t = Vec::new();
            for _ in 0..12 {
                t.push((rng.random_range(0..5), rng.random_range(0..5), rng.random_range(-3..4) as f64));
            }
            let a = CsrMatrix::from_triplets(5, 5, &t);
            let d = a.to_dense();
            let x: Vec<f64> = (0..5).map(|_| rng.random_range(-4..5) as f64).collect();
            assert_eq!(a.spmv(&x).unwrap(), d.matvec(&x));
            assert_eq!(a.transpose_apply(&x).unwrap(), d.transpose().matvec(&x));
        }
    }

    #[test]
    fn duplicates_are_summed() {
        let a = CsrMatrix::from_triplets(2, 2, &[(0, 1, 1.0), (0, 1, 2.0), (1, 0, -1.0)]);
        assert_eq!(a.get(0, 1), 3.0);
        assert_eq!(a.nnz(), 2);
    }

    #[test]
    fn diagonal_solve_is_exact() {
        let a = CsrMatrix::diagonal(&[2.0, 4.0, 8.0]);
        let b = [1.0, 1.0, 1.0];
        for m in [Method::DirectLu, Method::Cg, Method::BiCgStab] {
            let x = solve(&a, &b, &SolveOptions { method: m, ..Default::default() }).unwrap();
            assert!((x[0] - 0.5).abs() < 1e-15 && (x[1] - 0.25).abs() < 1e-15 && (x[2] - 0.125).abs() < 1e-15);
        }
    }

    #[test]
    fn spd_3x3_vs_dense_inverse() {
        let a = CsrMatrix::from_triplets(
            3,
            3,
            &[(0, 0, 4.0), (0, 1, 1.0), (1, 0, 1.0), (1, 1, 3.0), (1, 2, 0.5), (2, 1, 0.5), (2, 2, 2.0)],
        );
        let b = [1.0, 2.0, 3.0];
        let oracle = a.to_dense().solve(&b).unwrap();
        for m in [Method::DirectLu, Method::Cg, Method::BiCgStab] {
            let x = solve(&a, &b, &SolveOptions { method: m, ..Default::default() }).unwrap();
            for i in 0..3 {
                assert!((x[i] - oracle[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn iterative_agree_with_direct() {
        let a = lap1d(200);
        let b: Vec<f64> = (0..200).map(|i| (i as f64 * 0.1).sin()).collect();
        let xd = solve(&a, &b, &SolveOptions { method: Method::DirectLu, ..Default::default() }).unwrap();
        let xc = solve(&a, &b, &SolveOptions { method: Method::Cg, ..Default::default() }).unwrap();
        let xb = solve(&a, &b, &SolveOptions { method: Method::BiCgStab, ..Default::default() }).unwrap();
        let scale = xd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..200 {
            assert!((xd[i] - xc[i]).abs() < 1e-6 * scale);
            assert!((xd[i] - xb[i]).abs() < 1e-6 * scale);
        }
    }

    #[test]
    fn non_convergence_reports_residual() {
        let a = lap1d(100);
        let b = vec![1.0; 100];
        let r = solve(&a, &b, &SolveOptions { method: Method::Cg, max_iter: Some(3), ..Default::default() });
        match r {
            Err(Error::NotConverged { iterations, residual }) => {
                assert_eq!(iterations, 3);
                assert!(residual > 0.0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn singular_lu_is_reported() {
        let a = CsrMatrix::from_triplets(2, 2, &[(0, 0, 1.0), (0, 1, 1.0), (1, 0, 1.0), (1, 1, 1.0)]);
        assert!(solve(&a, &[1.0, 2.0], &SolveOptions::default()).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::{prop_assert, proptest, ProptestConfig};

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            /// Random weakly dominant Z-matrices with one strict row are monotone.
            #[test]
            fn m_matrix_monotone(seed in 0u64..100_000, n in 2usize..12) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut t = Vec::new();
                let mut off = vec![0.0; n];
                for i in 0..n {
                    for j in 0..n {
                        if i != j && (j == i + 1 || j + 1 == i || rng.random::<f64>() < 0.3) {
                            let w = -rng.random_range(0.0..1.0);
                            t.push((i, j, w));
                            off[i] -= w;
                        }
                    }
                }
                for i in 0..n {
                    t.push((i, i, off[i] + if i == 0 { 1.0 } else { 0.0 }));
                }
                let a = CsrMatrix::from_triplets(n, n, &t);
                prop_assert!(m_matrix_scan(&a, 1e-14).passes());
                let b: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
                let x = solve(&a, &b, &SolveOptions::default()).unwrap();
                let scale = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                prop_assert!(x.iter().all(|&v| v >= -1e-9 * scale));
            }
        }
    }
}
