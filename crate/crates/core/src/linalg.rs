//! Dense and sparse kernels shared by the regression and reservoir code.

use nalgebra::{Cholesky, DMatrix, DVector, Dim, Matrix, RawStorage, Schur, SymmetricEigen};

/// Accumulates `beta * c + a * bᵀ` where `a` is `m × k`, `b` is `n × k` and `c` is `m × n`,
/// without materialising the transpose.
pub fn gemm_abt<R1, C1, S1, R2, C2, S2>(
    c: &mut DMatrix<f64>,
    a: &Matrix<f64, R1, C1, S1>,
    b: &Matrix<f64, R2, C2, S2>,
    beta: f64,
) where
    R1: Dim,
    C1: Dim,
    S1: RawStorage<f64, R1, C1>,
    R2: Dim,
    C2: Dim,
    S2: RawStorage<f64, R2, C2>,
{
    let (m, k) = a.shape();
    let (n, kb) = b.shape();
    assert_eq!(k, kb, "inner dimensions differ");
    assert_eq!(c.shape(), (m, n), "output shape");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        *c *= beta;
        return;
    }
    let (ars, acs) = a.strides();
    let (brs, bcs) = b.strides();
    // SAFETY: pointers and strides come from live nalgebra storages of the asserted shapes,
    // and `c` is an owned contiguous column-major matrix that aliases neither input.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.ptr(),
            ars as isize,
            acs as isize,
            b.data.ptr(),
            bcs as isize,
            brs as isize,
            beta,
            c.as_mut_ptr(),
            1,
            m as isize,
        );
    }
}

/// Accumulates `beta * c + aᵀ * b` where `a` is `k × m`, `b` is `k × n` and `c` is `m × n`.
pub fn gemm_atb<R1, C1, S1, R2, C2, S2>(
    c: &mut DMatrix<f64>,
    a: &Matrix<f64, R1, C1, S1>,
    b: &Matrix<f64, R2, C2, S2>,
    beta: f64,
) where
    R1: Dim,
    C1: Dim,
    S1: RawStorage<f64, R1, C1>,
    R2: Dim,
    C2: Dim,
    S2: RawStorage<f64, R2, C2>,
{
    let (k, m) = a.shape();
    let (kb, n) = b.shape();
    assert_eq!(k, kb, "inner dimensions differ");
    assert_eq!(c.shape(), (m, n), "output shape");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        *c *= beta;
        return;
    }
    let (ars, acs) = a.strides();
    let (brs, bcs) = b.strides();
    // SAFETY: as in `gemm_abt`; `a` is read through swapped strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.ptr(),
            acs as isize,
            ars as isize,
            b.data.ptr(),
            brs as isize,
            bcs as isize,
            beta,
            c.as_mut_ptr(),
            1,
            m as isize,
        );
    }
}

/// `p * pᵀ`.
pub fn gram(p: &DMatrix<f64>) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(p.nrows(), p.nrows());
    gemm_abt(&mut g, p, p, 0.0);
    g
}

/// `p * qᵀ`.
pub fn cross(p: &DMatrix<f64>, q: &DMatrix<f64>) -> DMatrix<f64> {
    let mut c = DMatrix::zeros(p.nrows(), q.nrows());
    gemm_abt(&mut c, p, q, 0.0);
    c
}

/// Outcome of a symmetric positive semi-definite solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Conditioning {
    Ok,
    /// The system was singular to working precision and the minimum-norm solution was returned.
    RankDeficient { rank: usize },
}

/// Solves `g x = r` for symmetric positive semi-definite `g`.
///
/// Uses a Cholesky factorisation when `g` is numerically positive definite and falls back to
/// an eigen-decomposition pseudo-inverse otherwise, which yields the minimum-norm solution.
pub fn solve_spd(g: &DMatrix<f64>, r: &DMatrix<f64>) -> (DMatrix<f64>, Conditioning) {
    let n = g.nrows();
    if n == 0 {
        return (DMatrix::zeros(0, r.ncols()), Conditioning::Ok);
    }
    let cutoff = n as f64 * f64::EPSILON;
    if let Some(chol) = Cholesky::new(g.clone()) {
        let l = chol.l_dirty();
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for i in 0..n {
            let d = l[(i, i)].abs();
            lo = lo.min(d);
            hi = hi.max(d);
        }
        if hi > 0.0 && (lo / hi).powi(2) > cutoff {
            return (chol.solve(r), Conditioning::Ok);
        }
    }
    let eig = SymmetricEigen::new(g.clone());
    let lmax = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tol = lmax * cutoff;
    let v = &eig.eigenvectors;
    let mut proj = v.transpose() * r;
    let mut rank = 0;
    for (i, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam > tol {
            rank += 1;
            proj.row_mut(i).scale_mut(1.0 / lam);
        } else {
            proj.row_mut(i).fill(0.0);
        }
    }
    let cond = if rank == n {
        Conditioning::Ok
    } else {
        Conditioning::RankDeficient { rank }
    };
    (v * proj, cond)
}

pub const SCHUR_MAX_ITER: usize = 10_000;

/// Largest eigenvalue modulus of a dense square matrix via a real Schur decomposition.
///
/// The uncapped decomposition can cycle on matrices with clustered repeated eigenvalues, so
/// the iteration is capped and retried with progressively looser deflation tolerances.
pub fn max_eigen_modulus(m: &DMatrix<f64>) -> Option<f64> {
    if m.is_empty() {
        return Some(0.0);
    }
    for eps in [f64::EPSILON, 1e-14, 1e-12, 1e-10] {
        if let Some(schur) = Schur::try_new(m.clone(), eps, SCHUR_MAX_ITER) {
            let ev = schur.complex_eigenvalues();
            return Some(ev.iter().fold(0.0f64, |acc, l| acc.max(l.norm())));
        }
    }
    None
}

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from `(row, col, value)` triplets. Triplets must be sorted by row then column
    /// and free of duplicates.
    pub fn from_sorted_triplets(
        nrows: usize,
        ncols: usize,
        triplets: &[(usize, usize, f64)],
    ) -> Option<Self> {
        let mut row_ptr = vec![0usize; nrows + 1];
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        let mut prev: Option<(usize, usize)> = None;
        for &(i, j, v) in triplets {
            if i >= nrows || j >= ncols {
                return None;
            }
            if let Some(p) = prev {
                if (i, j) <= p {
                    return None;
                }
            }
            prev = Some((i, j));
            row_ptr[i + 1] += 1;
            col_idx.push(j);
            values.push(v);
        }
        for i in 0..nrows {
            row_ptr[i + 1] += row_ptr[i];
        }
        Some(Self {
            nrows,
            ncols,
            row_ptr,
            col_idx,
            values,
        })
    }

    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            row_ptr: vec![0; nrows + 1],
            col_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let mut t = Vec::new();
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                if m[(i, j)] != 0.0 {
                    t.push((i, j, m[(i, j)]));
                }
            }
        }
        Self::from_sorted_triplets(m.nrows(), m.ncols(), &t).expect("triplets are ordered")
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.nrows).flat_map(move |i| {
            (self.row_ptr[i]..self.row_ptr[i + 1]).map(move |p| (i, self.col_idx[p], self.values[p]))
        })
    }

    pub fn scale_mut(&mut self, s: f64) {
        self.values.iter_mut().for_each(|v| *v *= s);
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for (i, j, v) in self.triplets() {
            m[(i, j)] = v;
        }
        m
    }

    /// `out = self * x`.
    pub fn mul_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.ncols);
        debug_assert_eq!(out.len(), self.nrows);
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.values[p] * x[self.col_idx[p]];
            }
            *o = acc;
        }
    }

    /// `out += selfᵀ * x`.
    pub fn tr_mul_add(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.nrows);
        debug_assert_eq!(out.len(), self.ncols);
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                out[self.col_idx[p]] += self.values[p] * xi;
            }
        }
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.nrows);
        self.mul_into(x.as_slice(), out.as_mut_slice());
        out
    }
}
