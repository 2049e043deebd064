//! Sparse user-item matrix and its truncated SVD `M ≈ U · diag(Σ) · Eᵀ`.
//!
//! The factorisation is a randomized range finder (Gaussian test matrix,
//! oversampling, power iterations with re-orthonormalisation) followed by a
//! one-sided Jacobi SVD of the small projected matrix.

use std::io::Write;

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::binio::BinWriter;
use crate::data::SplitDataset;
use crate::linalg::Matrix;

#[derive(Debug, Error)]
pub enum SvdError {
    #[error("requested {t} components but 1 <= t <= {max} is required")]
    BadRank { t: usize, max: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Binary user × item matrix in CSR form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionMatrix {
    pub rows: usize,
    pub cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
}

impl InteractionMatrix {
    /// Builds `M` from per-row column lists; duplicates collapse to a single 1.
    pub fn from_rows(cols: usize, rows: &[Vec<usize>]) -> Self {
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        let mut indices = Vec::new();
        indptr.push(0);
        for row in rows {
            let mut r = row.clone();
            r.sort_unstable();
            r.dedup();
            assert!(r.last().is_none_or(|&c| c < cols), "column out of range");
            indices.extend(r);
            indptr.push(indices.len());
        }
        InteractionMatrix {
            rows: rows.len(),
            cols,
            indptr,
            indices,
        }
    }

    /// Entry (u, i) is 1 iff item i occurs in u's training sequence.
    pub fn from_split(split: &SplitDataset) -> Self {
        Self::from_rows(split.num_items, &split.train)
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn row(&self, r: usize) -> &[usize] {
        &self.indices[self.indptr[r]..self.indptr[r + 1]]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        if self.row(r).binary_search(&c).is_ok() {
            1.0
        } else {
            0.0
        }
    }

    pub fn transpose(&self) -> InteractionMatrix {
        let mut cols: Vec<Vec<usize>> = vec![Vec::new(); self.cols];
        for r in 0..self.rows {
            for &c in self.row(r) {
                cols[c].push(r);
            }
        }
        Self::from_rows(self.rows, &cols)
    }

    pub fn to_dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for &c in self.row(r) {
                m[(r, c)] = 1.0;
            }
        }
        m
    }
}

/// Anything that can multiply a dense block from the left, as `A·X` and `Aᵀ·X`.
pub trait LinearOperator {
    fn shape(&self) -> (usize, usize);
    fn apply(&self, x: &Matrix) -> Matrix;
    fn apply_transpose(&self, x: &Matrix) -> Matrix;
}

impl LinearOperator for Matrix {
    fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
    fn apply(&self, x: &Matrix) -> Matrix {
        self.matmul(x)
    }
    fn apply_transpose(&self, x: &Matrix) -> Matrix {
        self.t_matmul(x)
    }
}

/// CSR matrix paired with its transpose so both products are row-parallel.
pub struct SparseOperator<'a> {
    m: &'a InteractionMatrix,
    mt: InteractionMatrix,
}

impl<'a> SparseOperator<'a> {
    pub fn new(m: &'a InteractionMatrix) -> Self {
        SparseOperator {
            m,
            mt: m.transpose(),
        }
    }
}

fn csr_times_dense(m: &InteractionMatrix, x: &Matrix) -> Matrix {
    use rayon::prelude::*;
    assert_eq!(m.cols, x.rows);
    let k = x.cols;
    let mut out = Matrix::zeros(m.rows, k);
    out.data.par_chunks_mut(k.max(1)).enumerate().for_each(|(r, dst)| {
        for &c in m.row(r) {
            for (d, s) in dst.iter_mut().zip(x.row(c)) {
                *d += s;
            }
        }
    });
    out
}

impl LinearOperator for SparseOperator<'_> {
    fn shape(&self) -> (usize, usize) {
        (self.m.rows, self.m.cols)
    }
    fn apply(&self, x: &Matrix) -> Matrix {
        csr_times_dense(self.m, x)
    }
    fn apply_transpose(&self, x: &Matrix) -> Matrix {
        csr_times_dense(&self.mt, x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SvdOptions {
    pub oversampling: usize,
    pub power_iterations: usize,
}

impl Default for SvdOptions {
    fn default() -> Self {
        SvdOptions {
            oversampling: 10,
            power_iterations: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvdFactors {
    /// num_users × t
    pub user_factors: Matrix,
    /// t values, non-increasing
    pub singular_values: Vec<f64>,
    /// num_items × t
    pub item_factors: Matrix,
    /// Set when fewer than t non-zero singular values exist.
    pub rank_deficient: bool,
    pub seed: u64,
}

impl SvdFactors {
    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.user_factors.clone();
        for r in 0..us.rows {
            for (v, s) in us.row_mut(r).iter_mut().zip(&self.singular_values) {
                *v *= s;
            }
        }
        let mut out = Matrix::zeros(us.rows, self.item_factors.rows);
        crate::linalg::gemm(
            us.rows, us.cols, self.item_factors.rows,
            1.0, &us.data, false, &self.item_factors.data, true,
            0.0, &mut out.data,
        );
        out
    }

    /// Dumps `E` as row-major f32 after a `(rows, cols, t, seed)` header.
    pub fn write_item_factors<W: Write>(&self, w: W, matrix_shape: (usize, usize)) -> Result<(), SvdError> {
        let mut w = BinWriter::new(w);
        w.header(*b"GRSE", 1)?;
        w.u64(matrix_shape.0 as u64)?;
        w.u64(matrix_shape.1 as u64)?;
        w.u64(self.rank() as u64)?;
        w.u64(self.seed)?;
        for &v in &self.item_factors.data {
            w.f32(v as f32)?;
        }
        w.finish()?;
        Ok(())
    }
}

/// Modified Gram-Schmidt, applied twice. Columns that vanish (linearly
/// dependent input) are set to exactly zero.
fn orthonormalize_columns(a: &mut Matrix) {
    let (n, k) = (a.rows, a.cols);
    let mut cols: Vec<Vec<f64>> = (0..k).map(|c| a.column(c)).collect();
    let mut alive = vec![true; k];
    for j in 0..k {
        let original = norm(&cols[j]);
        for _ in 0..2 {
            for i in 0..j {
                if !alive[i] {
                    continue;
                }
                let (head, tail) = cols.split_at_mut(j);
                let proj = dot(&head[i], &tail[0]);
                axpy(-proj, &head[i], &mut tail[0]);
            }
        }
        let nrm = norm(&cols[j]);
        if original == 0.0 || nrm <= 1e-10 * original {
            alive[j] = false;
            cols[j].iter_mut().for_each(|v| *v = 0.0);
        } else {
            cols[j].iter_mut().for_each(|v| *v /= nrm);
        }
    }
    for (j, c) in cols.iter().enumerate() {
        debug_assert_eq!(c.len(), n);
        a.set_column(j, c);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// One-sided Jacobi SVD of a tall matrix `a` (n × k, n ≥ k).
///
/// Returns `(W, V)` where `a·V = W`, `V` is orthogonal and the columns of
/// `W` are mutually orthogonal; singular values are the column norms of `W`.
fn one_sided_jacobi(a: &Matrix) -> (Matrix, Matrix) {
    let k = a.cols;
    let mut w: Vec<Vec<f64>> = (0..k).map(|c| a.column(c)).collect();
    let mut v: Vec<Vec<f64>> = (0..k)
        .map(|c| {
            let mut e = vec![0.0; k];
            e[c] = 1.0;
            e
        })
        .collect();
    for _sweep in 0..80 {
        let mut rotated = false;
        for p in 0..k {
            for q in p + 1..k {
                let alpha = dot(&w[p], &w[p]);
                let beta = dot(&w[q], &w[q]);
                let gamma = dot(&w[p], &w[q]);
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for cols in [&mut w, &mut v] {
                    let (head, tail) = cols.split_at_mut(q);
                    let (xp, xq) = (&mut head[p], &mut tail[0]);
                    for (a, b) in xp.iter_mut().zip(xq.iter_mut()) {
                        let (ap, bq) = (*a, *b);
                        *a = c * ap - s * bq;
                        *b = s * ap + c * bq;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut wm = Matrix::zeros(a.rows, k);
    let mut vm = Matrix::zeros(k, k);
    for c in 0..k {
        wm.set_column(c, &w[c]);
        vm.set_column(c, &v[c]);
    }
    (wm, vm)
}

/// Replaces the listed columns of `a` by unit vectors orthogonal to all
/// other columns, drawn deterministically from the standard basis.
fn complete_basis(a: &mut Matrix, missing: &[usize]) {
    let mut cols: Vec<Vec<f64>> = (0..a.cols).map(|c| a.column(c)).collect();
    let mut filled: Vec<bool> = (0..a.cols).map(|c| !missing.contains(&c)).collect();
    let mut next_basis = 0;
    for &j in missing {
        loop {
            assert!(next_basis < a.rows, "cannot complete basis");
            let mut e = vec![0.0; a.rows];
            e[next_basis] = 1.0;
            next_basis += 1;
            for _ in 0..2 {
                for (i, c) in cols.iter().enumerate() {
                    if filled[i] {
                        let p = dot(c, &e);
                        axpy(-p, c, &mut e);
                    }
                }
            }
            let n = norm(&e);
            if n > 0.5 {
                e.iter_mut().for_each(|v| *v /= n);
                cols[j] = e;
                filled[j] = true;
                break;
            }
        }
    }
    for (j, c) in cols.iter().enumerate() {
        a.set_column(j, c);
    }
}

/// Truncated rank-`t` SVD, deterministic in `(operator, t, seed, opts)`.
pub fn truncated_svd<A: LinearOperator + ?Sized>(
    m: &A,
    t: usize,
    seed: u64,
    opts: SvdOptions,
) -> Result<SvdFactors, SvdError> {
    let (rows, cols) = m.shape();
    let max = rows.min(cols);
    if t == 0 || t > max {
        return Err(SvdError::BadRank { t, max });
    }
    let k = (t + opts.oversampling).min(max);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let omega = Matrix::from_vec(
        cols,
        k,
        (0..cols * k).map(|_| StandardNormal.sample(&mut rng)).collect(),
    );
    let mut q = m.apply(&omega);
    orthonormalize_columns(&mut q);
    for _ in 0..opts.power_iterations {
        let mut z = m.apply_transpose(&q);
        orthonormalize_columns(&mut z);
        q = m.apply(&z);
        orthonormalize_columns(&mut q);
    }

    // Bᵀ = Mᵀ Q is cols × k; its left singular vectors are the item factors.
    let bt = m.apply_transpose(&q);
    let (w, v) = one_sided_jacobi(&bt);
    let sigma_all: Vec<f64> = (0..k).map(|c| norm(&w.column(c))).collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| sigma_all[b].total_cmp(&sigma_all[a]).then(a.cmp(&b)));
    order.truncate(t);

    let sigma_max = sigma_all.iter().cloned().fold(0.0, f64::max);
    let tol = sigma_max * 1e-12 * rows.max(cols) as f64;
    let u_full = q.matmul(&v);

    let mut item_factors = Matrix::zeros(cols, t);
    let mut user_factors = Matrix::zeros(rows, t);
    let mut singular_values = Vec::with_capacity(t);
    let mut missing = Vec::new();
    for (j, &src) in order.iter().enumerate() {
        let s = sigma_all[src];
        if s <= tol || s == 0.0 {
            singular_values.push(0.0);
            missing.push(j);
            continue;
        }
        singular_values.push(s);
        let e: Vec<f64> = w.column(src).iter().map(|x| x / s).collect();
        item_factors.set_column(j, &e);
        user_factors.set_column(j, &u_full.column(src));
    }
    let rank_deficient = !missing.is_empty();
    if rank_deficient {
        warn!(
            "matrix has rank {} < t = {t}; padding with zero singular values",
            t - missing.len()
        );
        complete_basis(&mut item_factors, &missing);
        complete_basis(&mut user_factors, &missing);
    }

    // Largest-magnitude entry of each item column is positive.
    for j in 0..t {
        let col = item_factors.column(j);
        let mut best = 0;
        for (i, x) in col.iter().enumerate() {
            if x.abs() > col[best].abs() {
                best = i;
            }
        }
        if col[best] < 0.0 {
            for r in 0..item_factors.rows {
                item_factors[(r, j)] = -item_factors[(r, j)];
            }
            for r in 0..user_factors.rows {
                user_factors[(r, j)] = -user_factors[(r, j)];
            }
        }
    }

    Ok(SvdFactors {
        user_factors,
        singular_values,
        item_factors,
        rank_deficient,
        seed,
    })
}

/// Convenience wrapper for the training interaction matrix.
pub fn truncated_svd_sparse(
    m: &InteractionMatrix,
    t: usize,
    seed: u64,
    opts: SvdOptions,
) -> Result<SvdFactors, SvdError> {
    truncated_svd(&SparseOperator::new(m), t, seed, opts)
}
