//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

/// Relative singular-value cutoff used for every numerical rank decision.
pub const RANK_CUTOFF: f64 = 1e-10;

/// Numerical rank with cutoff `RANK_CUTOFF * sigma_max`.
pub fn numerical_rank(m: &DMatrix<f64>) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let s = m.clone().singular_values();
    let smax = s.iter().cloned().fold(0.0, f64::max);
    if smax == 0.0 {
        return 0;
    }
    s.iter().filter(|x| **x > RANK_CUTOFF * smax).count()
}

/// Least-squares data for `A u = v`: minimum-norm solution, residual norm and
/// a basis of the numerical kernel of `A`.
pub struct LeastNorm {
    pub solution: DVector<f64>,
    pub residual: f64,
    pub rank: usize,
    pub kernel: DMatrix<f64>,
}

/// Minimum-norm least-squares solve through a full SVD.
pub fn least_norm(a: &DMatrix<f64>, v: &DVector<f64>) -> LeastNorm {
    let (rows, cols) = a.shape();
    let size = rows.max(cols);
    let mut padded = DMatrix::zeros(size, cols);
    padded.rows_mut(0, rows).copy_from(a);
    let svd = padded.svd(true, true);
    let u = svd.u.expect("u requested");
    let vt = svd.v_t.expect("v_t requested");
    let s = &svd.singular_values;
    let smax = s.iter().cloned().fold(0.0, f64::max);
    let keep: Vec<usize> = (0..s.len())
        .filter(|i| smax > 0.0 && s[*i] > RANK_CUTOFF * smax)
        .collect();
    let mut vp = DVector::zeros(size);
    vp.rows_mut(0, rows).copy_from(v);
    let mut solution = DVector::zeros(cols);
    let mut proj = DVector::zeros(size);
    for &i in &keep {
        let c = u.column(i).dot(&vp);
        proj += u.column(i) * c;
        solution += vt.row(i).transpose() * (c / s[i]);
    }
    let residual = (vp - proj).norm();
    let others: Vec<usize> = (0..cols).filter(|i| !keep.contains(i)).collect();
    let mut kernel = DMatrix::zeros(cols, others.len());
    for (j, &i) in others.iter().enumerate() {
        kernel.set_column(j, &vt.row(i).transpose());
    }
    LeastNorm {
        solution,
        residual,
        rank: keep.len(),
        kernel,
    }
}

/// Gram–Schmidt in the given column order, dropping columns whose residual
/// falls below `RANK_CUTOFF` times the largest column norm.
///
/// Returns the orthonormal vectors and the indices of the pivot columns.
pub fn gram_schmidt(cols: &[DVector<f64>]) -> (Vec<DVector<f64>>, Vec<usize>) {
    let scale = cols.iter().map(|c| c.norm()).fold(0.0, f64::max);
    let mut out: Vec<DVector<f64>> = Vec::new();
    let mut pivots = Vec::new();
    if scale == 0.0 {
        return (out, pivots);
    }
    for (j, c) in cols.iter().enumerate() {
        let mut r = c.clone();
        for _ in 0..2 {
            for q in &out {
                let p = q.dot(&r);
                r -= q * p;
            }
        }
        let nr = r.norm();
        if nr > RANK_CUTOFF * scale && nr > 1e-300 {
            out.push(r / nr);
            pivots.push(j);
        }
    }
    (out, pivots)
}

/// Orthonormal basis of the complement of the span of orthonormal `basis` in ℝ^d.
pub fn orthonormal_complement(basis: &[DVector<f64>], d: usize) -> Vec<DVector<f64>> {
    let mut all: Vec<DVector<f64>> = basis.to_vec();
    let mut extra = Vec::new();
    while all.len() < d {
        let mut best: Option<DVector<f64>> = None;
        let mut best_norm = 0.0;
        for i in 0..d {
            let mut r = DVector::zeros(d);
            r[i] = 1.0;
            for _ in 0..2 {
                for q in &all {
                    let p = q.dot(&r);
                    r -= q * p;
                }
            }
            let nr = r.norm();
            if nr > best_norm {
                best_norm = nr;
                best = Some(r);
            }
        }
        let r = best.expect("complement exists") / best_norm;
        all.push(r.clone());
        extra.push(r);
    }
    extra
}

/// Columns of `m` as vectors.
pub fn columns(m: &DMatrix<f64>) -> Vec<DVector<f64>> {
    (0..m.ncols()).map(|j| m.column(j).into_owned()).collect()
}

/// Stack vectors as columns of a `d × k` matrix.
pub fn from_columns(cols: &[DVector<f64>], d: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(d, cols.len());
    for (j, c) in cols.iter().enumerate() {
        m.set_column(j, c);
    }
    m
}

pub fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
