//! Dense linear algebra helpers on top of `nalgebra`.

use nalgebra::{DMatrix, DVector, SymmetricEigen, SVD};

use crate::error::{Error, Result};

/// Relative singular-value cutoff used for pseudo-inverses and rank decisions.
pub const RANK_RTOL: f64 = 1e-10;

pub fn svd(a: &DMatrix<f64>) -> SVD<f64, nalgebra::Dyn, nalgebra::Dyn> {
    SVD::new(a.clone(), true, true)
}

/// `R^{-1} Q^T` for a tall matrix with full column rank.
fn qr_left_inverse(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let qr = a.clone().qr();
    qr.r().solve_upper_triangular(&qr.q().transpose())
}

/// Moore–Penrose inverse with a relative cutoff `rtol * sigma_max`.
/// Returns the pseudo-inverse and the numerical rank.
pub fn pinv(a: &DMatrix<f64>, rtol: f64) -> (DMatrix<f64>, usize) {
    let (rows, cols) = a.shape();
    if rows == 0 || cols == 0 {
        return (DMatrix::zeros(cols, rows), 0);
    }
    let s = svd(a);
    let smax = s.singular_values.iter().cloned().fold(0.0, f64::max);
    let cutoff = rtol * smax;
    let k = s.singular_values.len();
    let rank = s
        .singular_values
        .iter()
        .filter(|&&sv| sv > cutoff && sv > 0.0)
        .count();
    // Full rank: solve through QR.
    if rank == k {
        let full = if rows >= cols {
            qr_left_inverse(a)
        } else {
            qr_left_inverse(&a.transpose()).map(|l| l.transpose())
        };
        if let Some(p) = full.filter(|p| p.iter().all(|v| v.is_finite())) {
            return (p, rank);
        }
    }
    let u = s.u.as_ref().expect("u requested");
    let vt = s.v_t.as_ref().expect("v_t requested");
    let mut out = DMatrix::zeros(cols, rows);
    for i in 0..k {
        let sv = s.singular_values[i];
        if sv > cutoff && sv > 0.0 {
            let inv = 1.0 / sv;
            // out += v_i * inv * u_i^T
            let vi = vt.row(i).transpose();
            let ui = u.column(i);
            out.ger(inv, &vi, &ui, 1.0);
        }
    }
    (out, rank)
}

/// Minimum-norm least-squares solution of `a x = b`.
pub fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> (DVector<f64>, usize) {
    let (p, rank) = pinv(a, RANK_RTOL);
    (p * b, rank)
}

pub fn numerical_rank(a: &DMatrix<f64>, rtol: f64) -> usize {
    if a.is_empty() {
        return 0;
    }
    let sv = a.clone().singular_values();
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    sv.iter().filter(|&&s| s > rtol * smax && s > 0.0).count()
}

/// 2-norm condition number (infinite for singular input).
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    let sv = a.clone().singular_values();
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if smin <= 0.0 {
        f64::INFINITY
    } else {
        smax / smin
    }
}

/// Inverse of a square matrix, refusing matrices whose condition number
/// exceeds `max_condition`.
pub fn inverse_checked(a: &DMatrix<f64>, what: &str, max_condition: f64) -> Result<DMatrix<f64>> {
    if !a.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "{what}: matrix is not square"
        )));
    }
    let condition = condition_number(a);
    if !condition.is_finite() || condition > max_condition {
        return Err(Error::Singular {
            what: what.to_string(),
            condition,
        });
    }
    a.clone().try_inverse().ok_or_else(|| Error::Singular {
        what: what.to_string(),
        condition,
    })
}

/// `[1, x]` with a leading column of ones.
pub fn with_ones_column(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let mut out = DMatrix::zeros(n, x.ncols() + 1);
    out.column_mut(0).fill(1.0);
    out.view_mut((0, 1), (n, x.ncols())).copy_from(x);
    out
}

pub fn hcat(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let rows = blocks.first().map_or(0, |b| b.nrows());
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut c = 0;
    for b in blocks {
        assert_eq!(b.nrows(), rows, "hcat: row mismatch");
        out.view_mut((0, c), (rows, b.ncols())).copy_from(*b);
        c += b.ncols();
    }
    out
}

pub fn vcat(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let cols = blocks.first().map_or(0, |b| b.ncols());
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut r = 0;
    for b in blocks {
        assert_eq!(b.ncols(), cols, "vcat: column mismatch");
        out.view_mut((r, 0), (b.nrows(), cols)).copy_from(*b);
        r += b.nrows();
    }
    out
}

pub fn vcat_vec(blocks: &[&DVector<f64>]) -> DVector<f64> {
    DVector::from_iterator(
        blocks.iter().map(|b| b.len()).sum(),
        blocks.iter().flat_map(|b| b.iter().copied()),
    )
}

pub fn select_rows(x: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), x.ncols(), |i, j| x[(rows[i], j)])
}

pub fn select_entries(v: &DVector<f64>, rows: &[usize]) -> DVector<f64> {
    DVector::from_iterator(rows.len(), rows.iter().map(|&i| v[i]))
}

pub fn column_means(x: &DMatrix<f64>) -> DVector<f64> {
    let n = x.nrows().max(1) as f64;
    DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.sum() / n))
}

/// Population (ddof = 0) column standard deviations.
pub fn column_stds(x: &DMatrix<f64>) -> DVector<f64> {
    let means = column_means(x);
    let n = x.nrows().max(1) as f64;
    DVector::from_iterator(
        x.ncols(),
        x.column_iter()
            .zip(means.iter())
            .map(|(c, m)| (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt()),
    )
}

/// `x - 1 mu^T`.
pub fn center(x: &DMatrix<f64>, mu: &DVector<f64>) -> DMatrix<f64> {
    let mut out = x.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col.add_scalar_mut(-mu[j]);
    }
    out
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

pub fn min_eigenvalue(sym: &DMatrix<f64>) -> f64 {
    if sym.is_empty() {
        return 0.0;
    }
    SymmetricEigen::new(symmetrize(sym))
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

pub fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

/// `[1, x]` as a vector.
pub fn augment(x: &[f64]) -> DVector<f64> {
    let mut v = DVector::zeros(x.len() + 1);
    v[0] = 1.0;
    for (i, xi) in x.iter().enumerate() {
        v[i + 1] = *xi;
    }
    v
}
