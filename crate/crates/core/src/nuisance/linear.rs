use nalgebra::{DMatrix, DVector};

use crate::linalg::{center, column_means, pinv, RANK_RTOL};

/// Affine predictor `f(x) = intercept + x^T w`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LinearModel {
    pub intercept: f64,
    pub weights: DVector<f64>,
    /// Set when the centered design was rank deficient and the
    /// minimum-norm solution was returned.
    pub rank_deficient: bool,
}

impl LinearModel {
    pub fn predict_row(&self, x: &[f64]) -> f64 {
        self.intercept
            + x.iter()
                .zip(self.weights.iter())
                .map(|(a, b)| a * b)
                .sum::<f64>()
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> DVector<f64> {
        let mut out = x * &self.weights;
        out.add_scalar_mut(self.intercept);
        out
    }
}

/// Least squares with an unpenalized intercept, solved on centered data
/// through the pseudo-inverse. Rank deficiency is flagged, not fatal.
pub fn fit_ols(x: &DMatrix<f64>, y: &DVector<f64>) -> LinearModel {
    let mu = column_means(x);
    let ybar = y.mean();
    let xc = center(x, &mu);
    let yc = y.add_scalar(-ybar);
    let (p, rank) = pinv(&xc, RANK_RTOL);
    let weights = p * yc;
    let rank_deficient = rank < x.ncols();
    if rank_deficient {
        log::warn!(
            "ols: centered design has rank {rank} < {}; using minimum-norm solution",
            x.ncols()
        );
    }
    LinearModel {
        intercept: ybar - mu.dot(&weights),
        weights,
        rank_deficient,
    }
}

/// Ridge regression penalizing `lambda * |w|^2`; the intercept is free.
pub fn fit_ridge(x: &DMatrix<f64>, y: &DVector<f64>, lambda: f64) -> LinearModel {
    if lambda <= 0.0 {
        return fit_ols(x, y);
    }
    let mu = column_means(x);
    let ybar = y.mean();
    let xc = center(x, &mu);
    let yc = y.add_scalar(-ybar);
    let mut gram = xc.transpose() * &xc;
    for j in 0..gram.nrows() {
        gram[(j, j)] += lambda;
    }
    let rhs = xc.transpose() * yc;
    let weights = match gram.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => pinv(&gram, RANK_RTOL).0 * rhs,
    };
    LinearModel {
        intercept: ybar - mu.dot(&weights),
        weights,
        rank_deficient: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_linear_fit() {
        let x = DMatrix::from_fn(20, 2, |i, j| ((i * 7 + j * 3) % 11) as f64);
        let y = DVector::from_fn(20, |i, _| 2.0 * x[(i, 0)]);
        let m = fit_ols(&x, &y);
        assert!((m.predict(&x) - &y).amax() < 1e-8);
        assert!(!m.rank_deficient);
    }

    #[test]
    fn constant_target() {
        let x = DMatrix::from_fn(10, 3, |i, j| (i + j * j) as f64 * 0.3);
        let y = DVector::from_element(10, 5.0);
        for m in [fit_ols(&x, &y), fit_ridge(&x, &y, 2.0)] {
            let probe = DMatrix::from_fn(4, 3, |i, j| (i as f64) - (j as f64) * 10.0);
            assert!(m.predict(&probe).iter().all(|v| (v - 5.0).abs() < 1e-10));
        }
    }

    #[test]
    fn duplicate_columns_flagged_and_min_norm() {
        let x = DMatrix::from_fn(12, 2, |i, _| i as f64);
        let y = DVector::from_fn(12, |i, _| 1.0 + 4.0 * i as f64);
        let m = fit_ols(&x, &y);
        assert!(m.rank_deficient);
        assert!((m.weights[0] - 2.0).abs() < 1e-10 && (m.weights[1] - 2.0).abs() < 1e-10);
        assert!((m.predict(&x) - &y).amax() < 1e-9);
    }

    #[test]
    fn ols_predictions_affine_invariant() {
        let x = DMatrix::from_fn(30, 3, |i, j| {
            ((i * 13 + j * 5) % 17) as f64 - 8.0 + 0.1 * (i * j) as f64
        });
        let y = DVector::from_fn(30, |i, _| ((i * 31) % 7) as f64);
        let a = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.0, 0.5, -1.0, 3.0, 0.0, 0.2, 1.0]);
        let shift = DVector::from_vec(vec![1.0, -4.0, 7.0]);
        let mut x2 = &x * &a;
        for mut r in x2.row_iter_mut() {
            r += shift.transpose();
        }
        let p1 = fit_ols(&x, &y).predict(&x);
        let p2 = fit_ols(&x2, &y).predict(&x2);
        assert!((p1 - p2).amax() < 1e-9);
    }

    #[test]
    fn ridge_shrinks_toward_mean() {
        let x = DMatrix::from_fn(10, 1, |i, _| i as f64);
        let y = DVector::from_fn(10, |i, _| i as f64);
        let w = fit_ridge(&x, &y, 1e6).weights[0];
        assert!(w > 0.0 && w < 0.01);
    }
}
