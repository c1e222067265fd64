//! Private user-side dimensionality reduction `x -> (x - mu)^T F`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::dml::fit_dml;
use crate::error::{Error, Result};
use crate::linalg::{center, column_means};
use crate::nuisance::{ClassifierSpec, RegressorSpec};
use crate::rng::{derive_seed, rng_from_seed};

/// Columns whose residual after projection falls below this fraction of
/// their norm are treated as linearly dependent.
pub const DEPENDENCE_TOL: f64 = 1e-10;
const SUBSAMPLE_RETRIES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReducerKind {
    Pca,
    Bootstrap,
    Combined,
    Identity,
    Custom,
}

/// `F` (m x m_tilde) and shift `mu` (length m).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimReducer {
    pub f: DMatrix<f64>,
    pub mu: DVector<f64>,
    pub kind: ReducerKind,
}

impl DimReducer {
    pub fn identity(m: usize) -> Self {
        Self {
            f: DMatrix::identity(m, m),
            mu: DVector::zeros(m),
            kind: ReducerKind::Identity,
        }
    }

    /// Arbitrary `F` and `mu`; `F` must have full column rank.
    pub fn custom(f: DMatrix<f64>, mu: DVector<f64>) -> Result<Self> {
        if f.nrows() != mu.len() {
            return Err(Error::DimensionMismatch(format!(
                "F has {} rows, mu has {}",
                f.nrows(),
                mu.len()
            )));
        }
        if f.ncols() == 0 || crate::linalg::numerical_rank(&f, DEPENDENCE_TOL) < f.ncols() {
            return Err(Error::InvalidArgument(
                "F must have full column rank".into(),
            ));
        }
        Ok(Self {
            f,
            mu,
            kind: ReducerKind::Custom,
        })
    }

    pub fn m(&self) -> usize {
        self.f.nrows()
    }

    pub fn m_tilde(&self) -> usize {
        self.f.ncols()
    }

    /// Reduced dimension below `m`, so raw covariates cannot be recovered.
    pub fn is_confidential(&self) -> bool {
        self.m_tilde() < self.m()
    }

    /// `blockdiag(1, F)`, size `(m + 1) x (m_tilde + 1)`.
    pub fn f_bar(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.m() + 1, self.m_tilde() + 1);
        out[(0, 0)] = 1.0;
        out.view_mut((1, 1), (self.m(), self.m_tilde()))
            .copy_from(&self.f);
        out
    }

    /// `(X - 1 mu^T) F`.
    pub fn apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.m() {
            return Err(Error::DimensionMismatch(format!(
                "reducer expects {} covariates, got {}",
                self.m(),
                x.ncols()
            )));
        }
        Ok(center(x, &self.mu) * &self.f)
    }
}

/// Principal components of the centered covariates.
pub fn fit_pca(x: &DMatrix<f64>, dim: usize) -> Result<DimReducer> {
    let (n, m) = x.shape();
    if dim == 0 || dim > m {
        return Err(Error::InvalidArgument(format!(
            "pca dimension {dim} outside 1..={m}"
        )));
    }
    if n < 2 {
        return Err(Error::InvalidData("pca needs at least 2 rows".into()));
    }
    let mu = column_means(x);
    let xc = center(x, &mu);
    let eig = SymmetricEigen::new(xc.transpose() * &xc);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut f = DMatrix::zeros(m, dim);
    for (k, &j) in order.iter().take(dim).enumerate() {
        let mut v = eig.eigenvectors.column(j).clone_owned();
        // deterministic sign: largest-magnitude entry positive
        if v[v.iamax()] < 0.0 {
            v = -v;
        }
        f.set_column(k, &v);
    }
    Ok(DimReducer {
        f,
        mu,
        kind: ReducerKind::Pca,
    })
}

/// Slope vectors of DML fits on `dim` random subsamples of `floor(p n)`
/// rows drawn without replacement.
pub fn fit_bootstrap_dr(
    party: &Dataset,
    dim: usize,
    p: f64,
    q_spec: &RegressorSpec,
    h_spec: &ClassifierSpec,
    seed: u64,
) -> Result<DimReducer> {
    let (n, m) = (party.n(), party.m());
    if dim == 0 || dim > m {
        return Err(Error::InvalidArgument(format!(
            "bootstrap dimension {dim} outside 1..={m}"
        )));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "subsample fraction {p} outside (0, 1)"
        )));
    }
    let size = (p * n as f64).floor() as usize;
    if size < 10 * (m + 1) {
        log::warn!("bootstrap reducer: subsample of {size} rows is small for {m} covariates");
    }
    let mut f = DMatrix::zeros(m, dim);
    for b in 0..dim {
        let stream = derive_seed(seed, b as u64);
        let mut rng = rng_from_seed(stream);
        let mut fitted = None;
        for attempt in 0..SUBSAMPLE_RETRIES {
            let mut rows = sample(&mut rng, n, size).into_vec();
            rows.sort_unstable();
            let sub = party.subset(&rows);
            let treated = sub.n_treated();
            if treated < 2 || sub.n() - treated < 2 {
                continue;
            }
            match fit_dml(
                &sub,
                q_spec,
                h_spec,
                derive_seed(stream, 1 + attempt as u64),
            ) {
                Ok(fit) => {
                    fitted = Some(fit);
                    break;
                }
                Err(Error::SingleClass(_)) => continue,
                Err(e) => return Err(e),
            }
        }
        let fit = fitted.ok_or_else(|| {
            Error::SingleClass(format!(
                "no subsample with both treatment classes after {SUBSAMPLE_RETRIES} draws"
            ))
        })?;
        f.set_column(b, &fit.beta_hat.rows(1, m));
    }
    Ok(DimReducer {
        f,
        mu: DVector::zeros(m),
        kind: ReducerKind::Bootstrap,
    })
}

/// Column-wise concatenation, dropping numerically dependent columns. The
/// shift comes from the reducers with nonzero `mu`, which must agree.
pub fn combine(reducers: &[DimReducer]) -> Result<DimReducer> {
    let first = reducers
        .first()
        .ok_or_else(|| Error::InvalidArgument("nothing to combine".into()))?;
    let m = first.m();
    if reducers.iter().any(|r| r.m() != m) {
        return Err(Error::DimensionMismatch("reducers disagree on m".into()));
    }
    let mut mu: Option<&DVector<f64>> = None;
    for r in reducers.iter().filter(|r| r.mu.iter().any(|v| *v != 0.0)) {
        match mu {
            None => mu = Some(&r.mu),
            Some(prev) if prev != &r.mu => {
                return Err(Error::InvalidArgument(
                    "reducers with different nonzero shifts".into(),
                ));
            }
            _ => {}
        }
    }

    let mut kept: Vec<DVector<f64>> = Vec::new();
    let mut basis: Vec<DVector<f64>> = Vec::new();
    for r in reducers {
        for col in r.f.column_iter() {
            let norm = col.norm();
            if norm == 0.0 {
                continue;
            }
            let mut resid = col.clone_owned();
            // two passes of Gram-Schmidt for stability
            for _ in 0..2 {
                for q in &basis {
                    let c = q.dot(&resid);
                    resid.axpy(-c, q, 1.0);
                }
            }
            let rn = resid.norm();
            if rn > DEPENDENCE_TOL * norm {
                basis.push(resid / rn);
                kept.push(col.clone_owned());
            }
        }
    }
    if kept.is_empty() {
        return Err(Error::InvalidArgument(
            "combined reducer has no columns".into(),
        ));
    }
    if kept.len() == m {
        log::warn!("combined reducer has full dimension {m}; shares are not confidential");
    }
    Ok(DimReducer {
        f: DMatrix::from_columns(&kept),
        mu: mu.cloned().unwrap_or_else(|| DVector::zeros(m)),
        kind: ReducerKind::Combined,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(n: usize, m: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = rng_from_seed(seed);
        DMatrix::from_fn(n, m, |_, _| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn pca_rank_one_exact() {
        let v = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let x = DMatrix::from_fn(8, 3, |i, j| (i as f64 - 3.0) * v[j]);
        let r = fit_pca(&x, 1).unwrap();
        let u = v.normalize();
        assert!((r.f.column(0).dot(&u).abs() - 1.0).abs() < 1e-12);
        let xt = r.apply(&x).unwrap();
        let rec = &xt * r.f.transpose();
        assert!((rec - center(&x, &r.mu)).amax() < 1e-10);
    }

    #[test]
    fn pca_full_dim_orthonormal_and_invertible() {
        let x = gaussian(40, 5, 1);
        let r = fit_pca(&x, 5).unwrap();
        assert!((r.f.transpose() * &r.f - DMatrix::identity(5, 5)).amax() < 1e-10);
        let xt = r.apply(&x).unwrap();
        let xc = center(&x, &r.mu);
        assert!((xt.norm_squared() - xc.norm_squared()).abs() < 1e-8);
        let back = &xt * r.f.transpose() + DMatrix::from_fn(40, 5, |_, j| r.mu[j]);
        assert!((back - &x).amax() < 1e-8);
    }

    #[test]
    fn pca_below_full_dim_loses_information() {
        let x = gaussian(40, 5, 2);
        let r = fit_pca(&x, 4).unwrap();
        let back = r.apply(&x).unwrap() * r.f.transpose();
        let err = (back - center(&x, &r.mu))
            .row_iter()
            .map(|row| row.norm())
            .fold(0.0, f64::max);
        assert!(err > 1e-6);
        assert!(r.is_confidential());
    }

    #[test]
    fn pca_beats_coordinate_subsets() {
        let x = gaussian(100, 10, 3)
            * DMatrix::from_fn(10, 10, |i, j| if i == j { 1.0 + i as f64 } else { 0.1 });
        let r = fit_pca(&x, 9).unwrap();
        let captured = r.apply(&x).unwrap().norm_squared();
        let xc = center(&x, &r.mu);
        for drop in 0..10 {
            let axes: f64 = (0..10)
                .filter(|&j| j != drop)
                .map(|j| xc.column(j).norm_squared())
                .sum();
            assert!(captured >= axes - 1e-9);
        }
    }

    #[test]
    fn pca_rejects_bad_dim() {
        let x = gaussian(10, 3, 4);
        assert!(fit_pca(&x, 4).is_err());
        assert!(fit_pca(&x, 0).is_err());
    }

    #[test]
    fn apply_identity_centering_and_affinity() {
        let x = gaussian(6, 3, 5);
        assert_eq!(DimReducer::identity(3).apply(&x).unwrap(), x);
        let r = fit_pca(&x, 2).unwrap();
        let at_mu = r.apply(&DMatrix::from_fn(1, 3, |_, j| r.mu[j])).unwrap();
        assert!(at_mu.amax() < 1e-12);
        let x2 = gaussian(6, 3, 6);
        let a = 0.3;
        let mix = &x * a + &x2 * (1.0 - a);
        let lhs = r.apply(&mix).unwrap();
        let rhs = r.apply(&x).unwrap() * a + r.apply(&x2).unwrap() * (1.0 - a);
        assert!((lhs - rhs).amax() < 1e-10);
        assert!(r.apply(&gaussian(2, 4, 0)).is_err());
    }

    #[test]
    fn f_bar_layout() {
        let r = fit_pca(&gaussian(20, 4, 7), 2).unwrap();
        let fb = r.f_bar();
        assert_eq!(fb.shape(), (5, 3));
        assert_eq!(
            fb.column(0).clone_owned(),
            DVector::from_fn(5, |i, _| if i == 0 { 1.0 } else { 0.0 })
        );
        assert_eq!(fb.view((1, 1), (4, 2)), r.f);
    }

    #[test]
    fn combine_drops_duplicates_and_detects_full_rank() {
        let x = gaussian(30, 4, 8);
        let r = fit_pca(&x, 3).unwrap();
        let rr = combine(&[r.clone(), r.clone()]).unwrap();
        assert_eq!(rr.m_tilde(), 3);
        assert_eq!(rr.mu, r.mu);
        let full = fit_pca(&x, 4).unwrap();
        let a = DimReducer {
            f: full.f.columns(0, 2).into(),
            mu: full.mu.clone(),
            kind: ReducerKind::Pca,
        };
        let b = DimReducer {
            f: full.f.columns(2, 2).into(),
            mu: full.mu.clone(),
            kind: ReducerKind::Pca,
        };
        let c = combine(&[a, b]).unwrap();
        assert_eq!(c.m_tilde(), 4);
        assert!(!c.is_confidential());
    }

    #[test]
    fn combine_rejects_empty_and_conflicting_shift() {
        let zero = DimReducer {
            f: DMatrix::zeros(3, 1),
            mu: DVector::zeros(3),
            kind: ReducerKind::Custom,
        };
        assert!(combine(&[zero]).is_err());
        let a = fit_pca(&gaussian(10, 3, 1), 1).unwrap();
        let b = fit_pca(&gaussian(10, 3, 2), 1).unwrap();
        assert!(combine(&[a, b]).is_err());
    }
}
