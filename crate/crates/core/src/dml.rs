//! Partialling-out DML for a linear CATE `theta(x) = w(x)^T beta`.
//!
//! With out-of-fold residuals `zeta = y - q(x)` and `eta = z - h(x)` the
//! score is `psi = w eta (zeta - eta w^T beta)`; its empirical root is the
//! least-squares regression of `zeta` on `eta w`. The covariance is the
//! sandwich `J^-1 Omega J^-T / n` with fold-averaged `J = mean(eta^2 w w^T)`
//! and `Omega = mean(psi psi^T)`.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{
    augment, condition_number, lstsq, min_eigenvalue, symmetrize, with_ones_column,
};
use crate::nuisance::{cross_fit, ClassifierSpec, CrossFitResult, RegressorSpec};
use crate::rng::{rng_from_seed, Rng};

pub const DEFAULT_ALPHA: f64 = 0.05;
pub const N_FOLDS: usize = 2;
const MAX_J_CONDITION: f64 = 1e12;

/// Coefficient estimate from the least-squares solve.
#[derive(Debug, Clone, PartialEq)]
pub struct CateSolve {
    pub beta: DVector<f64>,
    pub rank_deficient: bool,
}

fn check_design(w: &DMatrix<f64>, cf: &CrossFitResult) -> Result<()> {
    if w.nrows() != cf.zeta_hat.len()
        || w.nrows() != cf.eta_hat.len()
        || w.nrows() != cf.fold_of.len()
    {
        return Err(Error::DimensionMismatch(format!(
            "design has {} rows but residuals have {}",
            w.nrows(),
            cf.zeta_hat.len()
        )));
    }
    Ok(())
}

/// Regress `zeta` on rows `eta_i w_i`; minimum-norm if rank deficient.
pub fn solve_cate(w: &DMatrix<f64>, cf: &CrossFitResult) -> Result<CateSolve> {
    check_design(w, cf)?;
    let mut d = w.clone();
    for (i, mut row) in d.row_iter_mut().enumerate() {
        row *= cf.eta_hat[i];
    }
    let (beta, rank) = lstsq(&d, &cf.zeta_hat);
    let rank_deficient = rank < w.ncols();
    if rank_deficient {
        log::warn!(
            "dml: residual design has rank {rank} < {}; minimum-norm solution",
            w.ncols()
        );
    }
    Ok(CateSolve {
        beta,
        rank_deficient,
    })
}

/// Per-row scores `psi_i` as rows of an `n x p` matrix.
pub fn scores(w: &DMatrix<f64>, cf: &CrossFitResult, beta: &DVector<f64>) -> DMatrix<f64> {
    let fitted = w * beta;
    let mut psi = w.clone();
    for (i, mut row) in psi.row_iter_mut().enumerate() {
        let eta = cf.eta_hat[i];
        row *= eta * (cf.zeta_hat[i] - eta * fitted[i]);
    }
    psi
}

/// `sum_i psi_i`, zero at the least-squares solution.
pub fn score_sum(w: &DMatrix<f64>, cf: &CrossFitResult, beta: &DVector<f64>) -> DVector<f64> {
    scores(w, cf, beta).row_sum().transpose()
}

/// Sandwich covariance of the coefficient estimate.
pub fn estimate_variance(
    w: &DMatrix<f64>,
    cf: &CrossFitResult,
    beta: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    check_design(w, cf)?;
    let (n, p) = w.shape();
    let n_folds = cf.fold_of.iter().max().map_or(0, |m| m + 1);
    let psi = scores(w, cf, beta);
    let mut j = DMatrix::zeros(p, p);
    let mut omega = DMatrix::zeros(p, p);
    for fold in 0..n_folds {
        let rows: Vec<usize> = (0..n).filter(|&i| cf.fold_of[i] == fold).collect();
        if rows.is_empty() {
            return Err(Error::InvalidData(format!("fold {fold} is empty")));
        }
        let weight = 1.0 / (rows.len() * n_folds) as f64;
        for &i in &rows {
            let wi = w.row(i).transpose();
            let pi = psi.row(i).transpose();
            j.ger(weight * cf.eta_hat[i].powi(2), &wi, &wi, 1.0);
            omega.ger(weight, &pi, &pi, 1.0);
        }
    }
    let j_inv = scaled_inverse(&j)?;
    Ok(symmetrize(&(&j_inv * omega * j_inv.transpose() / n as f64)))
}

/// Inverse after symmetric diagonal equilibration, so the conditioning
/// check is insensitive to covariate units.
fn scaled_inverse(j: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = j.nrows();
    let s = DVector::from_fn(p, |k, _| {
        let d = j[(k, k)];
        if d > 0.0 {
            d.sqrt()
        } else {
            1.0
        }
    });
    let js = DMatrix::from_fn(p, p, |a, b| j[(a, b)] / (s[a] * s[b]));
    let condition = condition_number(&js);
    if !condition.is_finite() || condition > MAX_J_CONDITION {
        return Err(Error::Singular {
            what: "score Jacobian J".into(),
            condition,
        });
    }
    let inv = js.try_inverse().ok_or(Error::Singular {
        what: "score Jacobian J".into(),
        condition,
    })?;
    Ok(DMatrix::from_fn(p, p, |a, b| inv[(a, b)] / (s[a] * s[b])))
}

/// A fitted linear CATE model on some design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmlFit {
    pub beta_hat: DVector<f64>,
    pub cov_beta: DMatrix<f64>,
    pub n_used: usize,
    pub rank_deficient: bool,
    #[serde(skip)]
    pub crossfit: Option<CrossFitResult>,
}

impl DmlFit {
    pub fn std_errors(&self) -> DVector<f64> {
        self.cov_beta.diagonal().map(|v| v.max(0.0).sqrt())
    }

    pub fn tests(&self, alpha: f64) -> Vec<TestResult> {
        test_coefficients(&self.beta_hat, &self.cov_beta, alpha)
    }

    /// CATE and its variance at `x` for a fit on `[1, X]`.
    pub fn predict_cate(&self, x: &[f64]) -> (f64, f64) {
        predict_cate(&self.beta_hat, &self.cov_beta, x, None)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// DML on a fixed design `w` with given residuals.
pub fn fit_on_design(w: &DMatrix<f64>, cf: CrossFitResult) -> Result<DmlFit> {
    let solved = solve_cate(w, &cf)?;
    let cov_beta = estimate_variance(w, &cf, &solved.beta)?;
    Ok(DmlFit {
        beta_hat: solved.beta,
        cov_beta,
        n_used: w.nrows(),
        rank_deficient: solved.rank_deficient,
        crossfit: Some(cf),
    })
}

/// Cross-fit nuisances on `data` and estimate `beta` for `theta(x) = [1, x^T] beta`.
pub fn fit_dml(
    data: &Dataset,
    q_spec: &RegressorSpec,
    h_spec: &ClassifierSpec,
    seed: u64,
) -> Result<DmlFit> {
    data.require_both_classes()?;
    let cf = cross_fit(data, q_spec, h_spec, N_FOLDS, seed)?;
    fit_on_design(&with_ones_column(&data.x), cf)
}

/// `tau = [1, x - mu] coef` and `var = [1, x - mu] cov [1, x - mu]^T`.
pub fn predict_cate(
    coef: &DVector<f64>,
    cov: &DMatrix<f64>,
    x: &[f64],
    mu: Option<&DVector<f64>>,
) -> (f64, f64) {
    let shifted: Vec<f64> = match mu {
        Some(mu) => x.iter().zip(mu.iter()).map(|(a, b)| a - b).collect(),
        None => x.to_vec(),
    };
    let w = augment(&shifted);
    let tau = w.dot(coef);
    let var = (w.transpose() * cov * &w)[(0, 0)].max(0.0);
    (tau, var)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignClass {
    Positive,
    Negative,
    NotSignificant,
}

impl SignClass {
    pub fn symbol(self) -> &'static str {
        match self {
            Self::Positive => "+",
            Self::Negative => "-",
            Self::NotSignificant => "0",
        }
    }
}

/// Two-sided normal test of one estimate against zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub estimate: f64,
    pub std_error: f64,
    pub z_stat: f64,
    pub p_value: f64,
    pub sign_class: SignClass,
    pub alpha: f64,
    /// Zero standard error.
    pub degenerate: bool,
}

impl TestResult {
    /// `**` below 1%, `*` below 5%.
    pub fn stars(&self) -> &'static str {
        if self.p_value < 0.01 {
            "**"
        } else if self.p_value < 0.05 {
            "*"
        } else {
            ""
        }
    }
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

/// `z_{1 - alpha/2}`.
pub fn critical_value(alpha: f64) -> f64 {
    std_normal().inverse_cdf(1.0 - alpha / 2.0)
}

pub fn z_test(estimate: f64, variance: f64, alpha: f64) -> TestResult {
    let std_error = variance.max(0.0).sqrt();
    if std_error == 0.0 {
        let (z_stat, sign_class) = if estimate > 0.0 {
            (f64::INFINITY, SignClass::Positive)
        } else if estimate < 0.0 {
            (f64::NEG_INFINITY, SignClass::Negative)
        } else {
            (0.0, SignClass::NotSignificant)
        };
        let p_value = if estimate == 0.0 { 1.0 } else { 0.0 };
        return TestResult {
            estimate,
            std_error,
            z_stat,
            p_value,
            sign_class,
            alpha,
            degenerate: true,
        };
    }
    let z_stat = estimate / std_error;
    let p_value = (2.0 * (1.0 - std_normal().cdf(z_stat.abs()))).clamp(0.0, 1.0);
    let crit = critical_value(alpha);
    let sign_class = if z_stat > crit {
        SignClass::Positive
    } else if z_stat < -crit {
        SignClass::Negative
    } else {
        SignClass::NotSignificant
    };
    TestResult {
        estimate,
        std_error,
        z_stat,
        p_value,
        sign_class,
        alpha,
        degenerate: false,
    }
}

pub fn test_coefficients(beta: &DVector<f64>, cov: &DMatrix<f64>, alpha: f64) -> Vec<TestResult> {
    (0..beta.len())
        .map(|k| z_test(beta[k], cov[(k, k)], alpha))
        .collect()
}

/// True if `cov` is symmetric and PSD up to `tol`.
pub fn is_psd(cov: &DMatrix<f64>, tol: f64) -> bool {
    let asym = (cov - cov.transpose()).amax();
    asym <= tol * (1.0 + cov.amax())
        && min_eigenvalue(&symmetrize(cov)) >= -tol * (1.0 + cov.amax())
}

/// A structural model `y = theta(x) z + u(x) + eps`, `E[z | x] = h(x)`, with
/// a linear `theta(x) = [1, x^T] beta`.
pub trait StructuralDgp: Sync {
    fn m(&self) -> usize;
    /// One draw of `(x, z, y)`.
    fn draw(&self, rng: &mut Rng) -> (Vec<f64>, f64, f64);
    fn q(&self, x: &[f64]) -> f64;
    fn h(&self, x: &[f64]) -> f64;
    fn true_beta(&self) -> DVector<f64>;

    fn sample(&self, n: usize, seed: u64) -> Dataset {
        let mut rng = rng_from_seed(seed);
        let m = self.m();
        let mut xs = Vec::with_capacity(n * m);
        let mut z = DVector::zeros(n);
        let mut y = DVector::zeros(n);
        for i in 0..n {
            let (x, zi, yi) = self.draw(&mut rng);
            xs.extend_from_slice(&x);
            z[i] = zi;
            y[i] = yi;
        }
        Dataset::unnamed(DMatrix::from_row_slice(n, m, &xs), z, y).expect("valid draws")
    }
}

/// Nuisance perturbation `q + r a^T w`, `h + r s tanh(b^T w)`, `w = [1, x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub a: DVector<f64>,
    pub s: f64,
    pub b: DVector<f64>,
}

impl Perturbation {
    /// Random direction with `|a|_inf <= 1`, `|s| <= 0.2` and unit-scale `b`.
    pub fn random(m: usize, rng: &mut Rng) -> Self {
        Self {
            a: DVector::from_fn(m + 1, |_, _| rng.random_range(-1.0..1.0)),
            s: rng.random_range(-0.2..0.2),
            b: DVector::from_fn(m + 1, |_, _| rng.random_range(-1.0..1.0)),
        }
    }

    fn dq(&self, w: &DVector<f64>) -> f64 {
        self.a.dot(w)
    }

    fn dh(&self, w: &DVector<f64>) -> f64 {
        self.s * self.b.dot(w).tanh()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreKind {
    /// `w (z - h)(y - q - w^T beta (z - h))`.
    Orthogonal,
    /// `w z (y - q - w^T beta (z - h))`: same root, no partialling-out of `z`.
    Naive,
}

/// Monte-Carlo means of the score along a nuisance path.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthogonalityCheck {
    pub r_grid: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    pub std_errors: Vec<DVector<f64>>,
    /// Forward difference between the first two grid points.
    pub derivative: DVector<f64>,
}

/// Evaluate `E[psi(r)]` at nuisances `(q + r dq, h + r dh)` and the true
/// `beta` for each `r`, reusing the same draws for every `r`.
pub fn check_orthogonality<D: StructuralDgp>(
    dgp: &D,
    perturbation: &Perturbation,
    score: ScoreKind,
    r_grid: &[f64],
    n_mc: usize,
    seed: u64,
) -> Result<OrthogonalityCheck> {
    if r_grid.len() < 2 || r_grid.iter().any(|r| !(0.0..1.0).contains(r)) {
        return Err(Error::InvalidArgument(
            "r_grid needs >= 2 points in [0, 1)".into(),
        ));
    }
    if n_mc < 2 {
        return Err(Error::InvalidArgument("n_mc must be >= 2".into()));
    }
    let p = dgp.m() + 1;
    let beta = dgp.true_beta();
    let mut rng = rng_from_seed(seed);
    let draws: Vec<_> = (0..n_mc)
        .map(|_| {
            let (x, z, y) = dgp.draw(&mut rng);
            let w = augment(&x);
            let (dq, dh) = (perturbation.dq(&w), perturbation.dh(&w));
            (w, z, y, dgp.q(&x), dgp.h(&x), dq, dh)
        })
        .collect();
    let mut means = Vec::with_capacity(r_grid.len());
    let mut std_errors = Vec::with_capacity(r_grid.len());
    for &r in r_grid {
        let mut sum = DVector::zeros(p);
        let mut sum_sq = DVector::zeros(p);
        for (w, z, y, q, h, dq, dh) in &draws {
            let q_r = q + r * dq;
            let h_r = (h + r * dh).clamp(1e-6, 1.0 - 1e-6);
            let theta = w.dot(&beta);
            let resid = y - q_r - theta * (z - h_r);
            let lead = match score {
                ScoreKind::Orthogonal => z - h_r,
                ScoreKind::Naive => *z,
            };
            let psi = w * (lead * resid);
            sum_sq += psi.component_mul(&psi);
            sum += psi;
        }
        let n = n_mc as f64;
        let mean = &sum / n;
        let var = (&sum_sq / n - mean.component_mul(&mean)).map(|v| v.max(0.0));
        std_errors.push(var.map(|v| (v / n).sqrt()));
        means.push(mean);
    }
    let derivative = (&means[1] - &means[0]) / (r_grid[1] - r_grid[0]);
    Ok(OrthogonalityCheck {
        r_grid: r_grid.to_vec(),
        means,
        std_errors,
        derivative,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nuisance::FoldModels;

    fn residuals(zeta: Vec<f64>, eta: Vec<f64>, fold_of: Vec<usize>) -> CrossFitResult {
        CrossFitResult {
            zeta_hat: DVector::from_vec(zeta),
            eta_hat: DVector::from_vec(eta),
            fold_of,
            fold_models: Vec::<FoldModels>::new(),
        }
    }

    #[test]
    fn unit_eta_reduces_to_ols() {
        let n = 30;
        let x = DMatrix::from_fn(n, 3, |i, j| {
            ((i * (j + 3)) % 7) as f64 + 0.1 * i as f64 * (j as f64)
        });
        let zeta: Vec<f64> = (0..n).map(|i| 3.0 + 2.0 * x[(i, 0)]).collect();
        let cf = residuals(zeta, vec![1.0; n], (0..n).map(|i| i % 2).collect());
        let s = solve_cate(&with_ones_column(&x), &cf).unwrap();
        let expect = [3.0, 2.0, 0.0, 0.0];
        for (k, e) in expect.iter().enumerate() {
            assert!((s.beta[k] - e).abs() < 1e-9, "{}", s.beta);
        }
        assert!(!s.rank_deficient);
    }

    #[test]
    fn random_instance_matches_normal_equations() {
        let mut rng = rng_from_seed(11);
        let n = 50;
        let w = DMatrix::from_fn(n, 3, |_, _| rng.random_range(-1.0..1.0));
        let zeta: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let eta: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cf = residuals(zeta.clone(), eta.clone(), (0..n).map(|i| i % 2).collect());
        let s = solve_cate(&w, &cf).unwrap();
        let d = DMatrix::from_fn(n, 3, |i, j| eta[i] * w[(i, j)]);
        let direct = (d.transpose() * &d)
            .lu()
            .solve(&(d.transpose() * DVector::from_vec(zeta)))
            .unwrap();
        assert!((s.beta - direct).amax() < 1e-10);
        assert!(score_sum(&w, &cf, &solve_cate(&w, &cf).unwrap().beta).amax() < 1e-10);
    }

    #[test]
    fn zero_eta_is_flagged() {
        let w = DMatrix::from_element(6, 2, 1.0);
        let cf = residuals(vec![1.0; 6], vec![0.0; 6], vec![0, 1, 0, 1, 0, 1]);
        assert!(solve_cate(&w, &cf).unwrap().rank_deficient);
    }

    #[test]
    fn zero_scores_give_zero_covariance() {
        let n = 20;
        let x = DMatrix::from_fn(n, 1, |i, _| i as f64);
        let eta: Vec<f64> = (0..n)
            .map(|i| if i % 3 == 0 { 0.7 } else { -0.4 })
            .collect();
        let zeta: Vec<f64> = (0..n).map(|i| eta[i] * (1.0 + 0.5 * i as f64)).collect();
        let cf = residuals(zeta, eta, (0..n).map(|i| i % 2).collect());
        let w = with_ones_column(&x);
        let s = solve_cate(&w, &cf).unwrap();
        let cov = estimate_variance(&w, &cf, &s.beta).unwrap();
        assert!(cov.amax() < 1e-20);
    }

    #[test]
    fn single_fold_mean_matches_closed_form() {
        // m = 0, eta = 1, L = 1: the sandwich is Var(zeta) / n
        let zeta = vec![1.0, 4.0, 2.0, 8.0, 5.0, 3.0, 7.0];
        let n = zeta.len() as f64;
        let cf = residuals(zeta.clone(), vec![1.0; 7], vec![0; 7]);
        let w = DMatrix::from_element(7, 1, 1.0);
        let s = solve_cate(&w, &cf).unwrap();
        let cov = estimate_variance(&w, &cf, &s.beta).unwrap();
        let mean = zeta.iter().sum::<f64>() / n;
        let var = zeta.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / n;
        assert!((s.beta[0] - mean).abs() < 1e-12);
        assert!((cov[(0, 0)] - var / n).abs() < 1e-12);
    }

    #[test]
    fn singular_jacobian_is_reported() {
        let w = DMatrix::from_fn(8, 2, |i, _| i as f64);
        let cf = residuals(vec![1.0; 8], vec![0.5; 8], vec![0, 1, 0, 1, 0, 1, 0, 1]);
        let beta = DVector::zeros(2);
        assert!(matches!(
            estimate_variance(&w, &cf, &beta),
            Err(Error::Singular { .. })
        ));
    }

    #[test]
    fn z_test_rules() {
        let t = z_test(0.0, 4.0, 0.05);
        assert_eq!((t.sign_class, t.p_value), (SignClass::NotSignificant, 1.0));
        let crit = critical_value(0.05);
        assert!((crit - 1.959963984540054).abs() < 1e-9);
        let at = z_test(crit, 1.0, 0.05);
        assert_eq!(at.sign_class, SignClass::NotSignificant);
        assert_eq!(z_test(1.97, 1.0, 0.05).sign_class, SignClass::Positive);
        assert_eq!(z_test(-1.97, 1.0, 0.05).sign_class, SignClass::Negative);
        let big = z_test(1.0283, 0.1f64.powi(2), 0.05);
        assert_eq!((big.sign_class, big.stars()), (SignClass::Positive, "**"));
        let d = z_test(-2.0, 0.0, 0.05);
        assert!(d.degenerate && d.p_value == 0.0 && d.sign_class == SignClass::Negative);
    }

    #[test]
    fn origin_prediction_and_nonnegative_variance() {
        let beta = DVector::from_vec(vec![0.5, 1.0, -2.0]);
        let l = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.3, 2.0, 0.0, -0.5, 0.1, 0.7]);
        let cov = &l * l.transpose();
        let (tau, var) = predict_cate(&beta, &cov, &[0.0, 0.0], None);
        assert_eq!((tau, var), (0.5, cov[(0, 0)]));
        let mut rng = rng_from_seed(3);
        for _ in 0..1000 {
            let x = [rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)];
            assert!(predict_cate(&beta, &cov, &x, None).1 >= 0.0);
        }
        let mu = DVector::from_vec(vec![1.0, 2.0]);
        let (tau, _) = predict_cate(&beta, &cov, &[1.0, 2.0], Some(&mu));
        assert_eq!(tau, 0.5);
    }

    #[test]
    fn psd_check() {
        assert!(is_psd(&DMatrix::identity(3, 3), 1e-10));
        assert!(!is_psd(
            &DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]),
            1e-10
        ));
    }
}
