use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{fit_classifier, fit_regressor, Classifier, ClassifierSpec, Predictor, RegressorSpec};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{select_entries, select_rows};
use crate::rng::{derive_seed, rng_from_seed};

/// Nuisance models trained on the complement of one fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldModels {
    pub q: Predictor,
    pub h: Classifier,
}

/// Out-of-fold residuals `zeta = y - q(x)` and `eta = z - h(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossFitResult {
    pub zeta_hat: DVector<f64>,
    pub eta_hat: DVector<f64>,
    pub fold_of: Vec<usize>,
    pub fold_models: Vec<FoldModels>,
}

impl CrossFitResult {
    pub fn n_folds(&self) -> usize {
        self.fold_models.len()
    }

    pub fn fold_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len())
            .filter(|&i| self.fold_of[i] == fold)
            .collect()
    }
}

/// Stratified random fold assignment. Each treatment class is shuffled and
/// dealt round-robin, continuing the deal across classes so fold sizes
/// differ by at most one. The result depends only on `(z, n_folds, seed)`.
pub fn stratified_folds(z: &DVector<f64>, n_folds: usize, seed: u64) -> Result<Vec<usize>> {
    let n = z.len();
    if n_folds < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 folds, got {n_folds}"
        )));
    }
    if n < n_folds {
        return Err(Error::InvalidData(format!(
            "{n} rows cannot fill {n_folds} folds"
        )));
    }
    let mut rng = rng_from_seed(seed);
    let mut fold_of = vec![0; n];
    let mut deal = 0;
    for class in [1.0, 0.0] {
        let mut rows: Vec<usize> = (0..n).filter(|&i| z[i] == class).collect();
        if rows.len() < n_folds {
            return Err(Error::SingleClass(format!(
                "treatment class {class} has {} rows; every training fold needs both classes",
                rows.len()
            )));
        }
        rows.shuffle(&mut rng);
        for i in rows {
            fold_of[i] = deal % n_folds;
            deal += 1;
        }
    }
    Ok(fold_of)
}

pub fn cross_fit(
    data: &Dataset,
    q_spec: &RegressorSpec,
    h_spec: &ClassifierSpec,
    n_folds: usize,
    seed: u64,
) -> Result<CrossFitResult> {
    let fold_of = stratified_folds(&data.z, n_folds, derive_seed(seed, 0))?;
    cross_fit_with_folds(&data.x, &data.z, &data.y, q_spec, h_spec, &fold_of, seed)
}

/// Cross-fitting on a given fold assignment (folds numbered `0..L`).
pub fn cross_fit_with_folds(
    x: &DMatrix<f64>,
    z: &DVector<f64>,
    y: &DVector<f64>,
    q_spec: &RegressorSpec,
    h_spec: &ClassifierSpec,
    fold_of: &[usize],
    seed: u64,
) -> Result<CrossFitResult> {
    let n = x.nrows();
    if z.len() != n || y.len() != n || fold_of.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "x has {n} rows, z {}, y {}, folds {}",
            z.len(),
            y.len(),
            fold_of.len()
        )));
    }
    let n_folds = fold_of.iter().max().map_or(0, |m| m + 1);
    if n_folds < 2 {
        return Err(Error::InvalidArgument(
            "cross-fitting needs at least 2 folds".into(),
        ));
    }
    let mut zeta_hat = DVector::zeros(n);
    let mut eta_hat = DVector::zeros(n);
    let mut fold_models = Vec::with_capacity(n_folds);
    for fold in 0..n_folds {
        let test: Vec<usize> = (0..n).filter(|&i| fold_of[i] == fold).collect();
        let train: Vec<usize> = (0..n).filter(|&i| fold_of[i] != fold).collect();
        if test.is_empty() {
            return Err(Error::InvalidData(format!("fold {fold} is empty")));
        }
        let xt = select_rows(x, &train);
        let q = fit_regressor(
            &xt,
            &select_entries(y, &train),
            q_spec,
            derive_seed(seed, 1 + 2 * fold as u64),
        )?;
        let h = fit_classifier(
            &xt,
            &select_entries(z, &train),
            h_spec,
            derive_seed(seed, 2 + 2 * fold as u64),
        )
        .map_err(|e| match e {
            Error::SingleClass(msg) => Error::SingleClass(format!("fold {fold}: {msg}")),
            other => other,
        })?;
        let xe = select_rows(x, &test);
        let qp = q.predict(&xe);
        let hp = h.predict(&xe);
        for (k, &i) in test.iter().enumerate() {
            zeta_hat[i] = y[i] - qp[k];
            eta_hat[i] = z[i] - hp[k];
        }
        fold_models.push(FoldModels { q, h });
    }
    Ok(CrossFitResult {
        zeta_hat,
        eta_hat,
        fold_of: fold_of.to_vec(),
        fold_models,
    })
}
