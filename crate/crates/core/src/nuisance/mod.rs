//! Outcome and propensity learners, cross-fitting and learner selection.

mod crossfit;
mod forest;
mod linear;
mod logistic;

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub use crossfit::{cross_fit, cross_fit_with_folds, stratified_folds, CrossFitResult, FoldModels};
pub use forest::{fit_forest, Forest, ForestParams, ForestTask, Tree};
pub use linear::{fit_ols, fit_ridge, LinearModel};
pub use logistic::{fit_logistic, LogisticModel};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::derive_seed;

/// Propensity predictions are clipped to `[EPS_CLIP, 1 - EPS_CLIP]`.
pub const EPS_CLIP: f64 = 0.01;

/// Learner for the outcome regression `q(x) = E[y | x]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RegressorSpec {
    Ols,
    Ridge { lambda: f64 },
    RandomForest(ForestParams),
}

/// Learner for the propensity `h(x) = P(z = 1 | x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClassifierSpec {
    Logistic { lambda: f64 },
    RandomForest(ForestParams),
}

impl RegressorSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Ridge { lambda } if lambda.is_nan() || *lambda < 0.0 => Err(
                Error::InvalidArgument(format!("ridge lambda must be >= 0, got {lambda}")),
            ),
            Self::RandomForest(p) if p.n_trees == 0 => {
                Err(Error::InvalidArgument("n_trees must be >= 1".into()))
            }
            _ => Ok(()),
        }
    }
}

impl ClassifierSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Logistic { lambda } if lambda.is_nan() || *lambda < 0.0 => Err(
                Error::InvalidArgument(format!("logistic lambda must be >= 0, got {lambda}")),
            ),
            Self::RandomForest(p) if p.n_trees == 0 => {
                Err(Error::InvalidArgument("n_trees must be >= 1".into()))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for RegressorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Ols => write!(f, "ols"),
            Self::Ridge { lambda } => write!(f, "ridge({lambda})"),
            Self::RandomForest(p) => write!(f, "rf({})", p.n_trees),
        }
    }
}

impl fmt::Display for ClassifierSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Logistic { lambda } => write!(f, "logistic({lambda})"),
            Self::RandomForest(p) => write!(f, "rf({})", p.n_trees),
        }
    }
}

/// Parses `ols`, `ridge`, `ridge:<lambda>`, `rf`, `rf:<n_trees>`.
impl FromStr for RegressorSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = split_arg(s);
        match (name, arg) {
            ("ols", None) => Ok(Self::Ols),
            ("ridge", a) => Ok(Self::Ridge {
                lambda: parse_num(a, 1.0)?,
            }),
            ("rf", a) => Ok(Self::RandomForest(forest_params(a)?)),
            _ => Err(Error::InvalidArgument(format!(
                "unknown outcome learner {s:?} (ols|ridge|rf)"
            ))),
        }
    }
}

/// Parses `logistic`, `logistic:<lambda>`, `rf`, `rf:<n_trees>`.
impl FromStr for ClassifierSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = split_arg(s);
        match name {
            "logistic" => Ok(Self::Logistic {
                lambda: parse_num(arg, 0.0)?,
            }),
            "rf" => Ok(Self::RandomForest(forest_params(arg)?)),
            _ => Err(Error::InvalidArgument(format!(
                "unknown propensity learner {s:?} (logistic|rf)"
            ))),
        }
    }
}

fn split_arg(s: &str) -> (&str, Option<&str>) {
    match s.split_once(':') {
        Some((a, b)) => (a, Some(b)),
        None => (s, None),
    }
}

fn parse_num(arg: Option<&str>, default: f64) -> Result<f64> {
    match arg {
        None => Ok(default),
        Some(a) => a
            .parse::<f64>()
            .ok()
            .filter(|v| *v >= 0.0)
            .ok_or_else(|| Error::InvalidArgument(format!("bad learner parameter {a:?}"))),
    }
}

fn forest_params(arg: Option<&str>) -> Result<ForestParams> {
    let mut p = ForestParams::default();
    if let Some(a) = arg {
        p.n_trees = a
            .parse()
            .ok()
            .filter(|n| *n >= 1)
            .ok_or_else(|| Error::InvalidArgument(format!("bad tree count {a:?}")))?;
    }
    Ok(p)
}

/// A fitted real-valued predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Predictor {
    Linear(LinearModel),
    Logistic(LogisticModel),
    Forest(Forest),
}

impl Predictor {
    pub fn predict(&self, x: &DMatrix<f64>) -> DVector<f64> {
        match self {
            Self::Linear(m) => m.predict(x),
            Self::Logistic(m) => m.predict(x),
            Self::Forest(m) => m.predict(x),
        }
    }

    pub fn predict_row(&self, x: &[f64]) -> f64 {
        match self {
            Self::Linear(m) => m.predict_row(x),
            Self::Logistic(m) => m.predict_row(x),
            Self::Forest(m) => m.predict_row(x),
        }
    }
}

/// Probability predictor whose outputs are clipped away from 0 and 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classifier(pub Predictor);

impl Classifier {
    pub fn predict(&self, x: &DMatrix<f64>) -> DVector<f64> {
        self.0.predict(x).map(clip)
    }

    pub fn predict_row(&self, x: &[f64]) -> f64 {
        clip(self.0.predict_row(x))
    }
}

fn clip(p: f64) -> f64 {
    p.clamp(EPS_CLIP, 1.0 - EPS_CLIP)
}

fn check_rows(x: &DMatrix<f64>, n: usize, min: usize) -> Result<()> {
    if x.nrows() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} feature rows vs {n} targets",
            x.nrows()
        )));
    }
    if n < min {
        return Err(Error::InvalidData(format!(
            "need at least {min} rows to fit, got {n}"
        )));
    }
    Ok(())
}

pub fn fit_regressor(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    spec: &RegressorSpec,
    seed: u64,
) -> Result<Predictor> {
    spec.validate()?;
    check_rows(x, y.len(), 2)?;
    Ok(match spec {
        RegressorSpec::Ols => Predictor::Linear(fit_ols(x, y)),
        RegressorSpec::Ridge { lambda } => Predictor::Linear(fit_ridge(x, y, *lambda)),
        RegressorSpec::RandomForest(p) => {
            Predictor::Forest(fit_forest(x, y, p, ForestTask::Regression, seed))
        }
    })
}

pub fn fit_classifier(
    x: &DMatrix<f64>,
    z: &DVector<f64>,
    spec: &ClassifierSpec,
    seed: u64,
) -> Result<Classifier> {
    spec.validate()?;
    check_rows(x, z.len(), 2)?;
    let treated = z.iter().filter(|v| **v == 1.0).count();
    if treated == 0 || treated == z.len() {
        return Err(Error::SingleClass(format!(
            "classifier training data has only class {}",
            z[0]
        )));
    }
    Ok(Classifier(match spec {
        ClassifierSpec::Logistic { lambda } => Predictor::Logistic(fit_logistic(x, z, *lambda)),
        ClassifierSpec::RandomForest(p) => {
            Predictor::Forest(fit_forest(x, z, p, ForestTask::Classification, seed))
        }
    }))
}

pub fn rmse(pred: &DVector<f64>, truth: &DVector<f64>) -> f64 {
    ((pred - truth).norm_squared() / pred.len() as f64).sqrt()
}

pub fn brier(prob: &DVector<f64>, z: &DVector<f64>) -> f64 {
    (prob - z).norm_squared() / prob.len() as f64
}

/// Cross-validated score of each candidate and the index of the best one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub best: usize,
    pub scores: Vec<f64>,
}

fn argmin_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s < scores[best] {
            best = i;
        }
    }
    best
}

/// Two-fold cross-validated RMSE of outcome learners, averaged over trials.
pub fn select_regressor(
    data: &Dataset,
    candidates: &[RegressorSpec],
    trials: usize,
    seed: u64,
) -> Result<Selection> {
    select(data, candidates.len(), trials, seed, |i, train, test, s| {
        let model = fit_regressor(&train.x, &train.y, &candidates[i], s)?;
        Ok(rmse(&model.predict(&test.x), &test.y))
    })
}

/// Two-fold cross-validated Brier score of propensity learners, averaged over trials.
pub fn select_classifier(
    data: &Dataset,
    candidates: &[ClassifierSpec],
    trials: usize,
    seed: u64,
) -> Result<Selection> {
    select(data, candidates.len(), trials, seed, |i, train, test, s| {
        let model = fit_classifier(&train.x, &train.z, &candidates[i], s)?;
        Ok(brier(&model.predict(&test.x), &test.z))
    })
}

fn select<F>(data: &Dataset, k: usize, trials: usize, seed: u64, score: F) -> Result<Selection>
where
    F: Fn(usize, &Dataset, &Dataset, u64) -> Result<f64>,
{
    if k == 0 {
        return Err(Error::InvalidArgument("no candidate learners".into()));
    }
    let trials = trials.max(1);
    let mut totals = vec![0.0; k];
    for t in 0..trials {
        let trial_seed = derive_seed(seed, t as u64);
        let folds = stratified_folds(&data.z, 2, trial_seed)?;
        for fold in 0..2 {
            let test: Vec<usize> = (0..data.n()).filter(|&i| folds[i] == fold).collect();
            let train: Vec<usize> = (0..data.n()).filter(|&i| folds[i] != fold).collect();
            let (tr, te) = (data.subset(&train), data.subset(&test));
            for (c, total) in totals.iter_mut().enumerate() {
                *total += score(c, &tr, &te, derive_seed(trial_seed, (fold * k + c) as u64))?;
            }
        }
    }
    let scores: Vec<f64> = totals.iter().map(|s| s / (2 * trials) as f64).collect();
    Ok(Selection {
        best: argmin_first(&scores),
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::sim::Sim1Dgp;
    use crate::rng::rng_from_seed;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn spec_parsing_and_display() {
        assert_eq!("ols".parse::<RegressorSpec>().unwrap(), RegressorSpec::Ols);
        assert_eq!(
            "ridge:2.5".parse::<RegressorSpec>().unwrap(),
            RegressorSpec::Ridge { lambda: 2.5 }
        );
        assert!(
            matches!("rf:7".parse::<RegressorSpec>().unwrap(), RegressorSpec::RandomForest(p) if p.n_trees == 7)
        );
        assert_eq!(
            "logistic".parse::<ClassifierSpec>().unwrap(),
            ClassifierSpec::Logistic { lambda: 0.0 }
        );
        assert!("svm".parse::<RegressorSpec>().is_err());
        assert!("ridge:-1".parse::<RegressorSpec>().is_err());
        assert!("rf:0".parse::<ClassifierSpec>().is_err());
        let json =
            serde_json::to_string(&RegressorSpec::RandomForest(ForestParams::default())).unwrap();
        assert_eq!(
            serde_json::from_str::<RegressorSpec>(&json).unwrap(),
            RegressorSpec::RandomForest(ForestParams::default())
        );
    }

    #[test]
    fn constant_target_for_all_regressors() {
        let x = DMatrix::from_fn(30, 2, |i, j| (i * (j + 2)) as f64);
        let y = DVector::from_element(30, 5.0);
        for spec in [
            RegressorSpec::Ols,
            RegressorSpec::Ridge { lambda: 1.0 },
            RegressorSpec::RandomForest(ForestParams::default()),
        ] {
            let p = fit_regressor(&x, &y, &spec, 0).unwrap();
            assert!(
                p.predict(&x).iter().all(|v| (v - 5.0).abs() < 1e-9),
                "{spec}"
            );
        }
    }

    #[test]
    fn forest_beats_ols_on_absolute_value_target() {
        let n = 5000;
        let mut rng = rng_from_seed(4);
        let d = Sim1Dgp::sample_party(1, n, &mut rng);
        let u = DVector::from_fn(n, |i, _| d.x[(i, 0)].abs() + d.x[(i, 1)].abs());
        let rf = fit_regressor(
            &d.x,
            &u,
            &RegressorSpec::RandomForest(ForestParams {
                n_trees: 30,
                ..Default::default()
            }),
            1,
        )
        .unwrap();
        let ols = fit_regressor(&d.x, &u, &RegressorSpec::Ols, 1).unwrap();
        let (a, b) = (rmse(&rf.predict(&d.x), &u), rmse(&ols.predict(&d.x), &u));
        assert!(a < b, "rf {a} vs ols {b}");
    }

    #[test]
    fn balanced_independent_treatment_gives_half() {
        let n = 2000;
        let mut rng = rng_from_seed(5);
        let x = DMatrix::from_fn(n, 3, |_, _| StandardNormal.sample(&mut rng));
        let z = DVector::from_fn(n, |i, _| (i % 2) as f64);
        let c = fit_classifier(&x, &z, &ClassifierSpec::Logistic { lambda: 0.0 }, 0).unwrap();
        assert!(c.predict(&x).iter().all(|p| (p - 0.5).abs() < 0.05));
    }

    #[test]
    fn threshold_treatment_has_low_brier() {
        let n = 2000;
        let mut rng = rng_from_seed(6);
        let x = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-1.0..1.0));
        let z = DVector::from_fn(n, |i, _| f64::from(u8::from(x[(i, 0)] > 0.0)));
        let c = fit_classifier(&x, &z, &ClassifierSpec::Logistic { lambda: 0.0 }, 0).unwrap();
        let p = c.predict(&x);
        assert!(brier(&p, &z) < 0.1);
        assert!(p.iter().all(|v| (EPS_CLIP..=1.0 - EPS_CLIP).contains(v)));
    }

    #[test]
    fn single_class_rejected() {
        let x = DMatrix::from_fn(10, 1, |i, _| i as f64);
        let z = DVector::from_element(10, 1.0);
        assert!(matches!(
            fit_classifier(&x, &z, &ClassifierSpec::Logistic { lambda: 0.0 }, 0),
            Err(Error::SingleClass(_))
        ));
    }

    #[test]
    fn brier_of_constant_half_is_quarter() {
        let z = DVector::from_fn(100, |i, _| (i % 2) as f64);
        assert_eq!(brier(&DVector::from_element(100, 0.5), &z), 0.25);
    }

    #[test]
    fn selection_prefers_correct_model_on_linear_data() {
        let n = 200;
        let mut rng = rng_from_seed(7);
        let x = DMatrix::from_fn(n, 3, |_, _| StandardNormal.sample(&mut rng));
        let y = DVector::from_fn(n, |i, _| 1.0 + 2.0 * x[(i, 0)] - x[(i, 2)]);
        let z = DVector::from_fn(n, |i, _| (i % 2) as f64);
        let d = Dataset::unnamed(x, z, y).unwrap();
        let sel = select_regressor(
            &d,
            &[RegressorSpec::Ols, RegressorSpec::Ridge { lambda: 1.0 }],
            2,
            1,
        )
        .unwrap();
        assert_eq!(sel.best, 0);
        assert!(sel.scores[0] < 1e-8);
    }

    #[test]
    fn argmin_ties_go_to_first() {
        assert_eq!(argmin_first(&[1.0, 1.0, 2.0]), 0);
        assert_eq!(argmin_first(&[3.0, 1.0, 1.0]), 1);
    }
}
