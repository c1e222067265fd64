use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use dcdml_core::data::sim::{gen_sim1, LinearDgp};
use dcdml_core::data::{load_csv, pool, write_csv, CsvSchema, Dataset};
use dcdml_core::dml::{fit_dml, score_sum, DmlFit, StructuralDgp};
use dcdml_core::linalg::{pinv, with_ones_column};
use dcdml_core::nuisance::{stratified_folds, ClassifierSpec, ForestParams, RegressorSpec};

const OLS: RegressorSpec = RegressorSpec::Ols;
const LOGIT: ClassifierSpec = ClassifierSpec::Logistic { lambda: 0.0 };

fn linear(beta: &[f64]) -> LinearDgp {
    let m = beta.len() - 1;
    LinearDgp {
        beta: DVector::from_column_slice(beta),
        gamma: DVector::from_fn(m + 1, |j, _| 0.5 * j as f64),
        propensity: 0.4,
        noise_sd: 1.0,
    }
}

fn moment_norm(data: &Dataset, fit: &DmlFit) -> f64 {
    let cf = fit.crossfit.as_ref().expect("cross-fit kept");
    score_sum(&with_ones_column(&data.x), cf, &fit.beta_hat).amax()
}

#[test]
fn moment_condition_holds_for_every_learner() {
    let data = linear(&[1.0, 0.5, -0.5]).sample(600, 4);
    let rf = ForestParams {
        n_trees: 30,
        ..ForestParams::default()
    };
    let specs = [
        (OLS, LOGIT),
        (
            RegressorSpec::Ridge { lambda: 2.0 },
            ClassifierSpec::Logistic { lambda: 1.0 },
        ),
        (
            RegressorSpec::RandomForest(rf),
            ClassifierSpec::RandomForest(rf),
        ),
    ];
    for (q, h) in specs {
        let fit = fit_dml(&data, &q, &h, 9).unwrap();
        assert!(moment_norm(&data, &fit) < 1e-8, "{q} / {h}");
    }
}

#[test]
fn outcome_shift_leaves_coefficients_unchanged() {
    let data = linear(&[1.0, 2.0, 0.0]).sample(500, 1);
    let shifted = data.with_outcome(data.y.add_scalar(123.0)).unwrap();
    let a = fit_dml(&data, &OLS, &LOGIT, 3).unwrap();
    let b = fit_dml(&shifted, &OLS, &LOGIT, 3).unwrap();
    assert!((&a.beta_hat - &b.beta_hat).amax() < 1e-8);
}

#[test]
fn outcome_scale_leaves_z_statistics_unchanged() {
    let data = linear(&[1.0, 2.0, 0.0]).sample(500, 2);
    let scaled = data.with_outcome(&data.y * 7.5).unwrap();
    let a = fit_dml(&data, &OLS, &LOGIT, 3).unwrap();
    let b = fit_dml(&scaled, &OLS, &LOGIT, 3).unwrap();
    for (ta, tb) in a.tests(0.05).iter().zip(b.tests(0.05)) {
        assert!((ta.z_stat - tb.z_stat).abs() < 1e-8 * (1.0 + ta.z_stat.abs()));
    }
}

#[test]
fn variance_shrinks_with_sample_size() {
    let dgp = linear(&[1.0, 1.0, 1.0, 0.0]);
    let small = fit_dml(&dgp.sample(1000, 5), &OLS, &LOGIT, 1).unwrap();
    let large = fit_dml(&dgp.sample(4000, 6), &OLS, &LOGIT, 1).unwrap();
    let ratio = small.cov_beta.diagonal().sum() / large.cov_beta.diagonal().sum();
    assert!(ratio > 2.5 && ratio < 6.0, "ratio {ratio}");
}

#[test]
fn constant_effect_is_recovered() {
    let fit = fit_dml(
        &linear(&[2.0, 0.0, 0.0, 0.0]).sample(4000, 8),
        &OLS,
        &LOGIT,
        2,
    )
    .unwrap();
    assert!((fit.beta_hat[0] - 2.0).abs() < 0.1);
    for j in 1..4 {
        assert!(
            fit.beta_hat[j].abs() < 0.1,
            "slope {j}: {}",
            fit.beta_hat[j]
        );
    }
}

#[test]
fn pooled_synthetic_data_near_truth() {
    let rf = ForestParams::default();
    for seed in [1, 2, 3] {
        let (parties, _) = gen_sim1(seed, 300).unwrap();
        let pooled = pool(&parties).unwrap();
        let fit = fit_dml(
            &pooled,
            &RegressorSpec::RandomForest(rf),
            &ClassifierSpec::RandomForest(rf),
            seed,
        )
        .unwrap();
        for j in 0..3 {
            assert!(
                (fit.beta_hat[j] - 1.0).abs() < 0.35,
                "seed {seed} coef {j}: {}",
                fit.beta_hat[j]
            );
        }
        assert!(fit.cov_beta.diagonal().iter().all(|v| *v > 0.0));
    }
}

#[test]
fn single_treatment_class_is_rejected() {
    let mut data = linear(&[1.0, 1.0]).sample(100, 3);
    data.z.fill(1.0);
    assert!(fit_dml(&data, &OLS, &LOGIT, 1).is_err());
}

#[test]
fn csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    let data = linear(&[1.0, -1.0, 0.3]).sample(25, 11);
    write_csv(&path, &data, "treat", "outcome").unwrap();
    let back = load_csv(&path, &CsvSchema::new("treat", "outcome")).unwrap();
    assert_eq!(back, data);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn folds_are_balanced(treated in 2usize..40, control in 2usize..40, seed in any::<u64>()) {
        let z = DVector::from_fn(treated + control, |i, _| if i < treated { 1.0 } else { 0.0 });
        let folds = stratified_folds(&z, 2, seed).unwrap();
        for class in [0.0, 1.0] {
            let counts: Vec<usize> = (0..2).map(|f| (0..z.len()).filter(|&i| folds[i] == f && z[i] == class).count()).collect();
            prop_assert!(counts[0].abs_diff(counts[1]) <= 1);
        }
    }

    #[test]
    fn pseudo_inverse_conditions(vals in prop::collection::vec(-5.0f64..5.0, 12), rank_one in any::<bool>()) {
        let mut a = DMatrix::from_row_slice(4, 3, &vals);
        if rank_one {
            let c = a.column(0).into_owned();
            a.set_column(1, &(&c * 2.0));
            a.set_column(2, &(&c * -1.0));
        }
        let (p, _) = pinv(&a, 1e-12);
        let scale = 1.0 + a.amax() * a.amax() * p.amax();
        prop_assert!((&a * &p * &a - &a).amax() < 1e-9 * scale);
        prop_assert!((&p * &a * &p - &p).amax() < 1e-9 * scale * (1.0 + p.amax()));
    }
}
