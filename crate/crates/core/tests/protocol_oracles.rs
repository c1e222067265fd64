use dcdml_core::data::sim::gen_sim1;
use dcdml_core::data::{pool, PartyData};
use dcdml_core::dimred::DimReducer;
use dcdml_core::dml::fit_dml;
use dcdml_core::dml::SignClass;
use dcdml_core::linalg::{center, column_means, with_ones_column};
use dcdml_core::ni::{
    anchor_left_inverse, make_ni_intermediate_with, run_ni_dc_dml, run_ni_from_shares,
};
use dcdml_core::nuisance::{ClassifierSpec, ForestParams, RegressorSpec};
use dcdml_core::protocol::{gen_anchor, run_dc_dml_with, union_ranges, AnchorDataset, ReducerSpec};
use dcdml_core::rng::rng_from_seed;
use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};

const OLS: RegressorSpec = RegressorSpec::Ols;
const LOGIT: ClassifierSpec = ClassifierSpec::Logistic { lambda: 0.0 };

fn random_invertible(m: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = rng_from_seed(seed);
    loop {
        let f = DMatrix::from_fn(m, m, |_, _| StandardNormal.sample(&mut rng));
        if dcdml_core::linalg::condition_number(&f) < 1e3 {
            return f;
        }
    }
}

struct Setup {
    parties: Vec<PartyData>,
    reducers: Vec<DimReducer>,
    anchor: AnchorDataset,
}

fn full_rank_setup(seed: u64) -> Setup {
    let (parties, _) = gen_sim1(seed, 150).unwrap();
    let m = 10;
    let mu = column_means(&pool(&parties).unwrap().x);
    let reducers = (0..2)
        .map(|k| DimReducer::custom(random_invertible(m, seed * 10 + k), mu.clone()).unwrap())
        .collect();
    let ranges = union_ranges(parties.iter().map(|p| &p.data)).unwrap();
    let anchor = gen_anchor(&ranges, 2 * (m + 1), seed + 1000).unwrap();
    Setup {
        parties,
        reducers,
        anchor,
    }
}

#[test]
fn square_reducers_reproduce_centralized_coefficients() {
    for seed in [1, 2, 3] {
        let s = full_rank_setup(seed);
        let ca = fit_dml(&pool(&s.parties).unwrap(), &OLS, &LOGIT, seed).unwrap();
        let run =
            run_dc_dml_with(&s.parties, &s.reducers, &s.anchor, 11, &OLS, &LOGIT, seed).unwrap();
        for model in &run.models {
            let diff = (&model.beta - &ca.beta_hat).amax();
            assert!(diff < 1e-6, "seed {seed}: |beta_k - beta_CA| = {diff:e}");
        }
    }
}

#[test]
fn collaborative_and_back_transformed_cates_agree() {
    let s = full_rank_setup(4);
    let run = run_dc_dml_with(&s.parties, &s.reducers, &s.anchor, 11, &OLS, &LOGIT, 4).unwrap();
    assert_eq!(run.session.svd_residual, 0.0);
    let collab = &run.session.x_check * &run.analyst.gamma_check;
    for (k, model) in run.models.iter().enumerate() {
        let (offset, n) = run.session.party_rows[k];
        let x = &s.parties[k].data.x;
        let user = with_ones_column(&center(x, &model.mu)) * &model.gamma;
        let diff = (user - collab.rows(offset, n)).amax();
        assert!(diff < 1e-8, "party {k}: {diff:e}");
    }
}

#[test]
fn anchor_recovery_identity() {
    let s = full_rank_setup(5);
    let run = run_dc_dml_with(&s.parties, &s.reducers, &s.anchor, 11, &OLS, &LOGIT, 5).unwrap();
    for (k, red) in s.reducers.iter().enumerate() {
        let l = anchor_left_inverse(&s.anchor, &red.mu).unwrap();
        let lhs = l * &run.session.x_check_anc[k];
        let rhs = red.f_bar() * &run.session.g[k];
        assert!((lhs - rhs).amax() < 1e-10);
    }
}

fn pca_setup(seed: u64) -> Setup {
    let (parties, _) = gen_sim1(seed, 150).unwrap();
    let reducers = parties
        .iter()
        .map(|p| dcdml_core::dimred::fit_pca(&p.data.x, 9).unwrap())
        .collect();
    let ranges = union_ranges(parties.iter().map(|p| &p.data)).unwrap();
    let anchor = gen_anchor(&ranges, 300, seed + 7).unwrap();
    Setup {
        parties,
        reducers,
        anchor,
    }
}

#[test]
fn ni_with_identity_mixing_matches_plain_protocol() {
    let s = pca_setup(6);
    let plain = run_dc_dml_with(&s.parties, &s.reducers, &s.anchor, 10, &OLS, &LOGIT, 6).unwrap();
    let shares = s
        .parties
        .iter()
        .zip(&s.reducers)
        .map(|(p, r)| {
            let id: Vec<usize> = (0..p.data.n()).collect();
            make_ni_intermediate_with(p, r, &s.anchor, &DMatrix::identity(9, 9), &id).unwrap()
        })
        .collect::<Vec<_>>();
    let ni = run_ni_from_shares(
        &shares,
        &s.parties,
        &s.reducers,
        &s.anchor,
        10,
        &OLS,
        &LOGIT,
        6,
    )
    .unwrap();
    assert_eq!(ni.messages, 4);
    for (a, b) in plain.models.iter().zip(&ni.models) {
        assert!((&a.beta - &b.beta).amax() < 1e-8);
        assert!((&a.cov_gamma - &b.cov_gamma).amax() < 1e-8);
        assert!((a.var_alpha - b.var_alpha).abs() < 1e-8);
    }
}

#[test]
fn ni_mixing_with_full_information_matches() {
    let s = full_rank_setup(8);
    let plain = run_dc_dml_with(&s.parties, &s.reducers, &s.anchor, 11, &OLS, &LOGIT, 8).unwrap();
    let shares: Vec<_> = s
        .parties
        .iter()
        .zip(&s.reducers)
        .enumerate()
        .map(|(k, (p, r))| {
            let e = random_invertible(10, 900 + k as u64);
            let id: Vec<usize> = (0..p.data.n()).collect();
            make_ni_intermediate_with(p, r, &s.anchor, &e, &id).unwrap()
        })
        .collect();
    let ni = run_ni_from_shares(
        &shares,
        &s.parties,
        &s.reducers,
        &s.anchor,
        11,
        &OLS,
        &LOGIT,
        8,
    )
    .unwrap();
    for (a, b) in plain.models.iter().zip(&ni.models) {
        assert!((&a.beta - &b.beta).amax() < 1e-6);
    }
}

#[test]
fn ni_random_mixing_and_permutation_keep_sign_pattern() {
    let (parties, _) = gen_sim1(13, 300).unwrap();
    let q = RegressorSpec::RandomForest(ForestParams::default());
    let h = ClassifierSpec::RandomForest(ForestParams::default());
    let spec = ReducerSpec::PcaPlusBootstrap {
        dim: 9,
        bs_dim: 3,
        p: 0.5,
    };
    let reducers: Vec<_> = parties
        .iter()
        .map(|p| spec.fit(&p.data, &q, &h, 100 + p.party_id as u64).unwrap())
        .collect();
    let ranges = union_ranges(parties.iter().map(|p| &p.data)).unwrap();
    let anchor = gen_anchor(&ranges, 600, 5).unwrap();
    let plain = run_dc_dml_with(&parties, &reducers, &anchor, 10, &q, &h, 13).unwrap();
    let ni = run_ni_dc_dml(&parties, &reducers, &anchor, 10, &q, &h, 13, &[31, 32]).unwrap();
    for (a, b) in plain.models.iter().zip(&ni.models) {
        let ta = a.coefficient_tests(0.05);
        let tb = b.coefficient_tests(0.05);
        for j in 0..3 {
            assert_eq!(ta[j].sign_class, SignClass::Positive);
            assert_eq!(tb[j].sign_class, SignClass::Positive);
        }
    }
}

#[test]
fn permutation_neutral_with_transported_folds() {
    use dcdml_core::protocol::{aggregate, analyst_fit, analyst_fit_with_folds, make_intermediate};
    let s = pca_setup(9);
    let plain_shares: Vec<_> = s
        .parties
        .iter()
        .zip(&s.reducers)
        .map(|(p, r)| make_intermediate(p, r, &s.anchor).unwrap())
        .collect();
    let sess = aggregate(&plain_shares, 10).unwrap();
    let base = analyst_fit(&sess, &OLS, &LOGIT, 3).unwrap();

    let perms: Vec<Vec<usize>> = s
        .parties
        .iter()
        .enumerate()
        .map(|(k, p)| {
            use rand::seq::SliceRandom;
            let mut v: Vec<usize> = (0..p.data.n()).collect();
            v.shuffle(&mut rng_from_seed(50 + k as u64));
            v
        })
        .collect();
    let ni_shares: Vec<_> = s
        .parties
        .iter()
        .zip(&s.reducers)
        .zip(&perms)
        .map(|((p, r), perm)| {
            make_ni_intermediate_with(p, r, &s.anchor, &DMatrix::identity(9, 9), perm).unwrap()
        })
        .collect();
    let ni_sess = aggregate(&ni_shares, 10).unwrap();
    let mut folds = Vec::new();
    let mut offset = 0;
    for (p, perm) in s.parties.iter().zip(&perms) {
        folds.extend(perm.iter().map(|&src| base.fold_of[offset + src]));
        offset += p.data.n();
    }
    let moved = analyst_fit_with_folds(&ni_sess, &OLS, &LOGIT, 3, &folds).unwrap();
    assert!((&moved.gamma_check - &base.gamma_check).amax() < 1e-10);
}

#[test]
fn variance_propagation_is_psd() {
    let s = pca_setup(10);
    let run = run_dc_dml_with(&s.parties, &s.reducers, &s.anchor, 10, &OLS, &LOGIT, 10).unwrap();
    let mut rng = rng_from_seed(1);
    for _ in 0..100 {
        let a: DMatrix<f64> = DMatrix::from_fn(10, 10, |_, _| StandardNormal.sample(&mut rng));
        let v = &a * a.transpose();
        for (k, red) in s.reducers.iter().enumerate() {
            let t = red.f_bar() * &run.session.g[k];
            let cov = &t * v.clone() * t.transpose();
            assert!(dcdml_core::dml::is_psd(&cov, 1e-10));
        }
    }
}

#[test]
fn anchor_alignment_within_reported_bound() {
    let s = pca_setup(11);
    let run = run_dc_dml_with(&s.parties, &s.reducers, &s.anchor, 10, &OLS, &LOGIT, 11).unwrap();
    let bound = 2.0 * run.session.svd_residual * (run.session.m_check as f64).sqrt();
    assert!(run.session.max_anchor_misalignment() <= bound + 1e-9);
}

#[test]
fn single_party_identity_matches_ca_through_basis_change() {
    let (parties, _) = gen_sim1(12, 150).unwrap();
    let one = vec![parties[0].clone()];
    let anchor = gen_anchor(&union_ranges(one.iter().map(|p| &p.data)).unwrap(), 40, 3).unwrap();
    let run = run_dc_dml_with(
        &one,
        &[DimReducer::identity(10)],
        &anchor,
        11,
        &OLS,
        &LOGIT,
        12,
    )
    .unwrap();
    let ca = fit_dml(&one[0].data, &OLS, &LOGIT, 12).unwrap();
    let lhs = &run.session.x_check * &run.analyst.gamma_check;
    let rhs = with_ones_column(&one[0].data.x) * &ca.beta_hat;
    assert!((lhs - rhs).amax() < 1e-8);
}
