//! The data collaboration protocol.
//!
//! 1. Each user maps covariates and anchor rows through a private reducer
//!    and shares `B = [1, X_tilde]`, `B_anc = [1, X_tilde_anc]`, `Z`, `Y`.
//! 2. The analyst aligns the shares through the SVD of the concatenated
//!    anchor representations, fits DML on the collaborative covariates and
//!    returns `G_k gamma` and `G_k Var(gamma) G_k^T` to each user.
//! 3. Each user maps the return back with `blockdiag(1, F_k)`.

mod anchor;
pub mod messages;

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub use anchor::{gen_anchor, local_ranges, union_ranges, AnchorDataset};
pub use messages::MessageLog;

use crate::data::{Dataset, PartyData};
use crate::dimred::{combine, fit_bootstrap_dr, fit_pca, DimReducer};
use crate::dml::{fit_on_design, predict_cate, test_coefficients, DmlFit, TestResult};
use crate::error::{Error, Result};
use crate::linalg::{pinv, symmetrize, vcat, vcat_vec, with_ones_column, RANK_RTOL};
use crate::nuisance::{cross_fit_with_folds, stratified_folds, ClassifierSpec, RegressorSpec};
use crate::rng::derive_seed;

/// What user `k` sends to the analyst.
#[derive(Debug, Clone, PartialEq)]
pub struct IntermediateShare {
    pub party_id: usize,
    pub b: DMatrix<f64>,
    pub b_anc: DMatrix<f64>,
    pub z: DVector<f64>,
    pub y: DVector<f64>,
}

impl IntermediateShare {
    pub fn n(&self) -> usize {
        self.b.nrows()
    }

    pub fn m_tilde(&self) -> usize {
        self.b.ncols() - 1
    }

    pub fn r(&self) -> usize {
        self.b_anc.nrows()
    }
}

pub fn make_intermediate(
    party: &PartyData,
    reducer: &DimReducer,
    anchor: &AnchorDataset,
) -> Result<IntermediateShare> {
    if reducer.m() != party.data.m() || anchor.m() != party.data.m() {
        return Err(Error::DimensionMismatch(format!(
            "party has {} covariates, reducer {}, anchor {}",
            party.data.m(),
            reducer.m(),
            anchor.m()
        )));
    }
    Ok(IntermediateShare {
        party_id: party.party_id,
        b: with_ones_column(&reducer.apply(&party.data.x)?),
        b_anc: with_ones_column(&reducer.apply(&anchor.x_anc)?),
        z: party.data.z.clone(),
        y: party.data.y.clone(),
    })
}

/// Analyst-side state after aligning all shares.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollabSession {
    pub party_ids: Vec<usize>,
    /// `(offset, n_k)` of each party inside the stacked rows.
    pub party_rows: Vec<(usize, usize)>,
    pub g: Vec<DMatrix<f64>>,
    pub x_check: DMatrix<f64>,
    /// `B_anc,k G_k` per party.
    pub x_check_anc: Vec<DMatrix<f64>>,
    pub z: DVector<f64>,
    pub y: DVector<f64>,
    pub m_check: usize,
    /// First discarded singular value (0 when the concatenation has rank <= m_check).
    pub svd_residual: f64,
}

impl CollabSession {
    pub fn index_of(&self, party_id: usize) -> Result<usize> {
        self.party_ids
            .iter()
            .position(|p| *p == party_id)
            .ok_or_else(|| Error::Protocol(format!("unknown party {party_id}")))
    }

    /// Largest pairwise `|B_anc,k G_k - B_anc,k' G_k'|_F`.
    pub fn max_anchor_misalignment(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for a in 0..self.x_check_anc.len() {
            for b in a + 1..self.x_check_anc.len() {
                worst = worst.max((&self.x_check_anc[a] - &self.x_check_anc[b]).norm());
            }
        }
        worst
    }

    pub fn n(&self) -> usize {
        self.x_check.nrows()
    }
}

pub fn aggregate(shares: &[IntermediateShare], m_check: usize) -> Result<CollabSession> {
    let first = shares
        .first()
        .ok_or_else(|| Error::Protocol("no shares to aggregate".into()))?;
    let r = first.r();
    if let Some(s) = shares.iter().find(|s| s.r() != r) {
        return Err(Error::Protocol(format!(
            "party {} has r = {} but expected {r}",
            s.party_id,
            s.r()
        )));
    }
    let mut seen = HashSet::new();
    if let Some(s) = shares.iter().find(|s| !seen.insert(s.party_id)) {
        return Err(Error::Protocol(format!(
            "duplicate share from party {}",
            s.party_id
        )));
    }
    for s in shares {
        if s.z.len() != s.n() || s.y.len() != s.n() {
            return Err(Error::Protocol(format!(
                "party {}: B, Z, Y lengths differ",
                s.party_id
            )));
        }
    }
    let total_cols: usize = shares.iter().map(|s| s.b_anc.ncols()).sum();
    if m_check == 0 || m_check > total_cols || m_check > r {
        return Err(Error::InvalidArgument(format!(
            "m_check = {m_check} must lie in 1..={}",
            total_cols.min(r)
        )));
    }

    let mut concat = DMatrix::zeros(r, total_cols);
    let mut col = 0;
    for s in shares {
        concat
            .view_mut((0, col), (r, s.b_anc.ncols()))
            .copy_from(&s.b_anc);
        col += s.b_anc.ncols();
    }
    let svd = concat.svd(true, false);
    let u = svd.u.as_ref().expect("u requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let sv: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    let cutoff = RANK_RTOL * sv[0];
    let rank = sv.iter().filter(|s| **s > cutoff).count();
    let mut m_check = m_check;
    if m_check > rank {
        log::warn!("m_check = {m_check} exceeds the anchor rank {rank}; truncating");
        m_check = rank;
    }
    let u1 = DMatrix::from_columns(
        &order[..m_check]
            .iter()
            .map(|&i| u.column(i))
            .collect::<Vec<_>>(),
    );
    let svd_residual = sv
        .get(m_check)
        .copied()
        .filter(|s| *s > cutoff)
        .unwrap_or(0.0);

    let mut g = Vec::with_capacity(shares.len());
    let mut x_check_anc = Vec::with_capacity(shares.len());
    let mut blocks = Vec::with_capacity(shares.len());
    let mut party_rows = Vec::with_capacity(shares.len());
    let mut offset = 0;
    for s in shares {
        let (p, _) = pinv(&s.b_anc, RANK_RTOL);
        let gk = p * &u1;
        x_check_anc.push(&s.b_anc * &gk);
        blocks.push(&s.b * &gk);
        party_rows.push((offset, s.n()));
        offset += s.n();
        g.push(gk);
    }
    let block_refs: Vec<&DMatrix<f64>> = blocks.iter().collect();
    let z_refs: Vec<&DVector<f64>> = shares.iter().map(|s| &s.z).collect();
    let y_refs: Vec<&DVector<f64>> = shares.iter().map(|s| &s.y).collect();
    Ok(CollabSession {
        party_ids: shares.iter().map(|s| s.party_id).collect(),
        party_rows,
        g,
        x_check: vcat(&block_refs),
        x_check_anc,
        z: vcat_vec(&z_refs),
        y: vcat_vec(&y_refs),
        m_check,
        svd_residual,
    })
}

/// The analyst's DML fit in collaborative coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalystFit {
    pub gamma_check: DVector<f64>,
    pub cov_gamma_check: DMatrix<f64>,
    pub q_spec: RegressorSpec,
    pub h_spec: ClassifierSpec,
    pub seed: u64,
    pub fold_of: Vec<usize>,
    pub rank_deficient: bool,
}

impl AnalystFit {
    fn from_fit(
        fit: DmlFit,
        q_spec: &RegressorSpec,
        h_spec: &ClassifierSpec,
        seed: u64,
        fold_of: Vec<usize>,
    ) -> Self {
        Self {
            gamma_check: fit.beta_hat,
            cov_gamma_check: fit.cov_beta,
            q_spec: *q_spec,
            h_spec: *h_spec,
            seed,
            fold_of,
            rank_deficient: fit.rank_deficient,
        }
    }
}

/// DML on `(X_check, Z, Y)` with `theta(x_check) = x_check^T gamma`. Fold
/// assignment matches [`crate::dml::fit_dml`] on data with the same `Z` and seed.
pub fn analyst_fit(
    session: &CollabSession,
    q_spec: &RegressorSpec,
    h_spec: &ClassifierSpec,
    seed: u64,
) -> Result<AnalystFit> {
    let fold_of = stratified_folds(&session.z, crate::dml::N_FOLDS, derive_seed(seed, 0))?;
    analyst_fit_with_folds(session, q_spec, h_spec, seed, &fold_of)
}

pub fn analyst_fit_with_folds(
    session: &CollabSession,
    q_spec: &RegressorSpec,
    h_spec: &ClassifierSpec,
    seed: u64,
    fold_of: &[usize],
) -> Result<AnalystFit> {
    Dataset::unnamed(
        session.x_check.clone(),
        session.z.clone(),
        session.y.clone(),
    )?
    .require_both_classes()?;
    let cf = cross_fit_with_folds(
        &session.x_check,
        &session.z,
        &session.y,
        q_spec,
        h_spec,
        fold_of,
        seed,
    )?;
    let fit = fit_on_design(&session.x_check, cf)?;
    Ok(AnalystFit::from_fit(
        fit,
        q_spec,
        h_spec,
        seed,
        fold_of.to_vec(),
    ))
}

/// What the analyst returns to user `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnPackage {
    pub party_id: usize,
    pub r_point: DVector<f64>,
    pub r_var: DMatrix<f64>,
}

pub fn make_return(
    fit: &AnalystFit,
    session: &CollabSession,
    party_id: usize,
) -> Result<ReturnPackage> {
    let g = &session.g[session.index_of(party_id)?];
    Ok(ReturnPackage {
        party_id,
        r_point: g * &fit.gamma_check,
        r_var: symmetrize(&(g * &fit.cov_gamma_check * g.transpose())),
    })
}

/// User-side linear CATE model in original covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserCateModel {
    pub party_id: usize,
    /// `[alpha, gamma_1 .. gamma_m]`: intercept and slopes on raw covariates.
    pub beta: DVector<f64>,
    /// Coefficients on `[1, x - mu]`.
    pub gamma: DVector<f64>,
    pub cov_gamma: DMatrix<f64>,
    pub var_alpha: f64,
    pub mu: DVector<f64>,
}

impl UserCateModel {
    pub fn from_gamma(
        party_id: usize,
        gamma: DVector<f64>,
        cov_gamma: DMatrix<f64>,
        mu: DVector<f64>,
    ) -> Result<Self> {
        let m = mu.len();
        if gamma.len() != m + 1 || cov_gamma.shape() != (m + 1, m + 1) {
            return Err(Error::DimensionMismatch(format!(
                "gamma has {} entries for {m} covariates",
                gamma.len()
            )));
        }
        let c = shift_row(&mu);
        let alpha = c.dot(&gamma);
        let var_alpha = (c.transpose() * &cov_gamma * &c)[(0, 0)].max(0.0);
        let mut beta = gamma.clone();
        beta[0] = alpha;
        Ok(Self {
            party_id,
            beta,
            gamma,
            cov_gamma,
            var_alpha,
            mu,
        })
    }

    pub fn m(&self) -> usize {
        self.mu.len()
    }

    /// Covariance of `beta`: `T Var(gamma) T^T` with `T = [[1, -mu^T], [0, I]]`.
    pub fn cov_beta(&self) -> DMatrix<f64> {
        let m = self.m();
        let mut t = DMatrix::identity(m + 1, m + 1);
        for j in 0..m {
            t[(0, j + 1)] = -self.mu[j];
        }
        symmetrize(&(&t * &self.cov_gamma * t.transpose()))
    }

    pub fn predict_cate(&self, x: &[f64]) -> (f64, f64) {
        predict_cate(&self.gamma, &self.cov_gamma, x, Some(&self.mu))
    }

    pub fn predict_all(&self, x: &DMatrix<f64>) -> Vec<(f64, f64)> {
        x.row_iter()
            .map(|r| self.predict_cate(&r.iter().copied().collect::<Vec<_>>()))
            .collect()
    }

    pub fn coefficient_tests(&self, alpha: f64) -> Vec<TestResult> {
        test_coefficients(&self.beta, &self.cov_beta(), alpha)
    }
}

/// `[1, -mu^T]^T`.
fn shift_row(mu: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(mu.len() + 1, |i, _| if i == 0 { 1.0 } else { -mu[i - 1] })
}

pub fn user_finalize(reducer: &DimReducer, pkg: &ReturnPackage) -> Result<UserCateModel> {
    let d = reducer.m_tilde() + 1;
    if pkg.r_point.len() != d || pkg.r_var.shape() != (d, d) {
        return Err(Error::DimensionMismatch(format!(
            "return package has {} entries but reducer expects {d}",
            pkg.r_point.len()
        )));
    }
    let f_bar = reducer.f_bar();
    let gamma = &f_bar * &pkg.r_point;
    let cov_gamma = symmetrize(&(&f_bar * &pkg.r_var * f_bar.transpose()));
    UserCateModel::from_gamma(pkg.party_id, gamma, cov_gamma, reducer.mu.clone())
}

/// How each user builds a private reducer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum ReducerSpec {
    Identity,
    Pca {
        dim: usize,
    },
    Bootstrap {
        dim: usize,
        p: f64,
    },
    /// Bootstrap columns followed by PCA columns, `dim` in total.
    PcaPlusBootstrap {
        dim: usize,
        bs_dim: usize,
        p: f64,
    },
}

pub const DEFAULT_SUBSAMPLE: f64 = 0.5;

impl ReducerSpec {
    pub fn fit(
        &self,
        data: &Dataset,
        q_spec: &RegressorSpec,
        h_spec: &ClassifierSpec,
        seed: u64,
    ) -> Result<DimReducer> {
        match *self {
            Self::Identity => Ok(DimReducer::identity(data.m())),
            Self::Pca { dim } => fit_pca(&data.x, dim),
            Self::Bootstrap { dim, p } => fit_bootstrap_dr(data, dim, p, q_spec, h_spec, seed),
            Self::PcaPlusBootstrap { dim, bs_dim, p } => {
                if bs_dim >= dim {
                    return Err(Error::InvalidArgument(format!(
                        "bootstrap dimension {bs_dim} must be below the total dimension {dim}"
                    )));
                }
                let bs = fit_bootstrap_dr(data, bs_dim, p, q_spec, h_spec, seed)?;
                let pca = fit_pca(&data.x, dim - bs_dim)?;
                combine(&[bs, pca])
            }
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Self::Identity => "identity",
            Self::Pca { .. } => "PCA",
            Self::Bootstrap { .. } => "B",
            Self::PcaPlusBootstrap { .. } => "PCA+B",
        }
    }
}

/// Anchor construction for an in-process run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSpec {
    /// Defaults to the union of the parties' covariate ranges.
    pub ranges: Option<Vec<(f64, f64)>>,
    /// Defaults to the total number of subjects.
    pub r: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub reducer: ReducerSpec,
    pub anchor: AnchorSpec,
    /// Defaults to `m`.
    pub m_check: Option<usize>,
    pub q_spec: RegressorSpec,
    pub h_spec: ClassifierSpec,
    /// Analyst DML seed; reducer and anchor seeds derive from it.
    pub seed: u64,
}

pub const ANCHOR_STREAM: u64 = 0xA7C4;
pub const REDUCER_STREAM: u64 = 0x5EED;

/// Seed of a user's reducer fit under session seed `seed`.
pub fn reducer_seed(seed: u64, party_id: usize) -> u64 {
    derive_seed(derive_seed(seed, REDUCER_STREAM), party_id as u64)
}

/// Seed of the shared anchor under session seed `seed`.
pub fn anchor_seed(seed: u64) -> u64 {
    derive_seed(seed, ANCHOR_STREAM)
}

impl ProtocolConfig {
    pub fn reducer_seed(&self, party_id: usize) -> u64 {
        reducer_seed(self.seed, party_id)
    }

    pub fn anchor_seed(&self) -> u64 {
        anchor_seed(self.seed)
    }
}

/// Everything produced by one in-process protocol run.
#[derive(Debug, Clone)]
pub struct DcDmlRun {
    pub models: Vec<UserCateModel>,
    pub analyst: AnalystFit,
    pub session: CollabSession,
    pub messages: usize,
}

pub fn build_anchor(parties: &[PartyData], spec: &AnchorSpec, seed: u64) -> Result<AnchorDataset> {
    let ranges = match &spec.ranges {
        Some(r) => r.clone(),
        None => union_ranges(parties.iter().map(|p| &p.data))?,
    };
    let r = spec
        .r
        .unwrap_or_else(|| parties.iter().map(|p| p.data.n()).sum());
    gen_anchor(&ranges, r, seed)
}

/// Run all three stages, fitting each user's reducer from `config`.
pub fn run_dc_dml(parties: &[PartyData], config: &ProtocolConfig) -> Result<DcDmlRun> {
    if parties.is_empty() {
        return Err(Error::InvalidArgument("no parties".into()));
    }
    let reducers = parties
        .iter()
        .map(|p| {
            config.reducer.fit(
                &p.data,
                &config.q_spec,
                &config.h_spec,
                config.reducer_seed(p.party_id),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let anchor = build_anchor(parties, &config.anchor, config.anchor_seed())?;
    let m_check = config.m_check.unwrap_or(parties[0].data.m());
    run_dc_dml_with(
        parties,
        &reducers,
        &anchor,
        m_check,
        &config.q_spec,
        &config.h_spec,
        config.seed,
    )
}

/// Run all three stages with given reducers and anchor.
pub fn run_dc_dml_with(
    parties: &[PartyData],
    reducers: &[DimReducer],
    anchor: &AnchorDataset,
    m_check: usize,
    q_spec: &RegressorSpec,
    h_spec: &ClassifierSpec,
    seed: u64,
) -> Result<DcDmlRun> {
    if reducers.len() != parties.len() {
        return Err(Error::InvalidArgument(
            "one reducer per party required".into(),
        ));
    }
    let mut log = MessageLog::default();
    let shares = parties
        .iter()
        .zip(reducers)
        .map(|(p, r)| log.send_share(&make_intermediate(p, r, anchor)?))
        .collect::<Result<Vec<_>>>()?;
    let session = aggregate(&shares, m_check)?;
    let analyst = analyst_fit(&session, q_spec, h_spec, seed)?;
    let models = parties
        .iter()
        .zip(reducers)
        .map(|(p, r)| {
            let pkg = log.send_return(&make_return(&analyst, &session, p.party_id)?)?;
            user_finalize(r, &pkg)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DcDmlRun {
        models,
        analyst,
        session,
        messages: log.total(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::center;
    use crate::rng::rng_from_seed;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn party(id: usize, n: usize, m: usize, seed: u64) -> PartyData {
        let mut rng = rng_from_seed(seed);
        let x = DMatrix::from_fn(n, m, |_, _| StandardNormal.sample(&mut rng));
        let z = DVector::from_fn(n, |i, _| (i % 3 == 0) as u8 as f64);
        let y = DVector::from_fn(n, |i, _| x[(i, 0)] * z[i] + rng.random_range(-0.1..0.1));
        PartyData {
            party_id: id,
            data: Dataset::unnamed(x, z, y).unwrap(),
        }
    }

    fn anchor_for(m: usize, r: usize) -> AnchorDataset {
        gen_anchor(&vec![(-3.0, 3.0); m], r, 77).unwrap()
    }

    #[test]
    fn identity_share_is_raw_design() {
        let p = party(1, 20, 3, 1);
        let s = make_intermediate(&p, &DimReducer::identity(3), &anchor_for(3, 10)).unwrap();
        assert_eq!(s.b, with_ones_column(&p.data.x));
        assert_eq!(s.b_anc.nrows(), 10);
        assert!(s.b_anc.column(0).iter().all(|v| *v == 1.0));
        assert_eq!(
            (s.z.clone(), s.y.clone()),
            (p.data.z.clone(), p.data.y.clone())
        );
    }

    #[test]
    fn share_dimension_mismatch() {
        let p = party(1, 20, 3, 1);
        assert!(make_intermediate(&p, &DimReducer::identity(4), &anchor_for(3, 10)).is_err());
    }

    #[test]
    fn single_party_identity_spans_raw_design() {
        let p = party(1, 30, 3, 2);
        let s = make_intermediate(&p, &DimReducer::identity(3), &anchor_for(3, 12)).unwrap();
        let sess = aggregate(std::slice::from_ref(&s), 4).unwrap();
        // projection of [1, X] onto span(X_check) is exact
        let (pinv_xc, rank) = pinv(&sess.x_check, RANK_RTOL);
        assert_eq!(rank, 4);
        let proj = &sess.x_check * (pinv_xc * &s.b);
        assert!((proj - &s.b).amax() < 1e-8);
        assert_eq!(sess.svd_residual, 0.0);
    }

    #[test]
    fn identical_reducers_align_exactly() {
        let a = party(1, 20, 4, 3);
        let b = party(2, 25, 4, 4);
        let red = fit_pca(&a.data.x, 3).unwrap();
        let anc = anchor_for(4, 30);
        let shares = vec![
            make_intermediate(&a, &red, &anc).unwrap(),
            make_intermediate(&b, &red, &anc).unwrap(),
        ];
        let sess = aggregate(&shares, 4).unwrap();
        assert!(sess.max_anchor_misalignment() < 1e-8);
        assert_eq!(sess.party_rows, vec![(0, 20), (20, 25)]);
        assert_eq!(sess.x_check.shape(), (45, 4));
    }

    #[test]
    fn aggregate_validates_inputs() {
        let a = party(1, 20, 3, 5);
        let s1 = make_intermediate(&a, &DimReducer::identity(3), &anchor_for(3, 10)).unwrap();
        let mut s2 = make_intermediate(&a, &DimReducer::identity(3), &anchor_for(3, 11)).unwrap();
        s2.party_id = 2;
        assert!(matches!(
            aggregate(&[s1.clone(), s2], 3),
            Err(Error::Protocol(_))
        ));
        assert!(aggregate(&[s1.clone(), s1.clone()], 3).is_err());
        assert!(aggregate(std::slice::from_ref(&s1), 0).is_err());
        assert!(aggregate(std::slice::from_ref(&s1), 5).is_err());
    }

    #[test]
    fn aggregate_truncates_to_rank() {
        let a = party(1, 20, 3, 6);
        let b = party(2, 20, 3, 7);
        let red = DimReducer::identity(3);
        let anc = anchor_for(3, 12);
        let shares = vec![
            make_intermediate(&a, &red, &anc).unwrap(),
            make_intermediate(&b, &red, &anc).unwrap(),
        ];
        let sess = aggregate(&shares, 6).unwrap();
        assert_eq!(sess.m_check, 4);
    }

    #[test]
    fn return_packages_propagate() {
        let a = party(1, 20, 3, 8);
        let s = make_intermediate(&a, &fit_pca(&a.data.x, 2).unwrap(), &anchor_for(3, 10)).unwrap();
        let sess = aggregate(std::slice::from_ref(&s), 3).unwrap();
        let mut fit = AnalystFit {
            gamma_check: DVector::zeros(3),
            cov_gamma_check: DMatrix::identity(3, 3),
            q_spec: RegressorSpec::Ols,
            h_spec: ClassifierSpec::Logistic { lambda: 0.0 },
            seed: 0,
            fold_of: vec![],
            rank_deficient: false,
        };
        let pkg = make_return(&fit, &sess, 1).unwrap();
        assert_eq!(pkg.r_point, DVector::zeros(3));
        assert!((&pkg.r_var - &sess.g[0] * sess.g[0].transpose()).amax() < 1e-12);
        fit.cov_gamma_check =
            DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.1, 0.3, 1.0, -0.2, 0.1, -0.2, 0.5]);
        let pkg = make_return(&fit, &sess, 1).unwrap();
        assert!((&pkg.r_var - pkg.r_var.transpose()).amax() < 1e-12);
        assert!(make_return(&fit, &sess, 9).is_err());
    }

    #[test]
    fn finalize_at_zero_shift() {
        let red = DimReducer::identity(2);
        let pkg = ReturnPackage {
            party_id: 1,
            r_point: DVector::from_vec(vec![0.5, 1.0, -1.0]),
            r_var: DMatrix::from_row_slice(3, 3, &[0.4, 0.1, 0.0, 0.1, 0.3, 0.0, 0.0, 0.0, 0.2]),
        };
        let m = user_finalize(&red, &pkg).unwrap();
        assert_eq!(m.beta, pkg.r_point);
        assert_eq!(m.var_alpha, 0.4);
        let zero = ReturnPackage {
            r_var: DMatrix::zeros(3, 3),
            ..pkg.clone()
        };
        let mz = user_finalize(&red, &zero).unwrap();
        assert_eq!(mz.var_alpha, 0.0);
        assert!(mz.coefficient_tests(0.05).iter().all(|t| t.degenerate));
        let bad = ReturnPackage {
            r_point: DVector::zeros(2),
            ..pkg
        };
        assert!(user_finalize(&red, &bad).is_err());
    }

    #[test]
    fn alpha_identity_with_shift() {
        let mu = DVector::from_vec(vec![1.0, -2.0]);
        let gamma = DVector::from_vec(vec![3.0, 0.5, 2.0]);
        let cov = DMatrix::from_row_slice(3, 3, &[1.0, 0.2, 0.1, 0.2, 0.5, 0.0, 0.1, 0.0, 0.3]);
        let m = UserCateModel::from_gamma(1, gamma.clone(), cov.clone(), mu.clone()).unwrap();
        assert_eq!(m.beta[0], 3.0 - 0.5 + 4.0);
        assert!((m.cov_beta()[(0, 0)] - m.var_alpha).abs() < 1e-12);
        let x = [0.3, 0.7];
        let (tau, _) = m.predict_cate(&x);
        assert!((tau - (m.beta[0] + m.beta[1] * 0.3 + m.beta[2] * 0.7)).abs() < 1e-12);
        let xc = center(&DMatrix::from_row_slice(1, 2, &x), &mu);
        assert!((tau - (gamma[0] + gamma[1] * xc[(0, 0)] + gamma[2] * xc[(0, 1)])).abs() < 1e-12);
    }

    #[test]
    fn full_run_counts_messages() {
        let parties = vec![party(1, 60, 3, 10), party(2, 60, 3, 11)];
        let config = ProtocolConfig {
            reducer: ReducerSpec::Pca { dim: 2 },
            anchor: AnchorSpec {
                ranges: None,
                r: None,
            },
            m_check: None,
            q_spec: RegressorSpec::Ols,
            h_spec: ClassifierSpec::Logistic { lambda: 0.0 },
            seed: 4,
        };
        let run = run_dc_dml(&parties, &config).unwrap();
        assert_eq!(run.messages, 4);
        assert_eq!(run.models.len(), 2);
        assert!(run.models.iter().all(|m| m.beta.len() == 4));
        assert_eq!(run.analyst.gamma_check.len(), 3);
    }
}
