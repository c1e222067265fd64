//! Non-readily-identifiable variant of the protocol.
//!
//! Each user mixes reduced coordinates with a random invertible `E_k` and
//! permutes the rows of `B`, `Z` and `Y` (never the anchor rows). The
//! analyst returns predictions on the anchor instead of coefficients, and
//! the user recovers coefficients by least squares against `[1, X_anc - mu]`.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::data::PartyData;
use crate::dimred::DimReducer;
use crate::error::{Error, Result};
use crate::linalg::{
    center, condition_number, pinv, select_entries, select_rows, symmetrize, with_ones_column,
    RANK_RTOL,
};
use crate::nuisance::{ClassifierSpec, RegressorSpec};
use crate::protocol::{
    aggregate, analyst_fit, make_intermediate, AnalystFit, AnchorDataset, CollabSession, DcDmlRun,
    IntermediateShare, MessageLog, UserCateModel,
};
use crate::rng::{derive_seed, rng_from_seed, Rng};

/// Mixing matrices are redrawn until their condition number is below this.
pub const MAX_MIXING_CONDITION: f64 = 1e6;

/// A share whose rows are permuted and whose columns are mixed. It has the
/// same fields and wire format as a plain share.
pub type NiShare = IntermediateShare;

/// Square standard normal matrix with bounded condition number.
pub fn random_mixing(dim: usize, rng: &mut Rng) -> DMatrix<f64> {
    loop {
        let e = DMatrix::from_fn(dim, dim, |_, _| StandardNormal.sample(rng));
        if condition_number(&e) < MAX_MIXING_CONDITION {
            return e;
        }
    }
}

pub const MIXING_STREAM: u64 = 0x4E49;

/// Seed of a user's mixing matrix and permutation under session seed `seed`.
pub fn mixing_seed(seed: u64, party_id: usize) -> u64 {
    derive_seed(derive_seed(seed, MIXING_STREAM), party_id as u64)
}

pub fn make_ni_intermediate(
    party: &PartyData,
    reducer: &DimReducer,
    anchor: &AnchorDataset,
    seed: u64,
) -> Result<NiShare> {
    let mut rng = rng_from_seed(seed);
    let e = random_mixing(reducer.m_tilde(), &mut rng);
    let mut perm: Vec<usize> = (0..party.data.n()).collect();
    perm.shuffle(&mut rng);
    make_ni_intermediate_with(party, reducer, anchor, &e, &perm)
}

/// Share construction with explicit mixing `e` and row order `perm`
/// (row `i` of the output is source row `perm[i]`).
pub fn make_ni_intermediate_with(
    party: &PartyData,
    reducer: &DimReducer,
    anchor: &AnchorDataset,
    e: &DMatrix<f64>,
    perm: &[usize],
) -> Result<NiShare> {
    let n = party.data.n();
    if e.shape() != (reducer.m_tilde(), reducer.m_tilde()) {
        return Err(Error::DimensionMismatch(format!(
            "mixing matrix must be {0}x{0}",
            reducer.m_tilde()
        )));
    }
    let mut seen = vec![false; n];
    if perm.len() != n
        || perm
            .iter()
            .any(|&i| i >= n || std::mem::replace(&mut seen[i], true))
    {
        return Err(Error::InvalidArgument(
            "row order is not a permutation".into(),
        ));
    }
    let mixed = DimReducer {
        f: &reducer.f * e,
        mu: reducer.mu.clone(),
        kind: reducer.kind,
    };
    let plain = make_intermediate(party, &mixed, anchor)?;
    Ok(NiShare {
        party_id: plain.party_id,
        b: select_rows(&plain.b, perm),
        b_anc: plain.b_anc,
        z: select_entries(&plain.z, perm),
        y: select_entries(&plain.y, perm),
    })
}

/// Anchor-level predictions returned to user `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct NiReturnPackage {
    pub party_id: usize,
    pub r_point_anc: DVector<f64>,
    pub r_var_anc: DMatrix<f64>,
}

pub fn make_ni_return(
    fit: &AnalystFit,
    session: &CollabSession,
    party_id: usize,
) -> Result<NiReturnPackage> {
    let xa = &session.x_check_anc[session.index_of(party_id)?];
    Ok(NiReturnPackage {
        party_id,
        r_point_anc: xa * &fit.gamma_check,
        r_var_anc: symmetrize(&(xa * &fit.cov_gamma_check * xa.transpose())),
    })
}

/// Left inverse of the centered anchor design `[1, X_anc - mu]`.
pub fn anchor_left_inverse(anchor: &AnchorDataset, mu: &DVector<f64>) -> Result<DMatrix<f64>> {
    if mu.len() != anchor.m() {
        return Err(Error::DimensionMismatch(format!(
            "mu has {} entries, anchor {} columns",
            mu.len(),
            anchor.m()
        )));
    }
    let design = with_ones_column(&center(&anchor.x_anc, mu));
    let (l, rank) = pinv(&design, RANK_RTOL);
    if rank < design.ncols() {
        return Err(Error::Singular {
            what: "anchor design".into(),
            condition: f64::INFINITY,
        });
    }
    Ok(l)
}

pub fn ni_user_finalize(
    anchor: &AnchorDataset,
    pkg: &NiReturnPackage,
    mu: &DVector<f64>,
) -> Result<UserCateModel> {
    let r = anchor.r();
    if pkg.r_point_anc.len() != r || pkg.r_var_anc.shape() != (r, r) {
        return Err(Error::DimensionMismatch(format!(
            "return package does not match anchor size {r}"
        )));
    }
    let l = anchor_left_inverse(anchor, mu)?;
    let gamma = &l * &pkg.r_point_anc;
    let cov_gamma = symmetrize(&(&l * &pkg.r_var_anc * l.transpose()));
    UserCateModel::from_gamma(pkg.party_id, gamma, cov_gamma, mu.clone())
}

/// All three stages of the variant. `mixing_seeds[k]` drives party `k`'s
/// mixing matrix and permutation.
#[allow(clippy::too_many_arguments)]
pub fn run_ni_dc_dml(
    parties: &[PartyData],
    reducers: &[DimReducer],
    anchor: &AnchorDataset,
    m_check: usize,
    q_spec: &RegressorSpec,
    h_spec: &ClassifierSpec,
    seed: u64,
    mixing_seeds: &[u64],
) -> Result<DcDmlRun> {
    if reducers.len() != parties.len() || mixing_seeds.len() != parties.len() {
        return Err(Error::InvalidArgument(
            "one reducer and one mixing seed per party required".into(),
        ));
    }
    let shares = parties
        .iter()
        .zip(reducers)
        .zip(mixing_seeds)
        .map(|((p, r), s)| make_ni_intermediate(p, r, anchor, *s))
        .collect::<Result<Vec<_>>>()?;
    run_ni_from_shares(
        &shares, parties, reducers, anchor, m_check, q_spec, h_spec, seed,
    )
}

/// Analyst and user stages of the variant from prepared shares.
#[allow(clippy::too_many_arguments)]
pub fn run_ni_from_shares(
    shares: &[NiShare],
    parties: &[PartyData],
    reducers: &[DimReducer],
    anchor: &AnchorDataset,
    m_check: usize,
    q_spec: &RegressorSpec,
    h_spec: &ClassifierSpec,
    seed: u64,
) -> Result<DcDmlRun> {
    let mut log = MessageLog::default();
    let received = shares
        .iter()
        .map(|s| log.send_share(s))
        .collect::<Result<Vec<_>>>()?;
    let session = aggregate(&received, m_check)?;
    let analyst = analyst_fit(&session, q_spec, h_spec, seed)?;
    let models = parties
        .iter()
        .zip(reducers)
        .map(|(p, r)| {
            let pkg = log.send_ni_return(&make_ni_return(&analyst, &session, p.party_id)?)?;
            ni_user_finalize(anchor, &pkg, &r.mu)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DcDmlRun {
        models,
        analyst,
        session,
        messages: log.total(),
    })
}
