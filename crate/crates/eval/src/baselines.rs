use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use dcdml_core::data::{pool, Dataset, PartyData};
use dcdml_core::dml::{fit_dml, DmlFit};
use dcdml_core::linalg::numerical_rank;
use dcdml_core::nuisance::{ClassifierSpec, RegressorSpec};
use dcdml_core::{Error, Result};

/// DML on one party's own rows.
pub fn fit_ia_dml(
    party: &PartyData,
    q_spec: &RegressorSpec,
    h_spec: &ClassifierSpec,
    seed: u64,
) -> Result<DmlFit> {
    let (n, m) = (party.data.n(), party.data.m());
    if n < 10 * (m + 1) {
        log::warn!(
            "party {}: {n} rows for {m} covariates; estimates will be unstable",
            party.party_id
        );
    }
    fit_dml(&party.data, q_spec, h_spec, seed)
}

/// DML on the pooled raw rows of all parties.
pub fn fit_ca_dml(
    parties: &[PartyData],
    q_spec: &RegressorSpec,
    h_spec: &ClassifierSpec,
    seed: u64,
) -> Result<DmlFit> {
    fit_dml(&pool(parties)?, q_spec, h_spec, seed)
}

/// Row `[1, z, z x_1, .., z x_m]` of the interaction regression.
pub fn sr_design(data: &Dataset) -> DMatrix<f64> {
    let (n, m) = (data.n(), data.m());
    DMatrix::from_fn(n, m + 2, |i, j| match j {
        0 => 1.0,
        1 => data.z[i],
        _ => data.z[i] * data.x[(i, j - 2)],
    })
}

/// Per-party sufficient statistics of the interaction regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SufficientStats {
    pub gram: DMatrix<f64>,
    pub moment: DVector<f64>,
    pub yy: f64,
    pub n: usize,
}

impl SufficientStats {
    pub fn from_party(data: &Dataset) -> Self {
        let d = sr_design(data);
        Self {
            gram: d.transpose() * &d,
            moment: d.transpose() * &data.y,
            yy: data.y.norm_squared(),
            n: data.n(),
        }
    }
}

/// Interaction OLS `y = c + z [1, x]^T beta + e`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SrFit {
    /// `[c, beta_0, .., beta_m]`.
    pub coef: DVector<f64>,
    /// Classical `sigma^2 (D^T D)^-1`.
    pub cov: DMatrix<f64>,
    pub sigma2: f64,
    pub n: usize,
}

impl SrFit {
    /// Coefficients of the CATE part `[beta_0, .., beta_m]`.
    pub fn cate_beta(&self) -> DVector<f64> {
        self.coef.rows(1, self.coef.len() - 1).into_owned()
    }

    pub fn cate_cov(&self) -> DMatrix<f64> {
        let p = self.coef.len() - 1;
        self.cov.view((1, 1), (p, p)).into_owned()
    }
}

/// Combine per-party statistics; no rows leave a party.
pub fn fit_sr_from_stats(stats: &[SufficientStats]) -> Result<SrFit> {
    let first = stats
        .first()
        .ok_or_else(|| Error::InvalidArgument("no parties".into()))?;
    let p = first.gram.nrows();
    let mut gram = DMatrix::zeros(p, p);
    let mut moment = DVector::zeros(p);
    let (mut yy, mut n) = (0.0, 0);
    for s in stats {
        if s.gram.nrows() != p {
            return Err(Error::DimensionMismatch("parties disagree on m".into()));
        }
        gram += &s.gram;
        moment += &s.moment;
        yy += s.yy;
        n += s.n;
    }
    if numerical_rank(&gram, 1e-12) < p {
        return Err(Error::Singular {
            what: "secure regression Gram matrix".into(),
            condition: f64::INFINITY,
        });
    }
    let chol = gram.clone().cholesky().ok_or_else(|| Error::Singular {
        what: "secure regression Gram matrix".into(),
        condition: f64::INFINITY,
    })?;
    let coef = chol.solve(&moment);
    let rss = (yy - 2.0 * coef.dot(&moment) + (coef.transpose() * &gram * &coef)[(0, 0)]).max(0.0);
    if n <= p {
        return Err(Error::InvalidData(format!(
            "{n} rows for {p} regression coefficients"
        )));
    }
    let sigma2 = rss / (n - p) as f64;
    Ok(SrFit {
        cov: chol.inverse() * sigma2,
        coef,
        sigma2,
        n,
    })
}

pub fn fit_sr(parties: &[PartyData]) -> Result<SrFit> {
    let stats: Vec<SufficientStats> = parties
        .iter()
        .map(|p| SufficientStats::from_party(&p.data))
        .collect();
    fit_sr_from_stats(&stats)
}
