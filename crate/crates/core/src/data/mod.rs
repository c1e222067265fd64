//! Datasets, horizontal partitions and CSV ingestion.

mod csvio;
pub mod sim;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::linalg::{select_entries, select_rows, vcat, vcat_vec};
use crate::rng::rng_from_seed;

pub use csvio::{load_csv, write_csv, CsvSchema};

/// Covariates `x` (n x m), binary treatment `z` and outcome `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub z: DVector<f64>,
    pub y: DVector<f64>,
    pub covariate_names: Vec<String>,
}

impl Dataset {
    pub fn new(
        x: DMatrix<f64>,
        z: DVector<f64>,
        y: DVector<f64>,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        let n = x.nrows();
        if n == 0 {
            return Err(Error::InvalidData("dataset has no rows".into()));
        }
        if z.len() != n || y.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "x has {n} rows but z has {} and y has {}",
                z.len(),
                y.len()
            )));
        }
        if covariate_names.len() != x.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "{} covariate names for {} columns",
                covariate_names.len(),
                x.ncols()
            )));
        }
        if let Some((row, value)) = z.iter().enumerate().find(|(_, v)| **v != 0.0 && **v != 1.0) {
            return Err(Error::NonBinaryTreatment { row, value: *value });
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite entry".into()));
        }
        Ok(Self {
            x,
            z,
            y,
            covariate_names,
        })
    }

    /// Dataset with generated covariate names `x1..xm`.
    pub fn unnamed(x: DMatrix<f64>, z: DVector<f64>, y: DVector<f64>) -> Result<Self> {
        let names = default_names(x.ncols());
        Self::new(x, z, y, names)
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn m(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_treated(&self) -> usize {
        self.z.iter().filter(|v| **v == 1.0).count()
    }

    pub fn require_both_classes(&self) -> Result<()> {
        let treated = self.n_treated();
        if treated == 0 || treated == self.n() {
            return Err(Error::SingleClass(format!(
                "{} of {} rows treated; both treatment values are required",
                treated,
                self.n()
            )));
        }
        Ok(())
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            x: select_rows(&self.x, rows),
            z: select_entries(&self.z, rows),
            y: select_entries(&self.y, rows),
            covariate_names: self.covariate_names.clone(),
        }
    }

    pub fn with_outcome(&self, y: DVector<f64>) -> Result<Dataset> {
        Dataset::new(
            self.x.clone(),
            self.z.clone(),
            y,
            self.covariate_names.clone(),
        )
    }

    pub fn treated_rows(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.z[i] == 1.0).collect()
    }

    pub fn control_rows(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.z[i] == 0.0).collect()
    }
}

pub fn default_names(m: usize) -> Vec<String> {
    (1..=m).map(|j| format!("x{j}")).collect()
}

/// One party's share of a horizontal partition.
#[derive(Debug, Clone, PartialEq)]
pub struct PartyData {
    pub party_id: usize,
    pub data: Dataset,
}

/// Ground truth attached to simulated data, in stacked party order.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleTruth {
    pub true_cate: DVector<f64>,
    /// `[constant, beta_1 .. beta_m]` for linear CATE designs.
    pub true_beta: DVector<f64>,
    pub true_ate: f64,
}

impl OracleTruth {
    pub fn from_linear(x: &DMatrix<f64>, beta: DVector<f64>) -> Self {
        let cate = crate::linalg::with_ones_column(x) * &beta;
        let ate = cate.mean();
        Self {
            true_cate: cate,
            true_beta: beta,
            true_ate: ate,
        }
    }

    /// Restrict per-subject truth to a row range of the stacked order.
    pub fn cate_slice(&self, start: usize, len: usize) -> DVector<f64> {
        self.true_cate.rows(start, len).into_owned()
    }
}

/// Stack parties in the given order.
pub fn pool(parties: &[PartyData]) -> Result<Dataset> {
    let first = parties
        .first()
        .ok_or_else(|| Error::InvalidArgument("no parties to pool".into()))?;
    let m = first.data.m();
    if parties.iter().any(|p| p.data.m() != m) {
        return Err(Error::DimensionMismatch("parties disagree on m".into()));
    }
    let xs: Vec<&DMatrix<f64>> = parties.iter().map(|p| &p.data.x).collect();
    let zs: Vec<&DVector<f64>> = parties.iter().map(|p| &p.data.z).collect();
    let ys: Vec<&DVector<f64>> = parties.iter().map(|p| &p.data.y).collect();
    Dataset::new(
        vcat(&xs),
        vcat_vec(&zs),
        vcat_vec(&ys),
        first.data.covariate_names.clone(),
    )
}

/// Row offsets of each party in the stacked order.
pub fn party_offsets(parties: &[PartyData]) -> Vec<(usize, usize)> {
    let mut start = 0;
    parties
        .iter()
        .map(|p| {
            let r = (start, p.data.n());
            start += p.data.n();
            r
        })
        .collect()
}

fn build_parties(dataset: &Dataset, groups: Vec<Vec<usize>>) -> Vec<PartyData> {
    groups
        .into_iter()
        .enumerate()
        .map(|(k, mut rows)| {
            rows.sort_unstable();
            PartyData {
                party_id: k + 1,
                data: dataset.subset(&rows),
            }
        })
        .collect()
}

/// Random horizontal partition into parties of the given sizes.
///
/// Rows are assigned by a seeded shuffle; each party keeps its rows in
/// source order, so a single party reproduces the input.
pub fn partition(dataset: &Dataset, sizes: &[usize], seed: u64) -> Result<Vec<PartyData>> {
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(Error::InvalidArgument("party sizes must be >= 1".into()));
    }
    let total: usize = sizes.iter().sum();
    if total != dataset.n() {
        return Err(Error::InvalidArgument(format!(
            "party sizes sum to {total} but dataset has {} rows",
            dataset.n()
        )));
    }
    let mut idx: Vec<usize> = (0..dataset.n()).collect();
    idx.shuffle(&mut rng_from_seed(seed));
    let mut groups = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for &s in sizes {
        groups.push(idx[start..start + s].to_vec());
        start += s;
    }
    Ok(build_parties(dataset, groups))
}

/// Requested treated/controlled counts for one party.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PartyCounts {
    pub treated: usize,
    pub controlled: usize,
}

impl PartyCounts {
    pub const fn new(treated: usize, controlled: usize) -> Self {
        Self {
            treated,
            controlled,
        }
    }

    pub fn all(&self) -> usize {
        self.treated + self.controlled
    }
}

/// Partition with exact per-party treated and controlled counts. Rows not
/// requested by any party are dropped.
pub fn partition_by_counts(
    dataset: &Dataset,
    counts: &[PartyCounts],
    seed: u64,
) -> Result<Vec<PartyData>> {
    let mut treated = dataset.treated_rows();
    let mut control = dataset.control_rows();
    let need_t: usize = counts.iter().map(|c| c.treated).sum();
    let need_c: usize = counts.iter().map(|c| c.controlled).sum();
    if need_t > treated.len() || need_c > control.len() {
        return Err(Error::InvalidArgument(format!(
            "requested {need_t} treated / {need_c} controlled rows but only {} / {} available",
            treated.len(),
            control.len()
        )));
    }
    if counts.iter().any(|c| c.all() == 0) {
        return Err(Error::InvalidArgument(
            "party with zero rows requested".into(),
        ));
    }
    let mut rng = rng_from_seed(seed);
    treated.shuffle(&mut rng);
    control.shuffle(&mut rng);
    let (mut t0, mut c0) = (0, 0);
    let groups = counts
        .iter()
        .map(|c| {
            let mut rows = treated[t0..t0 + c.treated].to_vec();
            rows.extend_from_slice(&control[c0..c0 + c.controlled]);
            t0 += c.treated;
            c0 += c.controlled;
            rows
        })
        .collect();
    Ok(build_parties(dataset, groups))
}

/// Split into `c` near-equal parties whose treatment ratios match the
/// global ratio up to rounding.
pub fn stratified_partition(dataset: &Dataset, c: usize, seed: u64) -> Result<Vec<PartyData>> {
    if c == 0 || c > dataset.n() {
        return Err(Error::InvalidArgument(format!(
            "cannot split {} rows into {c} parties",
            dataset.n()
        )));
    }
    let split = |total: usize| -> Vec<usize> {
        (0..c)
            .map(|k| total / c + usize::from(k < total % c))
            .collect()
    };
    let sizes = split(dataset.n());
    let treated = split(dataset.n_treated());
    let counts: Vec<PartyCounts> = sizes
        .iter()
        .zip(&treated)
        .map(|(&s, &t)| PartyCounts::new(t, s - t))
        .collect();
    partition_by_counts(dataset, &counts, seed)
}
