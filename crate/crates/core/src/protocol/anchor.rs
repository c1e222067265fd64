use nalgebra::DMatrix;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

/// Dummy rows drawn uniformly inside per-covariate ranges. Every user
/// regenerates the same matrix from `(ranges, r, seed)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorDataset {
    pub x_anc: DMatrix<f64>,
    pub ranges: Vec<(f64, f64)>,
    pub seed: u64,
}

impl AnchorDataset {
    pub fn r(&self) -> usize {
        self.x_anc.nrows()
    }

    pub fn m(&self) -> usize {
        self.x_anc.ncols()
    }
}

pub fn gen_anchor(ranges: &[(f64, f64)], r: usize, seed: u64) -> Result<AnchorDataset> {
    let m = ranges.len();
    if m == 0 {
        return Err(Error::InvalidArgument(
            "anchor needs at least one covariate range".into(),
        ));
    }
    if let Some((j, (lo, hi))) = ranges
        .iter()
        .enumerate()
        .find(|(_, (lo, hi))| !lo.is_finite() || !hi.is_finite() || lo >= hi)
    {
        return Err(Error::InvalidArgument(format!(
            "degenerate anchor range [{lo}, {hi}] for covariate {}",
            j + 1
        )));
    }
    if r < m + 1 {
        return Err(Error::InvalidArgument(format!(
            "anchor needs r >= m + 1 = {}, got {r}",
            m + 1
        )));
    }
    let mut rng = rng_from_seed(seed);
    let mut x_anc = DMatrix::zeros(r, m);
    for i in 0..r {
        for (j, (lo, hi)) in ranges.iter().enumerate() {
            x_anc[(i, j)] = rng.random_range(*lo..*hi);
        }
    }
    Ok(AnchorDataset {
        x_anc,
        ranges: ranges.to_vec(),
        seed,
    })
}

/// Per-covariate `(min, max)` over all parties' local ranges.
pub fn union_ranges<'a, I>(datasets: I) -> Result<Vec<(f64, f64)>>
where
    I: IntoIterator<Item = &'a Dataset>,
{
    let mut out: Option<Vec<(f64, f64)>> = None;
    for d in datasets {
        let local = local_ranges(d);
        out = Some(match out {
            None => local,
            Some(acc) => {
                if acc.len() != local.len() {
                    return Err(Error::DimensionMismatch("parties disagree on m".into()));
                }
                acc.iter()
                    .zip(&local)
                    .map(|(a, b)| (a.0.min(b.0), a.1.max(b.1)))
                    .collect()
            }
        });
    }
    out.ok_or_else(|| Error::InvalidArgument("no parties".into()))
}

pub fn local_ranges(d: &Dataset) -> Vec<(f64, f64)> {
    d.x.column_iter().map(|c| (c.min(), c.max())).collect()
}
