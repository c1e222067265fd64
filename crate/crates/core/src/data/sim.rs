//! Simulation data-generating processes and structurally matched synthetic
//! stand-ins for the real datasets.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{partition_by_counts, CsvSchema, Dataset, OracleTruth, PartyCounts, PartyData};
use crate::dml::StructuralDgp;
use crate::error::{Error, Result};
use crate::linalg::{column_means, column_stds};
use crate::rng::{derive_seed, rng_from_seed, Rng};

/// Standard deviation of the outcome noise in the synthetic designs.
pub const OUTCOME_NOISE_SD: f64 = 0.1;

fn sigmoid(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// The two-party synthetic design: `theta = 1 + x1 + x2`,
/// `u = |x1| + |x2|`, `h = sigmoid(x1 + x2)`, ten covariates.
///
/// Party 1 draws `x1 ~ U(-3, 3)`, `x2 ~ U(-0.5, 0.5)`; party 2 the reverse.
/// The remaining eight covariates are standard normal for both parties.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sim1Dgp;

impl Sim1Dgp {
    pub const M: usize = 10;

    pub fn theta(x: &[f64]) -> f64 {
        1.0 + x[0] + x[1]
    }

    pub fn u(x: &[f64]) -> f64 {
        x[0].abs() + x[1].abs()
    }

    pub fn h(x: &[f64]) -> f64 {
        sigmoid(x[0] + x[1])
    }

    /// `E[y | x] = theta(x) h(x) + u(x)`.
    pub fn q(x: &[f64]) -> f64 {
        Self::theta(x) * Self::h(x) + Self::u(x)
    }

    pub fn true_beta() -> DVector<f64> {
        let mut b = DVector::zeros(Self::M + 1);
        b[0] = 1.0;
        b[1] = 1.0;
        b[2] = 1.0;
        b
    }

    fn covariates(party: usize, rng: &mut Rng) -> Vec<f64> {
        let (wide, narrow) = (3.0, 0.5);
        let (r1, r2) = if party == 1 {
            (wide, narrow)
        } else {
            (narrow, wide)
        };
        let mut x = Vec::with_capacity(Self::M);
        x.push(rng.random_range(-r1..r1));
        x.push(rng.random_range(-r2..r2));
        for _ in 2..Self::M {
            x.push(StandardNormal.sample(rng));
        }
        x
    }

    /// Draw `n` subjects from party `party` (1 or 2).
    pub fn sample_party(party: usize, n: usize, rng: &mut Rng) -> Dataset {
        let noise = Normal::new(0.0, OUTCOME_NOISE_SD).expect("valid sd");
        let mut xs = Vec::with_capacity(n * Self::M);
        let mut z = DVector::zeros(n);
        let mut y = DVector::zeros(n);
        for i in 0..n {
            let x = Self::covariates(party, rng);
            let zi = f64::from(u8::from(rng.random::<f64>() < Self::h(&x)));
            z[i] = zi;
            y[i] = Self::theta(&x) * zi + Self::u(&x) + noise.sample(rng);
            xs.extend_from_slice(&x);
        }
        Dataset::unnamed(DMatrix::from_row_slice(n, Self::M, &xs), z, y)
            .expect("valid simulated data")
    }

    /// Draw `n` subjects from the pooled population (party chosen uniformly).
    pub fn sample_pooled(n: usize, rng: &mut Rng) -> Dataset {
        let n1 = (0..n).filter(|_| rng.random::<bool>()).count();
        let a = Self::sample_party(1, n1, rng);
        let b = Self::sample_party(2, n - n1, rng);
        super::pool(&[
            PartyData {
                party_id: 1,
                data: a,
            },
            PartyData {
                party_id: 2,
                data: b,
            },
        ])
        .expect("same m")
    }
}

impl StructuralDgp for Sim1Dgp {
    fn m(&self) -> usize {
        Self::M
    }

    /// Draws from the two-party mixture with equal weights.
    fn draw(&self, rng: &mut Rng) -> (Vec<f64>, f64, f64) {
        let party = if rng.random::<bool>() { 1 } else { 2 };
        let x = Self::covariates(party, rng);
        let z = f64::from(u8::from(rng.random::<f64>() < Self::h(&x)));
        let eps: f64 = Normal::new(0.0, OUTCOME_NOISE_SD)
            .expect("valid sd")
            .sample(rng);
        let y = Self::theta(&x) * z + Self::u(&x) + eps;
        (x, z, y)
    }

    fn q(&self, x: &[f64]) -> f64 {
        Self::q(x)
    }

    fn h(&self, x: &[f64]) -> f64 {
        Self::h(x)
    }

    fn true_beta(&self) -> DVector<f64> {
        Self::true_beta()
    }
}

/// Well-specified linear design: `x ~ N(0, I_m)`, constant propensity,
/// `theta(x) = [1, x] beta`, `u(x) = [1, x] gamma`, Gaussian noise.
/// Both `q` and `theta` are linear, so OLS nuisances are correct.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearDgp {
    pub beta: DVector<f64>,
    pub gamma: DVector<f64>,
    pub propensity: f64,
    pub noise_sd: f64,
}

impl LinearDgp {
    fn lin(v: &DVector<f64>, x: &[f64]) -> f64 {
        v[0] + x
            .iter()
            .zip(v.iter().skip(1))
            .map(|(a, b)| a * b)
            .sum::<f64>()
    }
}

impl StructuralDgp for LinearDgp {
    fn m(&self) -> usize {
        self.beta.len() - 1
    }

    fn draw(&self, rng: &mut Rng) -> (Vec<f64>, f64, f64) {
        let x: Vec<f64> = (0..self.m()).map(|_| StandardNormal.sample(rng)).collect();
        let z = f64::from(u8::from(rng.random::<f64>() < self.propensity));
        let eps: f64 = if self.noise_sd > 0.0 {
            Normal::new(0.0, self.noise_sd)
                .expect("valid sd")
                .sample(rng)
        } else {
            0.0
        };
        let y = Self::lin(&self.beta, &x) * z + Self::lin(&self.gamma, &x) + eps;
        (x, z, y)
    }

    fn q(&self, x: &[f64]) -> f64 {
        Self::lin(&self.beta, x) * self.propensity + Self::lin(&self.gamma, x)
    }

    fn h(&self, _x: &[f64]) -> f64 {
        self.propensity
    }

    fn true_beta(&self) -> DVector<f64> {
        self.beta.clone()
    }
}

/// Two parties of the synthetic design with per-subject truth in stacked order.
pub fn gen_sim1(seed: u64, n_per_party: usize) -> Result<(Vec<PartyData>, OracleTruth)> {
    if n_per_party < 20 {
        return Err(Error::InvalidArgument(format!(
            "n_per_party must be >= 20, got {n_per_party}"
        )));
    }
    let parties: Vec<PartyData> = (1..=2)
        .map(|k| {
            let mut rng = rng_from_seed(derive_seed(seed, k as u64));
            PartyData {
                party_id: k,
                data: Sim1Dgp::sample_party(k, n_per_party, &mut rng),
            }
        })
        .collect();
    let pooled = super::pool(&parties)?;
    Ok((
        parties,
        OracleTruth::from_linear(&pooled.x, Sim1Dgp::true_beta()),
    ))
}

/// Coefficients of the semi-synthetic CATE: `[const, beta_1 .. beta_m]`
/// with `beta_j = s_j / sigma_j`, `s = (1, 0, -1, 1, 0, -1, ...)`, and the
/// constant chosen so the sample mean CATE is zero.
pub fn semi_synthetic_beta(x: &DMatrix<f64>) -> Result<DVector<f64>> {
    let m = x.ncols();
    if m == 0 {
        return Err(Error::InvalidArgument("need at least one covariate".into()));
    }
    let stds = column_stds(x);
    if let Some(j) = stds.iter().position(|s| *s <= 0.0 || !s.is_finite()) {
        return Err(Error::InvalidData(format!(
            "covariate column {} has zero variance",
            j + 1
        )));
    }
    let mut beta = DVector::zeros(m + 1);
    for j in 0..m {
        let pattern = match j % 3 {
            0 => 1.0,
            1 => 0.0,
            _ => -1.0,
        };
        beta[j + 1] = pattern / stds[j];
    }
    let means = column_means(x);
    let slope = beta.rows(1, m);
    beta[0] = -means.dot(&slope);
    Ok(beta)
}

/// Semi-synthetic outcomes `y = theta(x) z + u(x) + eps` on fixed covariates
/// and treatments, with `u(x) = sum_j |(x_j - mean_j) / sigma_j|`.
pub fn gen_semi_synthetic_outcomes(
    x: &DMatrix<f64>,
    z: &DVector<f64>,
    seed: u64,
) -> Result<(DVector<f64>, OracleTruth)> {
    if z.len() != x.nrows() {
        return Err(Error::DimensionMismatch(
            "z length differs from x rows".into(),
        ));
    }
    let n = x.nrows();
    let beta = if n == 1 {
        // a single row has no spread; the CATE degenerates to zero
        DVector::zeros(x.ncols() + 1)
    } else {
        semi_synthetic_beta(x)?
    };
    let means = column_means(x);
    let stds = column_stds(x);
    let truth = OracleTruth::from_linear(x, beta);
    let noise = Normal::new(0.0, OUTCOME_NOISE_SD).expect("valid sd");
    let mut rng = rng_from_seed(seed);
    let y = DVector::from_fn(n, |i, _| {
        let u: f64 = (0..x.ncols())
            .map(|j| {
                if stds[j] > 0.0 {
                    ((x[(i, j)] - means[j]) / stds[j]).abs()
                } else {
                    0.0
                }
            })
            .sum();
        truth.true_cate[i] * z[i] + u + noise.sample(&mut rng)
    });
    Ok((y, truth))
}

/// Distribution settings for the real-data robustness experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Sim3Setting {
    /// Even subjects, even treatment rates.
    A,
    /// Even subjects, uneven treatment rates.
    B,
    /// Uneven subjects, even treatment rates.
    C,
}

impl std::str::FromStr for Sim3Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "A" => Ok(Self::A),
            "B" => Ok(Self::B),
            "C" => Ok(Self::C),
            _ => Err(Error::InvalidArgument(format!("unknown setting {s:?}"))),
        }
    }
}

/// The real datasets used by the experiments, with file schemas and
/// structurally matched synthetic fallbacks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum RealDataset {
    /// Infant health program covariates: 747 rows, 25 covariates, 139 treated.
    Ihdp,
    /// 401(k) financial assets: 9915 rows, 9 covariates.
    Financial,
    /// Job training: 2675 rows, 6 covariates, 185 treated.
    Jobs,
}

impl RealDataset {
    pub fn file_name(self) -> &'static str {
        match self {
            Self::Ihdp => "ihdp.csv",
            Self::Financial => "sipp.csv",
            Self::Jobs => "jobs.csv",
        }
    }

    pub fn schema(self) -> CsvSchema {
        match self {
            // the outcome column is overwritten by the semi-synthetic outcome
            Self::Ihdp => CsvSchema::new("treatment", "y"),
            Self::Financial => CsvSchema::new("e401", "net_tfa").with_covariates(
                [
                    "age", "inc", "educ", "fsize", "marr", "twoearn", "db", "pira", "hown",
                ]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            ),
            Self::Jobs => CsvSchema::new("treat", "re78").with_covariates(
                ["age", "black", "hispanic", "married", "nodegree", "re74"]
                    .iter()
                    .map(|s| s.to_string())
                    .collect(),
            ),
        }
    }

    /// Per-party (treated, controlled) counts for a distribution setting.
    pub fn sim3_counts(self, setting: Sim3Setting) -> Result<Vec<PartyCounts>> {
        use Sim3Setting::*;
        let pc = PartyCounts::new;
        match (self, setting) {
            (Self::Financial, A) => Ok(vec![pc(1227, 2077); 3]),
            (Self::Financial, B) => Ok(vec![pc(2549, 755), pc(849, 2455), pc(283, 3021)]),
            (Self::Financial, C) => Ok(vec![pc(2549, 4315), pc(849, 1438), pc(283, 479)]),
            (Self::Jobs, A) => Ok(vec![pc(61, 830); 3]),
            (Self::Jobs, B) => Ok(vec![pc(92, 799), pc(61, 830), pc(30, 861)]),
            (Self::Jobs, C) => Ok(vec![pc(92, 1245), pc(61, 830), pc(30, 415)]),
            (Self::Ihdp, _) => Err(Error::InvalidArgument(
                "no distribution settings for ihdp".into(),
            )),
        }
    }

    /// Locate the dataset file under `data_dir`, or fall back to synthetic data.
    pub fn resolve(
        self,
        data_dir: Option<&Path>,
        allow_fallback: bool,
        fallback_seed: u64,
    ) -> Result<(Dataset, bool)> {
        if let Some(dir) = data_dir {
            let path: PathBuf = dir.join(self.file_name());
            if path.exists() {
                return Ok((super::load_csv(&path, &self.schema())?, false));
            }
        }
        if !allow_fallback {
            return Err(Error::InvalidArgument(format!(
                "dataset {} not found and synthetic fallback disabled",
                self.file_name()
            )));
        }
        let d = match self {
            Self::Ihdp => ihdp_like(fallback_seed),
            Self::Financial => financial_like(fallback_seed),
            Self::Jobs => jobs_like(fallback_seed),
        };
        Ok((d, true))
    }
}

/// Partition for a distribution setting with exact treated/controlled counts.
pub fn gen_sim3_partition(
    dataset: &Dataset,
    counts: &[PartyCounts],
    seed: u64,
) -> Result<Vec<PartyData>> {
    partition_by_counts(dataset, counts, seed)
}

/// Choose exactly `k` indices without replacement with probability
/// proportional to `weights` (Efraimidis–Spirakis keys).
fn weighted_choice(weights: &[f64], k: usize, rng: &mut Rng) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = weights
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            (u.ln() / w.max(1e-12), i)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0));
    keyed.into_iter().take(k).map(|(_, i)| i).collect()
}

fn assign_treatment(score: &[f64], n_treated: usize, rng: &mut Rng) -> DVector<f64> {
    let weights: Vec<f64> = score.iter().map(|s| s.exp()).collect();
    let mut z = DVector::zeros(score.len());
    for i in weighted_choice(&weights, n_treated, rng) {
        z[i] = 1.0;
    }
    z
}

fn bernoulli(p: f64, rng: &mut Rng) -> f64 {
    f64::from(u8::from(rng.random::<f64>() < p))
}

/// Synthetic stand-in with the infant-health design's shape: 747 rows,
/// 6 continuous and 19 binary covariates, 139 treated chosen with
/// covariate-dependent probability. The outcome column is zero.
pub fn ihdp_like(seed: u64) -> Dataset {
    const N: usize = 747;
    const CONT: usize = 6;
    const BIN: usize = 19;
    let mut rng = rng_from_seed(seed);
    let mut x = DMatrix::zeros(N, CONT + BIN);
    for j in 0..CONT {
        for i in 0..N {
            x[(i, j)] = StandardNormal.sample(&mut rng);
        }
    }
    for b in 0..BIN {
        let p = 0.1 + 0.5 * (b as f64) / (BIN as f64 - 1.0);
        loop {
            for i in 0..N {
                x[(i, CONT + b)] = bernoulli(p, &mut rng);
            }
            let s: f64 = x.column(CONT + b).sum();
            if s > 0.0 && s < N as f64 {
                break;
            }
        }
    }
    let score: Vec<f64> = (0..N)
        .map(|i| 0.6 * x[(i, 0)] - 0.4 * x[(i, 2)] + 0.8 * x[(i, CONT)] - 0.8 * x[(i, CONT + 3)])
        .collect();
    let z = assign_treatment(&score, 139, &mut rng);
    let mut names: Vec<String> = (1..=CONT).map(|j| format!("c{j}")).collect();
    names.extend((1..=BIN).map(|j| format!("b{j}")));
    Dataset::new(x, z, DVector::zeros(N), names).expect("valid synthetic data")
}

/// Synthetic stand-in for the 401(k) financial assets data: 9915 rows with
/// covariates age, inc, educ, fsize, marr, twoearn, db, pira, hown and
/// 3682 eligible households.
pub fn financial_like(seed: u64) -> Dataset {
    const N: usize = 9915;
    let mut rng = rng_from_seed(seed);
    let normal = |rng: &mut Rng| -> f64 { StandardNormal.sample(rng) };
    let mut x = DMatrix::zeros(N, 9);
    for i in 0..N {
        let age = rng.random_range(25..=64) as f64;
        let inc = (10.3 + 0.6 * normal(&mut rng)).exp().min(250_000.0);
        let educ = (13.0 + 2.8 * normal(&mut rng)).round().clamp(1.0, 18.0);
        let fsize = (2.8 + 1.5 * normal(&mut rng)).round().clamp(1.0, 8.0);
        let marr = bernoulli(0.6, &mut rng);
        let twoearn = if marr == 1.0 {
            bernoulli(0.6, &mut rng)
        } else {
            0.0
        };
        let db = bernoulli(0.27, &mut rng);
        let pira = bernoulli(0.15 + 0.2 * f64::from(u8::from(inc > 40_000.0)), &mut rng);
        let hown = bernoulli(0.45 + 0.004 * (age - 25.0), &mut rng);
        for (j, v) in [age, inc, educ, fsize, marr, twoearn, db, pira, hown]
            .into_iter()
            .enumerate()
        {
            x[(i, j)] = v;
        }
    }
    let score: Vec<f64> = (0..N)
        .map(|i| 0.9 * ((x[(i, 1)] / 30_000.0).ln()) + 0.3 * x[(i, 6)] + 0.02 * (x[(i, 2)] - 13.0))
        .collect();
    let z = assign_treatment(&score, 3682, &mut rng);
    let theta = DVector::from_vec(vec![
        -9705.1794, 172.0307, -0.1297, 642.9040, -1003.0686, 1102.9090, 5607.3989, 5657.7264,
        -1032.3599, 5324.2854,
    ]);
    let noise = Normal::new(0.0, 15_000.0).expect("valid sd");
    let y = DVector::from_fn(N, |i, _| {
        let r = x.row(i);
        let tau = theta[0] + (0..9).map(|j| r[j] * theta[j + 1]).sum::<f64>();
        let u = -12_000.0
            + 0.35 * r[1]
            + 150.0 * (r[0] - 40.0)
            + 900.0 * (r[2] - 12.0)
            + 6_000.0 * r[8]
            + 9_000.0 * r[7]
            - 1_500.0 * r[3];
        tau * z[i] + u + noise.sample(&mut rng)
    });
    let names = [
        "age", "inc", "educ", "fsize", "marr", "twoearn", "db", "pira", "hown",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    Dataset::new(x, z, y, names).expect("valid synthetic data")
}

/// Synthetic stand-in for the job-training data: 2675 rows with covariates
/// age, black, hispanic, married, nodegree, re74 and 185 trainees.
pub fn jobs_like(seed: u64) -> Dataset {
    const N: usize = 2675;
    let mut rng = rng_from_seed(seed);
    let mut x = DMatrix::zeros(N, 6);
    for i in 0..N {
        let age = (34.0 + 10.0 * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .round()
            .clamp(17.0, 55.0);
        let black = bernoulli(0.3, &mut rng);
        let hispanic = if black == 1.0 {
            0.0
        } else {
            bernoulli(0.05, &mut rng)
        };
        let married = bernoulli(0.8, &mut rng);
        let nodegree = bernoulli(0.3, &mut rng);
        let re74 =
            (18_000.0 + 13_000.0 * Distribution::<f64>::sample(&StandardNormal, &mut rng)).max(0.0);
        for (j, v) in [age, black, hispanic, married, nodegree, re74]
            .into_iter()
            .enumerate()
        {
            x[(i, j)] = v;
        }
    }
    let score: Vec<f64> = (0..N)
        .map(|i| {
            -0.08 * (x[(i, 0)] - 34.0) + 1.8 * x[(i, 1)] + 0.8 * x[(i, 2)] - 1.2 * x[(i, 3)]
                + 1.0 * x[(i, 4)]
                - x[(i, 5)] / 8_000.0
        })
        .collect();
    let z = assign_treatment(&score, 185, &mut rng);
    let theta = DVector::from_vec(vec![
        -7533.7519, 226.4912, 2493.7939, 1519.3141, -2215.7011, -858.5624, -0.3354,
    ]);
    let noise = Normal::new(0.0, 8_000.0).expect("valid sd");
    let y = DVector::from_fn(N, |i, _| {
        let r = x.row(i);
        let tau = theta[0] + (0..6).map(|j| r[j] * theta[j + 1]).sum::<f64>();
        let u = 3_000.0 + 0.8 * r[5] + 80.0 * (r[0] - 34.0) - 1_500.0 * r[4] + 1_000.0 * r[3];
        (tau * z[i] + u + noise.sample(&mut rng)).max(0.0)
    });
    let names = ["age", "black", "hispanic", "married", "nodegree", "re74"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    Dataset::new(x, z, y, names).expect("valid synthetic data")
}

/// Standard normal covariate matrix.
pub fn gaussian_covariates(n: usize, m: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = rng_from_seed(seed);
    DMatrix::from_fn(n, m, |_, _| StandardNormal.sample(&mut rng))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sim1_shapes_and_truth() {
        let (parties, truth) = gen_sim1(3, 300).unwrap();
        assert_eq!(parties.len(), 2);
        assert!(parties
            .iter()
            .all(|p| p.data.n() == 300 && p.data.m() == 10));
        let pooled = super::super::pool(&parties).unwrap();
        for i in 0..pooled.n() {
            let x = pooled.x.row(i);
            assert!((truth.true_cate[i] - (1.0 + x[0] + x[1])).abs() < 1e-12);
        }
        assert_eq!(truth.true_beta, Sim1Dgp::true_beta());
        assert!(gen_sim1(3, 19).is_err());
    }

    #[test]
    fn sim1_party_ranges_follow_design() {
        let (parties, _) = gen_sim1(9, 300).unwrap();
        let range = |p: &PartyData, j: usize| {
            let c = p.data.x.column(j);
            (c.min(), c.max())
        };
        let (lo, hi) = range(&parties[0], 0);
        assert!(lo >= -3.0 && hi <= 3.0 && hi - lo > 4.0);
        let (lo, hi) = range(&parties[0], 1);
        assert!(lo >= -0.5 && hi <= 0.5);
        let (lo, hi) = range(&parties[1], 0);
        assert!(lo >= -0.5 && hi <= 0.5);
    }

    #[test]
    fn sim1_is_deterministic_per_seed() {
        let (a, _) = gen_sim1(5, 50).unwrap();
        let (b, _) = gen_sim1(5, 50).unwrap();
        let (c, _) = gen_sim1(6, 50).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn sim1_treatment_rate_matches_propensity() {
        // Monte-Carlo: mean z vs mean h(x), tolerance 3 sigma of a Bernoulli mean
        let n = 100_000;
        let d = Sim1Dgp::sample_party(1, n, &mut rng_from_seed(42));
        let mean_h: f64 = (0..n)
            .map(|i| Sim1Dgp::h(d.x.row(i).clone_owned().as_slice()))
            .sum::<f64>()
            / n as f64;
        let mean_z = d.z.mean();
        let sigma = (0.25 / n as f64).sqrt();
        assert!(
            (mean_z - mean_h).abs() < 3.0 * sigma,
            "{mean_z} vs {mean_h}"
        );
    }

    #[test]
    fn semi_synthetic_ate_is_zero_and_theta_matches_formula() {
        let x = gaussian_covariates(50, 7, 1) * 3.0;
        let z = DVector::from_fn(50, |i, _| (i % 3 == 0) as u8 as f64);
        let (y, truth) = gen_semi_synthetic_outcomes(&x, &z, 2).unwrap();
        assert_eq!(y.len(), 50);
        assert!(truth.true_ate.abs() < 1e-10);
        // direct evaluation on five rows
        let n = 50.0;
        let mut sd = [0.0; 7];
        let mut mean = [0.0; 7];
        for j in 0..7 {
            mean[j] = x.column(j).sum() / n;
            sd[j] = (x
                .column(j)
                .iter()
                .map(|v| (v - mean[j]).powi(2))
                .sum::<f64>()
                / n)
                .sqrt();
        }
        let pattern = [1.0, 0.0, -1.0, 1.0, 0.0, -1.0, 1.0];
        let slope = |row: usize| -> f64 { (0..7).map(|j| x[(row, j)] * pattern[j] / sd[j]).sum() };
        let c = -(0..50).map(slope).sum::<f64>() / n;
        for row in [0, 7, 19, 33, 49] {
            assert!((truth.true_cate[row] - (c + slope(row))).abs() < 1e-10);
        }
    }

    #[test]
    fn semi_synthetic_rejects_constant_column() {
        let mut x = gaussian_covariates(10, 3, 1);
        x.column_mut(1).fill(2.0);
        let z = DVector::from_fn(10, |i, _| (i % 2) as f64);
        assert!(gen_semi_synthetic_outcomes(&x, &z, 0).is_err());
    }

    #[test]
    fn semi_synthetic_single_row() {
        let x = DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 3.0]);
        let (y, _) = gen_semi_synthetic_outcomes(&x, &DVector::from_vec(vec![1.0]), 0).unwrap();
        assert_eq!(y.len(), 1);
    }

    #[test]
    fn fallbacks_match_reported_shapes() {
        let d = ihdp_like(1);
        assert_eq!((d.n(), d.m(), d.n_treated()), (747, 25, 139));
        let d = jobs_like(1);
        assert_eq!((d.n(), d.m(), d.n_treated()), (2675, 6, 185));
    }

    #[test]
    fn sim3_partitions_have_exact_counts() {
        let d = financial_like(2);
        assert_eq!((d.n(), d.m()), (9915, 9));
        let counts = RealDataset::Financial.sim3_counts(Sim3Setting::B).unwrap();
        let parts = gen_sim3_partition(&d, &counts, 4).unwrap();
        let treated: Vec<usize> = parts.iter().map(|p| p.data.n_treated()).collect();
        assert_eq!(treated, vec![2549, 849, 283]);
        assert!(parts.iter().all(|p| p.data.n() == 3304));

        let jobs = jobs_like(2);
        let counts = RealDataset::Jobs.sim3_counts(Sim3Setting::A).unwrap();
        let parts = gen_sim3_partition(&jobs, &counts, 4).unwrap();
        for p in &parts {
            assert_eq!((p.data.n(), p.data.n_treated()), (891, 61));
        }
        let rate = |p: &PartyData| p.data.n_treated() as f64 / p.data.n() as f64;
        assert_eq!(rate(&parts[0]), rate(&parts[2]));
    }

    #[test]
    fn sim3_rejects_excess_counts() {
        let jobs = jobs_like(2);
        let counts = vec![PartyCounts::new(200, 10)];
        assert!(gen_sim3_partition(&jobs, &counts, 0).is_err());
    }
}
