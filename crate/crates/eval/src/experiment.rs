use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use dcdml_core::data::sim::{
    gen_semi_synthetic_outcomes, gen_sim1, gen_sim3_partition, RealDataset, Sim3Setting,
};
use dcdml_core::data::{pool, stratified_partition, Dataset, PartyData};
use dcdml_core::dml::{predict_cate, test_coefficients, z_test, SignClass, DEFAULT_ALPHA};
use dcdml_core::linalg::with_ones_column;
use dcdml_core::ni::{mixing_seed, run_ni_dc_dml};
use dcdml_core::nuisance::{ClassifierSpec, ForestParams, RegressorSpec};
use dcdml_core::protocol::{
    build_anchor, run_dc_dml, AnchorSpec, ProtocolConfig, ReducerSpec, DEFAULT_SUBSAMPLE,
};
use dcdml_core::rng::derive_seed;
use dcdml_core::{Error, Result};

use crate::baselines::{fit_ca_dml, fit_ia_dml, fit_sr};
use crate::metrics::{ate, majority_class, rmse_cate, rmse_coef, sig_consistency, true_sign};
use crate::report::EvalReport;

const BENCHMARK_STREAM: u64 = 0xBE4C;
pub const DEFAULT_BENCHMARK_TRIALS: usize = 50;
pub const SIM1_N_PER_PARTY: usize = 300;
pub const SIM2_PARTIES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Scenario {
    /// Two synthetic parties with a nonlinear outcome and propensity.
    Sim1,
    /// Semi-synthetic outcomes on infant-health covariates, three equal parties.
    Sim2,
    /// Real outcomes partitioned by a distribution setting.
    Sim3 {
        dataset: RealDataset,
        setting: Sim3Setting,
    },
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Sim1 => write!(f, "sim1"),
            Self::Sim2 => write!(f, "sim2"),
            Self::Sim3 { dataset, setting } => {
                let d = match dataset {
                    RealDataset::Ihdp => "ihdp",
                    RealDataset::Financial => "financial",
                    RealDataset::Jobs => "jobs",
                };
                write!(f, "sim3:{d}:{setting:?}")
            }
        }
    }
}

impl FromStr for Scenario {
    type Err = Error;

    /// `sim1`, `sim2`, or `sim3:<financial|jobs>:<A|B|C>`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["sim1"] => Ok(Self::Sim1),
            ["sim2"] => Ok(Self::Sim2),
            ["sim3", d, setting] => {
                let dataset = match d.to_ascii_lowercase().as_str() {
                    "financial" | "sipp" => RealDataset::Financial,
                    "jobs" => RealDataset::Jobs,
                    _ => return Err(Error::InvalidArgument(format!("unknown dataset {d:?}"))),
                };
                let setting: Sim3Setting = setting.parse()?;
                dataset.sim3_counts(setting)?;
                Ok(Self::Sim3 { dataset, setting })
            }
            _ => Err(Error::InvalidArgument(format!(
                "unknown scenario {s:?}; expected sim1, sim2 or sim3:<financial|jobs>:<A|B|C>"
            ))),
        }
    }
}

impl TryFrom<String> for Scenario {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Scenario> for String {
    fn from(s: Scenario) -> String {
        s.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ReducerChoice {
    Pca,
    Bootstrap,
    PcaB,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    CaDml,
    IaDml,
    DcDml(ReducerChoice),
    NiDcDml(ReducerChoice),
    Sr,
}

impl Method {
    pub fn label(self) -> String {
        let r = |c: ReducerChoice| match c {
            ReducerChoice::Pca => "PCA",
            ReducerChoice::Bootstrap => "B",
            ReducerChoice::PcaB => "PCA+B",
        };
        match self {
            Self::CaDml => "CA-DML".into(),
            Self::IaDml => "IA-DML".into(),
            Self::DcDml(c) => format!("DC-DML({})", r(c)),
            Self::NiDcDml(c) => format!("NI-DC-DML({})", r(c)),
            Self::Sr => "SR".into(),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for Method {
    type Err = Error;

    /// Accepts labels (`DC-DML(PCA+B)`) and short forms (`dc-pca+b`, `ni-pca`, `ca`).
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase().replace(['(', ')'], "-");
        let t = t.trim_end_matches('-');
        let reducer = |r: &str| match r {
            "pca" => Some(ReducerChoice::Pca),
            "b" | "bootstrap" => Some(ReducerChoice::Bootstrap),
            "pca+b" | "pcab" => Some(ReducerChoice::PcaB),
            _ => None,
        };
        let m = match t {
            "ca" | "ca-dml" => Some(Self::CaDml),
            "ia" | "ia-dml" => Some(Self::IaDml),
            "sr" => Some(Self::Sr),
            _ => {
                if let Some(r) = t
                    .strip_prefix("ni-dc-dml-")
                    .or_else(|| t.strip_prefix("ni-"))
                {
                    reducer(r).map(Self::NiDcDml)
                } else if let Some(r) = t.strip_prefix("dc-dml-").or_else(|| t.strip_prefix("dc-"))
                {
                    reducer(r).map(Self::DcDml)
                } else {
                    None
                }
            }
        };
        m.ok_or_else(|| Error::InvalidArgument(format!("unknown method {s:?}")))
    }
}

impl TryFrom<String> for Method {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Method> for String {
    fn from(m: Method) -> String {
        m.label()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub methods: Vec<Method>,
    pub trials: usize,
    pub base_seed: u64,
    /// Scenario default when absent.
    pub q_spec: Option<RegressorSpec>,
    pub h_spec: Option<ClassifierSpec>,
    pub data_dir: Option<PathBuf>,
    pub allow_fallback: bool,
    /// Seed of fixed data: synthetic fallback covariates and semi-synthetic outcomes.
    pub data_seed: u64,
    /// CA-DML runs averaged into the real-data benchmark.
    pub benchmark_trials: usize,
    pub alpha: f64,
    pub subsample: f64,
    pub sim1_n_per_party: usize,
}

impl ExperimentConfig {
    pub fn new(scenario: Scenario, methods: Vec<Method>, trials: usize, base_seed: u64) -> Self {
        Self {
            scenario,
            methods,
            trials,
            base_seed,
            q_spec: None,
            h_spec: None,
            data_dir: std::env::var_os("DCDML_DATA_DIR").map(PathBuf::from),
            allow_fallback: true,
            data_seed: 0,
            benchmark_trials: DEFAULT_BENCHMARK_TRIALS,
            alpha: DEFAULT_ALPHA,
            subsample: DEFAULT_SUBSAMPLE,
            sim1_n_per_party: SIM1_N_PER_PARTY,
        }
    }

    /// Learners used when none are given.
    pub fn default_learners(scenario: Scenario) -> (RegressorSpec, ClassifierSpec) {
        let rf = ForestParams::default();
        match scenario {
            Scenario::Sim1 => (
                RegressorSpec::RandomForest(rf),
                ClassifierSpec::RandomForest(rf),
            ),
            Scenario::Sim2 => (
                RegressorSpec::RandomForest(rf),
                ClassifierSpec::Logistic { lambda: 1.0 },
            ),
            Scenario::Sim3 {
                dataset: RealDataset::Jobs,
                ..
            } => (RegressorSpec::Ols, ClassifierSpec::RandomForest(rf)),
            Scenario::Sim3 { .. } => (RegressorSpec::Ols, ClassifierSpec::Logistic { lambda: 0.0 }),
        }
    }

    pub fn learners(&self) -> (RegressorSpec, ClassifierSpec) {
        let (q, h) = Self::default_learners(self.scenario);
        (self.q_spec.unwrap_or(q), self.h_spec.unwrap_or(h))
    }

    /// Bootstrap columns within a PCA+B reducer.
    pub fn bs_dim(&self, m: usize) -> usize {
        match self.scenario {
            Scenario::Sim1 => 3,
            _ => m.div_ceil(10),
        }
    }

    pub fn reducer_spec(&self, choice: ReducerChoice, m: usize) -> ReducerSpec {
        let dim = m.saturating_sub(1).max(1);
        match choice {
            ReducerChoice::Pca => ReducerSpec::Pca { dim },
            ReducerChoice::Bootstrap => ReducerSpec::Bootstrap {
                dim,
                p: self.subsample,
            },
            ReducerChoice::PcaB => ReducerSpec::PcaPlusBootstrap {
                dim,
                bs_dim: self.bs_dim(m).min(dim - 1),
                p: self.subsample,
            },
        }
    }

    pub fn trial_seed(&self, trial: usize) -> u64 {
        self.base_seed.wrapping_add(trial as u64)
    }

    fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::InvalidArgument("trials must be >= 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::InvalidArgument("no methods requested".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "alpha {} outside (0, 1)",
                self.alpha
            )));
        }
        let (q, h) = self.learners();
        q.validate()?;
        h.validate()
    }
}

/// A linear CATE model `tau(x) = [1, x^T] beta` with covariance of `beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearCate {
    pub party_id: usize,
    pub beta: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Reference values a method is scored against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Benchmark {
    /// `"truth"` or `"ca-dml mean"`.
    pub source: String,
    pub beta: DVector<f64>,
    pub coef_signs: Vec<SignClass>,
    /// CA-DML fits whose majority test class defines per-subject signs;
    /// empty when the truth is known.
    #[serde(skip)]
    pub ca_fits: Vec<(DVector<f64>, DMatrix<f64>)>,
    /// Mean benchmark CATE over the fixed population; absent when every
    /// trial draws a new population.
    pub ate: Option<f64>,
}

impl Benchmark {
    fn from_truth(beta: DVector<f64>, ate: Option<f64>) -> Self {
        let coef_signs = beta.iter().map(|b| true_sign(*b)).collect();
        Self {
            source: "truth".into(),
            beta,
            coef_signs,
            ca_fits: Vec::new(),
            ate,
        }
    }

    fn cate(&self, x: &DMatrix<f64>) -> Vec<f64> {
        (with_ones_column(x) * &self.beta).iter().copied().collect()
    }

    fn cate_signs(&self, x: &DMatrix<f64>, alpha: f64) -> Vec<SignClass> {
        if self.ca_fits.is_empty() {
            return self.cate(x).into_iter().map(true_sign).collect();
        }
        x.row_iter()
            .map(|r| {
                let row: Vec<f64> = r.iter().copied().collect();
                let classes: Vec<SignClass> = self
                    .ca_fits
                    .iter()
                    .map(|(b, c)| {
                        let (tau, var) = predict_cate(b, c, &row, None);
                        z_test(tau, var, alpha).sign_class
                    })
                    .collect();
                majority_class(&classes)
            })
            .collect()
    }
}

/// Metrics of one party's model in one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartyRecord {
    pub trial: usize,
    pub seed: u64,
    pub method: Method,
    pub party_id: usize,
    pub rmse_cate: f64,
    pub sig_consistency_cate: f64,
    pub rmse_coef: f64,
    pub sig_consistency_coef: f64,
    pub ate: f64,
    /// Mean benchmark CATE over this trial's population.
    pub benchmark_ate: f64,
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub coef_signs: Vec<SignClass>,
}

/// Fixed inputs shared by all trials.
struct Fixture {
    /// Source rows for partitioned scenarios.
    dataset: Option<Dataset>,
    benchmark: Option<Benchmark>,
    used_fallback: bool,
    covariate_names: Vec<String>,
}

fn prepare_fixture(cfg: &ExperimentConfig) -> Result<Fixture> {
    match cfg.scenario {
        Scenario::Sim1 => Ok(Fixture {
            dataset: None,
            benchmark: Some(Benchmark::from_truth(
                dcdml_core::data::sim::Sim1Dgp::true_beta(),
                None,
            )),
            used_fallback: false,
            covariate_names: dcdml_core::data::default_names(dcdml_core::data::sim::Sim1Dgp::M),
        }),
        Scenario::Sim2 => {
            let (d, fb) = RealDataset::Ihdp.resolve(
                cfg.data_dir.as_deref(),
                cfg.allow_fallback,
                cfg.data_seed,
            )?;
            let (y, truth) =
                gen_semi_synthetic_outcomes(&d.x, &d.z, derive_seed(cfg.data_seed, 2))?;
            let names = d.covariate_names.clone();
            let d = d.with_outcome(y)?;
            Ok(Fixture {
                dataset: Some(d),
                benchmark: Some(Benchmark::from_truth(truth.true_beta, Some(truth.true_ate))),
                used_fallback: fb,
                covariate_names: names,
            })
        }
        Scenario::Sim3 { dataset, .. } => {
            let (d, fb) =
                dataset.resolve(cfg.data_dir.as_deref(), cfg.allow_fallback, cfg.data_seed)?;
            let bench = ca_benchmark(&d, cfg)?;
            Ok(Fixture {
                covariate_names: d.covariate_names.clone(),
                dataset: Some(d),
                benchmark: Some(bench),
                used_fallback: fb,
            })
        }
    }
}

/// Mean of CA-DML runs on all rows; per-coefficient signs from the most
/// frequent test class across runs.
fn ca_benchmark(d: &Dataset, cfg: &ExperimentConfig) -> Result<Benchmark> {
    let (q, h) = cfg.learners();
    let runs = cfg.benchmark_trials.max(1);
    let fits = (0..runs)
        .into_par_iter()
        .map(|b| dcdml_core::dml::fit_dml(d, &q, &h, derive_seed(BENCHMARK_STREAM, b as u64)))
        .collect::<Result<Vec<_>>>()?;
    let p = d.m() + 1;
    let mut beta = DVector::zeros(p);
    for f in &fits {
        beta += &f.beta_hat;
    }
    beta /= runs as f64;
    let coef_signs = (0..p)
        .map(|j| {
            let classes: Vec<SignClass> = fits
                .iter()
                .map(|f| z_test(f.beta_hat[j], f.cov_beta[(j, j)], cfg.alpha).sign_class)
                .collect();
            majority_class(&classes)
        })
        .collect();
    let ate = (with_ones_column(&d.x) * &beta).mean();
    Ok(Benchmark {
        source: "ca-dml mean".into(),
        beta,
        coef_signs,
        ca_fits: fits.into_iter().map(|f| (f.beta_hat, f.cov_beta)).collect(),
        ate: Some(ate),
    })
}

fn trial_parties(cfg: &ExperimentConfig, fx: &Fixture, seed: u64) -> Result<Vec<PartyData>> {
    match cfg.scenario {
        Scenario::Sim1 => Ok(gen_sim1(seed, cfg.sim1_n_per_party)?.0),
        Scenario::Sim2 => stratified_partition(
            fx.dataset.as_ref().expect("fixture data"),
            SIM2_PARTIES,
            seed,
        ),
        Scenario::Sim3 { dataset, setting } => gen_sim3_partition(
            fx.dataset.as_ref().expect("fixture data"),
            &dataset.sim3_counts(setting)?,
            seed,
        ),
    }
}

/// Fit one method; one model per party.
pub fn fit_method(
    method: Method,
    parties: &[PartyData],
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<Vec<LinearCate>> {
    let (q, h) = cfg.learners();
    let m = parties[0].data.m();
    let shared = |beta: DVector<f64>, cov: DMatrix<f64>| {
        parties
            .iter()
            .map(|p| LinearCate {
                party_id: p.party_id,
                beta: beta.clone(),
                cov: cov.clone(),
            })
            .collect()
    };
    match method {
        Method::CaDml => {
            let f = fit_ca_dml(parties, &q, &h, seed)?;
            Ok(shared(f.beta_hat, f.cov_beta))
        }
        Method::Sr => {
            let f = fit_sr(parties)?;
            Ok(shared(f.cate_beta(), f.cate_cov()))
        }
        Method::IaDml => parties
            .iter()
            .map(|p| {
                let f = fit_ia_dml(p, &q, &h, seed)?;
                Ok(LinearCate {
                    party_id: p.party_id,
                    beta: f.beta_hat,
                    cov: f.cov_beta,
                })
            })
            .collect(),
        Method::DcDml(choice) => {
            let config = ProtocolConfig {
                reducer: cfg.reducer_spec(choice, m),
                anchor: AnchorSpec {
                    ranges: None,
                    r: None,
                },
                m_check: None,
                q_spec: q,
                h_spec: h,
                seed,
            };
            let run = run_dc_dml(parties, &config)?;
            Ok(run
                .models
                .iter()
                .map(|u| LinearCate {
                    party_id: u.party_id,
                    beta: u.beta.clone(),
                    cov: u.cov_beta(),
                })
                .collect())
        }
        Method::NiDcDml(choice) => {
            let config = ProtocolConfig {
                reducer: cfg.reducer_spec(choice, m),
                anchor: AnchorSpec {
                    ranges: None,
                    r: None,
                },
                m_check: None,
                q_spec: q,
                h_spec: h,
                seed,
            };
            let reducers = parties
                .iter()
                .map(|p| {
                    config
                        .reducer
                        .fit(&p.data, &q, &h, config.reducer_seed(p.party_id))
                })
                .collect::<Result<Vec<_>>>()?;
            let anchor = build_anchor(parties, &config.anchor, config.anchor_seed())?;
            let mixing: Vec<u64> = parties
                .iter()
                .map(|p| mixing_seed(seed, p.party_id))
                .collect();
            let run = run_ni_dc_dml(parties, &reducers, &anchor, m, &q, &h, seed, &mixing)?;
            Ok(run
                .models
                .iter()
                .map(|u| LinearCate {
                    party_id: u.party_id,
                    beta: u.beta.clone(),
                    cov: u.cov_beta(),
                })
                .collect())
        }
    }
}

/// Score a model over the evaluation population `x`.
fn score(
    model: &LinearCate,
    x: &DMatrix<f64>,
    bench: &Benchmark,
    bench_cate: &[f64],
    bench_signs: &[SignClass],
    alpha: f64,
) -> Result<(f64, f64, f64, f64, f64)> {
    if model.beta.len() != bench.beta.len() {
        return Err(Error::DimensionMismatch(
            "model and benchmark disagree on m".into(),
        ));
    }
    let mut cates = Vec::with_capacity(x.nrows());
    let mut classes = Vec::with_capacity(x.nrows());
    for r in x.row_iter() {
        let row: Vec<f64> = r.iter().copied().collect();
        let (tau, var) = predict_cate(&model.beta, &model.cov, &row, None);
        cates.push(tau);
        classes.push(z_test(tau, var, alpha).sign_class);
    }
    let coef_classes: Vec<SignClass> = test_coefficients(&model.beta, &model.cov, alpha)
        .iter()
        .map(|t| t.sign_class)
        .collect();
    Ok((
        rmse_cate(&cates, bench_cate),
        sig_consistency(&classes, bench_signs),
        rmse_coef(model.beta.as_slice(), bench.beta.as_slice()),
        sig_consistency(&coef_classes, &bench.coef_signs),
        ate(&cates),
    ))
}

fn run_trial(cfg: &ExperimentConfig, fx: &Fixture, trial: usize) -> Result<Vec<PartyRecord>> {
    let seed = cfg.trial_seed(trial);
    let parties = trial_parties(cfg, fx, seed)?;
    let population = pool(&parties)?;
    let bench = fx.benchmark.as_ref().expect("benchmark");
    let bench_cate = bench.cate(&population.x);
    let bench_signs = bench.cate_signs(&population.x, cfg.alpha);
    let bench_ate = ate(&bench_cate);
    let mut out = Vec::new();
    for &method in &cfg.methods {
        for model in fit_method(method, &parties, cfg, seed)? {
            let (rc, sc, rb, sb, a) = score(
                &model,
                &population.x,
                bench,
                &bench_cate,
                &bench_signs,
                cfg.alpha,
            )?;
            let tests = test_coefficients(&model.beta, &model.cov, cfg.alpha);
            out.push(PartyRecord {
                trial,
                seed,
                method,
                party_id: model.party_id,
                rmse_cate: rc,
                sig_consistency_cate: sc,
                rmse_coef: rb,
                sig_consistency_coef: sb,
                ate: a,
                benchmark_ate: bench_ate,
                coefficients: model.beta.iter().copied().collect(),
                std_errors: tests.iter().map(|t| t.std_error).collect(),
                coef_signs: tests.iter().map(|t| t.sign_class).collect(),
            });
        }
    }
    Ok(out)
}

/// Run with default settings for the scenario.
pub fn run_experiment(
    scenario: Scenario,
    methods: &[Method],
    trials: usize,
    base_seed: u64,
) -> Result<EvalReport> {
    run_experiment_with(&ExperimentConfig::new(
        scenario,
        methods.to_vec(),
        trials,
        base_seed,
    ))
}

pub fn run_experiment_with(cfg: &ExperimentConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let mut fx = prepare_fixture(cfg)?;
    let per_trial = (0..cfg.trials)
        .into_par_iter()
        .map(|t| run_trial(cfg, &fx, t))
        .collect::<Result<Vec<_>>>()?;
    let records: Vec<PartyRecord> = per_trial.into_iter().flatten().collect();
    let first_parties = trial_parties(cfg, &fx, cfg.trial_seed(0))?;
    let (q, h) = cfg.learners();
    Ok(EvalReport::assemble(
        cfg,
        q,
        h,
        fx.benchmark.take().expect("benchmark"),
        fx.covariate_names,
        fx.used_fallback,
        first_parties.iter().map(|p| p.data.n()).collect(),
        records,
    ))
}
