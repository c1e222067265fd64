//! File-based front end: each protocol role runs as a separate invocation
//! and exchanges JSON files.

pub mod files;

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use dcdml_core::data::{load_csv, CsvSchema, Dataset, PartyData};
use dcdml_core::dimred::DimReducer;
use dcdml_core::dml::DEFAULT_ALPHA;
use dcdml_core::ni::{make_ni_intermediate, make_ni_return, mixing_seed, ni_user_finalize};
use dcdml_core::nuisance::{ClassifierSpec, RegressorSpec};
use dcdml_core::protocol::messages::{NiReturnMessage, ReturnMessage, ShareMessage};
use dcdml_core::protocol::{
    aggregate, analyst_fit, anchor_seed, make_intermediate, make_return, reducer_seed,
    union_ranges, user_finalize, ReducerSpec, UserCateModel, DEFAULT_SUBSAMPLE,
};
use dcdml_core::rng::derive_seed;
use dcdml_eval::experiment::{run_experiment_with, ExperimentConfig, Method, Scenario};
use dcdml_eval::EvalReport;

use files::{
    read_json, read_text, write_json, write_text, AnalystFile, CoefficientRow, ModelFile,
    ReducerState, SessionManifest, FILE_VERSION, PRIVATE_NOTICE,
};

const SESSION_STREAM: u64 = 0x5E55;

#[derive(Debug, Parser)]
#[command(
    name = "dcdml",
    version,
    about = "CATE estimation on horizontally partitioned data by data-collaboration DML"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create the public session manifest (anchor ranges, r, m_check, parties).
    NewSession(NewSessionArgs),
    /// User: reduce local data and write the share for the analyst.
    Prepare(PrepareArgs),
    /// Analyst: combine shares, fit, and write one return file per party.
    Aggregate(AggregateArgs),
    /// User: turn the analyst's return into a CATE model on raw covariates.
    Finalize(FinalizeArgs),
    /// Run a Monte-Carlo experiment and write report files.
    Simulate(SimulateArgs),
    /// Render a saved report.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ColumnArgs {
    /// Treatment column name.
    #[arg(long, default_value = "z")]
    pub treatment: String,
    /// Outcome column name.
    #[arg(long, default_value = "y")]
    pub outcome: String,
}

#[derive(Debug, Clone, Args)]
pub struct LearnerArgs {
    /// Outcome learner: ols, ridge[:lambda], rf[:trees].
    #[arg(long, default_value = "rf")]
    pub q: RegressorSpec,
    /// Propensity learner: logistic[:lambda], rf[:trees].
    #[arg(long, default_value = "rf")]
    pub h: ClassifierSpec,
}

#[derive(Debug, Args)]
pub struct NewSessionArgs {
    /// Party CSV files used to derive anchor ranges and r; party ids follow file order.
    #[arg(long = "data")]
    pub data: Vec<PathBuf>,
    /// JSON list of [min, max] pairs, instead of --data.
    #[arg(long, conflicts_with = "data")]
    pub ranges: Option<PathBuf>,
    /// Anchor rows; defaults to the total row count of --data.
    #[arg(long)]
    pub r: Option<usize>,
    /// Party ids; defaults to 1..=number of --data files.
    #[arg(long, value_delimiter = ',')]
    pub party_ids: Vec<usize>,
    /// Collaborative dimension; defaults to m.
    #[arg(long)]
    pub m_check: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub columns: ColumnArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReducerKindArg {
    Identity,
    Pca,
    Bootstrap,
    #[value(name = "pca+b")]
    PcaB,
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub party_id: usize,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value = "pca+b")]
    pub reducer: ReducerKindArg,
    /// Reduced dimension; defaults to m - 1.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Bootstrap columns within pca+b; defaults to ceil(m / 10).
    #[arg(long)]
    pub bs_dim: Option<usize>,
    /// Subsample fraction for bootstrap columns.
    #[arg(long, default_value_t = DEFAULT_SUBSAMPLE)]
    pub p: f64,
    #[command(flatten)]
    pub learners: LearnerArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Mix and permute the share so the analyst cannot undo the reduction.
    #[arg(long)]
    pub ni: bool,
    #[command(flatten)]
    pub columns: ColumnArgs,
    /// Share file for the analyst.
    #[arg(long)]
    pub out: PathBuf,
    /// Private reducer state kept by this user.
    #[arg(long)]
    pub state: PathBuf,
}

#[derive(Debug, Args)]
pub struct AggregateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Share files; repeat the flag or use --shares-dir.
    #[arg(long = "share")]
    pub shares: Vec<PathBuf>,
    /// Read every *.json file in this directory as a share.
    #[arg(long)]
    pub shares_dir: Option<PathBuf>,
    /// Overrides the manifest's collaborative dimension.
    #[arg(long)]
    pub m_check: Option<usize>,
    #[command(flatten)]
    pub learners: LearnerArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Return anchor-space packages for mixed shares.
    #[arg(long)]
    pub ni: bool,
    /// Receives return_<party>.json and analyst_fit.json.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct FinalizeArgs {
    #[arg(long = "return")]
    pub ret: PathBuf,
    #[arg(long)]
    pub state: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub ni: bool,
    /// Covariate names for the printed table; defaults to x1..xm.
    #[arg(long, value_delimiter = ',')]
    pub names: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// sim1, sim2, or sim3:<financial|jobs>:<A|B|C>.
    #[arg(long, default_value = "sim1")]
    pub scenario: Scenario,
    /// Comma-separated methods, e.g. ca,ia,dc-pca+b,ni-pca+b,sr.
    #[arg(long, value_delimiter = ',', default_value = "ca,ia,dc-pca+b")]
    pub methods: Vec<Method>,
    #[arg(long, default_value_t = 10)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Overrides the scenario's outcome learner.
    #[arg(long)]
    pub q: Option<RegressorSpec>,
    /// Overrides the scenario's propensity learner.
    #[arg(long)]
    pub h: Option<ClassifierSpec>,
    /// CA-DML runs averaged into the real-data benchmark.
    #[arg(long, default_value_t = dcdml_eval::experiment::DEFAULT_BENCHMARK_TRIALS)]
    pub benchmark_trials: usize,
    /// Dataset directory; defaults to $DCDML_DATA_DIR.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Fail instead of using synthetic stand-ins for missing datasets.
    #[arg(long)]
    pub no_fallback: bool,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f64,
    /// Directory for report.json, records.csv and summary.md.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Md,
    Csv,
    Json,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// CSV with columns method,metric,mean,std to show alongside.
    #[arg(long)]
    pub external: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "md")]
    pub format: ReportFormat,
    /// Write here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::NewSession(a) => new_session(&a),
        Command::Prepare(a) => prepare(&a),
        Command::Aggregate(a) => aggregate_cmd(&a),
        Command::Finalize(a) => finalize(&a),
        Command::Simulate(a) => simulate(&a),
        Command::Report(a) => report(&a),
    }
}

fn load_party(path: &Path, columns: &ColumnArgs) -> Result<Dataset> {
    load_csv(path, &CsvSchema::new(&columns.treatment, &columns.outcome))
        .with_context(|| format!("loading {}", path.display()))
}

pub fn new_session(a: &NewSessionArgs) -> Result<()> {
    let (ranges, r_default, parties) = if let Some(path) = &a.ranges {
        let ranges: Vec<(f64, f64)> = read_json(path)?;
        ensure!(
            !a.party_ids.is_empty(),
            "--party-ids is required with --ranges"
        );
        (ranges, None, a.party_ids.clone())
    } else {
        ensure!(!a.data.is_empty(), "give --data files or --ranges");
        let data = a
            .data
            .iter()
            .map(|p| load_party(p, &a.columns))
            .collect::<Result<Vec<_>>>()?;
        let ids = if a.party_ids.is_empty() {
            (1..=data.len()).collect()
        } else {
            a.party_ids.clone()
        };
        ensure!(
            ids.len() == data.len(),
            "{} party ids for {} data files",
            ids.len(),
            data.len()
        );
        let n: usize = data.iter().map(Dataset::n).sum();
        (union_ranges(data.iter())?, Some(n), ids)
    };
    let mut sorted = parties.clone();
    sorted.sort_unstable();
    sorted.dedup();
    ensure!(sorted.len() == parties.len(), "duplicate party ids");
    let m = ranges.len();
    let r = a.r.or(r_default).context("--r is required with --ranges")?;
    let manifest = SessionManifest {
        v: FILE_VERSION,
        session_id: format!("{:016x}", derive_seed(a.seed, SESSION_STREAM)),
        m,
        m_check: a.m_check.unwrap_or(m),
        r,
        anchor_ranges: ranges,
        anchor_seed: anchor_seed(a.seed),
        parties,
        treatment_column: a.columns.treatment.clone(),
        outcome_column: a.columns.outcome.clone(),
        schema_versions: SessionManifest::schema_versions(),
    };
    manifest.check()?;
    manifest.anchor()?;
    write_json(&a.out, &manifest)?;
    println!(
        "session {} (m = {}, r = {}, m_check = {}) -> {}",
        manifest.session_id,
        m,
        r,
        manifest.m_check,
        a.out.display()
    );
    Ok(())
}

fn reducer_spec(a: &PrepareArgs, m: usize) -> Result<ReducerSpec> {
    let dim = a.dim.unwrap_or(m.saturating_sub(1).max(1));
    ensure!(dim >= 1 && dim <= m, "--dim must be in 1..={m}");
    Ok(match a.reducer {
        ReducerKindArg::Identity => ReducerSpec::Identity,
        ReducerKindArg::Pca => ReducerSpec::Pca { dim },
        ReducerKindArg::Bootstrap => ReducerSpec::Bootstrap { dim, p: a.p },
        ReducerKindArg::PcaB => ReducerSpec::PcaPlusBootstrap {
            dim,
            bs_dim: a.bs_dim.unwrap_or(m.div_ceil(10)),
            p: a.p,
        },
    })
}

pub fn prepare(a: &PrepareArgs) -> Result<()> {
    let manifest: SessionManifest = read_json(&a.manifest)?;
    manifest.check()?;
    ensure!(
        manifest.parties.contains(&a.party_id),
        "party {} is not listed in the manifest",
        a.party_id
    );
    let data = load_party(&a.data, &a.columns)?;
    ensure!(
        data.m() == manifest.m,
        "data has {} covariates, manifest expects {}",
        data.m(),
        manifest.m
    );
    let party = PartyData {
        party_id: a.party_id,
        data,
    };
    let spec = reducer_spec(a, manifest.m)?;
    let reducer = spec.fit(
        &party.data,
        &a.learners.q,
        &a.learners.h,
        reducer_seed(a.seed, a.party_id),
    )?;
    let anchor = manifest.anchor()?;
    let share = if a.ni {
        make_ni_intermediate(&party, &reducer, &anchor, mixing_seed(a.seed, a.party_id))?
    } else {
        make_intermediate(&party, &reducer, &anchor)?
    };
    let state = ReducerState {
        notice: PRIVATE_NOTICE.into(),
        v: FILE_VERSION,
        session_id: manifest.session_id.clone(),
        party_id: a.party_id,
        ni: a.ni,
        reducer,
    };
    write_json(&a.state, &state)?;
    write_text(&a.out, &ShareMessage::from_share(&share).to_json()?)?;
    println!(
        "party {}: {} rows reduced to {} columns ({}) -> {}",
        a.party_id,
        party.data.n(),
        state.reducer.m_tilde(),
        spec.label(),
        a.out.display()
    );
    Ok(())
}

fn share_paths(a: &AggregateArgs) -> Result<Vec<PathBuf>> {
    let mut paths = a.shares.clone();
    if let Some(dir) = &a.shares_dir {
        let mut found: Vec<PathBuf> = std::fs::read_dir(dir)
            .with_context(|| format!("listing {}", dir.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        found.sort();
        paths.extend(found);
    }
    ensure!(!paths.is_empty(), "no shares given");
    Ok(paths)
}

pub fn aggregate_cmd(a: &AggregateArgs) -> Result<()> {
    let manifest: SessionManifest = read_json(&a.manifest)?;
    manifest.check()?;
    let mut shares = Vec::new();
    for path in share_paths(a)? {
        let msg = ShareMessage::from_json(&read_text(&path)?)
            .with_context(|| format!("rejected share {}", path.display()))?;
        ensure!(
            msg.r == manifest.r,
            "{}: r = {} but the session uses r = {}",
            path.display(),
            msg.r,
            manifest.r
        );
        ensure!(
            manifest.parties.contains(&msg.party_id),
            "{}: party {} is not in the session",
            path.display(),
            msg.party_id
        );
        shares.push(msg.into_share()?);
    }
    let m_check = a.m_check.unwrap_or(manifest.m_check);
    let session = aggregate(&shares, m_check)?;
    let fit = analyst_fit(&session, &a.learners.q, &a.learners.h, a.seed)?;
    std::fs::create_dir_all(&a.out_dir)
        .with_context(|| format!("creating {}", a.out_dir.display()))?;
    for &pid in &session.party_ids {
        let body = if a.ni {
            NiReturnMessage::from_package(&make_ni_return(&fit, &session, pid)?).to_json()?
        } else {
            ReturnMessage::from_package(&make_return(&fit, &session, pid)?).to_json()?
        };
        write_text(&a.out_dir.join(format!("return_{pid}.json")), &body)?;
    }
    let file = AnalystFile {
        v: FILE_VERSION,
        session_id: manifest.session_id.clone(),
        ni: a.ni,
        parties: session.party_ids.clone(),
        m_check: session.m_check,
        svd_residual: session.svd_residual,
        max_anchor_misalignment: session.max_anchor_misalignment(),
        fit,
    };
    write_json(&a.out_dir.join("analyst_fit.json"), &file)?;
    println!(
        "{} shares, n = {}, m_check = {}, svd residual {:.3e}; returns in {}",
        shares.len(),
        session.n(),
        session.m_check,
        session.svd_residual,
        a.out_dir.display()
    );
    Ok(())
}

/// Back-transform a return file with the private state.
pub fn finalize_model(
    manifest: &SessionManifest,
    state: &ReducerState,
    ret_json: &str,
    ni: bool,
) -> Result<UserCateModel> {
    if state.session_id != manifest.session_id {
        bail!(
            "state belongs to session {}, manifest is {}",
            state.session_id,
            manifest.session_id
        );
    }
    if state.ni != ni {
        bail!(
            "share was prepared with ni = {}, finalize called with ni = {ni}",
            state.ni
        );
    }
    let reducer: &DimReducer = &state.reducer;
    let model = if ni {
        let pkg = NiReturnMessage::from_json(ret_json)?.into_package()?;
        ensure!(
            pkg.party_id == state.party_id,
            "return is for party {}, state for {}",
            pkg.party_id,
            state.party_id
        );
        ni_user_finalize(&manifest.anchor()?, &pkg, &reducer.mu)?
    } else {
        let pkg = ReturnMessage::from_json(ret_json)?.into_package()?;
        ensure!(
            pkg.party_id == state.party_id,
            "return is for party {}, state for {}",
            pkg.party_id,
            state.party_id
        );
        user_finalize(reducer, &pkg)?
    };
    Ok(model)
}

pub fn coefficient_table(names: &[String], model: &UserCateModel) -> Vec<CoefficientRow> {
    model
        .coefficient_tests(DEFAULT_ALPHA)
        .into_iter()
        .enumerate()
        .map(|(j, test)| CoefficientRow {
            name: if j == 0 {
                "const".into()
            } else {
                names[j - 1].clone()
            },
            stars: test.stars().into(),
            test,
        })
        .collect()
}

pub fn finalize(a: &FinalizeArgs) -> Result<()> {
    let manifest: SessionManifest = read_json(&a.manifest)?;
    manifest.check()?;
    let text = read_text(&a.state)?;
    let state: ReducerState =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", a.state.display()))?;
    let model = finalize_model(&manifest, &state, &read_text(&a.ret)?, a.ni)?;
    let names = if a.names.is_empty() {
        dcdml_core::data::default_names(model.m())
    } else {
        a.names.clone()
    };
    ensure!(
        names.len() == model.m(),
        "{} names for {} covariates",
        names.len(),
        model.m()
    );
    let rows = coefficient_table(&names, &model);
    println!("party {} CATE coefficients", state.party_id);
    println!(
        "{:<12} {:>14} {:>12} {:>9} {:>9}",
        "coefficient", "estimate", "std.err", "z", "p"
    );
    for r in &rows {
        println!(
            "{:<12} {:>14.6} {:>12.6} {:>9.3} {:>9.4} {}",
            r.name, r.test.estimate, r.test.std_error, r.test.z_stat, r.test.p_value, r.stars
        );
    }
    let file = ModelFile {
        v: FILE_VERSION,
        session_id: manifest.session_id,
        party_id: state.party_id,
        covariate_names: names,
        model,
        coefficients: rows,
    };
    write_json(&a.out, &file)
}

pub fn simulate(a: &SimulateArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::new(a.scenario, a.methods.clone(), a.trials, a.seed);
    cfg.q_spec = a.q;
    cfg.h_spec = a.h;
    cfg.benchmark_trials = a.benchmark_trials;
    if a.data_dir.is_some() {
        cfg.data_dir = a.data_dir.clone();
    }
    cfg.allow_fallback = !a.no_fallback;
    cfg.alpha = a.alpha;
    let report = run_experiment_with(&cfg)?;
    if report.settings.used_fallback_data {
        log::warn!("dataset file not found; used a synthetic stand-in");
    }
    report.write_all(&a.out)?;
    print!("{}", report.to_markdown());
    Ok(())
}

pub fn report(a: &ReportArgs) -> Result<()> {
    let mut rep = EvalReport::from_json(&read_text(&a.input)?)?;
    if let Some(ext) = &a.external {
        rep.import_external(ext)?;
    }
    let body = match a.format {
        ReportFormat::Md => rep.to_markdown(),
        ReportFormat::Csv => rep.to_csv()?,
        ReportFormat::Json => rep.to_json()?,
    };
    match &a.out {
        Some(p) => write_text(p, &body),
        None => {
            print!("{body}");
            Ok(())
        }
    }
}
