use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use dcdml_core::dml::{z_test, SignClass};
use dcdml_core::nuisance::{ClassifierSpec, RegressorSpec};
use dcdml_core::{Error, Result};

use crate::experiment::{Benchmark, ExperimentConfig, Method, PartyRecord, Scenario};
use crate::metrics::{summarize, welch_flag, Flag, Summary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    RmseCate,
    SigConsistencyCate,
    RmseCoef,
    SigConsistencyCoef,
    Ate,
}

impl Metric {
    pub const ALL: [Metric; 5] = [
        Self::RmseCate,
        Self::SigConsistencyCate,
        Self::RmseCoef,
        Self::SigConsistencyCoef,
        Self::Ate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::RmseCate => "rmse_cate",
            Self::SigConsistencyCate => "sig_consistency_cate",
            Self::RmseCoef => "rmse_coef",
            Self::SigConsistencyCoef => "sig_consistency_coef",
            Self::Ate => "ate",
        }
    }

    fn value(self, r: &PartyRecord) -> f64 {
        match self {
            Self::RmseCate => r.rmse_cate,
            Self::SigConsistencyCate => r.sig_consistency_cate,
            Self::RmseCoef => r.rmse_coef,
            Self::SigConsistencyCoef => r.sig_consistency_coef,
            Self::Ate => r.ate,
        }
    }

    /// Quantity the flag compares, with `true` when lower is better.
    fn loss(self, r: &PartyRecord) -> (f64, bool) {
        match self {
            Self::RmseCate | Self::RmseCoef => (self.value(r), true),
            Self::SigConsistencyCate | Self::SigConsistencyCoef => (self.value(r), false),
            Self::Ate => ((r.ate - r.benchmark_ate).abs(), true),
        }
    }
}

/// Aggregate of one metric for one method, over one party or all parties.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub method: Method,
    /// `None` pools all parties.
    pub party_id: Option<usize>,
    pub metric: Metric,
    pub summary: Summary,
    /// Welch test against IA-DML; `+` means better. Absent for IA-DML itself,
    /// for single-trial runs, or when IA-DML was not run.
    pub flag_vs_ia: Option<Flag>,
}

/// Per-coefficient aggregate across trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefSummary {
    pub method: Method,
    pub party_id: usize,
    pub coefficient: String,
    pub benchmark: f64,
    pub mean: f64,
    pub std: Option<f64>,
    pub mean_std_error: f64,
    pub frac_positive: f64,
    pub frac_negative: f64,
    pub frac_not_significant: f64,
}

/// Externally computed numbers shown next to ours.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalResult {
    pub method: String,
    pub metric: String,
    pub mean: f64,
    pub std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSettings {
    pub q_spec: RegressorSpec,
    pub h_spec: ClassifierSpec,
    pub alpha: f64,
    pub subsample: f64,
    pub data_seed: u64,
    pub benchmark_trials: Option<usize>,
    pub used_fallback_data: bool,
    pub flag_test: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenario: Scenario,
    pub methods: Vec<Method>,
    pub trials: usize,
    pub base_seed: u64,
    pub trial_seeds: Vec<u64>,
    /// Party sizes of the first trial.
    pub party_sizes: Vec<usize>,
    pub n: usize,
    pub m: usize,
    pub covariate_names: Vec<String>,
    pub settings: ReportSettings,
    pub benchmark: Benchmark,
    pub records: Vec<PartyRecord>,
    pub summaries: Vec<MetricSummary>,
    pub coefficients: Vec<CoefSummary>,
    #[serde(default)]
    pub external: Vec<ExternalResult>,
}

impl EvalReport {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn assemble(
        cfg: &ExperimentConfig,
        q_spec: RegressorSpec,
        h_spec: ClassifierSpec,
        benchmark: Benchmark,
        covariate_names: Vec<String>,
        used_fallback: bool,
        party_sizes: Vec<usize>,
        records: Vec<PartyRecord>,
    ) -> Self {
        let mut parties: Vec<usize> = records.iter().map(|r| r.party_id).collect();
        parties.sort_unstable();
        parties.dedup();
        let mut summaries = Vec::new();
        for &method in &cfg.methods {
            for party in std::iter::once(None).chain(parties.iter().map(|p| Some(*p))) {
                for metric in Metric::ALL {
                    summaries.extend(metric_summary(
                        &records, method, party, metric, cfg.alpha, cfg.trials,
                    ));
                }
            }
        }
        let mut names = vec!["const".to_string()];
        names.extend(covariate_names.iter().cloned());
        let mut coefficients = Vec::new();
        for &method in &cfg.methods {
            for &party in &parties {
                let rs: Vec<&PartyRecord> = records
                    .iter()
                    .filter(|r| r.method == method && r.party_id == party)
                    .collect();
                if rs.is_empty() {
                    continue;
                }
                for (j, name) in names.iter().enumerate() {
                    let est: Vec<f64> = rs.iter().map(|r| r.coefficients[j]).collect();
                    let s = summarize(&est).expect("non-empty");
                    let frac = |c: SignClass| {
                        rs.iter().filter(|r| r.coef_signs[j] == c).count() as f64 / rs.len() as f64
                    };
                    coefficients.push(CoefSummary {
                        method,
                        party_id: party,
                        coefficient: name.clone(),
                        benchmark: benchmark.beta[j],
                        mean: s.mean,
                        std: s.std,
                        mean_std_error: rs.iter().map(|r| r.std_errors[j]).sum::<f64>()
                            / rs.len() as f64,
                        frac_positive: frac(SignClass::Positive),
                        frac_negative: frac(SignClass::Negative),
                        frac_not_significant: frac(SignClass::NotSignificant),
                    });
                }
            }
        }
        let benchmark_trials =
            matches!(cfg.scenario, Scenario::Sim3 { .. }).then_some(cfg.benchmark_trials.max(1));
        Self {
            scenario: cfg.scenario,
            methods: cfg.methods.clone(),
            trials: cfg.trials,
            base_seed: cfg.base_seed,
            trial_seeds: (0..cfg.trials).map(|t| cfg.trial_seed(t)).collect(),
            n: party_sizes.iter().sum(),
            party_sizes,
            m: covariate_names.len(),
            covariate_names,
            settings: ReportSettings {
                q_spec,
                h_spec,
                alpha: cfg.alpha,
                subsample: cfg.subsample,
                data_seed: cfg.data_seed,
                benchmark_trials,
                used_fallback_data: used_fallback,
                flag_test: "Welch unpaired t-test vs IA-DML".into(),
            },
            benchmark,
            records,
            summaries,
            coefficients,
            external: Vec::new(),
        }
    }

    pub fn summary(
        &self,
        method: Method,
        party_id: Option<usize>,
        metric: Metric,
    ) -> Option<&MetricSummary> {
        self.summaries
            .iter()
            .find(|s| s.method == method && s.party_id == party_id && s.metric == metric)
    }

    pub fn records_for(&self, method: Method) -> impl Iterator<Item = &PartyRecord> {
        self.records.iter().filter(move |r| r.method == method)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// One row per method, party and trial.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "trial",
            "seed",
            "method",
            "party",
            "rmse_cate",
            "sig_consistency_cate",
            "rmse_coef",
            "sig_consistency_coef",
            "ate",
            "benchmark_ate",
        ])?;
        for r in &self.records {
            w.write_record([
                r.trial.to_string(),
                r.seed.to_string(),
                r.method.label(),
                r.party_id.to_string(),
                r.rmse_cate.to_string(),
                r.sig_consistency_cate.to_string(),
                r.rmse_coef.to_string(),
                r.sig_consistency_coef.to_string(),
                r.ate.to_string(),
                r.benchmark_ate.to_string(),
            ])?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::InvalidData(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::InvalidData(e.to_string()))
    }

    /// Load rows `method,metric,mean[,std]` for side-by-side display.
    pub fn import_external(&mut self, path: &Path) -> Result<usize> {
        #[derive(Deserialize)]
        struct Row {
            method: String,
            metric: String,
            mean: f64,
            std: Option<f64>,
        }
        let mut rdr = csv::Reader::from_path(path)?;
        let mut count = 0;
        for row in rdr.deserialize::<Row>() {
            let row = row?;
            self.external.push(ExternalResult {
                method: row.method,
                metric: row.metric,
                mean: row.mean,
                std: row.std,
            });
            count += 1;
        }
        Ok(count)
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# {} ({} trials, base seed {})\n",
            self.scenario, self.trials, self.base_seed
        );
        let _ = writeln!(
            out,
            "n = {} ({}), m = {}, q = {}, h = {}, benchmark: {}{}\n",
            self.n,
            self.party_sizes
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(" + "),
            self.m,
            self.settings.q_spec,
            self.settings.h_spec,
            self.benchmark.source,
            if self.settings.used_fallback_data {
                " (synthetic fallback data)"
            } else {
                ""
            }
        );
        let _ = writeln!(out, "## Evaluation measures\n");
        let _ = writeln!(
            out,
            "Mean (std) over parties and trials; flags from a {}, (+) = better.\n",
            self.settings.flag_test
        );
        let _ = writeln!(
            out,
            "| Method | Party | RMSE CATE | Sig. CATE | RMSE coef | Sig. coef | ATE |"
        );
        let _ = writeln!(out, "|---|---|---|---|---|---|---|");
        let mut parties: Vec<Option<usize>> = vec![None];
        let mut ids: Vec<usize> = self.records.iter().map(|r| r.party_id).collect();
        ids.sort_unstable();
        ids.dedup();
        parties.extend(ids.iter().map(|p| Some(*p)));
        for &method in &self.methods {
            for &party in &parties {
                let cells: Vec<String> = Metric::ALL
                    .iter()
                    .map(|&metric| match self.summary(method, party, metric) {
                        Some(s) => format_cell(s),
                        None => "-".into(),
                    })
                    .collect();
                let p = party.map_or("all".to_string(), |p| p.to_string());
                let _ = writeln!(out, "| {} | {} | {} |", method, p, cells.join(" | "));
            }
        }
        let _ = writeln!(out, "\n## Coefficients\n");
        let single = self.trials == 1;
        if single {
            let _ = writeln!(
                out,
                "Estimate with significance (** p < 0.01, * p < 0.05).\n"
            );
        } else {
            let _ = writeln!(
                out,
                "Mean estimate [share significantly positive / negative].\n"
            );
        }
        let cols: Vec<(Method, usize)> = self
            .methods
            .iter()
            .flat_map(|m| ids.iter().map(move |p| (*m, *p)))
            .filter(|(m, p)| {
                self.coefficients
                    .iter()
                    .any(|c| c.method == *m && c.party_id == *p)
            })
            .collect();
        let header: Vec<String> = cols.iter().map(|(m, p)| format!("{m} P{p}")).collect();
        let _ = writeln!(out, "| Coefficient | Benchmark | {} |", header.join(" | "));
        let _ = writeln!(out, "|---|---|{}", "---|".repeat(cols.len()));
        let mut names = vec!["const".to_string()];
        names.extend(self.covariate_names.iter().cloned());
        for (j, name) in names.iter().enumerate() {
            let cells: Vec<String> = cols
                .iter()
                .map(|(m, p)| {
                    let c = self
                        .coefficients
                        .iter()
                        .find(|c| c.method == *m && c.party_id == *p && c.coefficient == *name)
                        .expect("coefficient row");
                    if single {
                        let stars =
                            z_test(c.mean, c.mean_std_error.powi(2), self.settings.alpha).stars();
                        format!("{:.4}{}", c.mean, stars)
                    } else {
                        format!(
                            "{:.4} [{:.0}%/{:.0}%]",
                            c.mean,
                            100.0 * c.frac_positive,
                            100.0 * c.frac_negative
                        )
                    }
                })
                .collect();
            let _ = writeln!(
                out,
                "| {} | {:.4} | {} |",
                name,
                self.benchmark.beta[j],
                cells.join(" | ")
            );
        }
        if !self.external.is_empty() {
            let _ = writeln!(out, "\n## External results\n");
            let _ = writeln!(out, "| Method | Metric | Mean | Std |");
            let _ = writeln!(out, "|---|---|---|---|");
            for e in &self.external {
                let std = e.std.map_or("-".to_string(), |s| format!("{s:.4}"));
                let _ = writeln!(
                    out,
                    "| {} | {} | {:.4} | {} |",
                    e.method, e.metric, e.mean, std
                );
            }
        }
        out
    }

    /// Write `report.json`, `records.csv` and `summary.md` into `dir`.
    pub fn write_all(&self, dir: &Path) -> Result<()> {
        let io = |path: &Path, e: std::io::Error| Error::Io {
            path: path.display().to_string(),
            source: e,
        };
        std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        for (name, body) in [
            ("report.json", self.to_json()?),
            ("records.csv", self.to_csv()?),
            ("summary.md", self.to_markdown()),
        ] {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|e| io(&path, e))?;
        }
        Ok(())
    }
}

fn format_cell(s: &MetricSummary) -> String {
    let std = s
        .summary
        .std
        .map_or(String::new(), |v| format!(" ({v:.4})"));
    let flag = s
        .flag_vs_ia
        .map_or(String::new(), |f| format!(" {}", f.symbol()));
    format!("{:.4}{std}{flag}", s.summary.mean)
}

fn metric_summary(
    records: &[PartyRecord],
    method: Method,
    party: Option<usize>,
    metric: Metric,
    alpha: f64,
    trials: usize,
) -> Option<MetricSummary> {
    let select = |m: Method| -> Vec<&PartyRecord> {
        records
            .iter()
            .filter(|r| r.method == m && party.is_none_or(|p| r.party_id == p))
            .collect()
    };
    let own = select(method);
    let values: Vec<f64> = own.iter().map(|r| metric.value(r)).collect();
    let summary = summarize(&values)?;
    let flag_vs_ia = if method == Method::IaDml || trials < 2 {
        None
    } else {
        let ia = select(Method::IaDml);
        (!ia.is_empty()).then(|| {
            let lower = metric.loss(own[0]).1;
            let a: Vec<f64> = own.iter().map(|r| metric.loss(r).0).collect();
            let b: Vec<f64> = ia.iter().map(|r| metric.loss(r).0).collect();
            welch_flag(&a, &b, lower, alpha)
        })
    };
    Some(MetricSummary {
        method,
        party_id: party,
        metric,
        summary,
        flag_vs_ia,
    })
}
