use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use dcdml_core::dml::SignClass;

pub fn rmse_cate(estimated: &[f64], benchmark: &[f64]) -> f64 {
    assert_eq!(estimated.len(), benchmark.len(), "length mismatch");
    let sq: f64 = estimated
        .iter()
        .zip(benchmark)
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    (sq / estimated.len() as f64).sqrt()
}

/// Fraction of positions whose test class equals the benchmark class.
pub fn sig_consistency(tests: &[SignClass], benchmark: &[SignClass]) -> f64 {
    assert_eq!(tests.len(), benchmark.len(), "length mismatch");
    if tests.is_empty() {
        return 0.0;
    }
    tests.iter().zip(benchmark).filter(|(a, b)| a == b).count() as f64 / tests.len() as f64
}

pub fn sig_consistency_cate(tests: &[SignClass], benchmark: &[SignClass]) -> f64 {
    sig_consistency(tests, benchmark)
}

pub fn sig_consistency_coef(tests: &[SignClass], benchmark: &[SignClass]) -> f64 {
    sig_consistency(tests, benchmark)
}

/// `sqrt(sum_j (est_j - bm_j)^2 / (m + 1))`.
pub fn rmse_coef(beta_est: &[f64], beta_bm: &[f64]) -> f64 {
    rmse_cate(beta_est, beta_bm)
}

pub fn ate(cates: &[f64]) -> f64 {
    cates.iter().sum::<f64>() / cates.len() as f64
}

/// Benchmark class of a known true value: its sign, zero meaning no effect.
pub fn true_sign(v: f64) -> SignClass {
    if v > 0.0 {
        SignClass::Positive
    } else if v < 0.0 {
        SignClass::Negative
    } else {
        SignClass::NotSignificant
    }
}

/// Most frequent class; ties resolve toward `NotSignificant`, then `Positive`.
pub fn majority_class(classes: &[SignClass]) -> SignClass {
    let count = |c: SignClass| classes.iter().filter(|x| **x == c).count();
    let order = [
        SignClass::NotSignificant,
        SignClass::Positive,
        SignClass::Negative,
    ];
    let mut best = order[0];
    for c in order {
        if count(c) > count(best) {
            best = c;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Flag {
    #[serde(rename = "+")]
    Better,
    #[serde(rename = "-")]
    Worse,
    #[serde(rename = "0")]
    NoDifference,
}

impl Flag {
    pub fn symbol(self) -> &'static str {
        match self {
            Self::Better => "(+)",
            Self::Worse => "(-)",
            Self::NoDifference => "(0)",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchTest {
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = if x.len() > 1 {
        x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var)
}

/// Unpaired two-sample t-test without the equal-variance assumption.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> WelchTest {
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let se2 = va / na + vb / nb;
    if se2 == 0.0 {
        let t = if ma == mb {
            0.0
        } else {
            (ma - mb).signum() * f64::INFINITY
        };
        return WelchTest {
            t,
            df: f64::INFINITY,
            p_value: if ma == mb { 1.0 } else { 0.0 },
        };
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2.powi(2)
        / ((va / na).powi(2) / (na - 1.0).max(1.0) + (vb / nb).powi(2) / (nb - 1.0).max(1.0));
    let p_value = match StudentsT::new(0.0, 1.0, df) {
        Ok(dist) => (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0),
        Err(_) => 1.0,
    };
    WelchTest { t, df, p_value }
}

/// Compare `method` against `baseline` with a Welch test; `Better` when the
/// difference is significant in the favourable direction.
pub fn welch_flag(method: &[f64], baseline: &[f64], lower_is_better: bool, alpha: f64) -> Flag {
    if method.len() < 2 || baseline.len() < 2 {
        return Flag::NoDifference;
    }
    let test = welch_t_test(method, baseline);
    if test.p_value >= alpha || test.t == 0.0 {
        return Flag::NoDifference;
    }
    if (test.t < 0.0) == lower_is_better {
        Flag::Better
    } else {
        Flag::Worse
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation; absent for a single value.
    pub std: Option<f64>,
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
    pub n: usize,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn summarize(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let (mean, var) = mean_var(values);
    Some(Summary {
        mean,
        std: (values.len() > 1).then(|| var.sqrt()),
        min: s[0],
        q25: quantile(&s, 0.25),
        median: quantile(&s, 0.5),
        q75: quantile(&s, 0.75),
        max: s[s.len() - 1],
        n: values.len(),
    })
}
