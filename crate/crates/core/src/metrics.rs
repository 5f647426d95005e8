//! Treatment-effect evaluation metrics.
//!
//! `pehe` and `eps_ate` compare predictions with the true effects
//! `mu1 - mu0`; `eps_att` and `policy_risk` use the randomized subset
//! flagged by `e`. [`evaluate`] computes whichever of them the dataset
//! supports and records why the others are missing.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("empty input")]
    Empty,
    #[error("{0}")]
    Unavailable(String),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

pub const NO_GROUND_TRUTH: &str = "no potential-outcome columns (mu0, mu1)";
pub const NO_RANDOMIZED_FLAG: &str = "no randomized-subset flag";

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch { left: a.len(), right: b.len() });
    }
    if a.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(())
}

fn mean(v: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Root mean squared difference between estimated and true effects.
pub fn pehe(tau_hat: &[f64], tau: &[f64]) -> Result<f64> {
    check_pair(tau_hat, tau)?;
    let mse = tau_hat.iter().zip(tau).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / tau.len() as f64;
    Ok(mse.sqrt())
}

/// Absolute difference between mean estimated and mean true effect.
pub fn eps_ate(tau_hat: &[f64], tau: &[f64]) -> Result<f64> {
    check_pair(tau_hat, tau)?;
    let n = tau.len() as f64;
    Ok((tau_hat.iter().sum::<f64>() / n - tau.iter().sum::<f64>() / n).abs())
}

fn randomized(ds: &Dataset, tau_hat: &[f64]) -> Result<Vec<usize>> {
    if tau_hat.len() != ds.n() {
        return Err(MetricsError::LengthMismatch { left: tau_hat.len(), right: ds.n() });
    }
    let e = ds.e.as_ref().ok_or_else(|| MetricsError::Unavailable(NO_RANDOMIZED_FLAG.into()))?;
    Ok((0..ds.n()).filter(|&i| e[i] == 1).collect())
}

/// Error on the effect on the treated within the randomized subset:
/// `|ATT - mean(tau_hat over randomized treated rows)|`, where ATT is the
/// subset's difference in mean outcomes.
pub fn eps_att(ds: &Dataset, tau_hat: &[f64]) -> Result<f64> {
    let rows = randomized(ds, tau_hat)?;
    let arm = |t: u8| mean(rows.iter().filter(|&&i| ds.w[i] == t).map(|&i| ds.y[i]));
    let (Some(m1), Some(m0)) = (arm(1), arm(0)) else {
        return Err(MetricsError::Unavailable("randomized subset lacks treated or control rows".into()));
    };
    let att_hat = mean(rows.iter().filter(|&&i| ds.w[i] == 1).map(|&i| tau_hat[i])).unwrap_or(0.0);
    Ok((m1 - m0 - att_hat).abs())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyRisk {
    pub value: f64,
    pub warnings: Vec<String>,
}

/// Policy risk of treating exactly the rows with `tau_hat > lambda`,
/// estimated on the randomized subset. Larger outcomes are better. An empty
/// conditional-mean cell contributes 0 and adds a warning.
pub fn policy_risk(ds: &Dataset, tau_hat: &[f64], lambda: f64) -> Result<PolicyRisk> {
    let rows = randomized(ds, tau_hat)?;
    if rows.is_empty() {
        return Err(MetricsError::Unavailable("randomized subset is empty".into()));
    }
    let treat = |i: usize| tau_hat[i] > lambda;
    let p1 = rows.iter().filter(|&&i| treat(i)).count() as f64 / rows.len() as f64;
    let mut warnings = Vec::new();
    let mut cell = |w: u8, pi: bool, label: &str| {
        mean(rows.iter().filter(|&&i| ds.w[i] == w && treat(i) == pi).map(|&i| ds.y[i])).unwrap_or_else(|| {
            warnings.push(format!("policy risk: no randomized rows that are {label}"));
            0.0
        })
    };
    let m1 = cell(1, true, "treated and recommended treatment");
    let m0 = cell(0, false, "controls and recommended control");
    Ok(PolicyRisk { value: 1.0 - (m1 * p1 + m0 * (1.0 - p1)), warnings })
}

/// Every metric the dataset supports.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub pehe: Option<f64>,
    pub eps_ate: Option<f64>,
    pub eps_att: Option<f64>,
    pub r_pol: Option<f64>,
    /// Metric name to the reason it was not computed.
    pub absent: BTreeMap<String, String>,
    pub warnings: Vec<String>,
}

pub const METRIC_NAMES: [&str; 4] = ["pehe", "eps_ate", "eps_att", "r_pol"];

impl MetricsReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        match name {
            "pehe" => self.pehe,
            "eps_ate" => self.eps_ate,
            "eps_att" => self.eps_att,
            "r_pol" => self.r_pol,
            _ => None,
        }
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for name in METRIC_NAMES {
            match (self.get(name), self.absent.get(name)) {
                (Some(v), _) => {
                    let _ = writeln!(s, "{name}: {v}");
                }
                (None, Some(why)) => {
                    let _ = writeln!(s, "{name}: n/a ({why})");
                }
                (None, None) => {}
            }
        }
        for w in &self.warnings {
            let _ = writeln!(s, "warning: {w}");
        }
        s
    }
}

/// Evaluates predictions `tau_hat` against `ds`.
pub fn evaluate(tau_hat: &[f64], ds: &Dataset, lambda: f64) -> Result<MetricsReport> {
    if tau_hat.len() != ds.n() {
        return Err(MetricsError::LengthMismatch { left: tau_hat.len(), right: ds.n() });
    }
    let mut r = MetricsReport::default();
    match ds.true_effects() {
        Some(tau) => {
            r.pehe = Some(pehe(tau_hat, &tau)?);
            r.eps_ate = Some(eps_ate(tau_hat, &tau)?);
        }
        None => {
            r.absent.insert("pehe".into(), NO_GROUND_TRUTH.into());
            r.absent.insert("eps_ate".into(), NO_GROUND_TRUTH.into());
        }
    }
    match eps_att(ds, tau_hat) {
        Ok(v) => r.eps_att = Some(v),
        Err(MetricsError::Unavailable(why)) => {
            r.absent.insert("eps_att".into(), why);
        }
        Err(e) => return Err(e),
    }
    match policy_risk(ds, tau_hat, lambda) {
        Ok(p) => {
            r.r_pol = Some(p.value);
            r.warnings.extend(p.warnings);
        }
        Err(MetricsError::Unavailable(why)) => {
            r.absent.insert("r_pol".into(), why);
        }
        Err(e) => return Err(e),
    }
    Ok(r)
}

/// Mean of a metric over repetitions with a 95% normal interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub metric: String,
    pub n: usize,
    pub mean: f64,
    /// `1.96 * sd / sqrt(n)`, with the sample standard deviation.
    pub half_width: f64,
}

/// Summarizes values as mean ± 1.96 standard errors; `None` when empty.
pub fn mean_ci(values: &[f64]) -> Option<(f64, f64)> {
    let n = values.len();
    let m = mean(values.iter().copied())?;
    if n < 2 {
        return Some((m, 0.0));
    }
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64;
    Some((m, 1.96 * (var / n as f64).sqrt()))
}

/// Aggregates every metric present in at least one report.
pub fn aggregate(reports: &[MetricsReport]) -> Vec<Aggregate> {
    METRIC_NAMES
        .iter()
        .filter_map(|name| {
            let vals: Vec<f64> = reports.iter().filter_map(|r| r.get(name)).collect();
            mean_ci(&vals).map(|(mean, half_width)| Aggregate {
                metric: name.to_string(),
                n: vals.len(),
                mean,
                half_width,
            })
        })
        .collect()
}
