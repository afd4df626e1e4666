//! Threshold-independent attribution metrics.
//!
//! The target generator is the positive class. Since the probe predicts the
//! probability of *non*-target, the ranking score of a sample is
//! `1 - predict(x)` (see [`ProbeModel::target_score`]).

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feature_store::{Dataset, Label};
use crate::linear_probe::{ProbeError, ProbeModel};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{0} class is empty")]
    EmptyClass(&'static str),
    #[error("non-finite score at position {0}")]
    NonFiniteScore(usize),
    #[error("test set has no rows from target source {0:?}")]
    MissingTarget(String),
    #[error("test set has no comparison source besides {0:?}")]
    NoComparison(String),
    #[error(transparent)]
    Probe(#[from] ProbeError),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub score: f64,
    pub truth: Label,
    pub source: String,
}

fn check_finite(scores: &[f64], offset: usize) -> Result<()> {
    match scores.iter().position(|s| !s.is_finite()) {
        Some(i) => Err(MetricsError::NonFiniteScore(offset + i)),
        None => Ok(()),
    }
}

/// Area under the ROC curve as the Mann-Whitney statistic: the fraction of
/// (positive, negative) pairs where the positive scores higher, ties counting
/// one half.
pub fn auroc(positives: &[f64], negatives: &[f64]) -> Result<f64> {
    if positives.is_empty() {
        return Err(MetricsError::EmptyClass("positive"));
    }
    if negatives.is_empty() {
        return Err(MetricsError::EmptyClass("negative"));
    }
    check_finite(positives, 0)?;
    check_finite(negatives, positives.len())?;
    let mut neg = negatives.to_vec();
    neg.sort_by(f64::total_cmp);
    // Twice the pair credit, kept integral.
    let mut credit: u128 = 0;
    for &p in positives {
        let below = neg.partition_point(|&n| n < p);
        let not_above = neg.partition_point(|&n| n <= p);
        credit += 2 * below as u128 + (not_above - below) as u128;
    }
    Ok(credit as f64 / (2.0 * positives.len() as f64 * negatives.len() as f64))
}

/// Non-interpolated average precision with equal scores grouped into one
/// threshold: `sum_k (R_k - R_{k-1}) * P_k` over distinct scores, descending.
pub fn average_precision(samples: &[ScoredSample], positive: Label) -> Result<f64> {
    let n_pos = samples.iter().filter(|s| s.truth == positive).count();
    if n_pos == 0 {
        return Err(MetricsError::EmptyClass("positive"));
    }
    if n_pos == samples.len() {
        return Err(MetricsError::EmptyClass("negative"));
    }
    if let Some(i) = samples.iter().position(|s| !s.score.is_finite()) {
        return Err(MetricsError::NonFiniteScore(i));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&a, &b| samples[b].score.total_cmp(&samples[a].score));

    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let score = samples[order[i]].score;
        while i < order.len() && samples[order[i]].score == score {
            if samples[order[i]].truth == positive {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceRow {
    pub source: String,
    pub ap: f64,
    pub auroc: f64,
    pub n_target: usize,
    pub n_comparison: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardAverage {
    pub ap: f64,
    pub auroc: f64,
    /// Hard sources present in the test set, in the requested order.
    pub sources: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub target_source: String,
    pub rows: Vec<SourceRow>,
    pub hard_average: Option<HardAverage>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

pub const DEFAULT_HARD_SOURCES: [&str; 3] = ["midjourney", "firefly", "sdxl"];
pub const HARD_AVERAGE_ROW: &str = "__hard_average__";

impl EvalReport {
    pub fn row(&self, source: &str) -> Option<&SourceRow> {
        self.rows.iter().find(|r| r.source == source)
    }

    /// Mean AP and AUROC over the listed sources that are present.
    pub fn mean_over(&self, sources: &[String]) -> Option<(f64, f64)> {
        let rows: Vec<&SourceRow> = sources.iter().filter_map(|s| self.row(s)).collect();
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        Some((rows.iter().map(|r| r.ap).sum::<f64>() / n, rows.iter().map(|r| r.auroc).sum::<f64>() / n))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// CSV with columns `source,ap,auroc,n_target,n_comparison` and a final
    /// `__hard_average__` row (empty metric fields if no hard source was present).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("source,ap,auroc,n_target,n_comparison\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{}", r.source, r.ap, r.auroc, r.n_target, r.n_comparison);
        }
        let n_target = self.rows.first().map_or(0, |r| r.n_target);
        match &self.hard_average {
            Some(h) => {
                let n_cmp: usize = h.sources.iter().filter_map(|s| self.row(s)).map(|r| r.n_comparison).sum();
                let _ = writeln!(out, "{HARD_AVERAGE_ROW},{},{},{n_target},{n_cmp}", h.ap, h.auroc);
            }
            None => {
                let _ = writeln!(out, "{HARD_AVERAGE_ROW},,,{n_target},0");
            }
        }
        out
    }
}

/// Scores every row of `test` and evaluates target vs. each other source.
///
/// Truth comes from the row's source tag, not its label field. Hard sources
/// missing from the test set are skipped with a warning.
pub fn evaluate_per_source(
    model: &ProbeModel,
    test: &Dataset,
    target_source: &str,
    hard_sources: &[String],
) -> Result<EvalReport> {
    let mut target_scores = Vec::new();
    let mut by_source: Vec<(String, Vec<f64>)> = Vec::new();
    for r in test.records() {
        let s = model.target_score(&r.features)?;
        if r.source == target_source {
            target_scores.push(s);
        } else if let Some((_, v)) = by_source.iter_mut().find(|(name, _)| *name == r.source) {
            v.push(s);
        } else {
            by_source.push((r.source.clone(), vec![s]));
        }
    }
    if target_scores.is_empty() {
        return Err(MetricsError::MissingTarget(target_source.to_string()));
    }
    if by_source.is_empty() {
        return Err(MetricsError::NoComparison(target_source.to_string()));
    }

    let rows = by_source
        .iter()
        .map(|(source, scores)| source_row(source, target_source, &target_scores, scores))
        .collect::<Result<Vec<_>>>()?;

    let mut warnings = Vec::new();
    let present: Vec<String> = hard_sources
        .iter()
        .filter(|h| {
            let found = rows.iter().any(|r| &r.source == *h);
            if !found {
                let msg = format!("hard source {h:?} not in test set; omitted from hard average");
                log::warn!("{msg}");
                warnings.push(msg);
            }
            found
        })
        .cloned()
        .collect();
    let mut report = EvalReport { target_source: target_source.to_string(), rows, hard_average: None, warnings };
    report.hard_average = report.mean_over(&present).map(|(ap, auroc)| HardAverage { ap, auroc, sources: present });
    Ok(report)
}

fn source_row(source: &str, target_source: &str, target: &[f64], other: &[f64]) -> Result<SourceRow> {
    let pooled: Vec<ScoredSample> = target
        .iter()
        .map(|&score| ScoredSample { score, truth: Label::Target, source: target_source.to_string() })
        .chain(other.iter().map(|&score| ScoredSample { score, truth: Label::NonTarget, source: source.to_string() }))
        .collect();
    Ok(SourceRow {
        source: source.to_string(),
        ap: average_precision(&pooled, Label::Target)?,
        auroc: auroc(target, other)?,
        n_target: target.len(),
        n_comparison: other.len(),
    })
}
