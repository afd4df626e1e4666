//! Seeded synthetic open-world benchmark.
//!
//! Every source is an isotropic Gaussian in feature space. A scenario has one
//! target source, known non-target sources (labeled, wild and test rows),
//! wild-only sources (wild and test rows) and unseen sources (test rows only).
//! A configurable fraction of the wild set is drawn from the target itself.

use std::fmt::Write as _;

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feature_store::{Dataset, FeatureRecord, Label, Role, SplitSpec, StoreError};
use crate::linear_probe::TrainConfig;
use crate::metrics::{self, EvalReport, MetricsError};
use crate::seed;
use crate::trainers::{self, ConstraintConfig, PseudoLabelConfig, TrainError, TrainResult};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid scenario: {0}")]
    InvalidSpec(String),
    #[error("invalid sweep: {0}")]
    InvalidSweep(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub type Result<T> = std::result::Result<T, BenchError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RoleCounts {
    pub labeled: usize,
    pub wild: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub name: String,
    pub mean: Vec<f64>,
    /// Per-coordinate variance.
    pub covariance_scale: f64,
    pub role_counts: RoleCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub dimension: usize,
    /// The target's `role_counts.wild` is unused; its wild rows come from
    /// `target_leak_fraction`.
    pub target: SourceSpec,
    pub known_nontargets: Vec<SourceSpec>,
    pub wild_only_sources: Vec<SourceSpec>,
    pub unseen_sources: Vec<SourceSpec>,
    /// Fraction of wild rows drawn from the target, in `[0, 1)`.
    pub target_leak_fraction: f64,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(BenchError::InvalidSpec(m));
        if self.dimension == 0 {
            return bad("dimension must be positive".into());
        }
        if self.known_nontargets.is_empty() {
            return bad("at least one known non-target source is required".into());
        }
        if self.unseen_sources.is_empty() {
            return bad("at least one unseen source is required".into());
        }
        if !(0.0..1.0).contains(&self.target_leak_fraction) {
            return bad(format!("target_leak_fraction {} must lie in [0, 1)", self.target_leak_fraction));
        }
        let mut names: Vec<&str> = Vec::new();
        for s in self.all_sources() {
            if s.mean.len() != self.dimension {
                return bad(format!(
                    "source {:?} mean has length {}, expected {}",
                    s.name,
                    s.mean.len(),
                    self.dimension
                ));
            }
            if !(s.covariance_scale > 0.0 && s.covariance_scale.is_finite()) {
                return bad(format!("source {:?} covariance_scale must be positive", s.name));
            }
            if s.mean.iter().any(|m| !m.is_finite()) {
                return bad(format!("source {:?} has a non-finite mean", s.name));
            }
            if s.name.is_empty() || names.contains(&s.name.as_str()) {
                return bad(format!("source name {:?} is empty or duplicated", s.name));
            }
            names.push(&s.name);
        }
        for s in &self.wild_only_sources {
            if s.role_counts.labeled > 0 {
                return bad(format!("wild-only source {:?} cannot have labeled rows", s.name));
            }
        }
        for s in &self.unseen_sources {
            if s.role_counts.labeled > 0 || s.role_counts.wild > 0 {
                return bad(format!("unseen source {:?} may only have test rows", s.name));
            }
        }
        if self.target.role_counts.labeled == 0 || self.known_nontargets.iter().all(|s| s.role_counts.labeled == 0) {
            return bad("labeled set needs target and known non-target rows".into());
        }
        if self.target.role_counts.test == 0 {
            return bad("target needs test rows".into());
        }
        Ok(())
    }

    pub fn all_sources(&self) -> impl Iterator<Item = &SourceSpec> {
        std::iter::once(&self.target)
            .chain(&self.known_nontargets)
            .chain(&self.wild_only_sources)
            .chain(&self.unseen_sources)
    }

    fn nontarget_wild_rows(&self) -> usize {
        self.known_nontargets.iter().chain(&self.wild_only_sources).map(|s| s.role_counts.wild).sum()
    }

    /// `round(leak * M / (1 - leak))` for `M` non-target wild rows.
    pub fn target_wild_rows(&self) -> usize {
        let f = self.target_leak_fraction;
        (f * self.nontarget_wild_rows() as f64 / (1.0 - f)).round() as usize
    }

    pub fn names(list: &[SourceSpec]) -> Vec<String> {
        list.iter().map(|s| s.name.clone()).collect()
    }

    /// The default scenario: one target, three known, three wild-only and
    /// three unseen sources in 16 dimensions, with labeled/wild counts of
    /// 200 target + 67 per known source and 67 wild rows per source.
    ///
    /// The target sits at the origin. Every non-target source has an offset
    /// along axis 0 (4 for known sources, under 1 for the rest) plus its own
    /// direction. Unseen source `k` shares axis `4 + k` with wild-only source
    /// `k` and adds a private axis `7 + k`, so wild data points towards the
    /// hard sources without containing them.
    pub fn standard(seed: u64) -> Self {
        const D: usize = 16;
        let mean = |parts: &[(usize, f64)]| {
            let mut m = vec![0.0; D];
            for &(i, v) in parts {
                m[i] = v;
            }
            m
        };
        let source = |name: &str, mean: Vec<f64>, labeled, wild, test| SourceSpec {
            name: name.to_string(),
            mean,
            covariance_scale: 1.0,
            role_counts: RoleCounts { labeled, wild, test },
        };
        let known = (0..3).map(|k| source(&format!("known_{}", k + 1), mean(&[(0, 4.0), (1 + k, 2.0)]), 67, 67, 150));
        let wild_only = (0..3).map(|k| source(&format!("wild_{}", k + 1), mean(&[(0, 1.0), (4 + k, 2.0)]), 0, 67, 150));
        let unseen = (0..3)
            .map(|k| source(&format!("unseen_{}", k + 1), mean(&[(0, 0.75), (4 + k, 2.75), (7 + k, 1.5)]), 0, 0, 150));
        ScenarioSpec {
            dimension: D,
            target: source("target", vec![0.0; D], 200, 0, 150),
            known_nontargets: known.collect(),
            wild_only_sources: wild_only.collect(),
            unseen_sources: unseen.collect(),
            target_leak_fraction: 1.0 / 14.0,
            seed,
        }
    }
}

/// Generated datasets plus the spec that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub spec: ScenarioSpec,
    pub labeled: Dataset,
    pub wild: Dataset,
    pub test: Dataset,
}

fn sample_rows(
    spec: &ScenarioSpec,
    src: &SourceSpec,
    role: Role,
    n: usize,
    label: Option<Label>,
) -> Vec<FeatureRecord> {
    let stream = seed::derive(spec.seed, &format!("scenario/{}/{}", src.name, role));
    let mut rng = seed::rng(stream);
    let normal = Normal::new(0.0, src.covariance_scale.sqrt()).expect("validated scale");
    (0..n)
        .map(|_| {
            let features = src.mean.iter().map(|&m| (m + normal.sample(&mut rng)) as f32).collect();
            FeatureRecord::new(features, src.name.clone(), role, label)
        })
        .collect()
}

/// Samples a scenario. Each (source, role) pair draws from its own derived
/// stream, so changing one count leaves every other block unchanged.
pub fn generate_scenario(spec: &ScenarioSpec) -> Result<Scenario> {
    spec.validate()?;
    let nt = Some(Label::NonTarget);
    let mut labeled =
        sample_rows(spec, &spec.target, Role::Labeled, spec.target.role_counts.labeled, Some(Label::Target));
    for s in &spec.known_nontargets {
        labeled.extend(sample_rows(spec, s, Role::Labeled, s.role_counts.labeled, nt));
    }

    let mut wild = sample_rows(spec, &spec.target, Role::Wild, spec.target_wild_rows(), None);
    for s in spec.known_nontargets.iter().chain(&spec.wild_only_sources) {
        wild.extend(sample_rows(spec, s, Role::Wild, s.role_counts.wild, None));
    }

    let mut test = sample_rows(spec, &spec.target, Role::Test, spec.target.role_counts.test, Some(Label::Target));
    for s in spec.known_nontargets.iter().chain(&spec.wild_only_sources).chain(&spec.unseen_sources) {
        test.extend(sample_rows(spec, s, Role::Test, s.role_counts.test, nt));
    }

    let d = spec.dimension;
    Ok(Scenario {
        spec: spec.clone(),
        labeled: Dataset::new(d, labeled)?,
        wild: Dataset::new(d, wild)?,
        test: Dataset::new(d, test)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Baseline,
    Constrained,
    Pseudo,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Constrained => "constrained",
            Mode::Pseudo => "pseudo",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub validation_fraction: f64,
    pub constraint: ConstraintConfig,
    pub pseudo: PseudoLabelConfig,
    /// Sources averaged into the hard score; defaults to the unseen sources.
    pub hard_sources: Option<Vec<String>>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            train: TrainConfig::default(),
            validation_fraction: 0.2,
            constraint: ConstraintConfig::default(),
            pseudo: PseudoLabelConfig::default(),
            hard_sources: None,
        }
    }
}

/// Headline numbers of one evaluated run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub unseen_auroc: f64,
    pub unseen_ap: f64,
    pub known_auroc: f64,
    pub known_ap: f64,
    pub wild_only_auroc: Option<f64>,
    pub final_id_loss: f64,
    pub baseline_loss: f64,
    pub constraint_ok: Option<bool>,
}

#[derive(Debug, Clone)]
pub struct ExperimentRun {
    pub mode: Mode,
    pub train: TrainResult,
    pub report: EvalReport,
    pub summary: RunSummary,
}

fn summarize(scenario: &Scenario, train: &TrainResult, report: &EvalReport, ccfg: &ConstraintConfig) -> RunSummary {
    let spec = &scenario.spec;
    let unseen = report.mean_over(&ScenarioSpec::names(&spec.unseen_sources)).unwrap_or((f64::NAN, f64::NAN));
    let known = report.mean_over(&ScenarioSpec::names(&spec.known_nontargets)).unwrap_or((f64::NAN, f64::NAN));
    let wild_only = report.mean_over(&ScenarioSpec::names(&spec.wild_only_sources));
    let constraint_ok = train.alpha.map(|a| train.final_id_loss <= a * (1.0 + ccfg.alpha_tolerance));
    RunSummary {
        unseen_auroc: unseen.1,
        unseen_ap: unseen.0,
        known_auroc: known.1,
        known_ap: known.0,
        wild_only_auroc: wild_only.map(|w| w.1),
        final_id_loss: train.final_id_loss,
        baseline_loss: train.baseline_loss,
        constraint_ok,
    }
}

/// Split spec used for a scenario: fraction from the config, seed derived from
/// the scenario seed.
pub fn split_for(scenario: &Scenario, cfg: &ExperimentConfig) -> SplitSpec {
    SplitSpec { validation_fraction: cfg.validation_fraction, seed: seed::derive(scenario.spec.seed, "split") }
}

fn evaluate(scenario: &Scenario, mode: Mode, train: TrainResult, cfg: &ExperimentConfig) -> Result<ExperimentRun> {
    let hard = cfg.hard_sources.clone().unwrap_or_else(|| ScenarioSpec::names(&scenario.spec.unseen_sources));
    let report = metrics::evaluate_per_source(&train.model, &scenario.test, &scenario.spec.target.name, &hard)?;
    let summary = summarize(scenario, &train, &report, &cfg.constraint);
    Ok(ExperimentRun { mode, train, report, summary })
}

/// Trains the baseline once, then each requested mode from it, and evaluates
/// every run on the scenario's test split. Output order follows `modes`.
pub fn run_modes(scenario: &Scenario, modes: &[Mode], cfg: &ExperimentConfig) -> Result<Vec<ExperimentRun>> {
    let split = split_for(scenario, cfg);
    let train_cfg = TrainConfig { seed: scenario.spec.seed, ..cfg.train };
    let baseline = trainers::train_baseline(&scenario.labeled, &split, &train_cfg)?;
    modes
        .iter()
        .map(|&mode| {
            let train = match mode {
                Mode::Baseline => baseline.clone(),
                Mode::Constrained => trainers::finetune_constrained(
                    &baseline,
                    &scenario.labeled,
                    &scenario.wild,
                    &cfg.constraint,
                    &train_cfg,
                )?,
                Mode::Pseudo => {
                    trainers::finetune_pseudo(&baseline, &scenario.labeled, &scenario.wild, &cfg.pseudo, &train_cfg)?
                }
            };
            evaluate(scenario, mode, train, cfg)
        })
        .collect()
}

pub fn run_experiment(scenario: &Scenario, mode: Mode, cfg: &ExperimentConfig) -> Result<ExperimentRun> {
    Ok(run_modes(scenario, &[mode], cfg)?.remove(0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Wild rows per non-target wild source.
    WildSize,
    LeakFraction,
    /// Labeled rows per known source; the target gets the same total.
    LabeledSize,
    AlphaMultiplier,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::WildSize => "wild_size",
            SweepAxis::LeakFraction => "leak_fraction",
            SweepAxis::LabeledSize => "labeled_size",
            SweepAxis::AlphaMultiplier => "alpha_multiplier",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub seeds: Vec<u64>,
}

fn count_value(v: f64) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 && v.is_finite() {
        Ok(v as usize)
    } else {
        Err(BenchError::InvalidSweep(format!("{v} is not a row count")))
    }
}

/// Applies one sweep value to a scenario and config.
pub fn apply_axis(
    axis: SweepAxis,
    value: f64,
    spec: &ScenarioSpec,
    cfg: &ExperimentConfig,
) -> Result<(ScenarioSpec, ExperimentConfig)> {
    let mut spec = spec.clone();
    let mut cfg = cfg.clone();
    match axis {
        SweepAxis::WildSize => {
            let n = count_value(value)?;
            for s in spec.known_nontargets.iter_mut().chain(spec.wild_only_sources.iter_mut()) {
                s.role_counts.wild = n;
            }
        }
        SweepAxis::LeakFraction => spec.target_leak_fraction = value,
        SweepAxis::LabeledSize => {
            let n = count_value(value)?;
            for s in spec.known_nontargets.iter_mut() {
                s.role_counts.labeled = n;
            }
            spec.target.role_counts.labeled = n * spec.known_nontargets.len();
        }
        SweepAxis::AlphaMultiplier => cfg.constraint.alpha_multiplier = value,
    }
    spec.validate().map_err(|e| BenchError::InvalidSweep(e.to_string()))?;
    cfg.constraint.validate().map_err(|e| BenchError::InvalidSweep(e.to_string()))?;
    Ok((spec, cfg))
}

/// One (value, seed) cell of a sweep: baseline vs. constrained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub value: f64,
    pub seed: u64,
    pub baseline: RunSummary,
    pub constrained: RunSummary,
    pub alpha: Option<f64>,
    pub lambda_used: Option<f64>,
    pub infeasible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub n_seeds: usize,
    pub median_baseline_unseen_auroc: f64,
    pub median_constrained_unseen_auroc: f64,
    pub median_baseline_known_auroc: f64,
    pub median_constrained_known_auroc: f64,
    pub median_baseline_id_loss: f64,
    pub median_constrained_id_loss: f64,
    pub constraint_violations: usize,
    pub infeasible_runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
    pub cells: Vec<SweepCell>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Runs baseline and constrained training for every (value, seed) cell and
/// aggregates medians per value. Cells run in parallel; results are ordered
/// by (value, seed) as given.
pub fn run_ablation(sweep: &SweepSpec, base: &ScenarioSpec, cfg: &ExperimentConfig) -> Result<SweepReport> {
    if sweep.values.is_empty() || sweep.seeds.is_empty() {
        return Err(BenchError::InvalidSweep("values and seeds must be non-empty".into()));
    }
    let jobs: Vec<(f64, u64)> = sweep.values.iter().flat_map(|&v| sweep.seeds.iter().map(move |&s| (v, s))).collect();
    for &v in &sweep.values {
        apply_axis(sweep.axis, v, base, cfg)?;
    }
    let cells = jobs
        .par_iter()
        .map(|&(value, seed)| {
            let (mut spec, cell_cfg) = apply_axis(sweep.axis, value, base, cfg)?;
            spec.seed = seed;
            let scenario = generate_scenario(&spec)?;
            let runs = run_modes(&scenario, &[Mode::Baseline, Mode::Constrained], &cell_cfg)?;
            let cons = &runs[1];
            Ok(SweepCell {
                value,
                seed,
                baseline: runs[0].summary,
                constrained: cons.summary,
                alpha: cons.train.alpha,
                lambda_used: cons.train.lambda_used,
                infeasible: cons.train.infeasible.is_some(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let rows = sweep
        .values
        .iter()
        .map(|&value| {
            let group: Vec<&SweepCell> = cells.iter().filter(|c| c.value == value).collect();
            let med = |f: &dyn Fn(&SweepCell) -> f64| median(&group.iter().map(|c| f(c)).collect::<Vec<_>>());
            SweepRow {
                value,
                n_seeds: group.len(),
                median_baseline_unseen_auroc: med(&|c| c.baseline.unseen_auroc),
                median_constrained_unseen_auroc: med(&|c| c.constrained.unseen_auroc),
                median_baseline_known_auroc: med(&|c| c.baseline.known_auroc),
                median_constrained_known_auroc: med(&|c| c.constrained.known_auroc),
                median_baseline_id_loss: med(&|c| c.baseline.final_id_loss),
                median_constrained_id_loss: med(&|c| c.constrained.final_id_loss),
                constraint_violations: group.iter().filter(|c| c.constrained.constraint_ok == Some(false)).count(),
                infeasible_runs: group.iter().filter(|c| c.infeasible).count(),
            }
        })
        .collect();
    Ok(SweepReport { axis: sweep.axis, rows, cells })
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "axis,value,n_seeds,median_baseline_unseen_auroc,median_constrained_unseen_auroc,\
             median_baseline_known_auroc,median_constrained_known_auroc,median_baseline_id_loss,\
             median_constrained_id_loss,constraint_violations,infeasible_runs\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                self.axis.as_str(),
                r.value,
                r.n_seeds,
                r.median_baseline_unseen_auroc,
                r.median_constrained_unseen_auroc,
                r.median_baseline_known_auroc,
                r.median_constrained_known_auroc,
                r.median_baseline_id_loss,
                r.median_constrained_id_loss,
                r.constraint_violations,
                r.infeasible_runs
            );
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("sweep serializes")
    }
}
