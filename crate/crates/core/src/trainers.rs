//! Training procedures: baseline probe on labeled data, constrained
//! fine-tuning with wild data, and the pseudo-labeling comparison.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feature_store::{self, Dataset, FeatureRecord, Label, SplitSpec, StoreError};
use crate::linear_probe::{self, Batch, FitOutcome, ProbeError, ProbeModel, TrainConfig, TrainMode};
use crate::seed;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("labeled data must contain both classes, found only label {0}")]
    SingleClass(u8),
    #[error("labeled data is empty")]
    EmptyLabeled,
    #[error("wild data is empty")]
    EmptyWild,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("baseline loss {0} is not a positive finite number")]
    BadBaselineLoss(f64),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConstraintConfig {
    /// The constraint threshold is `alpha_multiplier * baseline_loss`.
    pub alpha_multiplier: f64,
    pub lambda_initial: f64,
    pub lambda_bracket_factor: f64,
    /// Budget of inner solves.
    pub lambda_max_outer_iters: usize,
    /// Relative band around alpha; a candidate is feasible when its labeled
    /// loss is at most `alpha * (1 + alpha_tolerance)`.
    pub alpha_tolerance: f64,
    /// Relative wild-loss decrease below which growing lambda is abandoned.
    pub wild_plateau_tolerance: f64,
}

impl Default for ConstraintConfig {
    fn default() -> Self {
        ConstraintConfig {
            alpha_multiplier: 2.0,
            lambda_initial: 1.0,
            lambda_bracket_factor: 2.0,
            lambda_max_outer_iters: 20,
            alpha_tolerance: 0.05,
            wild_plateau_tolerance: 1e-3,
        }
    }
}

impl ConstraintConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.alpha_multiplier >= 1.0 && self.alpha_multiplier.is_finite()) {
            return bad("alpha_multiplier must be >= 1");
        }
        // Zero is accepted: it reduces fine-tuning to continued labeled training.
        if !(self.lambda_initial >= 0.0 && self.lambda_initial.is_finite()) {
            return bad("lambda_initial must be >= 0");
        }
        if self.lambda_bracket_factor.is_nan() || self.lambda_bracket_factor <= 1.0 {
            return bad("lambda_bracket_factor must be > 1");
        }
        if self.lambda_max_outer_iters < 1 {
            return bad("lambda_max_outer_iters must be >= 1");
        }
        if !(0.0..1.0).contains(&self.alpha_tolerance) {
            return bad("alpha_tolerance must lie in [0, 1)");
        }
        if self.wild_plateau_tolerance.is_nan() || self.wild_plateau_tolerance < 0.0 {
            return bad("wild_plateau_tolerance must be >= 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PseudoLabelConfig {
    pub confidence_threshold: f64,
    pub max_rounds: usize,
}

impl Default for PseudoLabelConfig {
    fn default() -> Self {
        PseudoLabelConfig { confidence_threshold: 0.90, max_rounds: 50 }
    }
}

impl PseudoLabelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.confidence_threshold > 0.5 && self.confidence_threshold < 1.0) {
            return Err(TrainError::InvalidConfig("confidence_threshold must lie in (0.5, 1)".into()));
        }
        if self.max_rounds < 1 {
            return Err(TrainError::InvalidConfig("max_rounds must be >= 1".into()));
        }
        Ok(())
    }
}

/// One inner solve of the multiplier search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaCandidate {
    pub lambda: f64,
    pub id_loss: f64,
    pub wild_loss: f64,
    pub feasible: bool,
    pub steps_taken: usize,
    pub stopped_early: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfeasibleDiagnostic {
    pub alpha: f64,
    pub limit: f64,
    pub lambdas_tried: Vec<f64>,
    pub min_id_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoRound {
    pub round: usize,
    pub new_non_target: usize,
    pub new_target: usize,
    pub total_pseudo_labeled: usize,
    pub remaining_unlabeled: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainResult {
    /// Persisted separately as the model file.
    #[serde(skip)]
    pub model: ProbeModel,
    pub train_mode: TrainMode,
    pub baseline_loss: f64,
    /// Mean BCE of the returned model over the full labeled set.
    pub final_id_loss: f64,
    pub final_wild_loss: Option<f64>,
    pub alpha: Option<f64>,
    pub lambda_used: Option<f64>,
    pub steps_taken: usize,
    pub stopped_early: bool,
    /// Validation loss per evaluation (concatenated across pseudo rounds).
    pub history: Vec<f64>,
    pub split: SplitSpec,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub lambda_search: Vec<LambdaCandidate>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub pseudo_rounds: Vec<PseudoRound>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub infeasible: Option<InfeasibleDiagnostic>,
}

impl TrainResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("train result serializes")
    }

    /// Wraps an already trained baseline model, e.g. one loaded from disk.
    /// The baseline loss comes from the model's provenance when recorded and
    /// is otherwise recomputed on `labeled`.
    pub fn from_baseline_model(model: ProbeModel, labeled: &Dataset, split: SplitSpec) -> Result<Self> {
        let id = labeled_batch(labeled)?;
        let loss = linear_probe::mean_loss(&model, &id)?;
        let baseline_loss = model.provenance.baseline_loss.unwrap_or(loss);
        Ok(TrainResult {
            model,
            train_mode: TrainMode::Baseline,
            baseline_loss,
            final_id_loss: loss,
            final_wild_loss: None,
            alpha: None,
            lambda_used: None,
            steps_taken: 0,
            stopped_early: false,
            history: Vec::new(),
            split,
            lambda_search: Vec::new(),
            pseudo_rounds: Vec::new(),
            infeasible: None,
        })
    }
}

fn labeled_batch(labeled: &Dataset) -> Result<Batch> {
    Ok(Batch::from_labeled(labeled.dimension(), labeled.records())?)
}

fn subset<'a>(records: &'a [FeatureRecord], idx: &'a [usize]) -> impl Iterator<Item = &'a FeatureRecord> + 'a {
    idx.iter().map(move |&i| &records[i])
}

/// Labeled data split into train/validation batches plus the full batch.
struct LabeledParts {
    train: Batch,
    validation: Batch,
    all: Batch,
}

fn labeled_parts(labeled: &Dataset, split: &SplitSpec) -> Result<LabeledParts> {
    if labeled.is_empty() {
        return Err(TrainError::EmptyLabeled);
    }
    let labels = labeled.labels()?;
    if let Some(first) = labels.first() {
        if labels.iter().all(|l| l == first) {
            return Err(TrainError::SingleClass(first.as_u8()));
        }
    }
    let parts = feature_store::split_labeled(&labels, split)?;
    let d = labeled.dimension();
    let recs = labeled.records();
    Ok(LabeledParts {
        train: Batch::from_labeled(d, subset(recs, &parts.train))?,
        validation: Batch::from_labeled(d, subset(recs, &parts.validation))?,
        all: labeled_batch(labeled)?,
    })
}

/// Trains the probe from zero on the labeled train split with early stopping
/// on the labeled validation split.
pub fn train_baseline(labeled: &Dataset, split: &SplitSpec, cfg: &TrainConfig) -> Result<TrainResult> {
    let parts = labeled_parts(labeled, split)?;
    let start = ProbeModel::zeros(labeled.dimension(), cfg.seed);
    let fit = linear_probe::fit(
        &start,
        cfg,
        |m| linear_probe::mean_loss_and_gradient(m, &parts.train),
        |m| linear_probe::mean_loss(m, &parts.validation),
    )?;
    let mut model = fit.model;
    let baseline_loss = linear_probe::mean_loss(&model, &parts.all)?;
    if !(baseline_loss.is_finite() && baseline_loss > 0.0) {
        return Err(TrainError::BadBaselineLoss(baseline_loss));
    }
    model.provenance.baseline_loss = Some(baseline_loss);
    model.provenance.train_mode = TrainMode::Baseline;
    Ok(TrainResult {
        model,
        train_mode: TrainMode::Baseline,
        baseline_loss,
        final_id_loss: baseline_loss,
        final_wild_loss: None,
        alpha: None,
        lambda_used: None,
        steps_taken: fit.steps_taken,
        stopped_early: fit.stopped_early,
        history: fit.history,
        split: *split,
        lambda_search: Vec::new(),
        pseudo_rounds: Vec::new(),
        infeasible: None,
    })
}

fn check_inputs(baseline: &TrainResult, labeled: &Dataset, wild: &Dataset) -> Result<()> {
    if wild.is_empty() {
        return Err(TrainError::EmptyWild);
    }
    let d = baseline.model.dimension();
    if labeled.dimension() != d || wild.dimension() != d {
        return Err(TrainError::Dimension(format!(
            "model {d}, labeled {}, wild {}",
            labeled.dimension(),
            wild.dimension()
        )));
    }
    if !(baseline.baseline_loss.is_finite() && baseline.baseline_loss > 0.0) {
        return Err(TrainError::BadBaselineLoss(baseline.baseline_loss));
    }
    Ok(())
}

struct WildParts {
    train: Batch,
    validation: Batch,
    all: Batch,
}

/// Wild rows, all assigned the non-target label. The validation part uses
/// the labeled split's fraction and a seed derived from the labeled split seed.
fn wild_parts(wild: &Dataset, split: &SplitSpec) -> Result<WildParts> {
    let parts =
        feature_store::split_unlabeled(wild.len(), split.validation_fraction, seed::derive(split.seed, "wild-split"))?;
    let d = wild.dimension();
    let recs = wild.records();
    let train = Batch::with_target(d, subset(recs, &parts.train), Label::NonTarget)?;
    let all = Batch::with_target(d, recs, Label::NonTarget)?;
    let validation = if parts.validation.is_empty() {
        all.clone()
    } else {
        Batch::with_target(d, subset(recs, &parts.validation), Label::NonTarget)?
    };
    Ok(WildParts { train, validation, all })
}

struct InnerSolve {
    fit: FitOutcome,
    id_loss: f64,
    wild_loss: f64,
}

fn solve_weighted(
    start: &ProbeModel,
    lambda: f64,
    id: &LabeledParts,
    wild: &WildParts,
    cfg: &TrainConfig,
) -> Result<InnerSolve> {
    let fit = linear_probe::fit(
        start,
        cfg,
        |m| {
            let g = linear_probe::mean_loss_and_gradient(m, &id.train)?;
            if lambda == 0.0 {
                return Ok(g);
            }
            Ok(g.add_scaled(&linear_probe::mean_loss_and_gradient(m, &wild.train)?, lambda))
        },
        |m| {
            let v = linear_probe::mean_loss(m, &id.validation)?;
            if lambda == 0.0 {
                return Ok(v);
            }
            Ok(v + lambda * linear_probe::mean_loss(m, &wild.validation)?)
        },
    )?;
    let id_loss = linear_probe::mean_loss(&fit.model, &id.all)?;
    let wild_loss = linear_probe::mean_loss(&fit.model, &wild.all)?;
    Ok(InnerSolve { fit, id_loss, wild_loss })
}

/// Fine-tunes the baseline so wild samples score as non-target while the
/// labeled loss stays under `alpha = alpha_multiplier * baseline_loss`.
///
/// Each inner solve minimizes `id_loss + lambda * wild_loss` from the baseline
/// parameters. Lambda is shrunk while infeasible and grown while the labeled
/// loss sits below the tolerance band (until the wild loss stops improving);
/// once a feasible/infeasible pair brackets the band the search bisects in
/// log-lambda. The feasible candidate with the lowest wild loss is returned.
/// If no candidate is feasible the baseline model comes back unchanged with
/// `infeasible` set.
pub fn finetune_constrained(
    baseline: &TrainResult,
    labeled: &Dataset,
    wild: &Dataset,
    ccfg: &ConstraintConfig,
    cfg: &TrainConfig,
) -> Result<TrainResult> {
    ccfg.validate()?;
    cfg.validate()?;
    check_inputs(baseline, labeled, wild)?;
    let split = baseline.split;
    let id = labeled_parts(labeled, &split)?;
    let wild_data = wild_parts(wild, &split)?;

    let alpha = ccfg.alpha_multiplier * baseline.baseline_loss;
    let upper = alpha * (1.0 + ccfg.alpha_tolerance);
    let lower = alpha * (1.0 - ccfg.alpha_tolerance);

    let mut lambda = ccfg.lambda_initial;
    let mut feasible_lo: Option<f64> = None;
    let mut infeasible_hi: Option<f64> = None;
    let mut trace: Vec<LambdaCandidate> = Vec::new();
    let mut best: Option<(f64, InnerSolve)> = None; // (lambda, solve)
    let mut last_feasible_wild: Option<f64> = None;

    for _ in 0..ccfg.lambda_max_outer_iters {
        let solve = solve_weighted(&baseline.model, lambda, &id, &wild_data, cfg)?;
        let feasible = solve.id_loss <= upper;
        trace.push(LambdaCandidate {
            lambda,
            id_loss: solve.id_loss,
            wild_loss: solve.wild_loss,
            feasible,
            steps_taken: solve.fit.steps_taken,
            stopped_early: solve.fit.stopped_early,
        });
        log::debug!("lambda {lambda:.6e}: id {:.6} wild {:.6} feasible {feasible}", solve.id_loss, solve.wild_loss);

        if !feasible {
            infeasible_hi = Some(infeasible_hi.map_or(lambda, |h| h.min(lambda)));
            lambda = match feasible_lo {
                Some(lo) if lo > 0.0 => (lo * lambda).sqrt(),
                _ => lambda / ccfg.lambda_bracket_factor,
            };
            continue;
        }

        feasible_lo = Some(feasible_lo.map_or(lambda, |l| l.max(lambda)));
        let in_band = solve.id_loss >= lower;
        let plateaued =
            last_feasible_wild.is_some_and(|prev| prev - solve.wild_loss <= ccfg.wild_plateau_tolerance * prev.abs());
        last_feasible_wild = Some(solve.wild_loss);
        if best.as_ref().is_none_or(|(_, b)| solve.wild_loss < b.wild_loss) {
            best = Some((lambda, solve));
        }
        if in_band {
            break;
        }
        match infeasible_hi {
            Some(hi) if lambda > 0.0 => lambda = (lambda * hi).sqrt(),
            _ => {
                if lambda == 0.0 || plateaued {
                    break;
                }
                lambda *= ccfg.lambda_bracket_factor;
            }
        }
    }

    let Some((lambda_used, accepted)) = best else {
        let min_id_loss = trace.iter().map(|c| c.id_loss).fold(f64::INFINITY, f64::min);
        log::warn!("constraint infeasible: alpha {alpha:.6}, best labeled loss {min_id_loss:.6}");
        let wild_loss = linear_probe::mean_loss(&baseline.model, &wild_data.all)?;
        return Ok(TrainResult {
            model: baseline.model.clone(),
            train_mode: TrainMode::Constrained,
            baseline_loss: baseline.baseline_loss,
            final_id_loss: linear_probe::mean_loss(&baseline.model, &id.all)?,
            final_wild_loss: Some(wild_loss),
            alpha: Some(alpha),
            lambda_used: None,
            steps_taken: 0,
            stopped_early: false,
            history: Vec::new(),
            split,
            infeasible: Some(InfeasibleDiagnostic {
                alpha,
                limit: upper,
                lambdas_tried: trace.iter().map(|c| c.lambda).collect(),
                min_id_loss,
            }),
            lambda_search: trace,
            pseudo_rounds: Vec::new(),
        });
    };

    let mut model = accepted.fit.model;
    model.provenance.seed = cfg.seed;
    model.provenance.baseline_loss = Some(baseline.baseline_loss);
    model.provenance.alpha = Some(alpha);
    model.provenance.lambda = Some(lambda_used);
    model.provenance.train_mode = TrainMode::Constrained;
    Ok(TrainResult {
        model,
        train_mode: TrainMode::Constrained,
        baseline_loss: baseline.baseline_loss,
        final_id_loss: accepted.id_loss,
        final_wild_loss: Some(accepted.wild_loss),
        alpha: Some(alpha),
        lambda_used: Some(lambda_used),
        steps_taken: accepted.fit.steps_taken,
        stopped_early: accepted.fit.stopped_early,
        history: accepted.fit.history,
        split,
        lambda_search: trace,
        pseudo_rounds: Vec::new(),
        infeasible: None,
    })
}

/// Self-training on wild data. Each round labels the still-unlabeled wild rows
/// whose prediction clears the threshold in either direction, then retrains
/// from the current model on labeled-train plus all pseudo-labeled rows.
/// Assignments are permanent; the loop ends when a round adds nothing or
/// `max_rounds` is reached.
pub fn finetune_pseudo(
    baseline: &TrainResult,
    labeled: &Dataset,
    wild: &Dataset,
    pcfg: &PseudoLabelConfig,
    cfg: &TrainConfig,
) -> Result<TrainResult> {
    pcfg.validate()?;
    cfg.validate()?;
    check_inputs(baseline, labeled, wild)?;
    let split = baseline.split;
    let id = labeled_parts(labeled, &split)?;
    let d = wild.dimension();
    let wild_all = Batch::with_target(d, wild.records(), Label::NonTarget)?;

    let mut model = baseline.model.clone();
    let mut assigned: Vec<Option<Label>> = vec![None; wild.len()];
    let mut rounds = Vec::new();
    let mut history = Vec::new();
    let (mut steps, mut stopped_early) = (0, false);
    let threshold = pcfg.confidence_threshold;

    for round in 1..=pcfg.max_rounds {
        let (mut new_nt, mut new_t) = (0, 0);
        for (slot, rec) in assigned.iter_mut().zip(wild.records()) {
            if slot.is_some() {
                continue;
            }
            let p = model.predict(&rec.features)?;
            if p >= threshold {
                *slot = Some(Label::NonTarget);
                new_nt += 1;
            } else if p <= 1.0 - threshold {
                *slot = Some(Label::Target);
                new_t += 1;
            }
        }
        let total = assigned.iter().filter(|a| a.is_some()).count();
        rounds.push(PseudoRound {
            round,
            new_non_target: new_nt,
            new_target: new_t,
            total_pseudo_labeled: total,
            remaining_unlabeled: wild.len() - total,
        });
        log::debug!("pseudo round {round}: +{new_nt} non-target, +{new_t} target, {total} total");
        if new_nt + new_t == 0 {
            break;
        }

        let mut train = id.train.clone();
        for (slot, rec) in assigned.iter().zip(wild.records()) {
            if let Some(label) = slot {
                train.push(&rec.features, *label)?;
            }
        }
        let fit = linear_probe::fit(
            &model,
            cfg,
            |m| linear_probe::mean_loss_and_gradient(m, &train),
            |m| linear_probe::mean_loss(m, &id.validation),
        )?;
        steps += fit.steps_taken;
        stopped_early = fit.stopped_early;
        history.extend_from_slice(&fit.history);
        model = fit.model;
    }

    let final_id_loss = linear_probe::mean_loss(&model, &id.all)?;
    let final_wild_loss = linear_probe::mean_loss(&model, &wild_all)?;
    model.provenance.seed = cfg.seed;
    model.provenance.baseline_loss = Some(baseline.baseline_loss);
    model.provenance.train_mode = TrainMode::Pseudo;
    Ok(TrainResult {
        model,
        train_mode: TrainMode::Pseudo,
        baseline_loss: baseline.baseline_loss,
        final_id_loss,
        final_wild_loss: Some(final_wild_loss),
        alpha: None,
        lambda_used: None,
        steps_taken: steps,
        stopped_early,
        history,
        split,
        lambda_search: Vec::new(),
        pseudo_rounds: rounds,
        infeasible: None,
    })
}
