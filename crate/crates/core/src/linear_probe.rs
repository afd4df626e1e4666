//! The attribution probe: one linear layer plus sigmoid over frozen features.
//!
//! The probe outputs the probability that a sample does *not* come from the
//! target generator. Losses are mean binary cross-entropy, optimized full-batch
//! with Adam and early stopping on a validation loss.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feature_store::{FeatureRecord, Label};

/// Probability clamp applied inside the BCE loss.
pub const PROB_EPS: f64 = 1e-7;
/// Minimum absolute drop in validation loss that counts as an improvement.
pub const MIN_IMPROVEMENT: f64 = 1e-6;
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("dimension mismatch: model has {expected}, input has {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite {what} at step {step}")]
    NonFinite { what: &'static str, step: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("model file {path}: {detail}")]
    Format { path: String, detail: String },
}

pub type Result<T> = std::result::Result<T, ProbeError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Baseline,
    Constrained,
    Pseudo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub baseline_loss: Option<f64>,
    pub alpha: Option<f64>,
    pub lambda: Option<f64>,
    pub train_mode: TrainMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    version: u32,
    dimension: usize,
    weights: Vec<f64>,
    bias: f64,
    provenance: Provenance,
}

impl ProbeModel {
    /// Zero-initialized probe; predicts 0.5 everywhere.
    pub fn zeros(dimension: usize, seed: u64) -> Self {
        ProbeModel {
            weights: vec![0.0; dimension],
            bias: 0.0,
            provenance: Provenance {
                seed,
                baseline_loss: None,
                alpha: None,
                lambda: None,
                train_mode: TrainMode::Baseline,
            },
        }
    }

    pub fn dimension(&self) -> usize {
        self.weights.len()
    }

    /// `w·x + b`.
    pub fn logit(&self, features: &[f32]) -> Result<f64> {
        self.check_dim(features.len())?;
        Ok(self.logit_unchecked(features.iter().map(|&v| f64::from(v))))
    }

    fn logit_unchecked(&self, features: impl Iterator<Item = f64>) -> f64 {
        self.weights.iter().zip(features).fold(self.bias, |acc, (w, x)| acc + w * x)
    }

    /// Probability of non-target.
    pub fn predict(&self, features: &[f32]) -> Result<f64> {
        self.logit(features).map(sigmoid)
    }

    /// Probability of target, `1 - predict`, computed from the negated logit.
    pub fn target_score(&self, features: &[f32]) -> Result<f64> {
        self.logit(features).map(|z| sigmoid(-z))
    }

    fn check_dim(&self, actual: usize) -> Result<()> {
        if actual != self.weights.len() {
            return Err(ProbeError::DimensionMismatch { expected: self.weights.len(), actual });
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.bias.is_finite() && self.weights.iter().all(|w| w.is_finite())
    }

    pub fn to_json(&self) -> String {
        let file = ModelFile {
            version: MODEL_VERSION,
            dimension: self.dimension(),
            weights: self.weights.clone(),
            bias: self.bias,
            provenance: self.provenance.clone(),
        };
        serde_json::to_string_pretty(&file).expect("model serializes")
    }

    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let fmt_err = |detail: String| ProbeError::Format { path: origin.to_string(), detail };
        let file: ModelFile = serde_json::from_str(text).map_err(|e| fmt_err(e.to_string()))?;
        if file.version != MODEL_VERSION {
            return Err(fmt_err(format!("unsupported version {}", file.version)));
        }
        if file.weights.len() != file.dimension {
            return Err(fmt_err(format!("{} weights for dimension {}", file.weights.len(), file.dimension)));
        }
        let model = ProbeModel { weights: file.weights, bias: file.bias, provenance: file.provenance };
        if !model.is_finite() {
            return Err(fmt_err("non-finite parameter".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json() + "\n")
            .map_err(|source| ProbeError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|source| ProbeError::Io { path: path.display().to_string(), source })?;
        Self::from_json(&text, &path.display().to_string())
    }
}

/// Logistic function, branch-by-sign so neither side overflows. The result is
/// clamped to the open interval (0, 1).
pub fn sigmoid(z: f64) -> f64 {
    let p = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Binary cross-entropy of probability `p` against target `y`, with `p`
/// clamped to `[PROB_EPS, 1 - PROB_EPS]`.
pub fn bce_loss(p: f64, y: Label) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    match y {
        Label::NonTarget => -p.ln(),
        Label::Target => -(1.0 - p).ln(),
    }
}

/// BCE evaluated from the logit. Equals `bce_loss(sigmoid(z), y)` up to
/// rounding, but stays accurate for large `|z|` and is exactly symmetric under
/// `(z, y) -> (-z, flip(y))`.
pub fn bce_from_logit(z: f64, y: Label) -> f64 {
    let raw = match y {
        Label::NonTarget => softplus(-z),
        Label::Target => softplus(z),
    };
    raw.clamp(-(1.0 - PROB_EPS).ln(), -PROB_EPS.ln())
}

/// `p - y`, written so that flipping both the logit and the label negates it exactly.
fn residual(z: f64, y: Label) -> f64 {
    match y {
        Label::NonTarget => -sigmoid(-z),
        Label::Target => sigmoid(z),
    }
}

/// Dense full-batch training data: row-major features widened to f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    dimension: usize,
    features: Vec<f64>,
    targets: Vec<Label>,
}

impl Batch {
    pub fn new(dimension: usize) -> Self {
        Batch { dimension, features: Vec::new(), targets: Vec::new() }
    }

    pub fn push(&mut self, features: &[f32], target: Label) -> Result<()> {
        if features.len() != self.dimension {
            return Err(ProbeError::DimensionMismatch { expected: self.dimension, actual: features.len() });
        }
        self.features.extend(features.iter().map(|&v| f64::from(v)));
        self.targets.push(target);
        Ok(())
    }

    /// Batch from records using their own labels (unlabeled rows are rejected).
    pub fn from_labeled<'a>(dimension: usize, records: impl IntoIterator<Item = &'a FeatureRecord>) -> Result<Self> {
        let mut b = Batch::new(dimension);
        for r in records {
            let label = r.label.ok_or(ProbeError::InvalidConfig(format!("row {} has no label", r.row_index)))?;
            b.push(&r.features, label)?;
        }
        Ok(b)
    }

    /// Batch assigning one fixed target to every record.
    pub fn with_target<'a>(
        dimension: usize,
        records: impl IntoIterator<Item = &'a FeatureRecord>,
        target: Label,
    ) -> Result<Self> {
        let mut b = Batch::new(dimension);
        for r in records {
            b.push(&r.features, target)?;
        }
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dimension..(i + 1) * self.dimension]
    }

    pub fn target(&self, i: usize) -> Label {
        self.targets[i]
    }

    pub fn extend(&mut self, other: &Batch) {
        assert_eq!(self.dimension, other.dimension, "batch dimensions differ");
        self.features.extend_from_slice(&other.features);
        self.targets.extend_from_slice(&other.targets);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad_w: Vec<f64>,
    pub grad_b: f64,
}

impl LossGrad {
    /// `self + scale * other`.
    pub fn add_scaled(mut self, other: &LossGrad, scale: f64) -> LossGrad {
        self.loss += scale * other.loss;
        for (g, o) in self.grad_w.iter_mut().zip(&other.grad_w) {
            *g += scale * o;
        }
        self.grad_b += scale * other.grad_b;
        self
    }
}

/// Mean BCE over the batch and its exact gradient. Rows are accumulated in
/// order, so the result is bitwise reproducible.
pub fn mean_loss_and_gradient(model: &ProbeModel, batch: &Batch) -> Result<LossGrad> {
    if batch.is_empty() {
        return Err(ProbeError::EmptyBatch);
    }
    model.check_dim(batch.dimension)?;
    let d = batch.dimension;
    let mut loss = 0.0;
    let mut grad_w = vec![0.0; d];
    let mut grad_b = 0.0;
    for i in 0..batch.len() {
        let x = batch.row(i);
        let y = batch.target(i);
        let z = model.logit_unchecked(x.iter().copied());
        loss += bce_from_logit(z, y);
        let r = residual(z, y);
        for (g, xv) in grad_w.iter_mut().zip(x) {
            *g += r * xv;
        }
        grad_b += r;
    }
    let n = batch.len() as f64;
    grad_w.iter_mut().for_each(|g| *g /= n);
    Ok(LossGrad { loss: loss / n, grad_w, grad_b: grad_b / n })
}

/// Mean BCE only.
pub fn mean_loss(model: &ProbeModel, batch: &Batch) -> Result<f64> {
    if batch.is_empty() {
        return Err(ProbeError::EmptyBatch);
    }
    model.check_dim(batch.dimension)?;
    let total: f64 = (0..batch.len())
        .map(|i| bce_from_logit(model.logit_unchecked(batch.row(i).iter().copied()), batch.target(i)))
        .sum();
    Ok(total / batch.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub max_steps: usize,
    /// Validation evaluations without improvement before stopping.
    pub patience: usize,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            max_steps: 2000,
            patience: 10,
            eval_every: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ProbeError::InvalidConfig(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be > 0");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if self.adam_epsilon.is_nan() || self.adam_epsilon <= 0.0 {
            return bad("adam_epsilon must be > 0");
        }
        if self.patience < 1 {
            return bad("patience must be >= 1");
        }
        if self.eval_every < 1 {
            return bad("eval_every must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m_w: Vec<f64>,
    v_w: Vec<f64>,
    m_b: f64,
    v_b: f64,
    step: u32,
}

impl AdamState {
    pub fn new(dimension: usize) -> Self {
        AdamState { m_w: vec![0.0; dimension], v_w: vec![0.0; dimension], m_b: 0.0, v_b: 0.0, step: 0 }
    }

    pub fn step_count(&self) -> u32 {
        self.step
    }
}

/// One bias-corrected Adam update of `(weights, bias)`.
pub fn adam_step(model: &mut ProbeModel, grad: &LossGrad, state: &mut AdamState, cfg: &TrainConfig) {
    state.step += 1;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let update = |param: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *param -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_epsilon);
    };
    for (((w, m), v), &g) in model.weights.iter_mut().zip(&mut state.m_w).zip(&mut state.v_w).zip(&grad.grad_w) {
        update(w, m, v, g);
    }
    update(&mut model.bias, &mut state.m_b, &mut state.v_b, grad.grad_b);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Tracks the best validation loss seen so far.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    best_index: usize,
    seen: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper { patience, best: f64::INFINITY, best_index: 0, seen: 0 }
    }

    /// Records the next evaluation. An evaluation improves on the best only if
    /// it is lower by at least `MIN_IMPROVEMENT`.
    pub fn observe(&mut self, loss: f64) -> StopDecision {
        let index = self.seen;
        self.seen += 1;
        if index == 0 || loss < self.best - MIN_IMPROVEMENT {
            self.best = loss;
            self.best_index = index;
        }
        if self.seen - 1 - self.best_index >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }

    pub fn best_index(&self) -> usize {
        self.best_index
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }
}

/// Replays a validation history; returns the decision after its last entry
/// and the index of the best entry.
pub fn early_stop_decision(history: &[f64], patience: usize) -> (StopDecision, usize) {
    let mut stopper = EarlyStopper::new(patience);
    let mut decision = StopDecision::Continue;
    for &h in history {
        decision = stopper.observe(h);
        if decision == StopDecision::Stop {
            break;
        }
    }
    (decision, stopper.best_index())
}

/// Result of one full-batch optimization run.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    /// Snapshot at the best validation evaluation.
    pub model: ProbeModel,
    pub steps_taken: usize,
    pub stopped_early: bool,
    /// Validation loss per evaluation; entry 0 is the starting model.
    pub history: Vec<f64>,
    pub best_index: usize,
}

/// Full-batch Adam from `start`, minimizing `objective`, with early stopping on
/// `validation`. The starting model is evaluated before the first step.
pub fn fit(
    start: &ProbeModel,
    cfg: &TrainConfig,
    mut objective: impl FnMut(&ProbeModel) -> Result<LossGrad>,
    mut validation: impl FnMut(&ProbeModel) -> Result<f64>,
) -> Result<FitOutcome> {
    cfg.validate()?;
    let mut model = start.clone();
    let mut state = AdamState::new(model.dimension());
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut best = model.clone();
    let mut history = Vec::new();

    let first = validation(&model)?;
    if !first.is_finite() {
        return Err(ProbeError::NonFinite { what: "validation loss", step: 0 });
    }
    history.push(first);
    stopper.observe(first);

    let mut steps = 0;
    let mut stopped_early = false;
    while steps < cfg.max_steps {
        let grad = objective(&model)?;
        if !grad.loss.is_finite() {
            return Err(ProbeError::NonFinite { what: "training loss", step: steps });
        }
        adam_step(&mut model, &grad, &mut state, cfg);
        steps += 1;
        if !model.is_finite() {
            return Err(ProbeError::NonFinite { what: "parameter", step: steps });
        }
        if steps % cfg.eval_every == 0 || steps == cfg.max_steps {
            let v = validation(&model)?;
            if !v.is_finite() {
                return Err(ProbeError::NonFinite { what: "validation loss", step: steps });
            }
            history.push(v);
            let decision = stopper.observe(v);
            if stopper.best_index() == history.len() - 1 {
                best = model.clone();
            }
            if decision == StopDecision::Stop {
                stopped_early = true;
                break;
            }
        }
    }
    Ok(FitOutcome { model: best, steps_taken: steps, stopped_early, history, best_index: stopper.best_index() })
}
