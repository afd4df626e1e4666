//! Target-generator attribution over frozen image embeddings.
//!
//! A linear probe is trained to separate one target generator (label 0) from
//! every other source (label 1). The probe can then be fine-tuned with
//! unlabeled "wild" feature vectors, either by constrained optimization (the
//! wild term is pushed towards non-target while the labeled loss is held under
//! a threshold) or by iterative pseudo-labeling. Evaluation uses average
//! precision and AUROC per comparison source.
//!
//! Modules:
//! - [`feature_store`]: AFV1 feature files, JSON-lines manifests, stratified splits.
//! - [`linear_probe`]: the probe, BCE loss and gradients, Adam, early stopping.
//! - [`trainers`]: baseline, constrained and pseudo-label training procedures.
//! - [`metrics`]: AP / AUROC and per-source evaluation reports.
//! - [`synth_bench`]: seeded Gaussian scenarios, experiments and ablation sweeps.

pub mod feature_store;
pub mod linear_probe;
pub mod metrics;
pub mod seed;
pub mod synth_bench;
pub mod trainers;

pub use feature_store::{Dataset, DatasetManifest, FeatureRecord, Label, Role, SplitSpec, StoreError};
pub use linear_probe::{ProbeModel, Provenance, TrainConfig, TrainMode};
pub use metrics::{EvalReport, ScoredSample};
pub use trainers::{ConstraintConfig, PseudoLabelConfig, TrainError, TrainResult};
