//! One function per subcommand. Each resolves its config, writes
//! `resolved_config.json` into the output directory, then its artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::info;
use wildattr::feature_store::{self, DatasetManifest, ManifestRecord};
use wildattr::metrics::{self, DEFAULT_HARD_SOURCES};
use wildattr::synth_bench::{self, ScenarioSpec, SweepAxis, SweepSpec};
use wildattr::trainers;
use wildattr::{
    ConstraintConfig, Dataset, EvalReport, FeatureRecord, Label, ProbeModel, PseudoLabelConfig, StoreError, TrainResult,
};

use crate::config::{self, config_error, FinetuneMode, RunConfig};
use crate::report;
use crate::{Common, FinetuneFlags, Infeasible};

pub const MODEL: &str = "model.json";
pub const TRAIN_RESULT: &str = "train_result.json";
pub const EVAL_JSON: &str = "eval_report.json";
pub const EVAL_CSV: &str = "eval_report.csv";
pub const REPORT_MD: &str = "report.md";
pub const REPORT_CSV: &str = "report.csv";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const SWEEP_JSON: &str = "sweep.json";

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Resolves flags against the optional config file and records the result.
fn prepare(common: &Common, command: &str, build: impl FnOnce(RunConfig) -> RunConfig) -> Result<RunConfig> {
    let over = config::read_override(common.config.as_deref())?;
    let seed = config::master_seed(common.seed, over.as_ref())?;
    let flags = build(RunConfig::new(command, seed, common.out.clone()));
    let cfg = config::resolve(flags, over)?;
    cfg.write_resolved()?;
    Ok(cfg)
}

fn constraint_from(tune: &FinetuneFlags) -> ConstraintConfig {
    ConstraintConfig { alpha_multiplier: tune.alpha_mult, lambda_initial: tune.lambda_init, ..Default::default() }
}

fn pseudo_from(tune: &FinetuneFlags) -> PseudoLabelConfig {
    PseudoLabelConfig { confidence_threshold: tune.confidence, ..Default::default() }
}

fn write_training(dir: &Path, result: &TrainResult) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    result.model.save(&dir.join(MODEL))?;
    write_text(&dir.join(TRAIN_RESULT), &(result.to_json() + "\n"))
}

fn write_eval(dir: &Path, report: &EvalReport) -> Result<()> {
    write_text(&dir.join(EVAL_JSON), &(report.to_json() + "\n"))?;
    write_text(&dir.join(EVAL_CSV), &report.to_csv())
}

fn infeasible_error(result: &TrainResult) -> Option<Infeasible> {
    result.infeasible.as_ref().map(|d| {
        Infeasible(format!(
            "constraint infeasible: lowest labeled loss {:.6} exceeds limit {:.6} (alpha {:.6}); baseline model written",
            d.min_id_loss, d.limit, d.alpha
        ))
    })
}

fn read_csv_features(path: &Path) -> Result<Vec<Vec<f32>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.with_context(|| format!("reading {}", path.display()))?;
        let row = record
            .iter()
            .map(|f| f.parse::<f32>())
            .collect::<std::result::Result<Vec<f32>, _>>()
            .map_err(|e| config_error(format!("{} line {}: {e}", path.display(), line + 1)))?;
        rows.push(row);
    }
    Ok(rows)
}

fn read_metadata(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                StoreError::ManifestParse { path: path.to_path_buf(), line: i + 1, detail: e.to_string() }.into()
            })
        })
        .collect()
}

fn dataset_from_csv(csv_path: &Path, metadata: &Path) -> Result<Dataset> {
    let rows = read_csv_features(csv_path)?;
    let meta = read_metadata(metadata)?;
    if rows.len() != meta.len() {
        return Err(StoreError::ManifestMismatch(format!(
            "{} has {} rows but {} has {} metadata lines",
            csv_path.display(),
            rows.len(),
            metadata.display(),
            meta.len()
        ))
        .into());
    }
    let dimension =
        rows.first().map(Vec::len).ok_or_else(|| config_error(format!("{} is empty", csv_path.display())))?;
    let records = rows
        .into_iter()
        .zip(meta)
        .enumerate()
        .map(|(row, (features, m))| {
            let label = match m.label {
                None => None,
                Some(v) => Some(
                    Label::from_u8(v)
                        .ok_or_else(|| StoreError::InvalidRecord { row, detail: format!("label {v} is not 0 or 1") })?,
                ),
            };
            Ok(FeatureRecord::new(features, m.source, m.role, label))
        })
        .collect::<std::result::Result<Vec<_>, StoreError>>()?;
    Ok(Dataset::new(dimension, records)?)
}

fn dataset_from_store(manifest_path: &Path, features: Option<&Path>) -> Result<Dataset> {
    let mut manifest = DatasetManifest::load(manifest_path)?;
    if let Some(f) = features {
        manifest.feature_file = f.display().to_string();
        manifest.base_dir = PathBuf::new();
    }
    let records = feature_store::read_feature_file(&manifest)?;
    Ok(Dataset::new(manifest.dimension, records)?)
}

fn source_counts(dataset: &Dataset) -> String {
    dataset
        .sources()
        .iter()
        .map(|s| format!("{s}={}", dataset.records().iter().filter(|r| &r.source == s).count()))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn ingest(
    manifest: Option<PathBuf>,
    features: Option<PathBuf>,
    csv: Option<PathBuf>,
    metadata: Option<PathBuf>,
    common: Common,
) -> Result<()> {
    let cfg = prepare(&common, "ingest", |mut c| {
        c.manifest = manifest;
        c.features = features;
        c.csv = csv;
        c.metadata = metadata;
        c
    })?;
    let dataset = match (&cfg.manifest, &cfg.csv) {
        (Some(m), None) => dataset_from_store(m, cfg.features.as_deref())?,
        (None, Some(c)) => dataset_from_csv(c, RunConfig::require(&cfg.metadata, "metadata")?)?,
        _ => return Err(config_error("ingest needs exactly one of --manifest or --csv")),
    };
    let (_, manifest_path) = feature_store::write_dataset(&dataset, &cfg.output_dir, "dataset")?;
    let back = feature_store::load_dataset(&manifest_path)?;
    if back != dataset {
        anyhow::bail!("round-trip verification of {} failed", manifest_path.display());
    }
    println!("ingested {} rows, dimension {} -> {}", dataset.len(), dataset.dimension(), manifest_path.display());
    println!("sources: {}", source_counts(&dataset));
    Ok(())
}

pub fn train(labeled: PathBuf, common: Common) -> Result<()> {
    let cfg = prepare(&common, "train", |mut c| {
        c.labeled = Some(labeled);
        c.with_training()
    })?;
    let data = feature_store::load_dataset(RunConfig::require(&cfg.labeled, "labeled")?)?;
    let split = *RunConfig::require(&cfg.split, "split")?;
    let train_cfg = *RunConfig::require(&cfg.train, "train")?;
    let result = trainers::train_baseline(&data, &split, &train_cfg)?;
    write_training(&cfg.output_dir, &result)?;
    println!(
        "baseline: labeled loss {:.6}, {} steps{}",
        result.baseline_loss,
        result.steps_taken,
        if result.stopped_early { " (early stop)" } else { "" }
    );
    Ok(())
}

pub fn finetune(
    mode: FinetuneMode,
    model: PathBuf,
    labeled: PathBuf,
    wild: PathBuf,
    tune: FinetuneFlags,
    common: Common,
) -> Result<()> {
    let mut cfg = prepare(&common, "finetune", |mut c| {
        c.mode = Some(mode);
        c.model = Some(model);
        c.labeled = Some(labeled);
        c.wild = Some(wild);
        c.constraint = Some(constraint_from(&tune));
        c.pseudo = Some(pseudo_from(&tune));
        c.with_training()
    })?;
    // Keep only the settings the chosen mode uses, then re-record them.
    let mode = *RunConfig::require(&cfg.mode, "mode")?;
    match mode {
        FinetuneMode::Constrained => cfg.pseudo = None,
        FinetuneMode::Pseudo => cfg.constraint = None,
    }
    cfg.write_resolved()?;

    let labeled = feature_store::load_dataset(RunConfig::require(&cfg.labeled, "labeled")?)?;
    let wild = feature_store::load_dataset(RunConfig::require(&cfg.wild, "wild")?)?;
    let model = ProbeModel::load(RunConfig::require(&cfg.model, "model")?)?;
    let split = *RunConfig::require(&cfg.split, "split")?;
    let train_cfg = *RunConfig::require(&cfg.train, "train")?;
    let baseline = TrainResult::from_baseline_model(model, &labeled, split)?;
    let result = match mode {
        FinetuneMode::Constrained => {
            let ccfg = RunConfig::require(&cfg.constraint, "constraint")?;
            trainers::finetune_constrained(&baseline, &labeled, &wild, ccfg, &train_cfg)?
        }
        FinetuneMode::Pseudo => {
            let pcfg = RunConfig::require(&cfg.pseudo, "pseudo")?;
            trainers::finetune_pseudo(&baseline, &labeled, &wild, pcfg, &train_cfg)?
        }
    };
    write_training(&cfg.output_dir, &result)?;
    if let Some(err) = infeasible_error(&result) {
        return Err(err.into());
    }
    match mode {
        FinetuneMode::Constrained => println!(
            "constrained: labeled loss {:.6} (limit {:.6}), wild loss {:.6}, lambda {}",
            result.final_id_loss,
            result.alpha.unwrap_or(f64::NAN),
            result.final_wild_loss.unwrap_or(f64::NAN),
            result.lambda_used.unwrap_or(f64::NAN)
        ),
        FinetuneMode::Pseudo => println!(
            "pseudo: labeled loss {:.6}, {} rounds, {} wild rows labeled",
            result.final_id_loss,
            result.pseudo_rounds.len(),
            result.pseudo_rounds.last().map_or(0, |r| r.total_pseudo_labeled)
        ),
    }
    Ok(())
}

pub fn eval(
    model: PathBuf,
    test: PathBuf,
    target_source: String,
    hard_sources: Option<Vec<String>>,
    common: Common,
) -> Result<()> {
    let cfg = prepare(&common, "eval", |mut c| {
        c.model = Some(model);
        c.test = Some(test);
        c.target_source = Some(target_source);
        c.hard_sources = Some(hard_sources.unwrap_or_else(|| DEFAULT_HARD_SOURCES.map(String::from).to_vec()));
        c
    })?;
    let model = ProbeModel::load(RunConfig::require(&cfg.model, "model")?)?;
    let test = feature_store::load_dataset(RunConfig::require(&cfg.test, "test")?)?;
    let report = metrics::evaluate_per_source(
        &model,
        &test,
        RunConfig::require(&cfg.target_source, "target_source")?,
        RunConfig::require(&cfg.hard_sources, "hard_sources")?,
    )?;
    write_eval(&cfg.output_dir, &report)?;
    print!("{}", report.to_csv());
    Ok(())
}

/// Writes the three scenario datasets as `labeled`, `wild` and `test` under `dir`.
fn write_scenario(scenario: &synth_bench::Scenario, dir: &Path) -> Result<()> {
    for (stem, data) in [("labeled", &scenario.labeled), ("wild", &scenario.wild), ("test", &scenario.test)] {
        let (_, path) = feature_store::write_dataset(data, dir, stem)?;
        info!("wrote {} rows to {}", data.len(), path.display());
    }
    Ok(())
}

pub fn synth(common: Common) -> Result<()> {
    let cfg = prepare(&common, "synth", |mut c| {
        c.scenario = Some(ScenarioSpec::standard(c.seed));
        c
    })?;
    let scenario = synth_bench::generate_scenario(RunConfig::require(&cfg.scenario, "scenario")?)?;
    write_scenario(&scenario, &cfg.output_dir)?;
    println!(
        "scenario: {} labeled, {} wild, {} test rows in dimension {} -> {}",
        scenario.labeled.len(),
        scenario.wild.len(),
        scenario.test.len(),
        scenario.spec.dimension,
        cfg.output_dir.display()
    );
    Ok(())
}

pub fn run(tune: FinetuneFlags, hard_sources: Option<Vec<String>>, common: Common) -> Result<()> {
    let mut cfg = prepare(&common, "run", |mut c| {
        c.scenario = Some(ScenarioSpec::standard(c.seed));
        c.constraint = Some(constraint_from(&tune));
        c.pseudo = Some(pseudo_from(&tune));
        c.hard_sources = hard_sources;
        c.with_training()
    })?;
    let spec = RunConfig::require(&cfg.scenario, "scenario")?.clone();
    if cfg.hard_sources.is_none() {
        cfg.hard_sources = Some(ScenarioSpec::names(&spec.unseen_sources));
        cfg.write_resolved()?;
    }
    let scenario = synth_bench::generate_scenario(&spec)?;
    write_scenario(&scenario, &cfg.output_dir.join("data"))?;

    let split = *RunConfig::require(&cfg.split, "split")?;
    let train_cfg = *RunConfig::require(&cfg.train, "train")?;
    let hard = RunConfig::require(&cfg.hard_sources, "hard_sources")?;
    let baseline = trainers::train_baseline(&scenario.labeled, &split, &train_cfg)?;
    let pseudo = trainers::finetune_pseudo(
        &baseline,
        &scenario.labeled,
        &scenario.wild,
        RunConfig::require(&cfg.pseudo, "pseudo")?,
        &train_cfg,
    )?;
    let constrained = trainers::finetune_constrained(
        &baseline,
        &scenario.labeled,
        &scenario.wild,
        RunConfig::require(&cfg.constraint, "constraint")?,
        &train_cfg,
    )?;

    let mut reports = [None, None, None];
    for (slot, ((dir, _), result)) in
        reports.iter_mut().zip(report::MODES.iter().zip([&baseline, &pseudo, &constrained]))
    {
        let out = cfg.output_dir.join(dir);
        write_training(&out, result)?;
        let r = metrics::evaluate_per_source(&result.model, &scenario.test, &spec.target.name, hard)?;
        write_eval(&out, &r)?;
        *slot = Some(r);
    }
    let grid = report::build(&reports);
    let markdown = grid.to_markdown(&spec.target.name);
    write_text(&cfg.output_dir.join(REPORT_MD), &markdown)?;
    write_text(&cfg.output_dir.join(REPORT_CSV), &grid.to_csv())?;
    print!("{markdown}");
    if let Some(err) = infeasible_error(&constrained) {
        return Err(err.into());
    }
    Ok(())
}

pub fn sweep(axis: SweepAxis, values: Vec<f64>, seeds: u64, tune: FinetuneFlags, common: Common) -> Result<()> {
    let cfg = prepare(&common, "sweep", |mut c| {
        c.scenario = Some(ScenarioSpec::standard(c.seed));
        c.constraint = Some(constraint_from(&tune));
        c.sweep = Some(SweepSpec { axis, values, seeds: (0..seeds).map(|i| c.seed.wrapping_add(i)).collect() });
        c.with_training()
    })?;
    let spec = RunConfig::require(&cfg.sweep, "sweep")?;
    let base = RunConfig::require(&cfg.scenario, "scenario")?;
    let report = synth_bench::run_ablation(spec, base, &cfg.experiment())?;
    write_text(&cfg.output_dir.join(SWEEP_CSV), &report.to_csv())?;
    write_text(&cfg.output_dir.join(SWEEP_JSON), &(report.to_json() + "\n"))?;
    print!("{}", report.to_csv());
    Ok(())
}

fn read_report(path: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn report(run: PathBuf, out: Option<PathBuf>) -> Result<()> {
    let out = out.unwrap_or_else(|| run.clone());
    let mut cfg = RunConfig::new("report", 0, out);
    cfg.run_dir = Some(run.clone());
    cfg.write_resolved()?;
    let mut reports = [None, None, None];
    for (slot, (dir, _)) in reports.iter_mut().zip(report::MODES) {
        let path = run.join(dir).join(EVAL_JSON);
        if path.exists() {
            *slot = Some(read_report(&path)?);
        }
    }
    let Some(first) = reports.iter().flatten().next() else {
        return Err(config_error(format!("no {EVAL_JSON} found under {}", run.display())));
    };
    let target = first.target_source.clone();
    let grid = report::build(&reports);
    let markdown = grid.to_markdown(&target);
    write_text(&cfg.output_dir.join(REPORT_MD), &markdown)?;
    write_text(&cfg.output_dir.join(REPORT_CSV), &grid.to_csv())?;
    print!("{markdown}");
    Ok(())
}
