//! Experiment orchestration: configs, cross-validation, sweeps and reports.

mod report;
mod search;

use std::collections::HashMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use report::{audit_leakage, report_rows, write_report_csv, LeakageAudit, ReportRow};
pub use search::{SearchSpace, Trial};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::metrics::MetricResult;
use crate::models::{train, Model, ModelConfig, ModelTag, TrainConfig, TrainHistory};
use crate::preprocess::{expand_dataset, window_all, ExpandedSequence, Split, NUM_FOLDS};
use crate::protocols::{
    eval_question_level, evaluate_fold, EvalReport, FoldEval, FusionMechanism, ProtocolSettings,
};

pub const DEFAULT_TRIAL_BUDGET: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub budget: usize,
    pub seed: u64,
    pub space: SearchSpace,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            budget: DEFAULT_TRIAL_BUDGET,
            seed: 0,
            space: SearchSpace::default(),
        }
    }
}

/// One JSON document describing an experiment. Every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Canonical CSV of the preprocessed dataset.
    pub dataset: Option<PathBuf>,
    /// Persisted split; created from `split_seed` when absent.
    pub split: Option<PathBuf>,
    pub split_seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub protocol: ProtocolSettings,
    pub output_dir: PathBuf,
    pub sweep: SweepSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: None,
            split: None,
            split_seed: 42,
            model: ModelConfig::default_for(ModelTag::Dkt),
            train: TrainConfig::default(),
            protocol: ProtocolSettings::default(),
            output_dir: PathBuf::from("out"),
            sweep: SweepSpec::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.sweep.budget == 0 {
            return Err(Error::invalid("sweep budget must be >= 1"));
        }
        Ok(())
    }

    /// Applies one search trial to a copy of this config.
    pub fn with_trial(&self, trial: &Trial) -> ExperimentConfig {
        let mut cfg = self.clone();
        cfg.model = trial.model.clone();
        cfg.train.learning_rate = trial.learning_rate;
        cfg.train.dropout = trial.dropout;
        cfg.train.seed = trial.seed;
        cfg
    }
}

/// SHA-256 of the config's canonical JSON (object keys sorted, no
/// whitespace). The output directory is excluded: moving results must not
/// change their identity.
pub fn config_hash(config: &ExperimentConfig) -> Result<String> {
    let mut value = serde_json::to_value(config)?;
    if let Some(obj) = value.as_object_mut() {
        obj.remove("output_dir");
    }
    // serde_json's default map is ordered by key, so this is canonical.
    let canonical = serde_json::to_string(&value)?;
    Ok(hex::encode(Sha256::digest(canonical.as_bytes())))
}

/// Result of training on four folds and validating on the fifth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub model: ModelTag,
    pub fold: usize,
    pub seed: u64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    /// Question-level validation result of the restored best epoch.
    pub validation: MetricResult,
    /// Held-out test protocols; absent during sweeps.
    pub test: Option<FoldEval>,
    pub wall_time_secs: f64,
    pub history: TrainHistory,
}

/// Everything persisted for one config: `runs/<hash>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLedger {
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub records: Vec<RunRecord>,
}

impl RunLedger {
    pub fn mean_validation_auc(&self) -> f64 {
        self.records.iter().map(|r| r.validation.auc).sum::<f64>() / self.records.len() as f64
    }

    pub fn test_aucs(&self) -> Option<Vec<f64>> {
        self.records.iter().map(|r| r.test.as_ref().map(|t| t.question.auc)).collect()
    }

    pub fn test_accuracies(&self) -> Option<Vec<f64>> {
        self.records.iter().map(|r| r.test.as_ref().map(|t| t.question.accuracy)).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// `<dir>/runs/<hash>.json`.
    pub fn path_in(&self, dir: impl AsRef<Path>) -> PathBuf {
        dir.as_ref().join("runs").join(format!("{}.json", self.config_hash))
    }
}

/// Expanded sequences looked up by student id.
pub struct PreparedData {
    pub num_items: usize,
    by_id: HashMap<String, ExpandedSequence>,
}

impl PreparedData {
    pub fn new(dataset: &Dataset) -> Result<Self> {
        let by_id = expand_dataset(dataset)?
            .into_iter()
            .map(|s| (s.student_id.clone(), s))
            .collect();
        Ok(PreparedData {
            num_items: dataset.num_items(),
            by_id,
        })
    }

    pub fn select(&self, ids: &[String]) -> Result<Vec<ExpandedSequence>> {
        ids.iter()
            .map(|id| {
                self.by_id
                    .get(id)
                    .cloned()
                    .ok_or_else(|| Error::invalid(format!("split student `{id}` is not in the dataset")))
            })
            .collect()
    }
}

/// Trains a fresh model with validation fold `fold` and the other folds as
/// training data.
pub fn train_fold(
    data: &PreparedData,
    split: &Split,
    config: &ExperimentConfig,
    fold: usize,
) -> Result<(Model, TrainHistory)> {
    if fold >= split.folds.len() {
        return Err(Error::invalid(format!("fold {fold} out of range")));
    }
    let train_seqs = data.select(&split.train_ids(fold))?;
    let val_seqs = data.select(&split.folds[fold])?;
    let windows = window_all(&train_seqs, config.train.window_len)?;
    let mut model = Model::new(&config.model, data.num_items, config.train.seed)?;
    let history = train(&mut model, &windows, &val_seqs, &config.train, &format!("fold {fold}"))?;
    Ok((model, history))
}

/// Five-fold cross-validation. With `evaluate_test`, each fold model is also
/// run through every configured protocol on the held-out test students.
pub fn cross_validate(
    data: &PreparedData,
    split: &Split,
    config: &ExperimentConfig,
    evaluate_test: bool,
) -> Result<RunLedger> {
    cross_validate_with_models(data, split, config, evaluate_test).map(|(ledger, _)| ledger)
}

/// [`cross_validate`] that also returns the trained fold models in fold order.
pub fn cross_validate_with_models(
    data: &PreparedData,
    split: &Split,
    config: &ExperimentConfig,
    evaluate_test: bool,
) -> Result<(RunLedger, Vec<Model>)> {
    config.validate()?;
    if split.folds.len() != NUM_FOLDS {
        return Err(Error::invalid(format!(
            "split has {} folds, expected {NUM_FOLDS}",
            split.folds.len()
        )));
    }
    let hash = config_hash(config)?;
    let test_seqs = if evaluate_test {
        Some(data.select(&split.test_ids)?)
    } else {
        None
    };
    let results = (0..NUM_FOLDS)
        .into_par_iter()
        .map(|fold| -> Result<(RunRecord, Model)> {
            let start = Instant::now();
            let (model, history) = train_fold(data, split, config, fold)?;
            let val_seqs = data.select(&split.folds[fold])?;
            let (_, validation) = eval_question_level(&model, &val_seqs, FusionMechanism::LfAvg)?;
            let test = match &test_seqs {
                Some(seqs) => Some(evaluate_fold(&model, seqs, &config.protocol, fold)?),
                None => None,
            };
            log::info!(
                "{} fold {fold}: best epoch {} val auc {:.4}",
                config.model.tag(),
                history.best_epoch,
                validation.auc
            );
            let record = RunRecord {
                config_hash: hash.clone(),
                model: config.model.tag(),
                fold,
                seed: config.train.seed,
                best_epoch: history.best_epoch,
                epochs_run: history.epochs_run(),
                validation,
                test,
                wall_time_secs: start.elapsed().as_secs_f64(),
                history,
            };
            Ok((record, model))
        })
        .collect::<Result<Vec<_>>>()?;
    let (records, models) = results.into_iter().unzip();
    Ok((
        RunLedger {
            config_hash: hash,
            config: config.clone(),
            records,
        },
        models,
    ))
}

/// Fills in the test results of `ledger` from its trained fold models.
pub fn evaluate_ledger(
    ledger: &mut RunLedger,
    models: &[Model],
    data: &PreparedData,
    split: &Split,
) -> Result<EvalReport> {
    if models.len() != ledger.records.len() {
        return Err(Error::invalid(format!(
            "{} models for {} fold records",
            models.len(),
            ledger.records.len()
        )));
    }
    let test_seqs = data.select(&split.test_ids)?;
    let settings = ledger.config.protocol.clone();
    let folds = models
        .par_iter()
        .zip(&ledger.records)
        .map(|(m, r)| evaluate_fold(m, &test_seqs, &settings, r.fold))
        .collect::<Result<Vec<_>>>()?;
    for (record, eval) in ledger.records.iter_mut().zip(&folds) {
        record.test = Some(eval.clone());
    }
    Ok(EvalReport {
        model: ledger.config.model.tag().to_string(),
        settings,
        folds,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub requested_budget: usize,
    /// Trials in sampling order; none has test results.
    pub trials: Vec<RunLedger>,
    /// Index into `trials` with the highest mean validation AUC (first on ties).
    pub best: usize,
}

impl SweepResult {
    pub fn best_trial(&self) -> &RunLedger {
        &self.trials[self.best]
    }
}

/// Index of the highest mean validation AUC; earliest wins ties.
pub fn select_best(trials: &[RunLedger]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, t) in trials.iter().enumerate() {
        let auc = t.mean_validation_auc();
        if best.is_none_or(|(_, b)| auc > b) {
            best = Some((i, auc));
        }
    }
    best.map(|(i, _)| i)
}

/// Seeded random search. Model selection only looks at validation folds;
/// the test students are never evaluated.
pub fn sweep(data: &PreparedData, split: &Split, config: &ExperimentConfig) -> Result<SweepResult> {
    config.validate()?;
    let trials = config
        .sweep
        .space
        .sample_trials(&config.model, config.sweep.budget, config.sweep.seed)?;
    let mut ledgers = Vec::with_capacity(trials.len());
    for (i, trial) in trials.iter().enumerate() {
        let cfg = config.with_trial(trial);
        log::info!("trial {}/{}: {}", i + 1, trials.len(), serde_json::to_string(trial)?);
        ledgers.push(cross_validate(data, split, &cfg, false)?);
    }
    let best = select_best(&ledgers).expect("budget >= 1");
    Ok(SweepResult {
        requested_budget: config.sweep.budget,
        trials: ledgers,
        best,
    })
}
