//! Fold aggregation into `report.csv` and the leakage audit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::RunLedger;
use crate::error::{Error, Result};
use crate::metrics::{format_mean_std, mean_std, paired_t_test, MetricResult, DEFAULT_ALPHA};
use crate::models::KtModel;
use crate::preprocess::ExpandedSequence;
use crate::protocols::{eval_all_in_one, eval_one_by_one, kc_level_metrics};

/// One line of `report.csv`: fold statistics of one config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub config_hash: String,
    pub folds: usize,
    pub test_auc_mean: f64,
    pub test_auc_std: f64,
    pub test_auc: String,
    pub test_accuracy: String,
    /// Paired t-test of this row's fold AUCs against the best row:
    /// `*` better, `◦` no significant difference, `•` worse.
    pub vs_best: String,
    pub ttest: String,
}

/// Aggregates ledgers that carry test results. The best row is the one with
/// the highest mean test AUC; it is compared with itself (`◦`).
pub fn report_rows(ledgers: &[RunLedger]) -> Result<Vec<ReportRow>> {
    let mut aucs = Vec::with_capacity(ledgers.len());
    for l in ledgers {
        let a = l.test_aucs().ok_or_else(|| {
            Error::invalid(format!("run {} has no test results to report", l.config_hash))
        })?;
        if a.len() < 2 {
            return Err(Error::invalid(format!("run {} has fewer than two folds", l.config_hash)));
        }
        aucs.push(a);
    }
    let best = (0..aucs.len())
        .max_by(|&i, &j| mean_std(&aucs[i]).0.total_cmp(&mean_std(&aucs[j]).0).then(j.cmp(&i)))
        .ok_or_else(|| Error::invalid("no runs to report"))?;
    ledgers
        .iter()
        .zip(&aucs)
        .map(|(l, a)| {
            let (mean, std) = mean_std(a);
            let marker = paired_t_test(a, &aucs[best], DEFAULT_ALPHA)?.marker;
            Ok(ReportRow {
                model: l.config.model.tag().to_string(),
                config_hash: l.config_hash.clone(),
                folds: a.len(),
                test_auc_mean: mean,
                test_auc_std: std,
                test_auc: format_mean_std(a),
                test_accuracy: format_mean_std(&l.test_accuracies().expect("checked with aucs")),
                vs_best: marker.symbol().to_string(),
                ttest: format!("paired two-sided, alpha={DEFAULT_ALPHA}"),
            })
        })
        .collect()
}

pub fn write_report_csv(rows: &[ReportRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut wtr = csv::Writer::from_path(path)?;
    for row in rows {
        wtr.serialize(row)?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))
}

/// KC-level AUC gain of one-by-one over all-in-one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageAudit {
    pub model: String,
    pub all_in_one: MetricResult,
    pub one_by_one: MetricResult,
    pub gain: f64,
}

pub fn audit_leakage<M: KtModel>(model: &M, sequences: &[ExpandedSequence]) -> Result<LeakageAudit> {
    let all_in_one = kc_level_metrics(&eval_all_in_one(model, sequences))?;
    let one_by_one = kc_level_metrics(&eval_one_by_one(model, sequences))?;
    Ok(LeakageAudit {
        model: model.arch().to_string(),
        all_in_one,
        one_by_one,
        gain: one_by_one.auc - all_in_one.auc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::DEFAULT_THRESHOLD;
    use crate::protocols::{FoldEval, LengthSubgroups};
    use crate::runner::{ExperimentConfig, RunRecord};

    fn ledger(hash: &str, aucs: &[f64]) -> RunLedger {
        let records = aucs
            .iter()
            .enumerate()
            .map(|(fold, &auc)| {
                let m = MetricResult {
                    auc,
                    accuracy: DEFAULT_THRESHOLD,
                    n_pos: 1,
                    n_neg: 1,
                };
                RunRecord {
                    config_hash: hash.into(),
                    model: crate::models::ModelTag::Dkt,
                    fold,
                    seed: 42,
                    best_epoch: 1,
                    epochs_run: 1,
                    validation: m,
                    test: Some(FoldEval {
                        fold,
                        question: m,
                        kc_all_in_one: None,
                        kc_one_by_one: None,
                        length: LengthSubgroups {
                            cutoff: 200,
                            n_long: 0,
                            n_short: 0,
                            long: None,
                            short: None,
                        },
                        multistep: Vec::new(),
                    }),
                    wall_time_secs: 0.0,
                    history: crate::models::TrainHistory {
                        initial_val_auc: 0.5,
                        epochs: Vec::new(),
                        best_epoch: 1,
                        best_val_auc: auc,
                        stopped_early: false,
                    },
                }
            })
            .collect();
        RunLedger {
            config_hash: hash.into(),
            config: ExperimentConfig::default(),
            records,
        }
    }

    #[test]
    fn rows_format_mean_and_sample_std() {
        let a = [0.7530, 0.7541, 0.7552, 0.7541, 0.7541];
        let rows = report_rows(&[ledger("a", &a), ledger("b", &[0.70, 0.71, 0.69, 0.70, 0.705])]).unwrap();
        let mean = a.iter().sum::<f64>() / 5.0;
        let std = (a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0).sqrt();
        assert!((rows[0].test_auc_mean - mean).abs() < 1e-12);
        assert!((rows[0].test_auc_std - std).abs() < 1e-12);
        assert_eq!(rows[0].test_auc, "0.7541±0.0008");
        assert_eq!(rows[0].vs_best, "◦");
        assert_eq!(rows[1].vs_best, "•");
    }

    #[test]
    fn missing_test_results_are_an_error() {
        let mut l = ledger("a", &[0.7, 0.8]);
        l.records[0].test = None;
        assert!(report_rows(&[l]).is_err());
    }

    #[test]
    fn csv_has_header_and_rows() {
        let rows = report_rows(&[ledger("a", &[0.7, 0.8, 0.75])]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.csv");
        write_report_csv(&rows, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("model,config_hash,folds,"));
        assert_eq!(text.lines().count(), 2);
    }
}
