use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    eval_all_in_one, eval_multistep_all, eval_one_by_one, eval_question_level, kc_level_metrics,
    split_by_length, FeedbackMode, FusionMechanism, MultiStepConfig, MultiStepMode,
    MultiStepResult, DEFAULT_LENGTH_CUTOFF,
};
use crate::error::{Error, Result};
use crate::metrics::{MetricResult, DEFAULT_ALPHA, DEFAULT_THRESHOLD};
use crate::models::KtModel;
use crate::preprocess::ExpandedSequence;

/// Every protocol choice that affects the reported numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolSettings {
    pub fusion: FusionMechanism,
    pub threshold: f64,
    pub length_cutoff: usize,
    /// Observed fractions for multi-step evaluation; empty disables it.
    pub observed_pcts: Vec<f64>,
    pub multistep_modes: Vec<MultiStepMode>,
    pub feedback: FeedbackMode,
    pub ttest: String,
    pub ttest_alpha: f64,
    pub attention_context: String,
    pub hyperparameter_search: String,
}

impl Default for ProtocolSettings {
    fn default() -> Self {
        ProtocolSettings {
            fusion: FusionMechanism::LfAvg,
            threshold: DEFAULT_THRESHOLD,
            length_cutoff: DEFAULT_LENGTH_CUTOFF,
            observed_pcts: Vec::new(),
            multistep_modes: vec![MultiStepMode::Accumulative, MultiStepMode::NonAccumulative],
            feedback: FeedbackMode::Label,
            ttest: "paired, two-sided".into(),
            ttest_alpha: DEFAULT_ALPHA,
            attention_context: "attention models query with a sliding context of the last max_len-1 steps"
                .into(),
            hyperparameter_search: "seeded uniform random search over a fixed grid (replaces Bayesian search)"
                .into(),
        }
    }
}

/// Question-level results on sequences longer than the cutoff and the rest.
/// A subgroup without both label classes is absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthSubgroups {
    pub cutoff: usize,
    pub n_long: usize,
    pub n_short: usize,
    pub long: Option<MetricResult>,
    pub short: Option<MetricResult>,
}

/// All protocol results for one trained fold model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldEval {
    pub fold: usize,
    /// Question-level all-in-one result with the configured fusion.
    pub question: MetricResult,
    pub kc_all_in_one: Option<MetricResult>,
    pub kc_one_by_one: Option<MetricResult>,
    pub length: LengthSubgroups,
    pub multistep: Vec<MultiStepResult>,
}

impl FoldEval {
    /// KC-level one-by-one AUC minus all-in-one AUC.
    pub fn leakage_gain(&self) -> Option<f64> {
        Some(self.kc_one_by_one?.auc - self.kc_all_in_one?.auc)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub settings: ProtocolSettings,
    pub folds: Vec<FoldEval>,
}

impl EvalReport {
    pub fn aucs(&self) -> Vec<f64> {
        self.folds.iter().map(|f| f.question.auc).collect()
    }

    pub fn accuracies(&self) -> Vec<f64> {
        self.folds.iter().map(|f| f.question.accuracy).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
    }
}

/// Runs every configured protocol on `sequences` (normally the test students).
pub fn evaluate_fold<M: KtModel>(
    model: &M,
    sequences: &[ExpandedSequence],
    settings: &ProtocolSettings,
    fold: usize,
) -> Result<FoldEval> {
    let (_, question) = eval_question_level(model, sequences, settings.fusion)?;
    let kc_all_in_one = kc_level_metrics(&eval_all_in_one(model, sequences)).ok();
    let kc_one_by_one = kc_level_metrics(&eval_one_by_one(model, sequences)).ok();

    let (long, short) = split_by_length(sequences, settings.length_cutoff)?;
    let subgroup = |seqs: &[ExpandedSequence]| -> Option<MetricResult> {
        if seqs.is_empty() {
            None
        } else {
            eval_question_level(model, seqs, settings.fusion).ok().map(|(_, m)| m)
        }
    };
    let length = LengthSubgroups {
        cutoff: settings.length_cutoff,
        n_long: long.len(),
        n_short: short.len(),
        long: subgroup(&long),
        short: subgroup(&short),
    };

    let mut multistep = Vec::new();
    for &mode in &settings.multistep_modes {
        for &pct in &settings.observed_pcts {
            let cfg = MultiStepConfig {
                observed_pct: pct,
                mode,
                feedback: settings.feedback,
                fusion: settings.fusion,
            };
            multistep.push(eval_multistep_all(model, sequences, &cfg)?.1);
        }
    }

    Ok(FoldEval {
        fold,
        question,
        kc_all_in_one,
        kc_one_by_one,
        length,
        multistep,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::ExpandedStep;
    use crate::protocols::testing::CountingModel;

    fn seq(id: &str, groups: &[(&[usize], u8)]) -> ExpandedSequence {
        let mut steps = Vec::new();
        for (g, (items, r)) in groups.iter().enumerate() {
            for &item_id in *items {
                steps.push(ExpandedStep {
                    item_id,
                    group_id: g,
                    response: *r,
                    source_position: g,
                });
            }
        }
        ExpandedSequence {
            student_id: id.into(),
            steps,
            question_ids: (0..groups.len()).map(|g| format!("q{g}")).collect(),
        }
    }

    fn data() -> Vec<ExpandedSequence> {
        vec![
            seq("a", &[(&[0, 1], 1), (&[1], 1), (&[0, 2], 1), (&[2], 0), (&[1], 1)]),
            seq("b", &[(&[0], 0), (&[1, 2], 0), (&[0], 1), (&[2, 1], 1)]),
        ]
    }

    #[test]
    fn empty_subgroup_is_absent() {
        let m = CountingModel::new(3);
        let settings = ProtocolSettings {
            length_cutoff: 100,
            ..Default::default()
        };
        let eval = evaluate_fold(&m, &data(), &settings, 0).unwrap();
        assert_eq!(eval.length.n_long, 0);
        assert!(eval.length.long.is_none());
        assert_eq!(eval.length.short, Some(eval.question));
        assert!(eval.leakage_gain().unwrap() > 0.0);
    }

    #[test]
    fn report_round_trips_through_json() {
        let m = CountingModel::new(3);
        let settings = ProtocolSettings {
            observed_pcts: vec![0.5],
            ..Default::default()
        };
        let report = EvalReport {
            model: "counting".into(),
            settings: settings.clone(),
            folds: vec![evaluate_fold(&m, &data(), &settings, 0).unwrap()],
        };
        assert_eq!(report.folds[0].multistep.len(), 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        report.save(&path).unwrap();
        assert_eq!(EvalReport::load(&path).unwrap(), report);
    }
}
