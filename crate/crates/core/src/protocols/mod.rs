//! Evaluation protocols.
//!
//! * [`eval_all_in_one`] predicts every KC of a question from the state
//!   *before* that question, then advances through the question's steps with
//!   their ground truth. This is the leakage-free protocol.
//! * [`eval_one_by_one`] is plain teacher-forced next-step prediction on the
//!   expanded sequence. Later KCs of a question see the ground truth of their
//!   siblings; it exists to measure that leakage.
//! * [`fuse`] turns per-KC predictions into one question-level prediction.
//! * [`eval_multistep`] forecasts the unobserved suffix of a sequence,
//!   accumulatively or not.
//!
//! Evaluators only read the model; repeated calls give bit-identical output.

mod fusion;
mod multistep;
mod report;

use std::fs::File;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use fusion::{fuse, Fused, FusionMechanism};
pub use multistep::{
    eval_multistep, eval_multistep_all, FeedbackMode, MultiStepConfig, MultiStepMode,
    MultiStepResult, OBSERVED_PCTS,
};
pub use report::{evaluate_fold, EvalReport, FoldEval, LengthSubgroups, ProtocolSettings};

use crate::error::{Error, Result};
use crate::metrics::{MetricResult, DEFAULT_THRESHOLD};
use crate::models::KtModel;
use crate::preprocess::ExpandedSequence;

/// Long/short cutoff on interaction count.
pub const DEFAULT_LENGTH_CUTOFF: usize = 200;

/// Per-KC predictions for one source interaction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupPrediction {
    pub student_id: String,
    pub source_position: usize,
    pub question_id: String,
    /// (item index, probability) in expansion order.
    pub kc_probs: Vec<(usize, f64)>,
    /// Pre-output representations, when collected and supported.
    #[serde(skip)]
    pub kc_reprs: Option<Vec<Vec<f64>>>,
    pub label: u8,
}

/// One question-level prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub student_id: String,
    pub source_position: usize,
    pub question_id: String,
    pub kc_probs: Vec<(usize, f64)>,
    pub fused_prob: f64,
    pub fused_label: u8,
    pub label: u8,
}

/// `(item, probability)` pairs and, on request, the items' representations.
type GroupQuery = (Vec<(usize, f64)>, Option<Vec<Vec<f64>>>);

/// Queries every item of a group against one state.
pub(crate) fn query_group<M: KtModel>(
    model: &M,
    state: &M::State,
    items: &[usize],
    collect_reprs: bool,
) -> GroupQuery {
    let probs = items.iter().map(|&i| (i, model.query(state, i))).collect();
    let reprs = if collect_reprs {
        items
            .iter()
            .map(|&i| model.query_repr(state, i))
            .collect::<Option<Vec<_>>>()
    } else {
        None
    };
    (probs, reprs)
}

fn all_in_one_sequence<M: KtModel>(
    model: &M,
    seq: &ExpandedSequence,
    collect_reprs: bool,
) -> Vec<GroupPrediction> {
    let mut state = model.init_state();
    let mut out = Vec::with_capacity(seq.num_groups());
    for range in seq.group_ranges() {
        let steps = &seq.steps[range];
        let items: Vec<usize> = steps.iter().map(|s| s.item_id).collect();
        let (kc_probs, kc_reprs) = query_group(model, &state, &items, collect_reprs);
        let pos = steps[0].source_position;
        out.push(GroupPrediction {
            student_id: seq.student_id.clone(),
            source_position: pos,
            question_id: seq.question_ids[pos].clone(),
            kc_probs,
            kc_reprs,
            label: steps[0].response,
        });
        for s in steps {
            model.advance(&mut state, s.item_id, s.response);
        }
    }
    out
}

/// All-in-one KC prediction: each group is queried from the pre-group state.
pub fn eval_all_in_one<M: KtModel>(model: &M, sequences: &[ExpandedSequence]) -> Vec<GroupPrediction> {
    eval_all_in_one_inner(model, sequences, false)
}

/// As [`eval_all_in_one`], also collecting representations for early fusion.
pub fn eval_all_in_one_with_reprs<M: KtModel>(
    model: &M,
    sequences: &[ExpandedSequence],
) -> Vec<GroupPrediction> {
    eval_all_in_one_inner(model, sequences, true)
}

fn eval_all_in_one_inner<M: KtModel>(
    model: &M,
    sequences: &[ExpandedSequence],
    collect_reprs: bool,
) -> Vec<GroupPrediction> {
    sequences
        .par_iter()
        .map(|s| all_in_one_sequence(model, s, collect_reprs))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

/// One-by-one KC prediction: every step is predicted after advancing through
/// all previous steps, siblings included.
pub fn eval_one_by_one<M: KtModel>(model: &M, sequences: &[ExpandedSequence]) -> Vec<GroupPrediction> {
    sequences
        .par_iter()
        .map(|seq| {
            let mut state = model.init_state();
            let mut out = Vec::with_capacity(seq.num_groups());
            for range in seq.group_ranges() {
                let steps = &seq.steps[range];
                let mut kc_probs = Vec::with_capacity(steps.len());
                for s in steps {
                    kc_probs.push((s.item_id, model.query(&state, s.item_id)));
                    model.advance(&mut state, s.item_id, s.response);
                }
                let pos = steps[0].source_position;
                out.push(GroupPrediction {
                    student_id: seq.student_id.clone(),
                    source_position: pos,
                    question_id: seq.question_ids[pos].clone(),
                    kc_probs,
                    kc_reprs: None,
                    label: steps[0].response,
                });
            }
            out
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

/// KC-level scores and labels, one entry per expanded step.
pub fn kc_level_scores(groups: &[GroupPrediction]) -> (Vec<f64>, Vec<u8>) {
    groups
        .iter()
        .flat_map(|g| g.kc_probs.iter().map(move |&(_, p)| (p, g.label)))
        .unzip()
}

pub fn kc_level_metrics(groups: &[GroupPrediction]) -> Result<MetricResult> {
    let (scores, labels) = kc_level_scores(groups);
    MetricResult::compute(&scores, &labels)
}

/// Fuses every group with `mechanism`.
pub fn fuse_groups<M: KtModel>(
    model: &M,
    groups: &[GroupPrediction],
    mechanism: FusionMechanism,
    threshold: f64,
) -> Result<Vec<PredictionRecord>> {
    groups
        .iter()
        .map(|g| {
            let probs: Vec<f64> = g.kc_probs.iter().map(|&(_, p)| p).collect();
            let fused = fuse(model, &probs, g.kc_reprs.as_deref(), mechanism, threshold)?;
            Ok(PredictionRecord {
                student_id: g.student_id.clone(),
                source_position: g.source_position,
                question_id: g.question_id.clone(),
                kc_probs: g.kc_probs.clone(),
                fused_prob: fused.prob,
                fused_label: fused.label,
                label: g.label,
            })
        })
        .collect()
}

pub fn record_metrics(records: &[PredictionRecord]) -> Result<MetricResult> {
    let scores: Vec<f64> = records.iter().map(|r| r.fused_prob).collect();
    let labels: Vec<u8> = records.iter().map(|r| r.label).collect();
    MetricResult::compute(&scores, &labels)
}

/// All-in-one predictions fused per question, scored with one record per
/// question interaction.
pub fn eval_question_level<M: KtModel>(
    model: &M,
    sequences: &[ExpandedSequence],
    fusion: FusionMechanism,
) -> Result<(Vec<PredictionRecord>, MetricResult)> {
    let groups = if fusion == FusionMechanism::Ef {
        eval_all_in_one_with_reprs(model, sequences)
    } else {
        eval_all_in_one(model, sequences)
    };
    let records = fuse_groups(model, &groups, fusion, DEFAULT_THRESHOLD)?;
    let metrics = record_metrics(&records)?;
    Ok((records, metrics))
}

pub fn question_level_auc<M: KtModel>(
    model: &M,
    sequences: &[ExpandedSequence],
    fusion: FusionMechanism,
) -> Result<f64> {
    eval_question_level(model, sequences, fusion).map(|(_, m)| m.auc)
}

/// Splits sequences into those with more than `cutoff` interactions (long)
/// and the rest (short).
pub fn split_by_length(
    sequences: &[ExpandedSequence],
    cutoff: usize,
) -> Result<(Vec<ExpandedSequence>, Vec<ExpandedSequence>)> {
    if cutoff == 0 {
        return Err(Error::invalid("length cutoff must be >= 1"));
    }
    Ok(sequences
        .iter()
        .cloned()
        .partition(|s| s.num_groups() > cutoff))
}

/// Writes `student_id,position,question_id,fused_prob,label`.
pub fn write_predictions_csv(records: &[PredictionRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut wtr = csv::Writer::from_writer(file);
    wtr.write_record(["student_id", "position", "question_id", "fused_prob", "label"])?;
    for r in records {
        wtr.write_record([
            r.student_id.clone(),
            r.source_position.to_string(),
            r.question_id.clone(),
            r.fused_prob.to_string(),
            r.label.to_string(),
        ])?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
pub(crate) mod testing {
    //! A hand-built model whose predictions are easy to reason about.

    use crate::models::{Dropout, KtModel, LossScale, ParamSet, WindowLoss};
    use crate::models::params::sigmoid;
    use crate::preprocess::Window;

    /// Probability rises with the number of correct responses seen, with an
    /// item-specific offset. The representation is `[correct, item]`.
    pub struct CountingModel {
        pub params: ParamSet,
        pub items: usize,
    }

    impl CountingModel {
        pub fn new(items: usize) -> Self {
            CountingModel {
                params: ParamSet::new(Vec::new()),
                items,
            }
        }
    }

    impl KtModel for CountingModel {
        type State = (f64, f64);

        fn arch(&self) -> &'static str {
            "counting"
        }
        fn num_items(&self) -> usize {
            self.items
        }
        fn init_state(&self) -> (f64, f64) {
            (0.0, 0.0)
        }
        fn advance(&self, state: &mut (f64, f64), _item: usize, response: u8) {
            state.0 += response as f64;
            state.1 += 1.0;
        }
        fn advance_soft(&self, state: &mut (f64, f64), _item: usize, p: f64) {
            state.0 += p;
            state.1 += 1.0;
        }
        fn query(&self, state: &(f64, f64), item: usize) -> f64 {
            self.head(&self.query_repr(state, item).unwrap()).unwrap()
        }
        fn query_repr(&self, state: &(f64, f64), item: usize) -> Option<Vec<f64>> {
            Some(vec![state.0 - 0.5 * (state.1 - state.0), item as f64])
        }
        fn head(&self, repr: &[f64]) -> Option<f64> {
            Some(sigmoid(0.8 * repr[0] - 0.1 * repr[1]))
        }
        fn params(&self) -> &ParamSet {
            &self.params
        }
        fn params_mut(&mut self) -> &mut ParamSet {
            &mut self.params
        }
        fn loss_scale(&self, _batch: &[Window]) -> LossScale {
            unimplemented!("evaluation-only test model")
        }
        fn window_loss(&self, _: &Window, _: &LossScale, _: Option<Dropout>, _: bool) -> WindowLoss {
            unimplemented!("evaluation-only test model")
        }
    }
}
