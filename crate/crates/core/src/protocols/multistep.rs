use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{fuse, query_group, FusionMechanism, PredictionRecord};
use crate::error::{Error, Result};
use crate::metrics::{MetricResult, DEFAULT_THRESHOLD};
use crate::models::KtModel;
use crate::preprocess::ExpandedSequence;

/// Observed-prefix fractions swept by default.
pub const OBSERVED_PCTS: [f64; 8] = [0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MultiStepMode {
    /// Each predicted group is fed back before predicting the next.
    Accumulative,
    /// Every future group is predicted from the frozen prefix state.
    NonAccumulative,
}

impl MultiStepMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MultiStepMode::Accumulative => "accumulative",
            MultiStepMode::NonAccumulative => "non-accumulative",
        }
    }
}

impl fmt::Display for MultiStepMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MultiStepMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "accumulative" => Ok(MultiStepMode::Accumulative),
            "non-accumulative" => Ok(MultiStepMode::NonAccumulative),
            other => Err(Error::invalid(format!(
                "unknown mode `{other}` (expected accumulative or non-accumulative)"
            ))),
        }
    }
}

/// What accumulative prediction feeds back as the response of a predicted step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeedbackMode {
    /// The fused probability thresholded at 0.5.
    #[default]
    Label,
    /// The fused probability itself, as a soft response.
    Probability,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MultiStepConfig {
    /// Fraction of question groups observed, in (0, 1).
    pub observed_pct: f64,
    pub mode: MultiStepMode,
    #[serde(default)]
    pub feedback: FeedbackMode,
    #[serde(default)]
    pub fusion: FusionMechanism,
}

impl MultiStepConfig {
    pub fn new(observed_pct: f64, mode: MultiStepMode) -> Self {
        MultiStepConfig {
            observed_pct,
            mode,
            feedback: FeedbackMode::Label,
            fusion: FusionMechanism::LfAvg,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.observed_pct > 0.0 && self.observed_pct < 1.0) {
            return Err(Error::invalid(format!(
                "observed_pct must be in (0, 1), got {}",
                self.observed_pct
            )));
        }
        Ok(())
    }

    /// `floor(observed_pct * groups)`; the small slack absorbs decimal
    /// representation error such as 0.7 * 10 = 7.000000000000001 or
    /// 0.29 * 100 = 28.999999999999996.
    pub fn prefix_len(&self, groups: usize) -> usize {
        (self.observed_pct * groups as f64 + 1e-9).floor() as usize
    }
}

/// Predicts the unobserved question groups of one sequence.
pub fn eval_multistep<M: KtModel>(
    model: &M,
    sequence: &ExpandedSequence,
    config: &MultiStepConfig,
) -> Result<Vec<PredictionRecord>> {
    config.validate()?;
    let ranges = sequence.group_ranges();
    let prefix = config.prefix_len(ranges.len());
    if prefix == 0 || prefix >= ranges.len() {
        return Err(Error::invalid(format!(
            "student `{}`: {} groups at observed_pct {} leave prefix {prefix} and suffix {}",
            sequence.student_id,
            ranges.len(),
            config.observed_pct,
            ranges.len() - prefix.min(ranges.len())
        )));
    }

    let mut state = model.init_state();
    for s in &sequence.steps[..ranges[prefix].start] {
        model.advance(&mut state, s.item_id, s.response);
    }

    let collect_reprs = config.fusion == FusionMechanism::Ef;
    let mut records = Vec::with_capacity(ranges.len() - prefix);
    for range in &ranges[prefix..] {
        let steps = &sequence.steps[range.clone()];
        let items: Vec<usize> = steps.iter().map(|s| s.item_id).collect();
        let (kc_probs, reprs) = query_group(model, &state, &items, collect_reprs);
        let probs: Vec<f64> = kc_probs.iter().map(|&(_, p)| p).collect();
        let fused = fuse(model, &probs, reprs.as_deref(), config.fusion, DEFAULT_THRESHOLD)?;
        let pos = steps[0].source_position;
        records.push(PredictionRecord {
            student_id: sequence.student_id.clone(),
            source_position: pos,
            question_id: sequence.question_ids[pos].clone(),
            kc_probs,
            fused_prob: fused.prob,
            fused_label: fused.label,
            label: steps[0].response,
        });
        if config.mode == MultiStepMode::Accumulative {
            for &item in &items {
                match config.feedback {
                    FeedbackMode::Label => model.advance(&mut state, item, fused.label),
                    FeedbackMode::Probability => model.advance_soft(&mut state, item, fused.prob),
                }
            }
        }
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiStepResult {
    pub observed_pct: f64,
    pub mode: MultiStepMode,
    pub feedback: FeedbackMode,
    pub metrics: Option<MetricResult>,
    pub evaluated_sequences: usize,
    /// Sequences too short to leave both a prefix and a suffix.
    pub skipped_sequences: usize,
}

/// Runs [`eval_multistep`] on every sequence that can be split and pools the
/// records into one metric. Metrics are absent when the pool is single-class.
pub fn eval_multistep_all<M: KtModel>(
    model: &M,
    sequences: &[ExpandedSequence],
    config: &MultiStepConfig,
) -> Result<(Vec<PredictionRecord>, MultiStepResult)> {
    use rayon::prelude::*;
    config.validate()?;
    let per_seq: Vec<Option<Vec<PredictionRecord>>> = sequences
        .par_iter()
        .map(|s| {
            let prefix = config.prefix_len(s.num_groups());
            if prefix == 0 || prefix >= s.num_groups() {
                Ok(None)
            } else {
                eval_multistep(model, s, config).map(Some)
            }
        })
        .collect::<Result<_>>()?;
    let skipped = per_seq.iter().filter(|r| r.is_none()).count();
    let records: Vec<PredictionRecord> = per_seq.into_iter().flatten().flatten().collect();
    let scores: Vec<f64> = records.iter().map(|r| r.fused_prob).collect();
    let labels: Vec<u8> = records.iter().map(|r| r.label).collect();
    let metrics = MetricResult::compute(&scores, &labels).ok();
    Ok((
        records,
        MultiStepResult {
            observed_pct: config.observed_pct,
            mode: config.mode,
            feedback: config.feedback,
            metrics,
            evaluated_sequences: sequences.len() - skipped,
            skipped_sequences: skipped,
        },
    ))
}
