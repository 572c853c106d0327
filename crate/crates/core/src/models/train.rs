//! Mini-batch Adam training with AUC-based early stopping.

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{loss_and_grad, Adam, KtModel, ParamSet};
use crate::error::{Error, Result};
use crate::preprocess::{ExpandedSequence, Window, DEFAULT_WINDOW};
use crate::protocols::{self, FusionMechanism};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub dropout: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop after this many epochs without a validation AUC improvement.
    pub patience: usize,
    pub seed: u64,
    /// Training window length `m`.
    pub window_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            dropout: 0.1,
            batch_size: 64,
            max_epochs: 200,
            patience: 10,
            seed: 42,
            window_len: DEFAULT_WINDOW,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must be in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be >= 1"));
        }
        if self.patience >= self.max_epochs {
            return Err(Error::invalid(format!(
                "patience ({}) must be smaller than max_epochs ({})",
                self.patience, self.max_epochs
            )));
        }
        if self.window_len < 2 {
            return Err(Error::invalid("window length must be >= 2"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Validation AUC of the untrained model.
    pub initial_val_auc: f64,
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_auc: f64,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn epochs_run(&self) -> usize {
        self.epochs.len()
    }
}

/// Trains on `train_windows`, scoring each epoch by question-level
/// all-in-one AUC (LF-AVG fusion) on `val_sequences`. The returned model
/// holds the best epoch's parameters.
pub fn train<M: KtModel>(
    model: &mut M,
    train_windows: &[Window],
    val_sequences: &[ExpandedSequence],
    config: &TrainConfig,
    fold: &str,
) -> Result<TrainHistory> {
    train_with_validator(model, train_windows, config, |m, _epoch| {
        protocols::question_level_auc(m, val_sequences, FusionMechanism::LfAvg).map_err(|e| {
            Error::Validation {
                fold: fold.to_string(),
                reason: e.to_string(),
            }
        })
    })
}

/// Training loop with a caller-supplied validation score. `validator` is
/// called with epoch 0 (untrained) and after every epoch.
///
/// Stops once `patience` consecutive epochs fail to beat the best score, or
/// at `max_epochs`; the best-scoring epoch's parameters are restored.
pub fn train_with_validator<M, F>(
    model: &mut M,
    train_windows: &[Window],
    config: &TrainConfig,
    mut validator: F,
) -> Result<TrainHistory>
where
    M: KtModel,
    F: FnMut(&M, usize) -> Result<f64>,
{
    config.validate()?;
    if train_windows.iter().all(|w| w.valid_len < 2) {
        return Err(Error::invalid("no training window has a next-step target"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(model.params(), config.learning_rate);
    let initial_val_auc = validator(model, 0)?;

    let mut order: Vec<usize> = (0..train_windows.len()).collect();
    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, ParamSet)> = None;
    let mut stopped_early = false;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Window> = chunk.iter().map(|&i| train_windows[i].clone()).collect();
            let (out, grads) = loss_and_grad(model, &batch, Some((config.dropout, &mut rng as &mut dyn RngCore)))?;
            adam.step(model.params_mut(), &grads);
            epoch_loss += out.loss;
            batches += 1;
        }
        let val_auc = validator(model, epoch)?;
        log::debug!("epoch {epoch}: loss {:.5} val_auc {val_auc:.5}", epoch_loss / batches as f64);
        epochs.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / batches as f64,
            val_auc,
        });

        match &best {
            Some((_, best_auc, _)) if val_auc <= *best_auc => {}
            _ => best = Some((epoch, val_auc, model.params().clone())),
        }
        let best_epoch = best.as_ref().map_or(0, |b| b.0);
        if epoch - best_epoch >= config.patience {
            stopped_early = epoch < config.max_epochs;
            break;
        }
    }

    let (best_epoch, best_val_auc, params) = best.expect("at least one epoch ran");
    *model.params_mut() = params;
    Ok(TrainHistory {
        initial_val_auc,
        epochs,
        best_epoch,
        best_val_auc,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Dkt, DktConfig};
    use crate::preprocess::ExpandedStep;

    fn tiny_model() -> Dkt {
        Dkt::new(
            3,
            DktConfig {
                emb_size: 3,
                hidden_size: 3,
                regularization: Default::default(),
            },
            1,
        )
        .unwrap()
    }

    fn windows() -> Vec<Window> {
        let steps: Vec<ExpandedStep> = (0..12)
            .map(|i| ExpandedStep {
                item_id: i % 3,
                group_id: i,
                response: (i % 2) as u8,
                source_position: i,
            })
            .collect();
        crate::preprocess::window(&steps, 4).unwrap()
    }

    #[test]
    fn rejects_patience_not_below_max_epochs() {
        let cfg = TrainConfig {
            patience: 5,
            max_epochs: 5,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn plateau_stops_after_patience_and_restores_best() {
        let mut model = tiny_model();
        let cfg = TrainConfig {
            batch_size: 2,
            window_len: 4,
            ..TrainConfig::default()
        };
        let mut snapshots = Vec::new();
        let plateau_at = 3;
        let hist = train_with_validator(&mut model, &windows(), &cfg, |m, epoch| {
            snapshots.push(m.params().clone());
            Ok(if epoch <= plateau_at { epoch as f64 * 0.1 } else { 0.2 })
        })
        .unwrap();
        assert_eq!(hist.best_epoch, plateau_at);
        assert_eq!(hist.epochs_run(), plateau_at + cfg.patience);
        assert!(hist.stopped_early);
        assert_eq!(model.params(), &snapshots[plateau_at]);
    }

    #[test]
    fn validator_errors_propagate() {
        let mut model = tiny_model();
        let cfg = TrainConfig {
            window_len: 4,
            ..TrainConfig::default()
        };
        let err = train_with_validator(&mut model, &windows(), &cfg, |_, _| {
            Err(Error::Validation {
                fold: "fold 2".into(),
                reason: "single class".into(),
            })
        })
        .unwrap_err();
        assert!(err.to_string().contains("fold 2"));
    }
}
