//! Trainable causal sequence models.
//!
//! Every model implements [`KtModel`]: a state advanced by observed
//! `(item, response)` steps and queried for the probability of a correct
//! response on any item. Training goes through [`KtModel::window_loss`],
//! which returns the batch-normalized loss contribution of one padded window
//! and, on request, its analytic gradient.
//!
//! DKVMN, AKT, GKT, SAINT, ATKT, KQN and DKT-F are not implemented; they
//! plug in by implementing the same trait.

mod adam;
mod checkpoint;
pub mod dkt;
pub mod params;
pub mod sakt;
pub mod train;

use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

pub use adam::Adam;
pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use dkt::{Dkt, DktConfig, DktPlusLoss, DktState};
pub use params::{Grads, ParamSet, Tensor};
pub use sakt::{Sakt, SaktConfig, SaktState};
pub use train::{train, train_with_validator, EpochRecord, TrainConfig, TrainHistory};

use crate::error::{Error, Result};
use crate::preprocess::{ExpandedStep, Window};

/// Per-window dropout: rate and the seed for that window's masks.
#[derive(Debug, Clone, Copy)]
pub struct Dropout {
    pub rate: f64,
    pub seed: u64,
}

/// Batch-level normalizers so that every window's contribution can be
/// computed independently and summed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossScale {
    /// 1 / number of next-step targets in the batch.
    pub pred: f64,
    /// 1 / number of valid steps (reconstruction targets).
    pub recon: f64,
    /// 1 / (consecutive output pairs × items).
    pub wavy: f64,
}

impl LossScale {
    pub fn for_batch(batch: &[Window], reg: DktPlusLoss, num_items: usize) -> LossScale {
        let inv = |n: usize| if n == 0 { 0.0 } else { 1.0 / n as f64 };
        let targets: usize = batch.iter().map(|w| w.valid_len.saturating_sub(1)).sum();
        let steps: usize = batch.iter().map(|w| w.valid_len).sum();
        LossScale {
            pred: inv(targets),
            recon: if reg.lambda_r > 0.0 { inv(steps) } else { 0.0 },
            wavy: inv(targets * num_items),
        }
    }
}

/// One window's share of the batch loss.
#[derive(Debug, Clone)]
pub struct WindowLoss {
    pub loss: f64,
    /// Probability for each next-step target (`valid_len - 1` values).
    pub predictions: Vec<f64>,
    pub grads: Option<Grads>,
}

pub trait KtModel: Send + Sync {
    type State: Clone + Send + Sync;

    fn arch(&self) -> &'static str;

    fn num_items(&self) -> usize;

    fn init_state(&self) -> Self::State;

    /// Consume one observed step.
    fn advance(&self, state: &mut Self::State, item: usize, response: u8);

    /// Consume a step whose response is only known as a probability of being correct.
    fn advance_soft(&self, state: &mut Self::State, item: usize, p_correct: f64);

    /// Probability of a correct response on `item` given the steps consumed so far.
    fn query(&self, state: &Self::State, item: usize) -> f64;

    /// Representation the output head is applied to, if the model exposes one
    /// per queried item. Needed for early fusion.
    fn query_repr(&self, _state: &Self::State, _item: usize) -> Option<Vec<f64>> {
        None
    }

    /// Output head applied to a representation from [`KtModel::query_repr`].
    fn head(&self, _repr: &[f64]) -> Option<f64> {
        None
    }

    fn params(&self) -> &ParamSet;

    fn params_mut(&mut self) -> &mut ParamSet;

    fn loss_scale(&self, batch: &[Window]) -> LossScale;

    fn window_loss(
        &self,
        window: &Window,
        scale: &LossScale,
        dropout: Option<Dropout>,
        want_grad: bool,
    ) -> WindowLoss;
}

/// Batch loss and per-window next-step predictions.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub predictions: Vec<Vec<f64>>,
}

/// Mean next-step BCE (plus DKT+ terms) over all valid targets of the batch,
/// evaluated without dropout.
pub fn forward_loss<M: KtModel>(model: &M, batch: &[Window]) -> Result<LossOutput> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let scale = model.loss_scale(batch);
    let parts: Vec<WindowLoss> = batch
        .par_iter()
        .map(|w| model.window_loss(w, &scale, None, false))
        .collect();
    Ok(LossOutput {
        loss: parts.iter().map(|p| p.loss).sum(),
        predictions: parts.into_iter().map(|p| p.predictions).collect(),
    })
}

/// Loss plus analytic gradients. `dropout` supplies a rate and an RNG from
/// which one mask seed per window is drawn in order, so results do not
/// depend on thread scheduling.
pub fn loss_and_grad<M: KtModel>(
    model: &M,
    batch: &[Window],
    dropout: Option<(f64, &mut dyn RngCore)>,
) -> Result<(LossOutput, Grads)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let scale = model.loss_scale(batch);
    let drops: Vec<Option<Dropout>> = match dropout {
        Some((rate, rng)) if rate > 0.0 => batch
            .iter()
            .map(|_| Some(Dropout { rate, seed: rng.gen() }))
            .collect(),
        _ => vec![None; batch.len()],
    };
    let parts: Vec<WindowLoss> = batch
        .par_iter()
        .zip(drops)
        .map(|(w, d)| model.window_loss(w, &scale, d, true))
        .collect();
    let mut grads = model.params().zeros_like();
    let mut loss = 0.0;
    let mut predictions = Vec::with_capacity(parts.len());
    for part in parts {
        loss += part.loss;
        grads.add_assign(part.grads.as_ref().expect("gradient requested"));
        predictions.push(part.predictions);
    }
    Ok((LossOutput { loss, predictions }, grads))
}

/// Gradients only. Same as [`loss_and_grad`] without dropout.
pub fn backward<M: KtModel>(model: &M, batch: &[Window]) -> Result<Grads> {
    loss_and_grad(model, batch, None).map(|(_, g)| g)
}

/// Advances a fresh state through an arbitrarily long step sequence.
/// Recurrent models carry their state across all steps; attention models keep
/// a sliding context of their last `m - 1` steps.
pub fn advance_long<M: KtModel>(model: &M, steps: &[ExpandedStep]) -> M::State {
    let mut state = model.init_state();
    for s in steps {
        model.advance(&mut state, s.item_id, s.response);
    }
    state
}

/// Inverted-dropout mask (kept units scaled by `1 / (1 - rate)`), or `None`
/// when the rate is zero.
pub(crate) fn dropout_mask<R: Rng>(len: usize, rate: f64, rng: &mut R) -> Option<Vec<f64>> {
    if rate <= 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - rate);
    Some(
        (0..len)
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelTag {
    #[serde(rename = "dkt")]
    Dkt,
    #[serde(rename = "dkt+")]
    DktPlus,
    #[serde(rename = "sakt")]
    Sakt,
}

impl ModelTag {
    pub const ALL: [ModelTag; 3] = [ModelTag::Dkt, ModelTag::DktPlus, ModelTag::Sakt];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelTag::Dkt => "dkt",
            ModelTag::DktPlus => "dkt+",
            ModelTag::Sakt => "sakt",
        }
    }
}

impl fmt::Display for ModelTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dkt" => Ok(ModelTag::Dkt),
            "dkt+" | "dkt_plus" | "dktplus" => Ok(ModelTag::DktPlus),
            "sakt" => Ok(ModelTag::Sakt),
            other => Err(Error::invalid(format!(
                "unknown model `{other}` (implemented: dkt, dkt+, sakt)"
            ))),
        }
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case")]
pub enum ModelConfig {
    Dkt(DktConfig),
    DktPlus(DktConfig),
    Sakt(SaktConfig),
}

impl ModelConfig {
    pub fn tag(&self) -> ModelTag {
        match self {
            ModelConfig::Dkt(_) => ModelTag::Dkt,
            ModelConfig::DktPlus(_) => ModelTag::DktPlus,
            ModelConfig::Sakt(_) => ModelTag::Sakt,
        }
    }

    pub fn default_for(tag: ModelTag) -> ModelConfig {
        match tag {
            ModelTag::Dkt => ModelConfig::Dkt(DktConfig::default()),
            ModelTag::DktPlus => ModelConfig::DktPlus(DktConfig {
                regularization: DktPlusLoss {
                    lambda_r: 0.01,
                    lambda_w1: 0.003,
                    lambda_w2: 3.0,
                },
                ..DktConfig::default()
            }),
            ModelTag::Sakt => ModelConfig::Sakt(SaktConfig::default()),
        }
    }
}

/// Any implemented model, for code that picks the architecture at runtime.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Dkt(Dkt),
    DktPlus(Dkt),
    Sakt(Sakt),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelState {
    Dkt(DktState),
    Sakt(SaktState),
}

impl Model {
    pub fn new(config: &ModelConfig, num_items: usize, seed: u64) -> Result<Model> {
        Ok(match config {
            ModelConfig::Dkt(c) => {
                if !c.regularization.is_zero() {
                    return Err(Error::invalid(
                        "plain DKT has no regularization weights; use dkt+",
                    ));
                }
                Model::Dkt(Dkt::new(num_items, c.clone(), seed)?)
            }
            ModelConfig::DktPlus(c) => Model::DktPlus(Dkt::new(num_items, c.clone(), seed)?),
            ModelConfig::Sakt(c) => Model::Sakt(Sakt::new(num_items, c.clone(), seed)?),
        })
    }

    pub fn tag(&self) -> ModelTag {
        match self {
            Model::Dkt(_) => ModelTag::Dkt,
            Model::DktPlus(_) => ModelTag::DktPlus,
            Model::Sakt(_) => ModelTag::Sakt,
        }
    }

    pub fn config(&self) -> ModelConfig {
        match self {
            Model::Dkt(m) => ModelConfig::Dkt(m.config().clone()),
            Model::DktPlus(m) => ModelConfig::DktPlus(m.config().clone()),
            Model::Sakt(m) => ModelConfig::Sakt(m.config().clone()),
        }
    }
}

macro_rules! dispatch {
    ($self:expr, $m:ident => $body:expr) => {
        match $self {
            Model::Dkt($m) | Model::DktPlus($m) => $body,
            Model::Sakt($m) => $body,
        }
    };
}

impl KtModel for Model {
    type State = ModelState;

    fn arch(&self) -> &'static str {
        self.tag().as_str()
    }

    fn num_items(&self) -> usize {
        dispatch!(self, m => m.num_items())
    }

    fn init_state(&self) -> ModelState {
        match self {
            Model::Dkt(m) | Model::DktPlus(m) => ModelState::Dkt(m.init_state()),
            Model::Sakt(m) => ModelState::Sakt(m.init_state()),
        }
    }

    fn advance(&self, state: &mut ModelState, item: usize, response: u8) {
        match (self, state) {
            (Model::Dkt(m) | Model::DktPlus(m), ModelState::Dkt(s)) => m.advance(s, item, response),
            (Model::Sakt(m), ModelState::Sakt(s)) => m.advance(s, item, response),
            _ => panic!("state does not belong to this model"),
        }
    }

    fn advance_soft(&self, state: &mut ModelState, item: usize, p_correct: f64) {
        match (self, state) {
            (Model::Dkt(m) | Model::DktPlus(m), ModelState::Dkt(s)) => {
                m.advance_soft(s, item, p_correct)
            }
            (Model::Sakt(m), ModelState::Sakt(s)) => m.advance_soft(s, item, p_correct),
            _ => panic!("state does not belong to this model"),
        }
    }

    fn query(&self, state: &ModelState, item: usize) -> f64 {
        match (self, state) {
            (Model::Dkt(m) | Model::DktPlus(m), ModelState::Dkt(s)) => m.query(s, item),
            (Model::Sakt(m), ModelState::Sakt(s)) => m.query(s, item),
            _ => panic!("state does not belong to this model"),
        }
    }

    fn query_repr(&self, state: &ModelState, item: usize) -> Option<Vec<f64>> {
        match (self, state) {
            (Model::Dkt(m) | Model::DktPlus(m), ModelState::Dkt(s)) => m.query_repr(s, item),
            (Model::Sakt(m), ModelState::Sakt(s)) => m.query_repr(s, item),
            _ => panic!("state does not belong to this model"),
        }
    }

    fn head(&self, repr: &[f64]) -> Option<f64> {
        dispatch!(self, m => m.head(repr))
    }

    fn params(&self) -> &ParamSet {
        dispatch!(self, m => m.params())
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        dispatch!(self, m => m.params_mut())
    }

    fn loss_scale(&self, batch: &[Window]) -> LossScale {
        dispatch!(self, m => m.loss_scale(batch))
    }

    fn window_loss(
        &self,
        window: &Window,
        scale: &LossScale,
        dropout: Option<Dropout>,
        want_grad: bool,
    ) -> WindowLoss {
        dispatch!(self, m => m.window_loss(window, scale, dropout, want_grad))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tags_parse() {
        for tag in ModelTag::ALL {
            assert_eq!(tag.as_str().parse::<ModelTag>().unwrap(), tag);
        }
        assert!("akt".parse::<ModelTag>().is_err());
    }

    #[test]
    fn empty_batch_is_an_error() {
        let m = Model::new(&ModelConfig::default_for(ModelTag::Dkt), 3, 0).unwrap();
        assert!(forward_loss(&m, &[]).is_err());
        assert!(backward(&m, &[]).is_err());
    }

    #[test]
    fn dropout_mask_scales_kept_units() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mask = dropout_mask(1000, 0.25, &mut rng).unwrap();
        assert!(mask.iter().all(|&m| m == 0.0 || (m - 4.0 / 3.0).abs() < 1e-15));
        assert!(dropout_mask(10, 0.0, &mut rng).is_none());
    }
}
