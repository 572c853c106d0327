//! DKT: interaction embedding, single-layer LSTM, per-item sigmoid outputs.
//! With nonzero regularization weights the loss becomes DKT+.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{
    axpy, bce_with_logit, dot, matvec_add, matvec_t_add, outer_add, sigmoid, ParamSet,
    Tensor,
};
use super::{dropout_mask, Dropout, KtModel, LossScale, WindowLoss};
use crate::error::{Error, Result};
use crate::preprocess::Window;

/// DKT+ regularization weights. All zero gives plain DKT.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DktPlusLoss {
    /// Reconstruction of the current step's own response.
    pub lambda_r: f64,
    /// L1 waviness of consecutive output vectors.
    pub lambda_w1: f64,
    /// Squared L2 waviness of consecutive output vectors.
    pub lambda_w2: f64,
}

impl DktPlusLoss {
    pub fn is_zero(&self) -> bool {
        self.lambda_r == 0.0 && self.lambda_w1 == 0.0 && self.lambda_w2 == 0.0
    }

    fn validate(&self) -> Result<()> {
        if [self.lambda_r, self.lambda_w1, self.lambda_w2]
            .iter()
            .any(|l| !(l.is_finite() && *l >= 0.0))
        {
            return Err(Error::invalid(format!("DKT+ weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DktConfig {
    pub emb_size: usize,
    pub hidden_size: usize,
    #[serde(default)]
    pub regularization: DktPlusLoss,
}

impl Default for DktConfig {
    fn default() -> Self {
        DktConfig {
            emb_size: 64,
            hidden_size: 64,
            regularization: DktPlusLoss::default(),
        }
    }
}

const EMB: usize = 0;
const W_IH: usize = 1;
const W_HH: usize = 2;
const B_GATES: usize = 3;
const W_OUT: usize = 4;
const B_OUT: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct Dkt {
    config: DktConfig,
    num_items: usize,
    params: ParamSet,
}

/// LSTM hidden and cell state.
#[derive(Debug, Clone, PartialEq)]
pub struct DktState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

struct StepCache {
    x_row: usize,
    gates: Vec<f64>, // i, f, g, o after activation
    c: Vec<f64>,
    tanh_c: Vec<f64>,
    h: Vec<f64>,
    mask: Option<Vec<f64>>,
    hd: Vec<f64>,
}

impl Dkt {
    pub fn new(num_items: usize, config: DktConfig, seed: u64) -> Result<Self> {
        if num_items == 0 || config.emb_size == 0 || config.hidden_size == 0 {
            return Err(Error::invalid("DKT needs items, embedding and hidden sizes >= 1"));
        }
        config.regularization.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, e, h) = (num_items, config.emb_size, config.hidden_size);
        let k = 1.0 / (h as f64).sqrt();
        let mut b_gates = Tensor::uniform("lstm.bias", &[4 * h], k, &mut rng);
        // Forget-gate bias starts at 1.
        b_gates.data[h..2 * h].iter_mut().for_each(|b| *b += 1.0);
        let params = ParamSet::new(vec![
            Tensor::normal("interaction_emb", &[2 * n, e], 0.1, &mut rng),
            Tensor::uniform("lstm.w_ih", &[4 * h, e], k, &mut rng),
            Tensor::uniform("lstm.w_hh", &[4 * h, h], k, &mut rng),
            b_gates,
            Tensor::uniform("out.weight", &[n, h], k, &mut rng),
            Tensor::zeros("out.bias", &[n]),
        ]);
        Ok(Dkt {
            config,
            num_items,
            params,
        })
    }

    pub fn from_parts(num_items: usize, config: DktConfig, params: ParamSet) -> Result<Self> {
        let fresh = Dkt::new(num_items, config.clone(), 0)?;
        if !fresh.params.same_layout(&params) {
            return Err(Error::invalid("DKT parameter layout does not match its config"));
        }
        Ok(Dkt {
            config,
            num_items,
            params,
        })
    }

    pub fn config(&self) -> &DktConfig {
        &self.config
    }

    fn hidden(&self) -> usize {
        self.config.hidden_size
    }

    fn interaction_row(&self, item: usize, response: u8) -> usize {
        item + response as usize * self.num_items
    }

    /// One LSTM step from `x`; returns post-activation gates and the new (c, h).
    fn lstm_step(&self, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let hs = self.hidden();
        let p = &self.params.tensors;
        let mut z = p[B_GATES].data.clone();
        matvec_add(&mut z, &p[W_IH].data, x);
        matvec_add(&mut z, &p[W_HH].data, h_prev);
        for (idx, v) in z.iter_mut().enumerate() {
            *v = if (2 * hs..3 * hs).contains(&idx) {
                v.tanh()
            } else {
                sigmoid(*v)
            };
        }
        let mut c = vec![0.0; hs];
        let mut h = vec![0.0; hs];
        for j in 0..hs {
            let (i, f, g, o) = (z[j], z[hs + j], z[2 * hs + j], z[3 * hs + j]);
            c[j] = f * c_prev[j] + i * g;
            h[j] = o * c[j].tanh();
        }
        (z, c, h)
    }

    fn logit(&self, hidden: &[f64], item: usize) -> f64 {
        let p = &self.params.tensors;
        dot(p[W_OUT].row(item), hidden) + p[B_OUT].data[item]
    }
}

impl KtModel for Dkt {
    type State = DktState;

    fn arch(&self) -> &'static str {
        if self.config.regularization.is_zero() {
            "dkt"
        } else {
            "dkt+"
        }
    }

    fn num_items(&self) -> usize {
        self.num_items
    }

    fn init_state(&self) -> DktState {
        DktState {
            h: vec![0.0; self.hidden()],
            c: vec![0.0; self.hidden()],
        }
    }

    fn advance(&self, state: &mut DktState, item: usize, response: u8) {
        let x = self.params.tensors[EMB].row(self.interaction_row(item, response));
        let (_, c, h) = self.lstm_step(x, &state.h, &state.c);
        state.c = c;
        state.h = h;
    }

    fn advance_soft(&self, state: &mut DktState, item: usize, p_correct: f64) {
        let emb = &self.params.tensors[EMB];
        let mut x = vec![0.0; self.config.emb_size];
        axpy(&mut x, 1.0 - p_correct, emb.row(self.interaction_row(item, 0)));
        axpy(&mut x, p_correct, emb.row(self.interaction_row(item, 1)));
        let (_, c, h) = self.lstm_step(&x, &state.h, &state.c);
        state.c = c;
        state.h = h;
    }

    fn query(&self, state: &DktState, item: usize) -> f64 {
        sigmoid(self.logit(&state.h, item))
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn loss_scale(&self, batch: &[Window]) -> LossScale {
        LossScale::for_batch(batch, self.config.regularization, self.num_items)
    }

    fn window_loss(
        &self,
        window: &Window,
        scale: &LossScale,
        dropout: Option<Dropout>,
        want_grad: bool,
    ) -> WindowLoss {
        let len = window.valid_len;
        let hs = self.hidden();
        let n = self.num_items;
        let p = &self.params.tensors;
        let reg = self.config.regularization;
        let full_outputs = reg.lambda_w1 > 0.0 || reg.lambda_w2 > 0.0;

        let items: Vec<usize> = window.item_ids[..len].iter().map(|&i| i as usize).collect();
        let resps: Vec<u8> = window.responses[..len].iter().map(|&r| r as u8).collect();

        // Forward.
        let mut rng = dropout.map(|d| (d.rate, ChaCha8Rng::seed_from_u64(d.seed)));
        let mut cache: Vec<StepCache> = Vec::with_capacity(len);
        let mut h_prev = vec![0.0; hs];
        let mut c_prev = vec![0.0; hs];
        for t in 0..len {
            let row = self.interaction_row(items[t], resps[t]);
            let (gates, c, h) = self.lstm_step(p[EMB].row(row), &h_prev, &c_prev);
            let mask = rng.as_mut().and_then(|(rate, r)| dropout_mask(hs, *rate, r));
            let hd = match &mask {
                Some(m) => h.iter().zip(m).map(|(a, b)| a * b).collect(),
                None => h.clone(),
            };
            h_prev.clone_from(&h);
            c_prev.clone_from(&c);
            let tanh_c = c.iter().map(|v| v.tanh()).collect();
            cache.push(StepCache {
                x_row: row,
                gates,
                c,
                tanh_c,
                h,
                mask,
                hd,
            });
        }

        // Output logits: full vectors only when waviness needs them.
        let outputs: Vec<Vec<f64>> = if full_outputs {
            cache
                .iter()
                .map(|sc| {
                    let mut z = p[B_OUT].data.clone();
                    matvec_add(&mut z, &p[W_OUT].data, &sc.hd);
                    z
                })
                .collect()
        } else {
            Vec::new()
        };
        let logit_at = |t: usize, item: usize| -> f64 {
            if full_outputs {
                outputs[t][item]
            } else {
                self.logit(&cache[t].hd, item)
            }
        };

        let mut loss = 0.0;
        // dlogits[t] as sparse (item, grad) pairs plus an optional dense part.
        let mut sparse: Vec<Vec<(usize, f64)>> = vec![Vec::new(); len];
        let mut dense: Vec<Vec<f64>> = if full_outputs && want_grad {
            vec![vec![0.0; n]; len]
        } else {
            Vec::new()
        };
        let mut predictions = Vec::with_capacity(len.saturating_sub(1));

        for t in 0..len.saturating_sub(1) {
            let target = items[t + 1];
            let y = resps[t + 1] as f64;
            let z = logit_at(t, target);
            predictions.push(sigmoid(z));
            loss += scale.pred * bce_with_logit(z, y);
            sparse[t].push((target, scale.pred * (sigmoid(z) - y)));
        }
        if reg.lambda_r > 0.0 {
            let w = reg.lambda_r * scale.recon;
            for t in 0..len {
                let z = logit_at(t, items[t]);
                let y = resps[t] as f64;
                loss += w * bce_with_logit(z, y);
                sparse[t].push((items[t], w * (sigmoid(z) - y)));
            }
        }
        if full_outputs {
            let w1 = reg.lambda_w1 * scale.wavy;
            let w2 = reg.lambda_w2 * scale.wavy;
            let probs: Vec<Vec<f64>> = outputs
                .iter()
                .map(|z| z.iter().map(|&v| sigmoid(v)).collect())
                .collect();
            for t in 1..len {
                for k in 0..n {
                    let d = probs[t][k] - probs[t - 1][k];
                    loss += w1 * d.abs() + w2 * d * d;
                    if want_grad {
                        let g = w1 * d.signum() * (d != 0.0) as u8 as f64 + 2.0 * w2 * d;
                        dense[t][k] += g * probs[t][k] * (1.0 - probs[t][k]);
                        dense[t - 1][k] -= g * probs[t - 1][k] * (1.0 - probs[t - 1][k]);
                    }
                }
            }
        }

        if !want_grad {
            return WindowLoss {
                loss,
                predictions,
                grads: None,
            };
        }

        // Backward.
        let mut g = self.params.zeros_like();
        let mut dhs: Vec<Vec<f64>> = vec![vec![0.0; hs]; len];
        for t in 0..len {
            let dhd = &mut dhs[t];
            if full_outputs {
                for &(item, gz) in &sparse[t] {
                    dense[t][item] += gz;
                }
                outer_add(&mut g.tensors[W_OUT], &dense[t], &cache[t].hd);
                axpy(&mut g.tensors[B_OUT], 1.0, &dense[t]);
                matvec_t_add(dhd, &p[W_OUT].data, &dense[t]);
            } else {
                for &(item, gz) in &sparse[t] {
                    axpy(&mut g.tensors[W_OUT][item * hs..(item + 1) * hs], gz, &cache[t].hd);
                    g.tensors[B_OUT][item] += gz;
                    axpy(dhd, gz, p[W_OUT].row(item));
                }
            }
            if let Some(m) = &cache[t].mask {
                dhd.iter_mut().zip(m).for_each(|(d, mk)| *d *= mk);
            }
        }

        let e = self.config.emb_size;
        let mut dh_next = vec![0.0; hs];
        let mut dc_next = vec![0.0; hs];
        let zero = vec![0.0; hs];
        let mut dz = vec![0.0; 4 * hs];
        for t in (0..len).rev() {
            let sc = &cache[t];
            let c_prev = if t > 0 { &cache[t - 1].c } else { &zero };
            let h_prev = if t > 0 { &cache[t - 1].h } else { &zero };
            for j in 0..hs {
                let (i, f, gg, o) = (
                    sc.gates[j],
                    sc.gates[hs + j],
                    sc.gates[2 * hs + j],
                    sc.gates[3 * hs + j],
                );
                let dh = dhs[t][j] + dh_next[j];
                let tc = sc.tanh_c[j];
                let d_o = dh * tc;
                let dc = dh * o * (1.0 - tc * tc) + dc_next[j];
                let d_i = dc * gg;
                let d_g = dc * i;
                let d_f = dc * c_prev[j];
                dc_next[j] = dc * f;
                dz[j] = d_i * i * (1.0 - i);
                dz[hs + j] = d_f * f * (1.0 - f);
                dz[2 * hs + j] = d_g * (1.0 - gg * gg);
                dz[3 * hs + j] = d_o * o * (1.0 - o);
            }
            let row = sc.x_row;
            let x = p[EMB].row(row);
            outer_add(&mut g.tensors[W_IH], &dz, x);
            outer_add(&mut g.tensors[W_HH], &dz, h_prev);
            axpy(&mut g.tensors[B_GATES], 1.0, &dz);
            matvec_t_add(&mut g.tensors[EMB][row * e..(row + 1) * e], &p[W_IH].data, &dz);
            dh_next.fill(0.0);
            matvec_t_add(&mut dh_next, &p[W_HH].data, &dz);
        }

        WindowLoss {
            loss,
            predictions,
            grads: Some(g),
        }
    }
}
