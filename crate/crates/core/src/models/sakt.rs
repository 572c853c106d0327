//! SAKT: the next item's embedding attends over past interaction embeddings
//! (plus learned positions) through causal multi-head attention blocks.
//!
//! Each block is attention -> residual + layer norm -> ReLU feed-forward ->
//! residual + layer norm. The query stream flows through the blocks; keys and
//! values always come from the interaction embeddings. The context is capped
//! at `max_len - 1` past steps, sliding once it is full.

use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{
    axpy, bce_with_logit, dot, matvec_add, matvec_t_add, outer_add, sigmoid, Grads, ParamSet,
    Tensor,
};
use super::{dropout_mask, Dropout, KtModel, LossScale, WindowLoss};
use crate::error::{Error, Result};
use crate::preprocess::Window;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaktConfig {
    pub emb_size: usize,
    pub num_heads: usize,
    pub num_blocks: usize,
    /// Number of learned positions; the context holds at most `max_len - 1` steps.
    pub max_len: usize,
}

impl Default for SaktConfig {
    fn default() -> Self {
        SaktConfig {
            emb_size: 64,
            num_heads: 4,
            num_blocks: 1,
            max_len: crate::preprocess::DEFAULT_WINDOW,
        }
    }
}

const LN_EPS: f64 = 1e-5;

const ITEM_EMB: usize = 0;
const INTER_EMB: usize = 1;
const POS_EMB: usize = 2;
const BLOCK_BASE: usize = 3;
const PER_BLOCK: usize = 16;

// Offsets inside a block.
const WQ: usize = 0;
const BQ: usize = 1;
const WK: usize = 2;
const BK: usize = 3;
const WV: usize = 4;
const BV: usize = 5;
const WO: usize = 6;
const BO: usize = 7;
const LN1_G: usize = 8;
const LN1_B: usize = 9;
const W1: usize = 10;
const B1: usize = 11;
const W2: usize = 12;
const B2: usize = 13;
const LN2_G: usize = 14;
const LN2_B: usize = 15;

#[derive(Debug, Clone, PartialEq)]
pub struct Sakt {
    config: SaktConfig,
    num_items: usize,
    params: ParamSet,
}

/// Sliding context of past steps with cached per-block keys and values.
#[derive(Debug, Clone, PartialEq)]
pub struct SaktState {
    /// (item, probability of correct) for each context step; observed steps use 0 or 1.
    pub context: VecDeque<(usize, f64)>,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

impl SaktState {
    pub fn len(&self) -> usize {
        self.context.len()
    }

    pub fn is_empty(&self) -> bool {
        self.context.is_empty()
    }
}

struct LnCache {
    xhat: Vec<f64>,
    rstd: f64,
}

struct BlockCache {
    z_in: Vec<f64>,
    q: Vec<f64>,
    /// Attention weights per head over the context.
    weights: Vec<Vec<f64>>,
    att: Vec<f64>,
    mask1: Option<Vec<f64>>,
    ln1: LnCache,
    u: Vec<f64>,
    f1: Vec<f64>,
    hr: Vec<f64>,
    mask2: Option<Vec<f64>>,
    ln2: LnCache,
}

fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64]) -> (Vec<f64>, LnCache) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    let xhat: Vec<f64> = x.iter().map(|v| (v - mean) * rstd).collect();
    let y = xhat
        .iter()
        .zip(gamma.iter().zip(beta))
        .map(|(xh, (g, b))| g * xh + b)
        .collect();
    (y, LnCache { xhat, rstd })
}

/// Returns dx; accumulates dgamma and dbeta.
fn layer_norm_backward(
    dy: &[f64],
    cache: &LnCache,
    gamma: &[f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Vec<f64> {
    let n = dy.len() as f64;
    let dxhat: Vec<f64> = dy.iter().zip(gamma).map(|(d, g)| d * g).collect();
    for i in 0..dy.len() {
        dgamma[i] += dy[i] * cache.xhat[i];
        dbeta[i] += dy[i];
    }
    let mean_d = dxhat.iter().sum::<f64>() / n;
    let mean_dx = dot(&dxhat, &cache.xhat) / n;
    dxhat
        .iter()
        .zip(&cache.xhat)
        .map(|(d, xh)| cache.rstd * (d - mean_d - xh * mean_dx))
        .collect()
}

impl Sakt {
    pub fn new(num_items: usize, config: SaktConfig, seed: u64) -> Result<Self> {
        let d = config.emb_size;
        if num_items == 0 || d == 0 || config.num_heads == 0 || config.num_blocks == 0 {
            return Err(Error::invalid("SAKT needs items, embedding size, heads and blocks >= 1"));
        }
        if !d.is_multiple_of(config.num_heads) {
            return Err(Error::invalid(format!(
                "embedding size {d} is not divisible by {} heads",
                config.num_heads
            )));
        }
        if config.max_len < 2 {
            return Err(Error::invalid("SAKT max_len must be >= 2"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = num_items;
        let k = 1.0 / (d as f64).sqrt();
        let mut tensors = vec![
            Tensor::normal("item_emb", &[n, d], 0.1, &mut rng),
            Tensor::normal("interaction_emb", &[2 * n, d], 0.1, &mut rng),
            Tensor::normal("position_emb", &[config.max_len, d], 0.1, &mut rng),
        ];
        for b in 0..config.num_blocks {
            let name = |s: &str| format!("block{b}.{s}");
            for proj in ["q", "k", "v", "o"] {
                tensors.push(Tensor::uniform(name(&format!("w{proj}")), &[d, d], k, &mut rng));
                tensors.push(Tensor::zeros(name(&format!("b{proj}")), &[d]));
            }
            tensors.push(Tensor::filled(name("ln1.gamma"), &[d], 1.0));
            tensors.push(Tensor::zeros(name("ln1.beta"), &[d]));
            tensors.push(Tensor::uniform(name("ffn.w1"), &[d, d], k, &mut rng));
            tensors.push(Tensor::uniform(name("ffn.b1"), &[d], k, &mut rng));
            tensors.push(Tensor::uniform(name("ffn.w2"), &[d, d], k, &mut rng));
            tensors.push(Tensor::uniform(name("ffn.b2"), &[d], k, &mut rng));
            tensors.push(Tensor::filled(name("ln2.gamma"), &[d], 1.0));
            tensors.push(Tensor::zeros(name("ln2.beta"), &[d]));
        }
        tensors.push(Tensor::uniform("out.weight", &[1, d], k, &mut rng));
        tensors.push(Tensor::zeros("out.bias", &[1]));
        Ok(Sakt {
            config,
            num_items,
            params: ParamSet::new(tensors),
        })
    }

    pub fn from_parts(num_items: usize, config: SaktConfig, params: ParamSet) -> Result<Self> {
        let fresh = Sakt::new(num_items, config.clone(), 0)?;
        if !fresh.params.same_layout(&params) {
            return Err(Error::invalid("SAKT parameter layout does not match its config"));
        }
        Ok(Sakt {
            config,
            num_items,
            params,
        })
    }

    pub fn config(&self) -> &SaktConfig {
        &self.config
    }

    /// Longest context a query can see.
    pub fn context_len(&self) -> usize {
        self.config.max_len - 1
    }

    fn d(&self) -> usize {
        self.config.emb_size
    }

    fn t(&self, block: usize, offset: usize) -> &Tensor {
        &self.params.tensors[BLOCK_BASE + block * PER_BLOCK + offset]
    }

    fn out_index(&self) -> usize {
        BLOCK_BASE + self.config.num_blocks * PER_BLOCK
    }

    /// Interaction embedding (possibly soft) plus position embedding.
    fn kv_input(&self, item: usize, p_correct: f64, position: usize) -> Vec<f64> {
        let inter = &self.params.tensors[INTER_EMB];
        let mut x = self.params.tensors[POS_EMB].row(position).to_vec();
        if p_correct == 0.0 || p_correct == 1.0 {
            let row = item + (p_correct as usize) * self.num_items;
            axpy(&mut x, 1.0, inter.row(row));
        } else {
            axpy(&mut x, 1.0 - p_correct, inter.row(item));
            axpy(&mut x, p_correct, inter.row(item + self.num_items));
        }
        x
    }

    fn project(&self, block: usize, w: usize, b: usize, x: &[f64]) -> Vec<f64> {
        let mut out = self.t(block, b).data.clone();
        matvec_add(&mut out, &self.t(block, w).data, x);
        out
    }

    fn push_kv(&self, keys: &mut [Vec<f64>], values: &mut [Vec<f64>], kv: &[f64]) {
        for b in 0..self.config.num_blocks {
            keys[b].extend(self.project(b, WK, BK, kv));
            values[b].extend(self.project(b, WV, BV, kv));
        }
    }

    fn rebuild_cache(&self, state: &mut SaktState) {
        let nb = self.config.num_blocks;
        state.keys = vec![Vec::new(); nb];
        state.values = vec![Vec::new(); nb];
        let kvs: Vec<Vec<f64>> = state
            .context
            .iter()
            .enumerate()
            .map(|(j, &(item, p))| self.kv_input(item, p, j))
            .collect();
        for kv in kvs {
            self.push_kv(&mut state.keys, &mut state.values, &kv);
        }
    }

    fn push_step(&self, state: &mut SaktState, item: usize, p_correct: f64) {
        if state.context.len() == self.context_len() {
            state.context.pop_front();
            state.context.push_back((item, p_correct));
            self.rebuild_cache(state);
        } else {
            let kv = self.kv_input(item, p_correct, state.context.len());
            state.context.push_back((item, p_correct));
            self.push_kv(&mut state.keys, &mut state.values, &kv);
        }
    }

    /// One block for one query over `ctx` cached keys/values.
    fn block_forward(
        &self,
        b: usize,
        z_in: &[f64],
        keys: &[f64],
        values: &[f64],
        ctx: usize,
        rng: Option<(f64, &mut ChaCha8Rng)>,
    ) -> (Vec<f64>, BlockCache) {
        let d = self.d();
        let heads = self.config.num_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = self.project(b, WQ, BQ, z_in);

        let mut att = vec![0.0; d];
        let mut weights = Vec::with_capacity(heads);
        for h in 0..heads {
            let hs = h * dh..(h + 1) * dh;
            let mut w: Vec<f64> = (0..ctx)
                .map(|j| scale * dot(&q[hs.clone()], &keys[j * d + hs.start..j * d + hs.end]))
                .collect();
            if ctx > 0 {
                let max = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for v in w.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                w.iter_mut().for_each(|v| *v /= sum);
                for (j, &a) in w.iter().enumerate() {
                    axpy(&mut att[hs.clone()], a, &values[j * d + hs.start..j * d + hs.end]);
                }
            }
            weights.push(w);
        }

        let mut o = self.project(b, WO, BO, &att);
        let (mask1, mask2) = match rng {
            Some((rate, r)) => (dropout_mask(d, rate, r), dropout_mask(d, rate, r)),
            None => (None, None),
        };
        if let Some(m) = &mask1 {
            o.iter_mut().zip(m).for_each(|(x, k)| *x *= k);
        }
        let r1: Vec<f64> = z_in.iter().zip(&o).map(|(a, b)| a + b).collect();
        let (u, ln1) = layer_norm(&r1, &self.t(b, LN1_G).data, &self.t(b, LN1_B).data);

        let f1 = self.project(b, W1, B1, &u);
        let hr: Vec<f64> = f1.iter().map(|v| v.max(0.0)).collect();
        let mut f2 = self.project(b, W2, B2, &hr);
        if let Some(m) = &mask2 {
            f2.iter_mut().zip(m).for_each(|(x, k)| *x *= k);
        }
        let r2: Vec<f64> = u.iter().zip(&f2).map(|(a, b)| a + b).collect();
        let (z_out, ln2) = layer_norm(&r2, &self.t(b, LN2_G).data, &self.t(b, LN2_B).data);

        (
            z_out,
            BlockCache {
                z_in: z_in.to_vec(),
                q,
                weights,
                att,
                mask1,
                ln1,
                u,
                f1,
                hr,
                mask2,
                ln2,
            },
        )
    }

    /// Backpropagates through one block; returns dz_in and accumulates
    /// gradients for block parameters and for the cached keys/values.
    #[allow(clippy::too_many_arguments)]
    fn block_backward(
        &self,
        b: usize,
        cache: &BlockCache,
        keys: &[f64],
        values: &[f64],
        dz_out: &[f64],
        g: &mut Grads,
        dkeys: &mut [f64],
        dvalues: &mut [f64],
    ) -> Vec<f64> {
        let d = self.d();
        let heads = self.config.num_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let base = BLOCK_BASE + b * PER_BLOCK;
        let p = |off: usize| &self.params.tensors[base + off].data;

        let (dg2, rest) = g.tensors.split_at_mut(base + LN2_B);
        let dr2 = layer_norm_backward(
            dz_out,
            &cache.ln2,
            p(LN2_G),
            &mut dg2[base + LN2_G],
            &mut rest[0],
        );
        // r2 = u + f2
        let mut du = dr2.clone();
        let mut df2 = dr2;
        if let Some(m) = &cache.mask2 {
            df2.iter_mut().zip(m).for_each(|(x, k)| *x *= k);
        }
        outer_add(&mut g.tensors[base + W2], &df2, &cache.hr);
        axpy(&mut g.tensors[base + B2], 1.0, &df2);
        let mut dhr = vec![0.0; d];
        matvec_t_add(&mut dhr, p(W2), &df2);
        let df1: Vec<f64> = dhr
            .iter()
            .zip(&cache.f1)
            .map(|(g, f)| if *f > 0.0 { *g } else { 0.0 })
            .collect();
        outer_add(&mut g.tensors[base + W1], &df1, &cache.u);
        axpy(&mut g.tensors[base + B1], 1.0, &df1);
        matvec_t_add(&mut du, p(W1), &df1);

        let (dg1, rest) = g.tensors.split_at_mut(base + LN1_B);
        let dr1 = layer_norm_backward(&du, &cache.ln1, p(LN1_G), &mut dg1[base + LN1_G], &mut rest[0]);
        // r1 = z_in + o
        let mut dz_in = dr1.clone();
        let mut d_o = dr1;
        if let Some(m) = &cache.mask1 {
            d_o.iter_mut().zip(m).for_each(|(x, k)| *x *= k);
        }
        outer_add(&mut g.tensors[base + WO], &d_o, &cache.att);
        axpy(&mut g.tensors[base + BO], 1.0, &d_o);
        let mut datt = vec![0.0; d];
        matvec_t_add(&mut datt, p(WO), &d_o);

        let mut dq = vec![0.0; d];
        for h in 0..heads {
            let hs = h * dh..(h + 1) * dh;
            let w = &cache.weights[h];
            if w.is_empty() {
                continue;
            }
            let da: Vec<f64> = (0..w.len())
                .map(|j| dot(&datt[hs.clone()], &values[j * d + hs.start..j * d + hs.end]))
                .collect();
            let weighted: f64 = w.iter().zip(&da).map(|(a, b)| a * b).sum();
            for j in 0..w.len() {
                let row = j * d + hs.start..j * d + hs.end;
                axpy(&mut dvalues[row.clone()], w[j], &datt[hs.clone()]);
                let ds = w[j] * (da[j] - weighted) * scale;
                if ds != 0.0 {
                    axpy(&mut dq[hs.clone()], ds, &keys[row.clone()]);
                    axpy(&mut dkeys[row], ds, &cache.q[hs.clone()]);
                }
            }
        }
        outer_add(&mut g.tensors[base + WQ], &dq, &cache.z_in);
        axpy(&mut g.tensors[base + BQ], 1.0, &dq);
        matvec_t_add(&mut dz_in, p(WQ), &dq);
        dz_in
    }

    /// Final representation for `item` against a context of `ctx` steps.
    fn repr_from_cache(&self, item: usize, keys: &[Vec<f64>], values: &[Vec<f64>], ctx: usize) -> Vec<f64> {
        let mut z = self.params.tensors[ITEM_EMB].row(item).to_vec();
        for b in 0..self.config.num_blocks {
            z = self.block_forward(b, &z, &keys[b], &values[b], ctx, None).0;
        }
        z
    }

    fn head_logit(&self, repr: &[f64]) -> f64 {
        let o = self.out_index();
        dot(&self.params.tensors[o].data, repr) + self.params.tensors[o + 1].data[0]
    }
}

impl KtModel for Sakt {
    type State = SaktState;

    fn arch(&self) -> &'static str {
        "sakt"
    }

    fn num_items(&self) -> usize {
        self.num_items
    }

    fn init_state(&self) -> SaktState {
        SaktState {
            context: VecDeque::new(),
            keys: vec![Vec::new(); self.config.num_blocks],
            values: vec![Vec::new(); self.config.num_blocks],
        }
    }

    fn advance(&self, state: &mut SaktState, item: usize, response: u8) {
        self.push_step(state, item, response as f64);
    }

    fn advance_soft(&self, state: &mut SaktState, item: usize, p_correct: f64) {
        self.push_step(state, item, p_correct);
    }

    fn query(&self, state: &SaktState, item: usize) -> f64 {
        self.head(&self.query_repr(state, item).expect("SAKT exposes representations"))
            .expect("SAKT has a head")
    }

    fn query_repr(&self, state: &SaktState, item: usize) -> Option<Vec<f64>> {
        Some(self.repr_from_cache(item, &state.keys, &state.values, state.len()))
    }

    fn head(&self, repr: &[f64]) -> Option<f64> {
        Some(sigmoid(self.head_logit(repr)))
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn loss_scale(&self, batch: &[Window]) -> LossScale {
        LossScale::for_batch(batch, Default::default(), self.num_items)
    }

    fn window_loss(
        &self,
        window: &Window,
        scale: &LossScale,
        dropout: Option<Dropout>,
        want_grad: bool,
    ) -> WindowLoss {
        let len = window.valid_len;
        assert!(
            len <= self.config.max_len,
            "window of {len} steps exceeds SAKT max_len {}",
            self.config.max_len
        );
        let d = self.d();
        let nb = self.config.num_blocks;
        let items: Vec<usize> = window.item_ids[..len].iter().map(|&i| i as usize).collect();
        let resps: Vec<u8> = window.responses[..len].iter().map(|&r| r as u8).collect();
        let ctx_len = len.saturating_sub(1);

        let kvs: Vec<Vec<f64>> = (0..ctx_len)
            .map(|j| self.kv_input(items[j], resps[j] as f64, j))
            .collect();
        let mut keys = vec![Vec::with_capacity(ctx_len * d); nb];
        let mut values = vec![Vec::with_capacity(ctx_len * d); nb];
        for kv in &kvs {
            self.push_kv(&mut keys, &mut values, kv);
        }

        let mut rng = dropout.map(|dr| (dr.rate, ChaCha8Rng::seed_from_u64(dr.seed)));
        let mut loss = 0.0;
        let mut predictions = Vec::with_capacity(ctx_len);
        let mut caches: Vec<Vec<BlockCache>> = Vec::with_capacity(ctx_len);
        let mut finals: Vec<(Vec<f64>, f64)> = Vec::with_capacity(ctx_len);
        for t in 1..len {
            let mut z = self.params.tensors[ITEM_EMB].row(items[t]).to_vec();
            let mut per_block = Vec::with_capacity(nb);
            for b in 0..nb {
                let r = rng.as_mut().map(|(rate, r)| (*rate, r));
                let (z_out, cache) = self.block_forward(b, &z, &keys[b], &values[b], t, r);
                z = z_out;
                if want_grad {
                    per_block.push(cache);
                }
            }
            let logit = self.head_logit(&z);
            let y = resps[t] as f64;
            predictions.push(sigmoid(logit));
            loss += scale.pred * bce_with_logit(logit, y);
            if want_grad {
                caches.push(per_block);
                finals.push((z, scale.pred * (sigmoid(logit) - y)));
            }
        }

        if !want_grad {
            return WindowLoss {
                loss,
                predictions,
                grads: None,
            };
        }

        let mut g = self.params.zeros_like();
        let out = self.out_index();
        let mut dkeys = vec![vec![0.0; ctx_len * d]; nb];
        let mut dvalues = vec![vec![0.0; ctx_len * d]; nb];
        for (ti, (per_block, (z_final, glogit))) in caches.iter().zip(&finals).enumerate() {
            let t = ti + 1;
            axpy(&mut g.tensors[out], *glogit, z_final);
            g.tensors[out + 1][0] += glogit;
            let mut dz: Vec<f64> = self.params.tensors[out]
                .data
                .iter()
                .map(|w| w * glogit)
                .collect();
            for b in (0..nb).rev() {
                dz = self.block_backward(
                    b,
                    &per_block[b],
                    &keys[b][..t * d],
                    &values[b][..t * d],
                    &dz,
                    &mut g,
                    &mut dkeys[b][..t * d],
                    &mut dvalues[b][..t * d],
                );
            }
            axpy(&mut g.tensors[ITEM_EMB][items[t] * d..(items[t] + 1) * d], 1.0, &dz);
        }

        for b in 0..nb {
            let base = BLOCK_BASE + b * PER_BLOCK;
            for j in 0..ctx_len {
                let dk = &dkeys[b][j * d..(j + 1) * d];
                let dv = &dvalues[b][j * d..(j + 1) * d];
                outer_add(&mut g.tensors[base + WK], dk, &kvs[j]);
                axpy(&mut g.tensors[base + BK], 1.0, dk);
                outer_add(&mut g.tensors[base + WV], dv, &kvs[j]);
                axpy(&mut g.tensors[base + BV], 1.0, dv);
                let mut dkv = vec![0.0; d];
                matvec_t_add(&mut dkv, &self.t(b, WK).data, dk);
                matvec_t_add(&mut dkv, &self.t(b, WV).data, dv);
                let row = items[j] + resps[j] as usize * self.num_items;
                axpy(&mut g.tensors[INTER_EMB][row * d..(row + 1) * d], 1.0, &dkv);
                axpy(&mut g.tensors[POS_EMB][j * d..(j + 1) * d], 1.0, &dkv);
            }
        }

        WindowLoss {
            loss,
            predictions,
            grads: Some(g),
        }
    }
}
