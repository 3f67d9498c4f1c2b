//! Transformer session encoder: input projection, positional encoding,
//! pre-layer-norm encoder layers, mean pooling; forward and reverse-mode
//! backward written out by hand.
//!
//! ```text
//! x ─► LN ─► MHA ─► dropout ─►(+)─► LN ─► FFN(ReLU) ─► dropout ─►(+)─► out
//! └──────────────────────────┘ └───────────────────────────────────┘
//! ```
//!
//! Attention is bidirectional: a training example only ever contains its
//! prefix, so there is nothing to hide. Positions count backwards from the
//! most recent item, which is position 0.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{affine, affine_backward, dot, softmax_in_place, Mat};
use crate::params::{Grads, ParamId, ParamStore, TensorRole};

pub const LAYER_NORM_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Positional {
    #[default]
    Sinusoidal,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformerConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub ffn_hidden: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
    pub positional: Positional,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            num_heads: 8,
            model_dim: 64,
            ffn_hidden: 256,
            max_seq_len: 50,
            dropout: 0.1,
            positional: Positional::Sinusoidal,
        }
    }
}

impl TransformerConfig {
    /// Large setting: 2 layers, 8 heads, FFN [2048, 128].
    pub fn full_scale() -> Self {
        Self {
            model_dim: 128,
            ffn_hidden: 2048,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.model_dim == 0 || !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "model_dim {} must be a positive multiple of num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.ffn_hidden == 0 || self.max_seq_len == 0 {
            return Err(Error::Config("ffn_hidden and max_seq_len must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

/// Forward mode. Dropout only runs in training mode.
pub enum Mode<'r> {
    Infer,
    Train(&'r mut dyn RngCore),
}

/// `v W + b`; returns a dimension error if `v` does not fit `W`.
pub fn project_input(v: &[f64], w: &[f64], b: &[f64], out_dim: usize) -> Result<Vec<f64>> {
    if out_dim == 0 || w.len() != v.len() * out_dim {
        return Err(Error::dim("input projection", w.len() / out_dim.max(1), v.len()));
    }
    if b.len() != out_dim {
        return Err(Error::dim("input projection bias", out_dim, b.len()));
    }
    let x = Mat::from_vec(1, v.len(), v.to_vec());
    Ok(affine(&x, w, Some(b), out_dim).data)
}

/// Sinusoidal encoding for position `pos` (0 = most recent item).
pub fn positional_encoding(pos: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|i| {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = pos as f64 * freq;
            if i % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    xhat: Mat,
    rstd: Vec<f64>,
}

pub fn layer_norm(x: &Mat, gain: &[f64], bias: &[f64]) -> (Mat, LayerNormCache) {
    let d = x.cols as f64;
    let mut xhat = Mat::zeros(x.rows, x.cols);
    let mut y = Mat::zeros(x.rows, x.cols);
    let mut rstd = Vec::with_capacity(x.rows);
    for i in 0..x.rows {
        let row = x.row(i);
        let mu = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d;
        let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        rstd.push(r);
        let xh = xhat.row_mut(i);
        for (o, v) in xh.iter_mut().zip(row) {
            *o = (v - mu) * r;
        }
        let yr = y.row_mut(i);
        for j in 0..x.cols {
            yr[j] = gain[j] * xhat.data[i * x.cols + j] + bias[j];
        }
    }
    (y, LayerNormCache { xhat, rstd })
}

fn layer_norm_backward(
    cache: &LayerNormCache,
    gain: &[f64],
    dy: &Mat,
    dgain: &mut [f64],
    dbias: &mut [f64],
) -> Mat {
    let cols = dy.cols;
    let d = cols as f64;
    let mut dx = Mat::zeros(dy.rows, cols);
    let mut dxhat = vec![0.0; cols];
    for i in 0..dy.rows {
        let dyr = dy.row(i);
        let xh = cache.xhat.row(i);
        for j in 0..cols {
            dgain[j] += dyr[j] * xh[j];
            dbias[j] += dyr[j];
            dxhat[j] = dyr[j] * gain[j];
        }
        let mean_dxhat = dxhat.iter().sum::<f64>() / d;
        let mean_dxhat_xhat = dot(&dxhat, xh) / d;
        let r = cache.rstd[i];
        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
            *o = r * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    dx
}

/// Borrowed attention projection weights, each `[d × d]` with `[d]` bias.
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights<'a> {
    pub wq: &'a [f64],
    pub bq: &'a [f64],
    pub wk: &'a [f64],
    pub bk: &'a [f64],
    pub wv: &'a [f64],
    pub bv: &'a [f64],
    pub wo: &'a [f64],
    pub bo: &'a [f64],
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    input: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    /// Row-stochastic attention matrix per head, `[n × n]`.
    pub probs: Vec<Mat>,
    concat: Mat,
}

/// Multi-head scaled dot-product self-attention over all rows of `x`.
pub fn self_attention(x: &Mat, w: &AttentionWeights<'_>, heads: usize) -> (Mat, AttentionCache) {
    let d = x.cols;
    let n = x.rows;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = affine(x, w.wq, Some(w.bq), d);
    let k = affine(x, w.wk, Some(w.bk), d);
    let v = affine(x, w.wv, Some(w.bv), d);
    let mut concat = Mat::zeros(n, d);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let mut p = Mat::zeros(n, n);
        for i in 0..n {
            let qi = &q.row(i)[cols.clone()];
            let pr = p.row_mut(i);
            for (j, s) in pr.iter_mut().enumerate() {
                *s = dot(qi, &k.row(j)[cols.clone()]) * scale;
            }
            softmax_in_place(pr);
        }
        for i in 0..n {
            let out = &mut concat.data[i * d + h * dh..i * d + (h + 1) * dh];
            for j in 0..n {
                let pij = p.get(i, j);
                for (o, vv) in out.iter_mut().zip(&v.row(j)[cols.clone()]) {
                    *o += pij * vv;
                }
            }
        }
        probs.push(p);
    }
    let out = affine(&concat, w.wo, Some(w.bo), d);
    (
        out,
        AttentionCache {
            input: x.clone(),
            q,
            k,
            v,
            probs,
            concat,
        },
    )
}

/// Gradients of the eight attention tensors, in `AttentionWeights` order.
pub struct AttentionGrads<'g> {
    pub wq: &'g mut [f64],
    pub bq: &'g mut [f64],
    pub wk: &'g mut [f64],
    pub bk: &'g mut [f64],
    pub wv: &'g mut [f64],
    pub bv: &'g mut [f64],
    pub wo: &'g mut [f64],
    pub bo: &'g mut [f64],
}

#[allow(clippy::needless_range_loop)]
fn self_attention_backward(
    cache: &AttentionCache,
    w: &AttentionWeights<'_>,
    heads: usize,
    dout: &Mat,
    g: AttentionGrads<'_>,
    flip_score_grad: bool,
) -> Mat {
    let n = dout.rows;
    let d = dout.cols;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let dconcat = affine_backward(&cache.concat, w.wo, dout, g.wo, Some(g.bo));
    let mut dq = Mat::zeros(n, d);
    let mut dk = Mat::zeros(n, d);
    let mut dv = Mat::zeros(n, d);
    let mut dp = vec![0.0; n];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let p = &cache.probs[h];
        for i in 0..n {
            let doi = &dconcat.row(i)[cols.clone()];
            for j in 0..n {
                dp[j] = dot(doi, &cache.v.row(j)[cols.clone()]);
                let pij = p.get(i, j);
                let dvj = &mut dv.data[j * d + h * dh..j * d + (h + 1) * dh];
                for (a, b) in dvj.iter_mut().zip(doi) {
                    *a += pij * b;
                }
            }
            let pr = p.row(i);
            let inner = dot(&dp, pr);
            for j in 0..n {
                let mut ds = pr[j] * (dp[j] - inner) * scale;
                if flip_score_grad {
                    ds = -ds;
                }
                if ds == 0.0 {
                    continue;
                }
                for c in cols.clone() {
                    dq.data[i * d + c] += ds * cache.k.data[j * d + c];
                    dk.data[j * d + c] += ds * cache.q.data[i * d + c];
                }
            }
        }
    }
    let mut dx = affine_backward(&cache.input, w.wq, &dq, g.wq, Some(g.bq));
    dx.add_assign(&affine_backward(&cache.input, w.wk, &dk, g.wk, Some(g.bk)));
    dx.add_assign(&affine_backward(&cache.input, w.wv, &dv, g.wv, Some(g.bv)));
    dx
}

#[derive(Debug, Clone, Copy)]
pub struct LayerParams {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
}

impl LayerParams {
    fn attention<'a>(&self, s: &'a ParamStore) -> AttentionWeights<'a> {
        AttentionWeights {
            wq: s.get(self.wq),
            bq: s.get(self.bq),
            wk: s.get(self.wk),
            bk: s.get(self.bk),
            wv: s.get(self.wv),
            bv: s.get(self.bv),
            wo: s.get(self.wo),
            bo: s.get(self.bo),
        }
    }
}

#[derive(Debug, Clone)]
struct Dropout {
    /// Scaled keep mask; empty means identity.
    mask: Vec<f64>,
}

impl Dropout {
    fn apply(x: &mut Mat, rate: f64, mode: &mut Mode<'_>) -> Self {
        match mode {
            Mode::Train(rng) if rate > 0.0 => {
                let keep = 1.0 / (1.0 - rate);
                let mask: Vec<f64> = (0..x.data.len())
                    .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
                    .collect();
                for (v, m) in x.data.iter_mut().zip(&mask) {
                    *v *= m;
                }
                Dropout { mask }
            }
            _ => Dropout { mask: Vec::new() },
        }
    }

    fn backward(&self, dy: &mut Mat) {
        for (v, m) in dy.data.iter_mut().zip(&self.mask) {
            *v *= m;
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerCache {
    ln1: LayerNormCache,
    pub attention: AttentionCache,
    drop1: Dropout,
    ln2: LayerNormCache,
    ffn_in: Mat,
    ffn_pre: Mat,
    ffn_act: Mat,
    drop2: Dropout,
}

/// One pre-LN encoder layer.
pub fn encoder_layer(
    x: &Mat,
    p: &LayerParams,
    store: &ParamStore,
    config: &TransformerConfig,
    mode: &mut Mode<'_>,
) -> (Mat, LayerCache) {
    let d = config.model_dim;
    let (a, ln1) = layer_norm(x, store.get(p.ln1_gain), store.get(p.ln1_bias));
    let (mut attn, attention) = self_attention(&a, &p.attention(store), config.num_heads);
    let drop1 = Dropout::apply(&mut attn, config.dropout, mode);
    let mut h1 = x.clone();
    h1.add_assign(&attn);

    let (c, ln2) = layer_norm(&h1, store.get(p.ln2_gain), store.get(p.ln2_bias));
    let pre = affine(&c, store.get(p.ffn_w1), Some(store.get(p.ffn_b1)), config.ffn_hidden);
    let mut act = pre.clone();
    act.data.iter_mut().for_each(|v| *v = v.max(0.0));
    let mut ffn = affine(&act, store.get(p.ffn_w2), Some(store.get(p.ffn_b2)), d);
    let drop2 = Dropout::apply(&mut ffn, config.dropout, mode);
    let mut out = h1;
    out.add_assign(&ffn);
    (
        out,
        LayerCache {
            ln1,
            attention,
            drop1,
            ln2,
            ffn_in: c,
            ffn_pre: pre,
            ffn_act: act,
            drop2,
        },
    )
}

fn encoder_layer_backward(
    cache: &LayerCache,
    p: &LayerParams,
    store: &ParamStore,
    config: &TransformerConfig,
    dout: &Mat,
    grads: &mut Grads,
    flip_score_grad: bool,
) -> Mat {
    // second residual block
    let mut dffn = dout.clone();
    cache.drop2.backward(&mut dffn);
    let mut dact = with_two(grads, p.ffn_w2, p.ffn_b2, |dw, db| {
        affine_backward(&cache.ffn_act, store.get(p.ffn_w2), &dffn, dw, Some(db))
    });
    for (g, pre) in dact.data.iter_mut().zip(&cache.ffn_pre.data) {
        if *pre <= 0.0 {
            *g = 0.0;
        }
    }
    let dc = with_two(grads, p.ffn_w1, p.ffn_b1, |dw, db| {
        affine_backward(&cache.ffn_in, store.get(p.ffn_w1), &dact, dw, Some(db))
    });
    let dh1_ln = with_two(grads, p.ln2_gain, p.ln2_bias, |dg, db| {
        layer_norm_backward(&cache.ln2, store.get(p.ln2_gain), &dc, dg, db)
    });
    let mut dh1 = dout.clone();
    dh1.add_assign(&dh1_ln);

    // first residual block
    let mut dattn = dh1.clone();
    cache.drop1.backward(&mut dattn);
    let w = p.attention(store);
    let da = {
        let [gwq, gbq, gwk, gbk, gwv, gbv, gwo, gbo] =
            grads.disjoint_mut([p.wq, p.bq, p.wk, p.bk, p.wv, p.bv, p.wo, p.bo]);
        self_attention_backward(
            &cache.attention,
            &w,
            config.num_heads,
            &dattn,
            AttentionGrads {
                wq: gwq,
                bq: gbq,
                wk: gwk,
                bk: gbk,
                wv: gwv,
                bv: gbv,
                wo: gwo,
                bo: gbo,
            },
            flip_score_grad,
        )
    };
    let dx_ln = with_two(grads, p.ln1_gain, p.ln1_bias, |dg, db| {
        layer_norm_backward(&cache.ln1, store.get(p.ln1_gain), &da, dg, db)
    });
    let mut dx = dh1;
    dx.add_assign(&dx_ln);
    dx
}

/// Borrow two distinct gradient buffers mutably at once.
fn with_two<R>(grads: &mut Grads, a: ParamId, b: ParamId, f: impl FnOnce(&mut [f64], &mut [f64]) -> R) -> R {
    let [ga, gb] = grads.disjoint_mut([a, b]);
    f(ga, gb)
}

/// Session encoder parameters registered in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct SessionEncoder {
    pub config: TransformerConfig,
    pub input_dim: usize,
    pub w_in: ParamId,
    pub b_in: ParamId,
    pub layers: Vec<LayerParams>,
    /// Mutation hook for the gradient checker's own tests: negates the
    /// attention-score gradient.
    #[doc(hidden)]
    pub fault_flip_attention: bool,
}

#[derive(Debug, Clone)]
pub struct SessionEncoding {
    pub values: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct EncoderCache {
    input: Mat,
    pub layers: Vec<LayerCache>,
    /// Number of leading items dropped to fit `max_seq_len`.
    pub truncated: usize,
    rows: usize,
}

impl SessionEncoder {
    pub fn build(
        config: TransformerConfig,
        input_dim: usize,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Self {
        let d = config.model_dim;
        let h = config.ffn_hidden;
        let enc = TensorRole::Encoder;
        let w_in = store.add_uniform(
            "encoder.input.weight",
            "encoder.input",
            enc,
            vec![input_dim, d],
            (1.0 / input_dim as f64).sqrt(),
            rng,
        );
        let b_in = store.add_zeros("encoder.input.bias", "encoder.input", enc, vec![d]);
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let name = |s: &str| format!("encoder.layer{l}.{s}");
            let attn = format!("encoder.layer{l}.attention");
            let norm = format!("encoder.layer{l}.norm");
            let ffn = format!("encoder.layer{l}.ffn");
            let bound = (1.0 / d as f64).sqrt();
            let ln1_gain = store.add_filled(name("ln1.gain"), &norm, enc, vec![d], 1.0);
            let ln1_bias = store.add_zeros(name("ln1.bias"), &norm, enc, vec![d]);
            let wq = store.add_uniform(name("attn.wq"), &attn, enc, vec![d, d], bound, rng);
            let bq = store.add_zeros(name("attn.bq"), &attn, enc, vec![d]);
            let wk = store.add_uniform(name("attn.wk"), &attn, enc, vec![d, d], bound, rng);
            let bk = store.add_zeros(name("attn.bk"), &attn, enc, vec![d]);
            let wv = store.add_uniform(name("attn.wv"), &attn, enc, vec![d, d], bound, rng);
            let bv = store.add_zeros(name("attn.bv"), &attn, enc, vec![d]);
            let wo = store.add_uniform(name("attn.wo"), &attn, enc, vec![d, d], bound, rng);
            let bo = store.add_zeros(name("attn.bo"), &attn, enc, vec![d]);
            let ln2_gain = store.add_filled(name("ln2.gain"), &norm, enc, vec![d], 1.0);
            let ln2_bias = store.add_zeros(name("ln2.bias"), &norm, enc, vec![d]);
            let ffn_w1 = store.add_uniform(name("ffn.w1"), &ffn, enc, vec![d, h], bound, rng);
            let ffn_b1 = store.add_zeros(name("ffn.b1"), &ffn, enc, vec![h]);
            let ffn_w2 = store.add_uniform(
                name("ffn.w2"),
                &ffn,
                enc,
                vec![h, d],
                (1.0 / h as f64).sqrt(),
                rng,
            );
            let ffn_b2 = store.add_zeros(name("ffn.b2"), &ffn, enc, vec![d]);
            layers.push(LayerParams {
                ln1_gain,
                ln1_bias,
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
                ln2_gain,
                ln2_bias,
                ffn_w1,
                ffn_b1,
                ffn_w2,
                ffn_b2,
            });
        }
        Self {
            config,
            input_dim,
            w_in,
            b_in,
            layers,
            fault_flip_attention: false,
        }
    }

    /// Encode a prefix of compound item vectors (oldest first). Prefixes longer
    /// than `max_seq_len` keep only their most recent items.
    pub fn encode_session(
        &self,
        store: &ParamStore,
        items: &[Vec<f64>],
        mode: &mut Mode<'_>,
    ) -> Result<(SessionEncoding, EncoderCache)> {
        if items.is_empty() {
            return Err(Error::Empty("session prefix".into()));
        }
        let truncated = items.len().saturating_sub(self.config.max_seq_len);
        let kept = &items[truncated..];
        for v in kept {
            if v.len() != self.input_dim {
                return Err(Error::dim("compound item vector", self.input_dim, v.len()));
            }
        }
        let x = Mat::from_rows(kept);
        let d = self.config.model_dim;
        let mut h = affine(&x, store.get(self.w_in), Some(store.get(self.b_in)), d);
        if self.config.positional == Positional::Sinusoidal {
            let n = h.rows;
            for i in 0..n {
                let pe = positional_encoding(n - 1 - i, d);
                for (a, b) in h.row_mut(i).iter_mut().zip(pe) {
                    *a += b;
                }
            }
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, cache) = encoder_layer(&h, layer, store, &self.config, mode);
            caches.push(cache);
            h = next;
        }
        Ok((
            SessionEncoding {
                values: h.mean_rows(),
            },
            EncoderCache {
                input: x,
                layers: caches,
                truncated,
                rows: h.rows,
            },
        ))
    }

    /// Backpropagate `d_session` (gradient w.r.t. the pooled encoding).
    /// Returns gradients w.r.t. each input item vector; truncated items get zeros.
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &EncoderCache,
        d_session: &[f64],
        grads: &mut Grads,
    ) -> Vec<Vec<f64>> {
        let d = self.config.model_dim;
        let n = cache.rows;
        let mut dh = Mat::zeros(n, d);
        let inv = 1.0 / n as f64;
        for i in 0..n {
            for (o, g) in dh.row_mut(i).iter_mut().zip(d_session) {
                *o = g * inv;
            }
        }
        for (layer, lc) in self.layers.iter().zip(&cache.layers).rev() {
            dh = encoder_layer_backward(lc, layer, store, &self.config, &dh, grads, self.fault_flip_attention);
        }
        let dx = with_two(grads, self.w_in, self.b_in, |dw, db| {
            affine_backward(&cache.input, store.get(self.w_in), &dh, dw, Some(db))
        });
        let mut out = vec![vec![0.0; self.input_dim]; cache.truncated];
        out.extend((0..dx.rows).map(|i| dx.row(i).to_vec()));
        out
    }
}
