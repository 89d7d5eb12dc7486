//! Transformer building blocks: attention, feed-forward, residual units.
//!
//! Activations are packed `[B·T × D]` matrices; the batch/time split travels
//! with the [`AttentionMask`].

use std::sync::Arc;

use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Which positions each query may attend to, per sequence in a batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    batch: usize,
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn new(batch: usize, rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != batch * rows * cols {
            return Err(Error::Dimension(format!(
                "mask {batch}×{rows}×{cols} needs {} cells, got {}",
                batch * rows * cols,
                allowed.len()
            )));
        }
        Ok(AttentionMask {
            batch,
            rows,
            cols,
            allowed,
        })
    }

    pub fn full(batch: usize, rows: usize, cols: usize) -> Self {
        AttentionMask {
            batch,
            rows,
            cols,
            allowed: vec![true; batch * rows * cols],
        }
    }

    /// Lower-triangular mask for one sequence of length `t`.
    pub fn causal(t: usize) -> Self {
        Self::causal_with_padding(1, t, &vec![false; t])
    }

    /// Blocks key columns flagged in `key_pad` (`[batch × cols]`, true = pad).
    pub fn padding(batch: usize, rows: usize, key_pad: &[bool]) -> Self {
        let cols = key_pad.len() / batch;
        let mut allowed = Vec::with_capacity(batch * rows * cols);
        for b in 0..batch {
            for _ in 0..rows {
                allowed.extend(key_pad[b * cols..(b + 1) * cols].iter().map(|&p| !p));
            }
        }
        AttentionMask {
            batch,
            rows,
            cols,
            allowed,
        }
    }

    /// Causal self-attention mask that also blocks padded keys.
    pub fn causal_with_padding(batch: usize, t: usize, key_pad: &[bool]) -> Self {
        let mut m = Self::padding(batch, t, key_pad);
        for b in 0..batch {
            for i in 0..t {
                for j in i + 1..t {
                    m.allowed[(b * t + i) * t + j] = false;
                }
            }
        }
        // A padded query row whose only visible keys are padding would be empty.
        for b in 0..batch {
            for i in 0..t {
                if !m.row(b, i).iter().any(|&a| a) {
                    m.allowed[(b * t + i) * t + i] = true;
                }
            }
        }
        m
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, b: usize, i: usize) -> &[bool] {
        let start = (b * self.rows + i) * self.cols;
        &self.allowed[start..start + self.cols]
    }

    pub fn is_allowed(&self, b: usize, i: usize, j: usize) -> bool {
        self.row(b, i)[j]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NormStyle {
    /// `LN(x + f(x))`
    #[default]
    Post,
    /// `x + f(LN(x))`
    Pre,
}

impl std::str::FromStr for NormStyle {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "post" => Ok(NormStyle::Post),
            "pre" => Ok(NormStyle::Pre),
            other => Err(format!("unknown norm style `{other}` (expected post or pre)")),
        }
    }
}

/// Hyperparameters shared by every layer of a stack.
#[derive(Clone, Copy, Debug)]
pub struct LayerSettings {
    pub heads: usize,
    pub dropout: f64,
    pub style: NormStyle,
    pub eps: f64,
}

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    /// `[in × out]`
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Xavier-uniform weight, zero bias.
    pub fn init<F: Scalar>(store: &mut ParamStore<F>, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), xavier_uniform(fan_in, fan_out, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![fan_out]));
        Linear { weight, bias }
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }
}

pub fn xavier_uniform<F: Scalar>(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor<F> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let u = Uniform::new_inclusive(-a, a);
    let data = (0..fan_in * fan_out)
        .map(|_| F::from_f64_lossy(u.sample(rng)))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("xavier shape")
}

#[derive(Clone, Copy, Debug)]
pub struct LnParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LnParams {
    pub fn init<F: Scalar>(store: &mut ParamStore<F>, name: &str, d: usize) -> Self {
        LnParams {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(vec![d], F::one())),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(vec![d])),
        }
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: Var, eps: f64) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, eps)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl AttentionParams {
    pub fn init<F: Scalar>(store: &mut ParamStore<F>, name: &str, d: usize, rng: &mut Rng) -> Self {
        AttentionParams {
            query: Linear::init(store, &format!("{name}.q"), d, d, rng),
            key: Linear::init(store, &format!("{name}.k"), d, d, rng),
            value: Linear::init(store, &format!("{name}.v"), d, d, rng),
            output: Linear::init(store, &format!("{name}.out"), d, d, rng),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FfnParams {
    pub inner: Linear,
    pub outer: Linear,
}

impl FfnParams {
    pub fn init<F: Scalar>(store: &mut ParamStore<F>, name: &str, d: usize, ffn: usize, rng: &mut Rng) -> Self {
        FfnParams {
            inner: Linear::init(store, &format!("{name}.fc1"), d, ffn, rng),
            outer: Linear::init(store, &format!("{name}.fc2"), ffn, d, rng),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderLayerParams {
    pub self_attn: AttentionParams,
    pub ln_attn: LnParams,
    pub ffn: FfnParams,
    pub ln_ffn: LnParams,
}

impl EncoderLayerParams {
    pub fn init<F: Scalar>(store: &mut ParamStore<F>, name: &str, d: usize, ffn: usize, rng: &mut Rng) -> Self {
        EncoderLayerParams {
            self_attn: AttentionParams::init(store, &format!("{name}.self_attn"), d, rng),
            ln_attn: LnParams::init(store, &format!("{name}.self_attn_ln"), d),
            ffn: FfnParams::init(store, &format!("{name}.ffn"), d, ffn, rng),
            ln_ffn: LnParams::init(store, &format!("{name}.ffn_ln"), d),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderLayerParams {
    pub self_attn: AttentionParams,
    pub ln_self: LnParams,
    pub cross_attn: AttentionParams,
    pub ln_cross: LnParams,
    pub ffn: FfnParams,
    pub ln_ffn: LnParams,
}

impl DecoderLayerParams {
    pub fn init<F: Scalar>(store: &mut ParamStore<F>, name: &str, d: usize, ffn: usize, rng: &mut Rng) -> Self {
        DecoderLayerParams {
            self_attn: AttentionParams::init(store, &format!("{name}.self_attn"), d, rng),
            ln_self: LnParams::init(store, &format!("{name}.self_attn_ln"), d),
            cross_attn: AttentionParams::init(store, &format!("{name}.cross_attn"), d, rng),
            ln_cross: LnParams::init(store, &format!("{name}.cross_attn_ln"), d),
            ffn: FfnParams::init(store, &format!("{name}.ffn"), d, ffn, rng),
            ln_ffn: LnParams::init(store, &format!("{name}.ffn_ln"), d),
        }
    }
}

/// Projects queries from `q_in` and keys/values from `kv_in`, attends per head,
/// concatenates heads and applies the output projection.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    p: &AttentionParams,
    q_in: Var,
    kv_in: Var,
    mask: Arc<AttentionMask>,
    heads: usize,
    dropout: f64,
) -> Result<Var> {
    let q = p.query.forward(tape, store, q_in)?;
    let k = p.key.forward(tape, store, kv_in)?;
    let v = p.value.forward(tape, store, kv_in)?;
    let ctx = tape.attention(q, k, v, mask, heads, dropout)?;
    p.output.forward(tape, store, ctx)
}

pub fn feed_forward<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    p: &FfnParams,
    x: Var,
    dropout: f64,
) -> Result<Var> {
    let h = p.inner.forward(tape, store, x)?;
    let h = tape.relu(h)?;
    let h = tape.dropout(h, dropout)?;
    p.outer.forward(tape, store, h)
}

/// Post-norm: `LN(x + drop(f(x)))`; pre-norm: `x + drop(f(LN(x)))`.
pub fn residual_apply<F, S>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    x: Var,
    style: NormStyle,
    ln: &LnParams,
    settings: &LayerSettings,
    sublayer: S,
) -> Result<Var>
where
    F: Scalar,
    S: FnOnce(&mut Tape<F>, Var) -> Result<Var>,
{
    match style {
        NormStyle::Post => {
            let y = sublayer(tape, x)?;
            let y = tape.dropout(y, settings.dropout)?;
            let s = tape.add(x, y)?;
            ln.forward(tape, store, s, settings.eps)
        }
        NormStyle::Pre => {
            let n = ln.forward(tape, store, x, settings.eps)?;
            let y = sublayer(tape, n)?;
            let y = tape.dropout(y, settings.dropout)?;
            tape.add(x, y)
        }
    }
}

pub fn encoder_layer_forward<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    p: &EncoderLayerParams,
    x: Var,
    mask: &Arc<AttentionMask>,
    s: &LayerSettings,
) -> Result<Var> {
    let x = residual_apply(tape, store, x, s.style, &p.ln_attn, s, |tp, h| {
        multi_head_attention(tp, store, &p.self_attn, h, h, mask.clone(), s.heads, s.dropout)
    })?;
    residual_apply(tape, store, x, s.style, &p.ln_ffn, s, |tp, h| {
        feed_forward(tp, store, &p.ffn, h, s.dropout)
    })
}

#[allow(clippy::too_many_arguments)]
pub fn decoder_layer_forward<F: Scalar>(
    tape: &mut Tape<F>,
    store: &ParamStore<F>,
    p: &DecoderLayerParams,
    y: Var,
    enc_fused: Var,
    self_mask: &Arc<AttentionMask>,
    cross_mask: &Arc<AttentionMask>,
    s: &LayerSettings,
) -> Result<Var> {
    let y = residual_apply(tape, store, y, s.style, &p.ln_self, s, |tp, h| {
        multi_head_attention(tp, store, &p.self_attn, h, h, self_mask.clone(), s.heads, s.dropout)
    })?;
    let y = residual_apply(tape, store, y, s.style, &p.ln_cross, s, |tp, h| {
        multi_head_attention(tp, store, &p.cross_attn, h, enc_fused, cross_mask.clone(), s.heads, s.dropout)
    })?;
    residual_apply(tape, store, y, s.style, &p.ln_ffn, s, |tp, h| {
        feed_forward(tp, store, &p.ffn, h, s.dropout)
    })
}

/// Fixed sinusoidal position table, `[len × d]` row-major.
pub fn sinusoidal_positions(len: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d / 2 {
            let freq = (-(2.0 * i as f64) * (10000f64).ln() / d as f64).exp();
            let a = pos as f64 * freq;
            out[pos * d + 2 * i] = a.sin();
            out[pos * d + 2 * i + 1] = a.cos();
        }
        if d % 2 == 1 {
            let i = d / 2;
            let freq = (-(2.0 * i as f64) * (10000f64).ln() / d as f64).exp();
            out[pos * d + d - 1] = (pos as f64 * freq).sin();
        }
    }
    out
}
