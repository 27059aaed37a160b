//! Temporal transformer over one session.
//!
//! Each click contributes `IE(item) + TE(t̂ − τ)`; there is no positional
//! embedding, so order reaches the model only through the time encoder.
//! Layers are post-norm: `x ← LN(x + MHA(x))`, `x ← LN(x + FFN(x))`.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;

use crate::data::Click;
use crate::error::{KsttError, Result};
use crate::kg::Catalog;
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::time_enc::{TimeEncoder, TimeVars};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Readout {
    /// Output row of the most recent click.
    Last,
    /// Mean of all output rows.
    Mean,
}

impl FromStr for Readout {
    type Err = KsttError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last" => Ok(Readout::Last),
            "mean" => Ok(Readout::Mean),
            other => Err(KsttError::Config(format!("readout must be last or mean, got {other:?}"))),
        }
    }
}

impl fmt::Display for Readout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Readout::Last => "last",
            Readout::Mean => "mean",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub readout: Readout,
}

impl TransformerConfig {
    /// One layer, two heads, FFN width `4d`, dropout 0.1, last-row readout.
    pub fn new(dim: usize) -> Self {
        TransformerConfig {
            dim,
            heads: 2,
            layers: 1,
            ffn_dim: 4 * dim,
            dropout: 0.1,
            readout: Readout::Last,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(KsttError::Config(format!(
                "dim {} is not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.layers == 0 || self.ffn_dim == 0 {
            return Err(KsttError::Config("layers and ffn_dim must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(KsttError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Parameters of one transformer layer. Generic over the handle type so the
/// same layout serves stored parameters (`ParamId`) and bound ones (`Var`).
#[derive(Clone, Debug)]
pub struct Layer<T> {
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
    pub ln1_gain: T,
    pub ln1_bias: T,
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
    pub ln2_gain: T,
    pub ln2_bias: T,
}

impl<T: Copy> Layer<T> {
    /// All twelve handles in declaration order.
    pub fn all(&self) -> [T; 12] {
        [
            self.wq,
            self.wk,
            self.wv,
            self.wo,
            self.ln1_gain,
            self.ln1_bias,
            self.w1,
            self.b1,
            self.w2,
            self.b2,
            self.ln2_gain,
            self.ln2_bias,
        ]
    }

    fn map<U>(&self, mut f: impl FnMut(T) -> U) -> Layer<U> {
        Layer {
            wq: f(self.wq),
            wk: f(self.wk),
            wv: f(self.wv),
            wo: f(self.wo),
            ln1_gain: f(self.ln1_gain),
            ln1_bias: f(self.ln1_bias),
            w1: f(self.w1),
            b1: f(self.b1),
            w2: f(self.w2),
            b2: f(self.b2),
            ln2_gain: f(self.ln2_gain),
            ln2_bias: f(self.ln2_bias),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SessionEncoder {
    pub config: TransformerConfig,
    pub layers: Vec<Layer<ParamId>>,
}

/// Output of one attention block, with the per-head `n × n` weight matrices.
#[derive(Clone, Debug)]
pub struct Attention {
    pub output: Var,
    pub weights: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct EncodedSession {
    /// `1 × d` session representation.
    pub repr: Var,
    /// Attention weights indexed by layer, then head.
    pub attention: Vec<Vec<Var>>,
}

impl SessionEncoder {
    /// Registers `enc.{l}.*`: Glorot-uniform projections, zero biases, unit
    /// layer-norm gains.
    pub fn init(store: &mut ParamStore, config: TransformerConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let (d, f) = (config.dim, config.ffn_dim);
        let layers = (0..config.layers)
            .map(|l| {
                let mut reg = |name: &str, t: Tensor| store.register(format!("enc.{l}.{name}"), t);
                Ok(Layer {
                    wq: reg("wq", Tensor::xavier(d, d, rng))?,
                    wk: reg("wk", Tensor::xavier(d, d, rng))?,
                    wv: reg("wv", Tensor::xavier(d, d, rng))?,
                    wo: reg("wo", Tensor::xavier(d, d, rng))?,
                    ln1_gain: reg("ln1_gain", Tensor::full(&[1, d], 1.0))?,
                    ln1_bias: reg("ln1_bias", Tensor::zeros(&[1, d]))?,
                    w1: reg("w1", Tensor::xavier(d, f, rng))?,
                    b1: reg("b1", Tensor::zeros(&[1, f]))?,
                    w2: reg("w2", Tensor::xavier(f, d, rng))?,
                    b2: reg("b2", Tensor::zeros(&[1, d]))?,
                    ln2_gain: reg("ln2_gain", Tensor::full(&[1, d], 1.0))?,
                    ln2_bias: reg("ln2_bias", Tensor::zeros(&[1, d]))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(SessionEncoder { config, layers })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| l.all()).collect()
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> Vec<Layer<Var>> {
        self.layers
            .iter()
            .map(|l| l.map(|id| tape.param(store, id)))
            .collect()
    }

    /// Runs every layer over the behavior matrix and reads out `s`.
    pub fn encode(
        &self,
        tape: &mut Tape,
        layers: &[Layer<Var>],
        behavior: Var,
        mut train: Option<&mut ChaCha8Rng>,
    ) -> Result<EncodedSession> {
        let n = tape.value(behavior).dims2().0;
        let mut x = behavior;
        let mut attention = Vec::with_capacity(layers.len());
        for lv in layers {
            let (out, weights) = transformer_layer(tape, x, lv, &self.config, train.as_deref_mut())?;
            x = out;
            attention.push(weights);
        }
        let repr = match self.config.readout {
            Readout::Last => tape.slice_rows(x, n - 1, 1)?,
            Readout::Mean => tape.mean_rows(x),
        };
        Ok(EncodedSession { repr, attention })
    }
}

/// Scaled dot-product self-attention, `softmax(QKᵀ/√(d/H))V` per head,
/// heads concatenated and projected by `wo`. No mask.
pub fn multi_head_attention(tape: &mut Tape, x: Var, layer: &Layer<Var>, heads: usize) -> Result<Attention> {
    let d = tape.value(layer.wq).dims2().1;
    if heads == 0 || d % heads != 0 {
        return Err(KsttError::Config(format!("dim {d} is not divisible by heads {heads}")));
    }
    let dh = d / heads;
    let q = tape.matmul(x, layer.wq)?;
    let k = tape.matmul(x, layer.wk)?;
    let v = tape.matmul(x, layer.wv)?;
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * dh, dh)?,
                tape.slice_cols(k, h * dh, dh)?,
                tape.slice_cols(v, h * dh, dh)?,
            )
        };
        let kt = tape.transpose(kh);
        let logits = tape.matmul(qh, kt)?;
        let logits = tape.scale(logits, 1.0 / (dh as f64).sqrt());
        let a = tape.softmax(logits)?;
        outs.push(tape.matmul(a, vh)?);
        weights.push(a);
    }
    let cat = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    let output = tape.matmul(cat, layer.wo)?;
    Ok(Attention { output, weights })
}

fn affine_layer_norm(tape: &mut Tape, x: Var, gain: Var, bias: Var) -> Result<Var> {
    let z = tape.layer_norm(x, LAYER_NORM_EPS);
    let z = tape.mul_row(z, gain)?;
    tape.add_row(z, bias)
}

/// Attention and ReLU feed-forward sub-blocks, each with residual and layer
/// norm; sub-block outputs see dropout while training.
pub fn transformer_layer(
    tape: &mut Tape,
    x: Var,
    layer: &Layer<Var>,
    config: &TransformerConfig,
    mut train: Option<&mut ChaCha8Rng>,
) -> Result<(Var, Vec<Var>)> {
    let att = multi_head_attention(tape, x, layer, config.heads)?;
    let mut a = att.output;
    if let Some(rng) = train.as_deref_mut() {
        a = tape.dropout(a, config.dropout, rng)?;
    }
    let res = tape.add(x, a)?;
    let x1 = affine_layer_norm(tape, res, layer.ln1_gain, layer.ln1_bias)?;

    let h = tape.matmul(x1, layer.w1)?;
    let h = tape.add_row(h, layer.b1)?;
    let h = tape.relu(h);
    let f = tape.matmul(h, layer.w2)?;
    let mut f = tape.add_row(f, layer.b2)?;
    if let Some(rng) = train {
        f = tape.dropout(f, config.dropout, rng)?;
    }
    let res = tape.add(x1, f)?;
    let x2 = affine_layer_norm(tape, res, layer.ln2_gain, layer.ln2_bias)?;
    Ok((x2, att.weights))
}

/// Row `i` is `items[i]`'s embedding plus the encoding of `deltas[i]`.
pub fn behavior_embed(
    tape: &mut Tape,
    item_embeddings: Var,
    items: &[usize],
    deltas: &[f64],
    time: &TimeEncoder,
    time_vars: &TimeVars,
) -> Result<Var> {
    if items.is_empty() {
        return Err(KsttError::Contract("cannot encode an empty session".into()));
    }
    if items.len() != deltas.len() {
        return Err(KsttError::dim(
            "behavior_embed",
            format!("{} items but {} deltas", items.len(), deltas.len()),
        ));
    }
    let ie = tape.gather_rows(item_embeddings, items)?;
    if matches!(time, TimeEncoder::None { .. }) {
        return Ok(ie);
    }
    let te = time.encode(tape, time_vars, deltas)?;
    tape.add(ie, te)
}

/// Catalog indices and gaps `t̂ − τ` of a click sequence.
pub fn resolve_clicks(catalog: &Catalog, clicks: &[Click], t_hat: i64) -> Result<(Vec<usize>, Vec<f64>)> {
    clicks
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let idx = catalog
                .index_of(&c.item)
                .ok_or_else(|| KsttError::Lookup(format!("click {i}: unknown item {:?}", c.item)))?;
            Ok((idx, (t_hat - c.timestamp) as f64))
        })
        .collect::<Result<Vec<_>>>()
        .map(|pairs| pairs.into_iter().unzip())
}
