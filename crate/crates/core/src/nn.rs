//! Layers expressed as graph ops over named parameters in a [`ParamStore`].
//!
//! A layer value only stores parameter names and sizes; the tensors live in
//! the store, so the same layer code serves frozen and trainable weights.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{normal_tensor, ParamStore};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: String,
    pub bias: String,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Registers a `d_in -> d_out` layer with weights drawn from
    /// `N(0, gain^2 / d_in)` and zero bias.
    pub fn init(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, d_in: usize, d_out: usize, gain: f64) -> Self {
        let weight = format!("{prefix}.w");
        let bias = format!("{prefix}.b");
        store.insert(weight.clone(), normal_tensor(rng, &[d_in, d_out], gain / (d_in as f64).sqrt()));
        store.insert(bias.clone(), Tensor::zeros(&[d_out]));
        Self { weight, bias, d_in, d_out }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, &self.weight)?;
        let b = g.param(store, &self.bias)?;
        let y = g.matmul(x, w)?;
        g.add_row_vec(y, b)
    }
}

/// Two linear layers with a GELU between them.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp {
    pub fn init(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, d_in: usize, hidden: usize, d_out: usize) -> Self {
        Self {
            first: Linear::init(store, rng, &format!("{prefix}.0"), d_in, hidden, 1.0),
            second: Linear::init(store, rng, &format!("{prefix}.1"), hidden, d_out, 1.0),
        }
    }

    pub fn d_in(&self) -> usize {
        self.first.d_in
    }

    pub fn d_out(&self) -> usize {
        self.second.d_out
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.first.forward(g, store, x)?;
        let h = g.gelu(h)?;
        self.second.forward(g, store, h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gain: String,
    pub bias: String,
}

impl LayerNorm {
    pub fn init(store: &mut ParamStore, prefix: &str, d: usize) -> Self {
        let gain = format!("{prefix}.g");
        let bias = format!("{prefix}.b");
        store.insert(gain.clone(), Tensor::filled(&[d], 1.0));
        store.insert(bias.clone(), Tensor::zeros(&[d]));
        Self { gain, bias }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, &self.gain)?;
        let bias = g.param(store, &self.bias)?;
        g.layer_norm(x, gain, bias, LN_EPS)
    }
}

/// Pre-norm transformer encoder layer: `x + MHSA(LN(x))`, then `x + FFN(LN(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub ln2: LayerNorm,
    pub ffn: Mlp,
    pub heads: usize,
    pub d: usize,
}

/// Output of one layer plus its per-head attention matrices.
pub struct LayerOutput {
    pub tokens: Var,
    pub attention: Vec<Var>,
}

impl EncoderLayer {
    /// `out_gain` scales the initial attention and feed-forward output
    /// projections, i.e. how far one layer moves the residual stream.
    pub fn init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        d: usize,
        heads: usize,
        mlp_ratio: usize,
        out_gain: f64,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::ConfigMismatch(format!("width {d} not divisible by {heads} heads")));
        }
        let hidden = d * mlp_ratio.max(1);
        Ok(Self {
            ln1: LayerNorm::init(store, &format!("{prefix}.ln1"), d),
            q: Linear::init(store, rng, &format!("{prefix}.attn.q"), d, d, 1.0),
            k: Linear::init(store, rng, &format!("{prefix}.attn.k"), d, d, 1.0),
            v: Linear::init(store, rng, &format!("{prefix}.attn.v"), d, d, 1.0),
            out: Linear::init(store, rng, &format!("{prefix}.attn.o"), d, d, out_gain),
            ln2: LayerNorm::init(store, &format!("{prefix}.ln2"), d),
            ffn: Mlp {
                first: Linear::init(store, rng, &format!("{prefix}.ffn.0"), d, hidden, 1.0),
                second: Linear::init(store, rng, &format!("{prefix}.ffn.1"), hidden, d, out_gain),
            },
            heads,
            d,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<LayerOutput> {
        let cols = g.shape(x).get(1).copied();
        if g.shape(x).len() != 2 || cols != Some(self.d) {
            return Err(Error::DimensionMismatch(format!(
                "encoder layer of width {} got {:?}",
                self.d,
                g.shape(x)
            )));
        }
        let h = self.ln1.forward(g, store, x)?;
        let q = self.q.forward(g, store, h)?;
        let k = self.k.forward(g, store, h)?;
        let v = self.v.forward(g, store, h)?;
        let dh = self.d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        let mut attention = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let (lo, hi) = (head * dh, (head + 1) * dh);
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (g.slice_cols(q, lo, hi)?, g.slice_cols(k, lo, hi)?, g.slice_cols(v, lo, hi)?)
            };
            let scores = g.matmul_bt(qh, kh)?;
            let scores = g.scale(scores, scale)?;
            let probs = g.softmax(scores, 1)?;
            attention.push(probs);
            heads.push(g.matmul(probs, vh)?);
        }
        let merged = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        let attn = self.out.forward(g, store, merged)?;
        let x = g.add(x, attn)?;
        let h = self.ln2.forward(g, store, x)?;
        let f = self.ffn.forward(g, store, h)?;
        let tokens = g.add(x, f)?;
        Ok(LayerOutput { tokens, attention })
    }
}
