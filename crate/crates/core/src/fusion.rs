//! Trainable vision-language fusion.
//!
//! Per-modality MLPs project visual (`d_v`) and text (`d_t`) tokens to a
//! shared width `d_fuse`; the projected tokens are concatenated (visual
//! first) and run through pre-norm transformer encoder layers with full
//! self-attention, then split back. No positions are added here: visual
//! tokens already carry them and text tokens are an unordered set.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::encoders::{TextFeatures, VisualFeatures};
use crate::error::{Error, Result};
use crate::nn::{EncoderLayer, Mlp};
use crate::params::ParamStore;
use crate::tensor::{Tensor, TokenSequence};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub d_fuse: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    /// Initial scale of each layer's output projections; small values start
    /// the fusion stack close to the identity.
    pub out_gain: f64,
    pub seed: u64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { d_fuse: 64, num_layers: 2, num_heads: 4, mlp_ratio: 4, out_gain: 0.1, seed: 0 }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_fuse == 0 || self.num_heads == 0 || self.d_fuse % self.num_heads != 0 {
            return Err(Error::BadConfig(format!(
                "d_fuse {} must be a positive multiple of num_heads {}",
                self.d_fuse, self.num_heads
            )));
        }
        if !(self.out_gain >= 0.0 && self.out_gain.is_finite()) {
            return Err(Error::BadConfig(format!("fusion out_gain {} must be finite and non-negative", self.out_gain)));
        }
        if self.num_layers == 0 || self.mlp_ratio == 0 {
            return Err(Error::BadConfig("fusion needs num_layers >= 1 and mlp_ratio >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct FusionModule {
    pub cfg: FusionConfig,
    pub params: ParamStore,
    theta_v: Mlp,
    theta_t: Mlp,
    layers: Vec<EncoderLayer>,
}

/// Graph nodes produced by [`FusionModule::forward`].
pub struct FusedTokens {
    pub visual: Var,
    pub text: Var,
    /// Per layer, per head attention matrices over the joint sequence.
    pub attention: Vec<Vec<Var>>,
}

impl FusionModule {
    pub fn new(cfg: FusionConfig, d_visual: usize, d_text: usize) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParamStore::new();
        let d = cfg.d_fuse;
        let theta_v = Mlp::init(&mut params, &mut rng, "theta_v", d_visual, d, d);
        let theta_t = Mlp::init(&mut params, &mut rng, "theta_t", d_text, d, d);
        let layers = (0..cfg.num_layers)
            .map(|l| EncoderLayer::init(&mut params, &mut rng, &format!("layer.{l}"), d, cfg.num_heads, cfg.mlp_ratio, cfg.out_gain))
            .collect::<Result<Vec<_>>>()?;
        params.set_trainable(true);
        Ok(Self { cfg, params, theta_v, theta_t, layers })
    }

    pub fn d_visual(&self) -> usize {
        self.theta_v.d_in()
    }

    pub fn d_text(&self) -> usize {
        self.theta_t.d_in()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Parameter names that belong to the transformer layers (not to theta).
    pub fn layer_param_names(&self) -> impl Iterator<Item = &str> {
        self.params.names().filter(|n| n.starts_with("layer."))
    }

    fn check_widths(&self, g: &Graph, visual: Var, text: Var) -> Result<()> {
        let vw = g.shape(visual).get(1).copied();
        let tw = g.shape(text).get(1).copied();
        if g.shape(visual).len() != 2 || vw != Some(self.d_visual()) {
            return Err(Error::DimensionMismatch(format!(
                "visual tokens {:?}, theta_v expects width {}",
                g.shape(visual),
                self.d_visual()
            )));
        }
        if g.shape(text).len() != 2 || tw != Some(self.d_text()) {
            return Err(Error::DimensionMismatch(format!(
                "text tokens {:?}, theta_t expects width {}",
                g.shape(text),
                self.d_text()
            )));
        }
        Ok(())
    }

    /// theta projections of both token sets to `d_fuse`.
    pub fn align(&self, g: &mut Graph, visual: Var, text: Var) -> Result<(Var, Var)> {
        self.check_widths(g, visual, text)?;
        let v = self.theta_v.forward(g, &self.params, visual)?;
        let t = self.theta_t.forward(g, &self.params, text)?;
        Ok((v, t))
    }

    /// Alignment followed by the fusion layers. With `fuse_layers` false the
    /// aligned tokens pass through unchanged.
    pub fn forward(&self, g: &mut Graph, visual: Var, text: Var, fuse_layers: bool) -> Result<FusedTokens> {
        let (v, t) = self.align(g, visual, text)?;
        if !fuse_layers {
            return Ok(FusedTokens { visual: v, text: t, attention: Vec::new() });
        }
        let n_v = g.shape(v)[0];
        let n_t = g.shape(t)[0];
        let mut x = g.concat_rows(&[v, t])?;
        let mut attention = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let out = layer.forward(g, &self.params, x)?;
            x = out.tokens;
            attention.push(out.attention);
        }
        let visual = g.slice_rows(x, 0, n_v)?;
        let text = g.slice_rows(x, n_v, n_v + n_t)?;
        Ok(FusedTokens { visual, text, attention })
    }

    pub fn align_channels(&self, visual: &VisualFeatures, text: &TextFeatures) -> Result<(TokenSequence, TokenSequence)> {
        let mut g = Graph::new();
        let v = g.constant(visual.tokens.clone());
        let t = g.constant(text.embeddings.clone());
        let (v, t) = self.align(&mut g, v, t)?;
        Ok((g.value(v).clone(), g.value(t).clone()))
    }

    /// `[F_i_upd, F_w_upd] = Fuse(theta[F_i, F_w])`.
    pub fn fuse(&self, visual: &VisualFeatures, text: &TextFeatures) -> Result<(TokenSequence, TokenSequence)> {
        self.fuse_tokens(&visual.tokens, &text.embeddings)
    }

    pub fn fuse_tokens(&self, visual: &Tensor, text: &Tensor) -> Result<(TokenSequence, TokenSequence)> {
        let mut g = Graph::new();
        let v = g.constant(visual.clone());
        let t = g.constant(text.clone());
        let out = self.forward(&mut g, v, t, true)?;
        Ok((g.value(out.visual).clone(), g.value(out.text).clone()))
    }
}
