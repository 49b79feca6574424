//! Hierarchical visual decoder and cosine-similarity mask head.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{normal_tensor, ParamStore};
use crate::posenc::PatchGrid;
use crate::tensor::{Tensor, TokenSequence};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Number of 2x upsampling stages; `2^stages` must equal the patch size.
    pub stages: usize,
    /// Output channels of each stage's 3x3 convolution, non-increasing.
    pub channels: Vec<usize>,
    pub tau: f64,
    pub default_threshold: f64,
    /// Per-category overrides of `default_threshold`.
    pub thresholds: BTreeMap<String, f64>,
    /// Compare pixels with fused text tokens (true) or with the aligned
    /// pre-fusion text tokens (false).
    pub use_fused_text: bool,
}

impl DecoderConfig {
    /// Defaults for a given patch size and fusion width: `log2(p)` stages with
    /// halving channel widths starting at `d_fuse / 2`, floored at 8.
    pub fn for_patch(p: usize, d_fuse: usize) -> Result<Self> {
        if !p.is_power_of_two() {
            return Err(Error::StageMismatch(format!("patch size {p} is not a power of two")));
        }
        let stages = p.trailing_zeros() as usize;
        let channels = (0..stages).map(|s| (d_fuse >> (s + 1)).max(8)).collect();
        Ok(Self {
            stages,
            channels,
            tau: 0.07,
            default_threshold: 0.5,
            thresholds: BTreeMap::new(),
            use_fused_text: true,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::NonPositiveTau(self.tau));
        }
        if self.channels.len() != self.stages {
            return Err(Error::StageMismatch(format!(
                "{} channel widths for {} stages",
                self.channels.len(),
                self.stages
            )));
        }
        if self.channels.iter().any(|&c| c == 0) || self.channels.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::BadConfig(format!("decoder channels {:?} must be positive and non-increasing", self.channels)));
        }
        for t in std::iter::once(&self.default_threshold).chain(self.thresholds.values()) {
            if !(*t > 0.0 && *t < 1.0) {
                return Err(Error::BadConfig(format!("threshold {t} outside (0, 1)")));
            }
        }
        Ok(())
    }

    pub fn threshold_for(&self, category: &str) -> f64 {
        self.thresholds.get(category).copied().unwrap_or(self.default_threshold)
    }
}

#[derive(Clone, Debug)]
struct Stage {
    weight: String,
    bias: String,
}

/// Upsampling decoder: per stage, 2x nearest-neighbour upsampling then a
/// 3x3 convolution and GELU; a final per-pixel linear map returns to `d_fuse`.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub params: ParamStore,
    d_fuse: usize,
    stages: Vec<Stage>,
    head: Linear,
}

impl Decoder {
    pub fn new(cfg: DecoderConfig, d_fuse: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut stages = Vec::with_capacity(cfg.stages);
        let mut cin = d_fuse;
        for (s, &cout) in cfg.channels.iter().enumerate() {
            let weight = format!("decoder.stage.{s}.w");
            let bias = format!("decoder.stage.{s}.b");
            params.insert(weight.clone(), normal_tensor(&mut rng, &[3, 3, cin, cout], (1.0 / (9 * cin) as f64).sqrt()));
            params.insert(bias.clone(), Tensor::zeros(&[cout]));
            stages.push(Stage { weight, bias });
            cin = cout;
        }
        let head = Linear::init(&mut params, &mut rng, "decoder.head", cin, d_fuse, 1.0);
        params.set_trainable(true);
        Ok(Self { cfg, params, d_fuse, stages, head })
    }

    pub fn d_fuse(&self) -> usize {
        self.d_fuse
    }

    /// `[h*w, d_fuse]` tokens to a `[H, W, d_fuse]` feature map.
    pub fn decode(&self, g: &mut Graph, tokens: Var, grid: &PatchGrid) -> Result<Var> {
        if 1usize << self.cfg.stages != grid.p {
            return Err(Error::StageMismatch(format!(
                "{} stages upsample by {}, patch size is {}",
                self.cfg.stages,
                1usize << self.cfg.stages,
                grid.p
            )));
        }
        if g.shape(tokens) != [grid.tokens(), self.d_fuse] {
            return Err(Error::ShapeMismatch(format!(
                "decoder expects [{}, {}] tokens, got {:?}",
                grid.tokens(),
                self.d_fuse,
                g.shape(tokens)
            )));
        }
        let mut x = g.reshape(tokens, &[grid.h, grid.w, self.d_fuse])?;
        for stage in &self.stages {
            x = g.upsample2x(x)?;
            let w = g.param(&self.params, &stage.weight)?;
            let b = g.param(&self.params, &stage.bias)?;
            x = g.conv3x3(x, w, b)?;
            x = g.gelu(x)?;
        }
        let (h, w, c) = match g.shape(x) {
            [h, w, c] => (*h, *w, *c),
            _ => unreachable!("conv output is rank 3"),
        };
        let flat = g.reshape(x, &[h * w, c])?;
        let out = self.head.forward(g, &self.params, flat)?;
        g.reshape(out, &[h, w, self.d_fuse])
    }

    /// Plain-value variant of [`Decoder::decode`].
    pub fn decode_tokens(&self, tokens: &TokenSequence, grid: &PatchGrid) -> Result<Tensor> {
        let mut g = Graph::new();
        let t = g.constant(tokens.clone());
        let out = self.decode(&mut g, t, grid)?;
        Ok(g.value(out).clone())
    }
}

/// Cosine similarity of every pixel feature with every category embedding:
/// `[H, W, d]` x `[C, d]` -> `[C, H, W]`.
pub fn similarity_logits(g: &mut Graph, feat_map: Var, text: Var) -> Result<Var> {
    let (h, w, d) = match g.shape(feat_map) {
        [h, w, d] => (*h, *w, *d),
        s => return Err(Error::ShapeMismatch(format!("feature map must be [H,W,d], got {s:?}"))),
    };
    let (c, dt) = match g.shape(text) {
        [c, dt] => (*c, *dt),
        s => return Err(Error::ShapeMismatch(format!("text embeddings must be [C,d], got {s:?}"))),
    };
    if d != dt {
        return Err(Error::DimensionMismatch(format!("pixel width {d} vs text width {dt}")));
    }
    let flat = g.reshape(feat_map, &[h * w, d])?;
    let pix = g.l2_normalize(flat, 1)?;
    let txt = g.l2_normalize(text, 1)?;
    let logits = g.matmul_bt(txt, pix)?;
    g.reshape(logits, &[c, h, w])
}

/// Plain-value variant of [`similarity_logits`].
pub fn similarity_logits_of(feat_map: &Tensor, text: &TokenSequence) -> Result<Tensor> {
    let mut g = Graph::new();
    let f = g.constant(feat_map.clone());
    let t = g.constant(text.clone());
    let out = similarity_logits(&mut g, f, t)?;
    Ok(g.value(out).clone())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-category probabilities, binary masks and a single-label map.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    /// `[C, H, W]`, in `[0, 1]`.
    pub probs: Tensor,
    /// `[C, H, W]`, values 0 or 1.
    pub masks: Tensor,
    pub categories: Vec<String>,
    pub thresholds: Vec<f64>,
    /// Row-major `H x W`: index into `categories`, or `None` for background.
    pub labels: Vec<Option<usize>>,
}

impl PredictionSet {
    pub fn height(&self) -> usize {
        self.probs.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.probs.shape()[2]
    }

    /// Recomputes `probs >= thresholds` and compares with the stored masks.
    pub fn masks_consistent(&self) -> bool {
        let hw = self.height() * self.width();
        self.probs
            .data()
            .iter()
            .zip(self.masks.data())
            .enumerate()
            .all(|(i, (p, m))| (*p >= self.thresholds[i / hw]) == (*m == 1.0))
    }
}

/// `probs = sigmoid(logits / tau)`, then per-category thresholding. Each
/// pixel's label is the most probable category that clears its threshold,
/// the lowest index on ties, or background if none does.
pub fn predict_masks(logits: &Tensor, cfg: &DecoderConfig, categories: &[String]) -> Result<PredictionSet> {
    if !(cfg.tau > 0.0) {
        return Err(Error::NonPositiveTau(cfg.tau));
    }
    let (c, h, w) = match logits.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::ShapeMismatch(format!("logits must be [C,H,W], got {s:?}"))),
    };
    if categories.len() != c {
        return Err(Error::ShapeMismatch(format!("{} categories for {c} logit maps", categories.len())));
    }
    let thresholds: Vec<f64> = categories.iter().map(|n| cfg.threshold_for(n)).collect();
    let probs: Vec<f64> = logits.data().iter().map(|&z| sigmoid(z / cfg.tau)).collect();
    let hw = h * w;
    let masks: Vec<f64> = probs
        .iter()
        .enumerate()
        .map(|(i, &p)| if p >= thresholds[i / hw] { 1.0 } else { 0.0 })
        .collect();
    let labels = (0..hw)
        .map(|px| {
            let mut best: Option<(usize, f64)> = None;
            for k in 0..c {
                let p = probs[k * hw + px];
                if p >= thresholds[k] && best.map_or(true, |(_, bp)| p > bp) {
                    best = Some((k, p));
                }
            }
            best.map(|(k, _)| k)
        })
        .collect();
    Ok(PredictionSet {
        probs: Tensor::new(&[c, h, w], probs)?,
        masks: Tensor::new(&[c, h, w], masks)?,
        categories: categories.to_vec(),
        thresholds,
        labels,
    })
}

/// Accumulates per-category pixel counts at candidate thresholds and picks,
/// per category, the threshold with the best pooled IoU.
#[derive(Clone, Debug)]
pub struct ThresholdCalibrator {
    candidates: Vec<f64>,
    counts: BTreeMap<String, Vec<[u64; 3]>>,
}

impl Default for ThresholdCalibrator {
    fn default() -> Self {
        Self::new((1..20).map(|i| i as f64 * 0.05).collect())
    }
}

impl ThresholdCalibrator {
    pub fn new(candidates: Vec<f64>) -> Self {
        Self { candidates, counts: BTreeMap::new() }
    }

    /// `probs` and `truth` are one category's pixels.
    pub fn observe(&mut self, category: &str, probs: &[f64], truth: &[bool]) {
        let n = self.candidates.len();
        let slot = self.counts.entry(category.to_string()).or_insert_with(|| vec![[0; 3]; n]);
        for (k, &t) in self.candidates.iter().enumerate() {
            for (&p, &y) in probs.iter().zip(truth) {
                match (p >= t, y) {
                    (true, true) => slot[k][0] += 1,
                    (true, false) => slot[k][1] += 1,
                    (false, true) => slot[k][2] += 1,
                    _ => {}
                }
            }
        }
    }

    pub fn best(&self) -> BTreeMap<String, f64> {
        self.counts
            .iter()
            .map(|(name, slots)| {
                let mut best = (self.candidates[0], -1.0);
                for (k, [tp, fp, fnn]) in slots.iter().enumerate() {
                    let denom = tp + fp + fnn;
                    let iou = if denom == 0 { 1.0 } else { *tp as f64 / denom as f64 };
                    if iou > best.1 {
                        best = (self.candidates[k], iou);
                    }
                }
                (name.clone(), best.0)
            })
            .collect()
    }
}
