//! Frozen visual and text encoders.
//!
//! Two backends share one interface: a seeded random-weight transformer stub
//! and a loader for features exported offline from a real checkpoint. Neither
//! backend ever exposes trainable parameters.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::io::{load_tensor, read_manifest_lines};
use crate::nn::{EncoderLayer, Linear};
use crate::params::{normal_tensor, ParamStore};
use crate::posenc::{FieldCache, FourierConfig, PatchGrid};
use crate::tensor::{Tensor, TokenSequence};

/// Prompt patterns, applied in this order; each holds one `{category}` slot.
pub const TEMPLATES: [&str; 12] = [
    "An image of a {category}.",
    "This is an image of a {category}.",
    "An image of a small {category}.",
    "An image of a medium {category}.",
    "An image of a large {category}.",
    "An image of a {category} within the context.",
    "An image of the {category} within the context.",
    "An image of the {category} within the context.",
    "A resized image of a{category} within the context.",
    "This falls under a {category} within the context.",
    "This falls under the {category} within the context.",
    "This falls under one {category} within the context.",
];

const PLACEHOLDER: &str = "{category}";

#[derive(Clone, Debug, PartialEq)]
pub struct PromptTemplate {
    pattern: String,
}

impl PromptTemplate {
    pub fn new(pattern: &str) -> Result<Self> {
        if pattern.matches(PLACEHOLDER).count() != 1 {
            return Err(Error::BadConfig(format!("template {pattern:?} needs exactly one {PLACEHOLDER}")));
        }
        Ok(Self { pattern: pattern.to_string() })
    }

    pub fn fill(&self, category: &str) -> Result<String> {
        if category.trim().is_empty() {
            return Err(Error::EmptyCategory);
        }
        Ok(self.pattern.replace(PLACEHOLDER, category))
    }
}

/// The twelve prompts for `category`, in template order.
pub fn expand_templates(category: &str) -> Result<Vec<String>> {
    TEMPLATES.iter().map(|t| PromptTemplate::new(t)?.fill(category)).collect()
}

/// Splits `[H, W, 3]` pixels into row-major `p x p` patches, each flattened
/// row-major into `3 p^2` values.
pub fn patchify(image: &Tensor, p: usize) -> Result<TokenSequence> {
    let (h, w, c) = match image.shape() {
        [h, w, c] => (*h, *w, *c),
        s => return Err(Error::ShapeMismatch(format!("image must be [H,W,C], got {s:?}"))),
    };
    let grid = PatchGrid::for_image(h, w, p)?;
    let src = image.data();
    let len = p * p * c;
    let mut out = Vec::with_capacity(grid.tokens() * len);
    for gy in 0..grid.h {
        for gx in 0..grid.w {
            for y in gy * p..(gy + 1) * p {
                let start = (y * w + gx * p) * c;
                out.extend_from_slice(&src[start..start + p * c]);
            }
        }
    }
    Tensor::new(&[grid.tokens(), len], out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisualFeatures {
    pub tokens: TokenSequence,
    pub grid: PatchGrid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextFeatures {
    pub embeddings: TokenSequence,
    pub categories: Vec<String>,
}

/// How positions enter the visual token stream before the encoder layers.
pub enum Positions<'a> {
    None,
    Fourier(&'a FourierConfig),
    /// A `[tokens, d_v]` node already in the graph, e.g. a learned table.
    Table(Var),
}

#[derive(Clone, Debug, PartialEq)]
pub struct StubConfig {
    pub d_visual: usize,
    pub d_text: usize,
    pub patch: usize,
    pub layers: usize,
    pub heads: usize,
    /// Visual layers share one projection for queries and keys, so attention
    /// scores are a similarity kernel over token content and position.
    pub tied_qk: bool,
    pub seed: u64,
}

impl StubConfig {
    pub fn new(d_visual: usize, d_text: usize, patch: usize, seed: u64) -> Self {
        Self { d_visual, d_text, patch, layers: 2, heads: 4, tied_qk: true, seed }
    }
}

#[derive(Debug)]
struct StubBackend {
    cfg: StubConfig,
    weights: ParamStore,
    projection: Linear,
    visual: Vec<EncoderLayer>,
    text: Vec<EncoderLayer>,
}

#[derive(Debug)]
struct PrecomputedBackend {
    source: PathBuf,
    patch: usize,
    images: HashMap<String, Tensor>,
    texts: HashMap<String, Vec<f64>>,
    d_visual: usize,
    d_text: usize,
}

#[derive(Debug)]
enum Backend {
    Stub(StubBackend),
    Precomputed(PrecomputedBackend),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    Stub,
    Precomputed,
}

/// Frozen visual + text encoder pair.
#[derive(Debug)]
pub struct FrozenEncoder {
    backend: Backend,
    fields: FieldCache,
}

/// An image as the encoders see it: an id (used by the precomputed backend)
/// and its pixels (used by the stub).
#[derive(Clone, Copy, Debug)]
pub struct ImageRef<'a> {
    pub id: &'a str,
    pub pixels: &'a Tensor,
}

/// Pixel normalisation applied by the stub before patch projection, in the
/// manner of the mean/std preprocessing of pretrained vision backbones.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.25;

/// Lower-cased alphanumeric words of a prompt.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|s| !s.is_empty()).map(str::to_lowercase).collect()
}

fn token_seed(seed: u64, token: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(token.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

impl FrozenEncoder {
    /// Seeded random-weight transformer encoders.
    pub fn stub(cfg: StubConfig) -> Result<Self> {
        if cfg.patch == 0 || cfg.d_visual == 0 || cfg.d_text == 0 {
            return Err(Error::BadConfig("stub encoder sizes must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9E37_79B9_7F4A_7C15));
        let mut weights = ParamStore::new();
        let patch_len = 3 * cfg.patch * cfg.patch;
        let projection = Linear::init(&mut weights, &mut rng, "visual.patch_proj", patch_len, cfg.d_visual, 1.0);
        let mut visual = (0..cfg.layers)
            .map(|l| EncoderLayer::init(&mut weights, &mut rng, &format!("visual.layer.{l}"), cfg.d_visual, cfg.heads, 2, 1.0))
            .collect::<Result<Vec<_>>>()?;
        if cfg.tied_qk {
            for layer in &mut visual {
                weights.remove(&layer.k.weight);
                weights.remove(&layer.k.bias);
                layer.k = layer.q.clone();
            }
        }
        let text = (0..cfg.layers)
            .map(|l| EncoderLayer::init(&mut weights, &mut rng, &format!("text.layer.{l}"), cfg.d_text, cfg.heads, 2, 1.0))
            .collect::<Result<Vec<_>>>()?;
        weights.set_trainable(false);
        Ok(Self { backend: Backend::Stub(StubBackend { cfg, weights, projection, visual, text }), fields: FieldCache::default() })
    }

    /// Loads exported features listed in a `kind<TAB>key<TAB>file` manifest.
    pub fn load_precomputed(manifest_path: &Path, patch: usize) -> Result<Self> {
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let mut images = HashMap::new();
        let mut texts = HashMap::new();
        let (mut d_visual, mut d_text) = (None, None);
        let check = |slot: &mut Option<usize>, d: usize, what: &str| -> Result<()> {
            match *slot {
                Some(prev) if prev != d => {
                    Err(Error::DimensionMismatch(format!("{what} features of width {d} and {prev}")))
                }
                _ => {
                    *slot = Some(d);
                    Ok(())
                }
            }
        };
        for fields in read_manifest_lines(manifest_path)? {
            let [kind, key, file] = fields.as_slice() else {
                return Err(Error::CorruptTensorFile {
                    path: manifest_path.to_path_buf(),
                    reason: format!("bad manifest line {fields:?}"),
                });
            };
            let t = load_tensor(&dir.join(file))?;
            match kind.as_str() {
                "image" => {
                    let t = match t.shape() {
                        [_, _, _] => t,
                        [n, d] => {
                            let side = (*n as f64).sqrt().round() as usize;
                            if side * side != *n {
                                return Err(Error::DimensionMismatch(format!(
                                    "image {key}: {n} tokens do not form a square grid"
                                )));
                            }
                            t.reshape(&[side, side, *d])?
                        }
                        s => return Err(Error::DimensionMismatch(format!("image {key}: shape {s:?}"))),
                    };
                    check(&mut d_visual, t.shape()[2], "image")?;
                    images.insert(key.clone(), t);
                }
                "text" => {
                    if t.rank() > 2 || t.rows() != 1 {
                        return Err(Error::DimensionMismatch(format!("text {key}: shape {:?}", t.shape())));
                    }
                    check(&mut d_text, t.cols(), "text")?;
                    texts.insert(key.clone(), t.into_data());
                }
                other => {
                    return Err(Error::CorruptTensorFile {
                        path: manifest_path.to_path_buf(),
                        reason: format!("unknown kind {other:?}"),
                    })
                }
            }
        }
        Ok(Self {
            backend: Backend::Precomputed(PrecomputedBackend {
                source: manifest_path.to_path_buf(),
                patch,
                images,
                texts,
                d_visual: d_visual.unwrap_or(0),
                d_text: d_text.unwrap_or(0),
            }),
            fields: FieldCache::default(),
        })
    }

    pub fn kind(&self) -> EncoderKind {
        match self.backend {
            Backend::Stub(_) => EncoderKind::Stub,
            Backend::Precomputed(_) => EncoderKind::Precomputed,
        }
    }

    pub fn d_visual(&self) -> usize {
        match &self.backend {
            Backend::Stub(s) => s.cfg.d_visual,
            Backend::Precomputed(p) => p.d_visual,
        }
    }

    pub fn d_text(&self) -> usize {
        match &self.backend {
            Backend::Stub(s) => s.cfg.d_text,
            Backend::Precomputed(p) => p.d_text,
        }
    }

    pub fn patch(&self) -> usize {
        match &self.backend {
            Backend::Stub(s) => s.cfg.patch,
            Backend::Precomputed(p) => p.patch,
        }
    }

    pub fn seed(&self) -> Option<u64> {
        match &self.backend {
            Backend::Stub(s) => Some(s.cfg.seed),
            Backend::Precomputed(_) => None,
        }
    }

    pub fn source(&self) -> Option<&Path> {
        match &self.backend {
            Backend::Stub(_) => None,
            Backend::Precomputed(p) => Some(&p.source),
        }
    }

    /// Frozen weights of the stub backend (empty for precomputed features).
    pub fn weights(&self) -> Option<&ParamStore> {
        match &self.backend {
            Backend::Stub(s) => Some(&s.weights),
            Backend::Precomputed(_) => None,
        }
    }

    /// Checksum over every frozen weight; stable across training.
    pub fn checksum(&self) -> String {
        match &self.backend {
            Backend::Stub(s) => s.weights.checksum(),
            Backend::Precomputed(p) => {
                let mut store = ParamStore::new();
                for (k, t) in &p.images {
                    store.insert(format!("image.{k}"), t.clone());
                }
                for (k, v) in &p.texts {
                    store.insert(format!("text.{k}"), Tensor::from_parts(vec![v.len()], v.clone()));
                }
                store.checksum()
            }
        }
    }

    /// Patch grid for an image.
    pub fn grid_for(&self, image: ImageRef<'_>) -> Result<PatchGrid> {
        match &self.backend {
            Backend::Stub(s) => match image.pixels.shape() {
                [h, w, _] => PatchGrid::for_image(*h, *w, s.cfg.patch),
                sh => Err(Error::ShapeMismatch(format!("image must be [H,W,3], got {sh:?}"))),
            },
            Backend::Precomputed(p) => {
                let t = p.images.get(image.id).ok_or_else(|| Error::UnknownKey(image.id.to_string()))?;
                Ok(PatchGrid { h: t.shape()[0], w: t.shape()[1], p: p.patch })
            }
        }
    }

    /// Position-free patch embeddings `x_i` as a graph constant.
    pub fn patch_embeddings(&self, g: &mut Graph, image: ImageRef<'_>) -> Result<(Var, PatchGrid)> {
        let grid = self.grid_for(image)?;
        match &self.backend {
            Backend::Stub(s) => {
                if image.pixels.shape().get(2) != Some(&3) {
                    return Err(Error::ShapeMismatch(format!("image must be [H,W,3], got {:?}", image.pixels.shape())));
                }
                let mut patches = patchify(image.pixels, s.cfg.patch)?;
                for v in patches.data_mut() {
                    *v = (*v - PIXEL_MEAN) / PIXEL_STD;
                }
                let patches = g.constant(patches);
                Ok((s.projection.forward(g, &s.weights, patches)?, grid))
            }
            Backend::Precomputed(p) => {
                let t = &p.images[image.id];
                Ok((g.constant(t.reshape(&[grid.tokens(), p.d_visual])?), grid))
            }
        }
    }

    /// Runs the visual encoder on position-aware tokens: `F_i = Vis_Enc(X_i)`.
    /// The precomputed backend stores final features, so this is the identity.
    pub fn visual_layers(&self, g: &mut Graph, tokens: Var) -> Result<Var> {
        match &self.backend {
            Backend::Stub(s) => {
                let mut x = tokens;
                for layer in &s.visual {
                    x = layer.forward(g, &s.weights, x)?.tokens;
                }
                Ok(x)
            }
            Backend::Precomputed(_) => Ok(tokens),
        }
    }

    /// Full visual path inside `g`: patch embedding, positions, encoder layers.
    pub fn visual_tokens(&self, g: &mut Graph, image: ImageRef<'_>, positions: Positions<'_>) -> Result<(Var, PatchGrid)> {
        let (x, grid) = self.patch_embeddings(g, image)?;
        let x = match positions {
            Positions::None => x,
            Positions::Fourier(cfg) => {
                if cfg.d != self.d_visual() {
                    return Err(Error::ConfigMismatch(format!(
                        "fourier width {} for visual width {}",
                        cfg.d,
                        self.d_visual()
                    )));
                }
                let field = self.fields.get(&grid, cfg)?;
                let f = g.constant((*field).clone());
                g.add(x, f)?
            }
            Positions::Table(t) => {
                if g.shape(t) != g.shape(x) {
                    return Err(Error::ShapeMismatch(format!(
                        "position table {:?} for tokens {:?}",
                        g.shape(t),
                        g.shape(x)
                    )));
                }
                g.add(x, t)?
            }
        };
        Ok((self.visual_layers(g, x)?, grid))
    }

    /// `F_i = Vis_Enc(x_i + f_emb(x, y))`, detached from any graph.
    pub fn encode_image(&self, image: ImageRef<'_>, cfg: &FourierConfig) -> Result<VisualFeatures> {
        if !image.pixels.is_finite() {
            return Err(Error::NonFinite("encode_image input".into()));
        }
        let mut g = Graph::new();
        let (v, grid) = self.visual_tokens(&mut g, image, Positions::Fourier(cfg))?;
        Ok(VisualFeatures { tokens: g.value(v).clone(), grid })
    }

    /// Embedding of one prompt string (stub backend only).
    pub fn embed_prompt(&self, prompt: &str) -> Result<Vec<f64>> {
        let Backend::Stub(s) = &self.backend else {
            return Err(Error::BadConfig("prompt embedding needs the stub backend".into()));
        };
        let tokens = tokenize(prompt);
        if tokens.is_empty() {
            return Err(Error::EmptyCategory);
        }
        let mut rows = Vec::with_capacity(tokens.len() * s.cfg.d_text);
        for tok in &tokens {
            let mut rng = ChaCha8Rng::seed_from_u64(token_seed(s.cfg.seed, tok));
            rows.extend(normal_tensor(&mut rng, &[s.cfg.d_text], 1.0).into_data());
        }
        let mut g = Graph::new();
        let mut x = g.constant(Tensor::new(&[tokens.len(), s.cfg.d_text], rows)?);
        for layer in &s.text {
            x = layer.forward(&mut g, &s.weights, x)?.tokens;
        }
        let v = g.value(x);
        let n = tokens.len() as f64;
        Ok((0..s.cfg.d_text).map(|j| (0..tokens.len()).map(|r| v.row(r)[j]).sum::<f64>() / n).collect())
    }

    /// One row per category: the mean of its twelve prompt embeddings.
    pub fn encode_text(&self, categories: &[String]) -> Result<TextFeatures> {
        if categories.is_empty() {
            return Err(Error::EmptyCategory);
        }
        let mut seen = std::collections::HashSet::new();
        for c in categories {
            if c.trim().is_empty() {
                return Err(Error::EmptyCategory);
            }
            if !seen.insert(c.as_str()) {
                return Err(Error::DuplicateCategory(c.clone()));
            }
        }
        let d = self.d_text();
        let mut data = Vec::with_capacity(categories.len() * d);
        for c in categories {
            match &self.backend {
                Backend::Stub(_) => {
                    let prompts = expand_templates(c)?;
                    let mut mean = vec![0.0; d];
                    for p in &prompts {
                        for (m, v) in mean.iter_mut().zip(self.embed_prompt(p)?) {
                            *m += v;
                        }
                    }
                    data.extend(mean.into_iter().map(|m| m / prompts.len() as f64));
                }
                Backend::Precomputed(p) => {
                    let row = p.texts.get(c).ok_or_else(|| Error::UnknownKey(c.clone()))?;
                    data.extend_from_slice(row);
                }
            }
        }
        Ok(TextFeatures { embeddings: Tensor::new(&[categories.len(), d], data)?, categories: categories.to_vec() })
    }
}
