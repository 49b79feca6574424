//! The trainable model and its checkpoints.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;
use std::sync::RwLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::encoders::{FrozenEncoder, ImageRef};
use crate::error::{Error, Result};
use crate::fusion::FusionModule;
use crate::io::{load_archive, save_archive, write_atomic};
use crate::params::{normal_tensor, ParamStore};
use crate::posenc::PatchGrid;
use crate::seghead::{similarity_logits, Decoder};
use crate::tensor::Tensor;
use crate::train::config::ExperimentConfig;

pub const POS_TABLE: &str = "pos_table";
pub const CONFIG_FILE: &str = "config.txt";

/// Builds the frozen encoder a config asks for.
pub fn build_encoder(cfg: &ExperimentConfig) -> Result<FrozenEncoder> {
    match &cfg.encoder.precomputed {
        Some(manifest) => {
            let enc = FrozenEncoder::load_precomputed(manifest, cfg.patch)?;
            if enc.d_visual() != cfg.encoder.d_visual || enc.d_text() != cfg.encoder.d_text {
                return Err(Error::ConfigMismatch(format!(
                    "precomputed features are {}/{} wide, config says {}/{}",
                    enc.d_visual(),
                    enc.d_text(),
                    cfg.encoder.d_visual,
                    cfg.encoder.d_text
                )));
            }
            Ok(enc)
        }
        None => FrozenEncoder::stub(cfg.stub()),
    }
}

/// Fusion, decoder and (learned-position variant only) the position table.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ExperimentConfig,
    pub fusion: FusionModule,
    pub decoder: Decoder,
    /// Holds [`POS_TABLE`] when the variant uses learned positions.
    pub positions: ParamStore,
    pub grid: PatchGrid,
}

/// Frozen-encoder outputs reused across steps: final visual tokens for the
/// Fourier variants, position-free patch embeddings for the learned table,
/// and per-category text rows.
#[derive(Debug, Default)]
pub struct FeatureCache {
    visual: RwLock<HashMap<String, Tensor>>,
    text: RwLock<HashMap<String, Vec<f64>>>,
}

impl FeatureCache {
    pub fn len(&self) -> usize {
        self.visual.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Names of every category embedded so far.
    pub fn embedded_categories(&self) -> BTreeSet<String> {
        self.text.read().expect("cache lock").keys().cloned().collect()
    }

    fn text(&self, enc: &FrozenEncoder, categories: &[String]) -> Result<Tensor> {
        let d = enc.d_text();
        let missing: Vec<String> = {
            let map = self.text.read().expect("cache lock");
            categories.iter().filter(|c| !map.contains_key(*c)).cloned().collect()
        };
        if !missing.is_empty() {
            let feats = enc.encode_text(&missing)?;
            let mut map = self.text.write().expect("cache lock");
            for (i, c) in missing.iter().enumerate() {
                map.insert(c.clone(), feats.embeddings.row(i).to_vec());
            }
        }
        let map = self.text.read().expect("cache lock");
        let mut data = Vec::with_capacity(categories.len() * d);
        for c in categories {
            data.extend_from_slice(&map[c]);
        }
        Tensor::new(&[categories.len(), d], data)
    }

    fn visual(&self, key: &str, make: impl FnOnce() -> Result<Tensor>) -> Result<Tensor> {
        if let Some(t) = self.visual.read().expect("cache lock").get(key) {
            return Ok(t.clone());
        }
        let t = make()?;
        self.visual.write().expect("cache lock").insert(key.to_string(), t.clone());
        Ok(t)
    }
}

/// Graph outputs of one forward pass.
pub struct ForwardOutput {
    /// `[C, H, W]` cosine logits.
    pub logits: Var,
    pub grid: PatchGrid,
}

impl Model {
    /// Fresh parameters for `cfg` with encoder widths from `cfg.encoder`.
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let mut fcfg = cfg.fusion.clone();
        fcfg.seed = cfg.seed.wrapping_mul(2).wrapping_add(1);
        let fusion = FusionModule::new(fcfg, cfg.encoder.d_visual, cfg.encoder.d_text)?;
        let decoder = Decoder::new(cfg.decoder.clone(), cfg.fusion.d_fuse, cfg.seed.wrapping_mul(2).wrapping_add(2))?;
        let grid = PatchGrid::for_image(cfg.height, cfg.width, cfg.patch)?;
        let mut positions = ParamStore::new();
        if !cfg.variant.use_fourier() {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(2).wrapping_add(3));
            positions.insert(POS_TABLE, normal_tensor(&mut rng, &[grid.tokens(), cfg.encoder.d_visual], cfg.pos_table_std));
            positions.set_trainable(true);
        }
        Ok(Self { cfg: cfg.clone(), fusion, decoder, positions, grid })
    }

    /// The exact set of parameter names the optimizer may update.
    pub fn trainable_names(&self) -> BTreeSet<String> {
        let mut names: BTreeSet<String> = self
            .fusion
            .params
            .names()
            .filter(|n| self.cfg.variant.use_fusion() || !n.starts_with("layer."))
            .map(str::to_string)
            .collect();
        names.extend(self.decoder.params.names().map(str::to_string));
        names.extend(self.positions.names().map(str::to_string));
        names
    }

    /// Every parameter the model holds, under checkpoint names.
    pub fn all_params(&self) -> ParamStore {
        let mut all = self.fusion.params.clone();
        all.extend(self.decoder.params.clone());
        all.extend(self.positions.clone());
        all
    }

    pub fn num_parameters(&self) -> usize {
        self.all_params().num_scalars()
    }

    /// Mutable access to a parameter by checkpoint name.
    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        if name == POS_TABLE {
            return self.positions.get_mut(name);
        }
        if name.starts_with("decoder.") {
            return self.decoder.params.get_mut(name);
        }
        self.fusion.params.get_mut(name)
    }

    pub fn zero_grads(&mut self) {
        self.fusion.params.zero_grads();
        self.decoder.params.zero_grads();
        self.positions.zero_grads();
    }

    /// Visual tokens of `image` as they enter the fusion module.
    fn visual_input(&self, g: &mut Graph, enc: &FrozenEncoder, cache: &FeatureCache, image: ImageRef<'_>) -> Result<(Var, PatchGrid)> {
        if self.cfg.variant.use_fourier() {
            let tokens = cache.visual(image.id, || Ok(enc.encode_image(image, &self.cfg.fourier)?.tokens))?;
            let grid = enc.grid_for(image)?;
            return Ok((g.constant(tokens), grid));
        }
        let patches = cache.visual(image.id, || {
            let mut tmp = Graph::new();
            let (x, _) = enc.patch_embeddings(&mut tmp, image)?;
            Ok(tmp.value(x).clone())
        })?;
        let grid = enc.grid_for(image)?;
        let table = g.param(&self.positions, POS_TABLE)?;
        let x = g.constant(patches);
        if g.shape(table) != g.shape(x) {
            return Err(Error::ShapeMismatch(format!(
                "learned position table {:?} cannot serve a {}x{} patch grid",
                g.shape(table),
                grid.h,
                grid.w
            )));
        }
        let x = g.add(x, table)?;
        Ok((enc.visual_layers(g, x)?, grid))
    }

    /// Builds the forward pass for one image scored against `categories`.
    pub fn forward(
        &self,
        g: &mut Graph,
        enc: &FrozenEncoder,
        cache: &FeatureCache,
        image: ImageRef<'_>,
        categories: &[String],
    ) -> Result<ForwardOutput> {
        let (visual, grid) = self.visual_input(g, enc, cache, image)?;
        let text = g.constant(cache.text(enc, categories)?);
        let fused = self.fusion.forward(g, visual, text, self.cfg.variant.use_fusion())?;
        let text = if self.cfg.decoder.use_fused_text || !self.cfg.variant.use_fusion() {
            fused.text
        } else {
            self.fusion.align(g, visual, text)?.1
        };
        let feat = self.decoder.decode(g, fused.visual, &grid)?;
        let logits = similarity_logits(g, feat, text)?;
        Ok(ForwardOutput { logits, grid })
    }

    /// Logits as plain values.
    pub fn logits(&self, enc: &FrozenEncoder, cache: &FeatureCache, image: ImageRef<'_>, categories: &[String]) -> Result<Tensor> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, enc, cache, image, categories)?;
        Ok(g.value(out.logits).clone())
    }

    /// Replaces parameters with `store`, which must match names and shapes.
    pub fn load_params(&mut self, store: &ParamStore) -> Result<()> {
        let mine = self.all_params();
        let theirs: BTreeSet<&str> = store.names().collect();
        let ours: BTreeSet<&str> = mine.names().collect();
        if theirs != ours {
            let extra: Vec<_> = theirs.difference(&ours).collect();
            let missing: Vec<_> = ours.difference(&theirs).collect();
            return Err(Error::ConfigMismatch(format!("checkpoint parameters differ: extra {extra:?}, missing {missing:?}")));
        }
        for (name, t) in store.iter() {
            let slot = self.param_mut(name).expect("name checked above");
            if slot.shape() != t.shape() {
                return Err(Error::ConfigMismatch(format!(
                    "{name}: checkpoint shape {:?}, model shape {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            let rg = slot.requires_grad();
            *slot = t.clone();
            slot.set_requires_grad(rg);
        }
        Ok(())
    }
}

/// Writes every parameter plus the config snapshot into `dir`.
pub fn save_checkpoint(model: &Model, dir: &Path) -> Result<()> {
    save_archive(&model.all_params(), dir)?;
    write_atomic(&dir.join(CONFIG_FILE), model.cfg.to_text().as_bytes())
}

/// Rebuilds the model described by the checkpoint's own config.
pub fn load_checkpoint(dir: &Path) -> Result<Model> {
    let path = dir.join(CONFIG_FILE);
    if !path.exists() {
        return Err(Error::ManifestMissing(path));
    }
    let cfg = ExperimentConfig::load(&path)?;
    load_checkpoint_as(dir, &cfg)
}

/// Loads the checkpoint's parameters into a model built from `cfg`;
/// incompatible shapes give `ConfigMismatch`.
pub fn load_checkpoint_as(dir: &Path, cfg: &ExperimentConfig) -> Result<Model> {
    let store = load_archive(dir)?;
    let mut model = Model::new(cfg)?;
    model.load_params(&store)?;
    Ok(model)
}
