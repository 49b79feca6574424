//! Experiment configuration and its `key=value` text form.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::synthetic::SyntheticConfig;
use crate::encoders::StubConfig;
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::posenc::FourierConfig;
use crate::seghead::DecoderConfig;

/// Which components an ablation run keeps. The decoder is always on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AblationVariant {
    /// Learned position table, no fusion layers.
    BL0,
    /// Fourier positions, no fusion layers.
    BL1,
    /// Fourier positions and fusion layers.
    BL2,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 3] = [AblationVariant::BL0, AblationVariant::BL1, AblationVariant::BL2];

    pub fn use_fourier(self) -> bool {
        self != AblationVariant::BL0
    }

    pub fn use_fusion(self) -> bool {
        self == AblationVariant::BL2
    }

    pub fn use_decoder(self) -> bool {
        true
    }

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::BL0 => "B_L_0",
            AblationVariant::BL1 => "B_L_1",
            AblationVariant::BL2 => "B_L_2",
        }
    }
}

impl fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "B_L_0" | "BL0" => Ok(AblationVariant::BL0),
            "B_L_1" | "BL1" => Ok(AblationVariant::BL1),
            "B_L_2" | "BL2" => Ok(AblationVariant::BL2),
            _ => Err(Error::BadConfig(format!("unknown ablation variant {s:?} (B_L_0, B_L_1 or B_L_2)"))),
        }
    }
}

/// Which categories each image is scored against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QueryMode {
    /// Only the categories present in the image (its `U`).
    Observed,
    /// Every category of the current split (train or test).
    Fold,
}

impl FromStr for QueryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "observed" => Ok(QueryMode::Observed),
            "fold" => Ok(QueryMode::Fold),
            _ => Err(Error::BadConfig(format!("query mode {s:?} must be observed or fold"))),
        }
    }
}

impl fmt::Display for QueryMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QueryMode::Observed => "observed",
            QueryMode::Fold => "fold",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub train_images: usize,
    pub test_images: usize,
    pub universe_size: usize,
    pub shapes_per_image: usize,
    pub background_noise: f64,
    pub object_noise: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_images: 200,
            test_images: 50,
            universe_size: 20,
            shapes_per_image: 2,
            background_noise: 0.08,
            object_noise: 0.03,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub d_visual: usize,
    pub d_text: usize,
    pub layers: usize,
    pub heads: usize,
    pub tied_qk: bool,
    /// Seed of the frozen stub weights; independent of the training seed.
    pub seed: u64,
    /// Manifest of exported features; replaces the stub when set.
    pub precomputed: Option<PathBuf>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { d_visual: 64, d_text: 64, layers: 2, heads: 4, tied_qk: true, seed: 0, precomputed: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub encoder: EncoderConfig,
    pub fourier: FourierConfig,
    pub fusion: FusionConfig,
    pub decoder: DecoderConfig,
    pub optimizer: OptimizerConfig,
    pub data: DataConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub fold_index: usize,
    pub variant: AblationVariant,
    pub query: QueryMode,
    /// Fit one shared threshold on the training images after training.
    pub calibrate: bool,
    /// Initial scale of the learned position table (B_L_0).
    pub pos_table_std: f64,
    pub ablation_seeds: Vec<u64>,
    pub ablation_folds: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let patch = 8;
        let fusion = FusionConfig::default();
        let decoder = DecoderConfig::for_patch(patch, fusion.d_fuse).expect("8 is a power of two");
        let encoder = EncoderConfig::default();
        Self {
            seed: 0,
            height: 32,
            width: 32,
            patch,
            fourier: FourierConfig::with_dim(encoder.d_visual),
            encoder,
            fusion,
            decoder,
            optimizer: OptimizerConfig::default(),
            data: DataConfig::default(),
            epochs: 20,
            batch_size: 4,
            fold_index: 0,
            variant: AblationVariant::BL2,
            query: QueryMode::Observed,
            calibrate: false,
            pos_table_std: 0.02,
            ablation_seeds: vec![0, 1, 2],
            ablation_folds: vec![0, 1, 2, 3],
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim().parse().map_err(|_| Error::BadConfig(format!("bad value {v:?} for {key}")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').filter(|s| !s.trim().is_empty()).map(|s| parse(key, s)).collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Parses `key=value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut channels_set = false;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::BadConfig(format!("line {}: expected key=value, got {raw:?}", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k == "decoder.channels" {
                channels_set = true;
            }
            cfg.set(k, v)?;
        }
        if !channels_set {
            let keep = (cfg.decoder.tau, cfg.decoder.default_threshold, cfg.decoder.use_fused_text);
            let thresholds = std::mem::take(&mut cfg.decoder.thresholds);
            cfg.decoder = DecoderConfig::for_patch(cfg.patch, cfg.fusion.d_fuse)?;
            (cfg.decoder.tau, cfg.decoder.default_threshold, cfg.decoder.use_fused_text) = keep;
            cfg.decoder.thresholds = thresholds;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Sets one dotted key. Does not re-validate.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, v)?,
            "height" | "data.height" => self.height = parse(key, v)?,
            "width" | "data.width" => self.width = parse(key, v)?,
            "patch" | "encoder.patch" => self.patch = parse(key, v)?,
            "encoder.d_visual" => {
                self.encoder.d_visual = parse(key, v)?;
                self.fourier.d = self.encoder.d_visual;
            }
            "encoder.d_text" => self.encoder.d_text = parse(key, v)?,
            "encoder.layers" => self.encoder.layers = parse(key, v)?,
            "encoder.heads" => self.encoder.heads = parse(key, v)?,
            "encoder.seed" => self.encoder.seed = parse(key, v)?,
            "encoder.tied_qk" => self.encoder.tied_qk = parse(key, v)?,
            "encoder.precomputed" => self.encoder.precomputed = (!v.is_empty()).then(|| PathBuf::from(v)),
            "fourier.num_bands" => self.fourier.num_bands = parse(key, v)?,
            "fourier.max_resolution" => self.fourier.max_resolution = parse(key, v)?,
            "fourier.d" => self.fourier.d = parse(key, v)?,
            "fusion.d_fuse" => self.fusion.d_fuse = parse(key, v)?,
            "fusion.num_layers" => self.fusion.num_layers = parse(key, v)?,
            "fusion.num_heads" => self.fusion.num_heads = parse(key, v)?,
            "fusion.mlp_ratio" => self.fusion.mlp_ratio = parse(key, v)?,
            "fusion.out_gain" => self.fusion.out_gain = parse(key, v)?,
            "decoder.channels" => {
                self.decoder.channels = parse_list(key, v)?;
                self.decoder.stages = self.decoder.channels.len();
            }
            "decoder.tau" => self.decoder.tau = parse(key, v)?,
            "decoder.threshold" => self.decoder.default_threshold = parse(key, v)?,
            "decoder.use_fused_text" => self.decoder.use_fused_text = parse(key, v)?,
            k if k.starts_with("decoder.threshold.") => {
                let name = &k["decoder.threshold.".len()..];
                self.decoder.thresholds.insert(name.to_string(), parse(key, v)?);
            }
            "optimizer.learning_rate" => self.optimizer.learning_rate = parse(key, v)?,
            "optimizer.beta1" => self.optimizer.beta1 = parse(key, v)?,
            "optimizer.beta2" => self.optimizer.beta2 = parse(key, v)?,
            "optimizer.eps" => self.optimizer.eps = parse(key, v)?,
            "optimizer.weight_decay" => self.optimizer.weight_decay = parse(key, v)?,
            "data.train_images" => self.data.train_images = parse(key, v)?,
            "data.test_images" => self.data.test_images = parse(key, v)?,
            "data.universe_size" => self.data.universe_size = parse(key, v)?,
            "data.shapes_per_image" => self.data.shapes_per_image = parse(key, v)?,
            "data.background_noise" => self.data.background_noise = parse(key, v)?,
            "data.object_noise" => self.data.object_noise = parse(key, v)?,
            "train.epochs" | "epochs" => self.epochs = parse(key, v)?,
            "train.batch_size" | "batch_size" => self.batch_size = parse(key, v)?,
            "train.query" | "query" => self.query = v.parse()?,
            "train.calibrate" => self.calibrate = parse(key, v)?,
            "train.pos_table_std" => self.pos_table_std = parse(key, v)?,
            "fold_index" | "fold" => self.fold_index = parse(key, v)?,
            "ablation_variant" | "variant" => self.variant = v.parse()?,
            "ablation.seeds" => self.ablation_seeds = parse_list(key, v)?,
            "ablation.folds" => self.ablation_folds = parse_list(key, v)?,
            _ => return Err(Error::BadConfig(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("height", self.height),
            ("width", self.width),
            ("patch", self.patch),
            ("encoder.d_visual", self.encoder.d_visual),
            ("encoder.d_text", self.encoder.d_text),
            ("encoder.heads", self.encoder.heads),
            ("train.epochs", self.epochs),
            ("train.batch_size", self.batch_size),
            ("data.train_images", self.data.train_images),
            ("data.test_images", self.data.test_images),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::BadConfig(format!("{name} must be positive")));
            }
        }
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0 && o.eps > 0.0 && o.weight_decay >= 0.0) {
            return Err(Error::BadConfig("optimizer learning_rate and eps must be positive, weight_decay >= 0".into()));
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            return Err(Error::BadConfig("optimizer betas must lie in [0, 1)".into()));
        }
        if !(self.pos_table_std >= 0.0) {
            return Err(Error::BadConfig("train.pos_table_std must be non-negative".into()));
        }
        if self.height % self.patch != 0 || self.width % self.patch != 0 {
            return Err(Error::BadConfig(format!("{}x{} images do not tile into {}-pixel patches", self.height, self.width, self.patch)));
        }
        if self.fourier.d != self.encoder.d_visual {
            return Err(Error::ConfigMismatch(format!(
                "fourier.d {} must equal encoder.d_visual {}",
                self.fourier.d, self.encoder.d_visual
            )));
        }
        if self.encoder.d_visual % self.encoder.heads != 0 || self.encoder.d_text % self.encoder.heads != 0 {
            return Err(Error::BadConfig("encoder widths must be multiples of encoder.heads".into()));
        }
        self.fourier.validate()?;
        self.fusion.validate()?;
        self.decoder.validate()?;
        if 1usize << self.decoder.stages != self.patch {
            return Err(Error::StageMismatch(format!(
                "{} decoder stages upsample by {}, patch is {}",
                self.decoder.stages,
                1usize << self.decoder.stages,
                self.patch
            )));
        }
        if self.fold_index >= crate::data::folds::NUM_FOLDS || self.ablation_folds.iter().any(|&f| f >= crate::data::folds::NUM_FOLDS) {
            return Err(Error::BadConfig("fold indices must be in 0..4".into()));
        }
        if self.ablation_seeds.is_empty() || self.ablation_folds.is_empty() {
            return Err(Error::BadConfig("ablation needs at least one seed and one fold".into()));
        }
        self.synthetic(true).validate()
    }

    /// Stub encoder settings.
    pub fn stub(&self) -> StubConfig {
        StubConfig {
            d_visual: self.encoder.d_visual,
            d_text: self.encoder.d_text,
            patch: self.patch,
            layers: self.encoder.layers,
            heads: self.encoder.heads,
            tied_qk: self.encoder.tied_qk,
            seed: self.encoder.seed,
        }
    }

    /// Generator settings for the train (`true`) or test split.
    pub fn synthetic(&self, train: bool) -> SyntheticConfig {
        SyntheticConfig {
            num_images: if train { self.data.train_images } else { self.data.test_images },
            height: self.height,
            width: self.width,
            universe_size: self.data.universe_size,
            shapes_per_image: self.data.shapes_per_image,
            allowed: None,
            background_noise: self.data.background_noise,
            object_noise: self.data.object_noise,
            id_prefix: if train { "train".into() } else { "test".into() },
        }
    }

    /// Every key with its current value; parsing the result reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut m: BTreeMap<String, String> = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("seed", self.seed.to_string());
        put("height", self.height.to_string());
        put("width", self.width.to_string());
        put("patch", self.patch.to_string());
        put("encoder.d_visual", self.encoder.d_visual.to_string());
        put("encoder.d_text", self.encoder.d_text.to_string());
        put("encoder.layers", self.encoder.layers.to_string());
        put("encoder.heads", self.encoder.heads.to_string());
        put("encoder.seed", self.encoder.seed.to_string());
        put("encoder.tied_qk", self.encoder.tied_qk.to_string());
        put(
            "encoder.precomputed",
            self.encoder.precomputed.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        );
        put("fourier.num_bands", self.fourier.num_bands.to_string());
        put("fourier.max_resolution", self.fourier.max_resolution.to_string());
        put("fusion.d_fuse", self.fusion.d_fuse.to_string());
        put("fusion.num_layers", self.fusion.num_layers.to_string());
        put("fusion.num_heads", self.fusion.num_heads.to_string());
        put("fusion.mlp_ratio", self.fusion.mlp_ratio.to_string());
        put("fusion.out_gain", self.fusion.out_gain.to_string());
        put("decoder.channels", join(&self.decoder.channels));
        put("decoder.tau", self.decoder.tau.to_string());
        put("decoder.threshold", self.decoder.default_threshold.to_string());
        put("decoder.use_fused_text", self.decoder.use_fused_text.to_string());
        for (name, t) in &self.decoder.thresholds {
            put(&format!("decoder.threshold.{name}"), t.to_string());
        }
        put("optimizer.learning_rate", self.optimizer.learning_rate.to_string());
        put("optimizer.beta1", self.optimizer.beta1.to_string());
        put("optimizer.beta2", self.optimizer.beta2.to_string());
        put("optimizer.eps", self.optimizer.eps.to_string());
        put("optimizer.weight_decay", self.optimizer.weight_decay.to_string());
        put("data.train_images", self.data.train_images.to_string());
        put("data.test_images", self.data.test_images.to_string());
        put("data.universe_size", self.data.universe_size.to_string());
        put("data.shapes_per_image", self.data.shapes_per_image.to_string());
        put("data.background_noise", self.data.background_noise.to_string());
        put("data.object_noise", self.data.object_noise.to_string());
        put("train.epochs", self.epochs.to_string());
        put("train.batch_size", self.batch_size.to_string());
        put("train.query", self.query.to_string());
        put("train.calibrate", self.calibrate.to_string());
        put("train.pos_table_std", self.pos_table_std.to_string());
        put("fold_index", self.fold_index.to_string());
        put("ablation_variant", self.variant.to_string());
        put("ablation.seeds", join(&self.ablation_seeds));
        put("ablation.folds", join(&self.ablation_folds));
        m.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn dotted_keys_override_defaults() {
        let cfg = ExperimentConfig::parse("seed=7\n# comment\nfusion.d_fuse = 32\nvariant=B_L_0\ndecoder.threshold.red solid=0.3\n")
            .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.fusion.d_fuse, 32);
        assert_eq!(cfg.decoder.channels, vec![16, 8, 8]);
        assert_eq!(cfg.variant, AblationVariant::BL0);
        assert_eq!(cfg.decoder.threshold_for("red solid"), 0.3);
        assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn bad_configs_are_rejected() {
        for text in ["nonsense", "what=1", "train.epochs=0", "optimizer.learning_rate=-1", "patch=5", "variant=B_L_9"] {
            let err = ExperimentConfig::parse(text).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{text}: {err}");
        }
        assert!(matches!(ExperimentConfig::parse("decoder.tau=0"), Err(Error::NonPositiveTau(_))));
    }

    #[test]
    fn variant_flags() {
        use AblationVariant::*;
        assert_eq!([BL0, BL1, BL2].map(|v| (v.use_fourier(), v.use_fusion(), v.use_decoder())), [
            (false, false, true),
            (true, false, true),
            (true, true, true)
        ]);
    }
}
