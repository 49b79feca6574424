//! Procedural segmentation data.
//!
//! A category is a colour paired with a texture ("red checkered"). Shapes
//! (rectangles or ellipses of random size and placement) are filled with
//! their category's texture and composited over a grey noise background,
//! later shapes occluding earlier ones. Masks are exact by construction.
//!
//! Category `j` of the universe sits in block `i = j / 5` at slot
//! `k = j % 5`; it gets colour `k + 5 * (i / 4)` and texture `(k + i) % 4`.
//! Each block of five therefore shows five colours and rotates textures,
//! so every colour word and texture word of a held-out block also occurs in
//! the other blocks.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::sample::{one_hot_mask, Dataset, SegmentationSample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const COLORS: [(&str, [f64; 3]); 10] = [
    ("red", [0.90, 0.15, 0.15]),
    ("green", [0.15, 0.80, 0.20]),
    ("blue", [0.15, 0.25, 0.90]),
    ("yellow", [0.90, 0.85, 0.10]),
    ("magenta", [0.85, 0.20, 0.80]),
    ("orange", [0.95, 0.55, 0.10]),
    ("cyan", [0.10, 0.80, 0.85]),
    ("purple", [0.50, 0.20, 0.70]),
    ("lime", [0.60, 0.95, 0.20]),
    ("pink", [0.95, 0.60, 0.70]),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Texture {
    Solid,
    HStriped,
    VStriped,
    Checkered,
}

impl Texture {
    pub const ALL: [Texture; 4] = [Texture::Solid, Texture::HStriped, Texture::VStriped, Texture::Checkered];

    pub fn name(self) -> &'static str {
        match self {
            Texture::Solid => "solid",
            Texture::HStriped => "hstriped",
            Texture::VStriped => "vstriped",
            Texture::Checkered => "checkered",
        }
    }

    /// Intensity multiplier at `(x, y)` with a per-shape phase.
    fn intensity(self, x: usize, y: usize, phase: (usize, usize)) -> f64 {
        let on = |v: usize| (v / 2) % 2 == 0;
        let bright = match self {
            Texture::Solid => true,
            Texture::HStriped => on(y + phase.1),
            Texture::VStriped => on(x + phase.0),
            Texture::Checkered => on(x + phase.0) == on(y + phase.1),
        };
        if bright {
            1.0
        } else {
            DARK
        }
    }
}

const DARK: f64 = 0.3;
pub const MAX_UNIVERSE: usize = 40;

/// Colour and texture of universe entry `j`.
pub fn category_style(j: usize) -> Result<([f64; 3], Texture)> {
    if j >= MAX_UNIVERSE {
        return Err(Error::BadConfig(format!("synthetic universe supports at most {MAX_UNIVERSE} categories")));
    }
    let (i, k) = (j / 5, j % 5);
    Ok((COLORS[k + 5 * (i / 4)].1, Texture::ALL[(k + i) % 4]))
}

pub fn category_name(j: usize) -> Result<String> {
    category_style(j)?;
    let (i, k) = (j / 5, j % 5);
    Ok(format!("{} {}", COLORS[k + 5 * (i / 4)].0, Texture::ALL[(k + i) % 4].name()))
}

pub fn synthetic_universe(size: usize) -> Result<Vec<String>> {
    (0..size).map(category_name).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub num_images: usize,
    pub height: usize,
    pub width: usize,
    pub universe_size: usize,
    pub shapes_per_image: usize,
    /// Universe indices shapes may be drawn from; all when `None`.
    pub allowed: Option<Vec<usize>>,
    pub background_noise: f64,
    pub object_noise: f64,
    /// Prefix for sample ids.
    pub id_prefix: String,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_images: 200,
            height: 32,
            width: 32,
            universe_size: 20,
            shapes_per_image: 2,
            allowed: None,
            background_noise: 0.08,
            object_noise: 0.03,
            id_prefix: "img".into(),
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_images == 0 || self.height < 4 || self.width < 4 || self.shapes_per_image == 0 {
            return Err(Error::BadConfig("synthetic sizes must be positive (images at least 4x4)".into()));
        }
        if self.universe_size == 0 || self.universe_size > MAX_UNIVERSE {
            return Err(Error::BadConfig(format!("universe_size must be in 1..={MAX_UNIVERSE}")));
        }
        if let Some(a) = &self.allowed {
            if a.is_empty() || a.iter().any(|&j| j >= self.universe_size) {
                return Err(Error::BadConfig("allowed categories must be non-empty universe indices".into()));
            }
        }
        if !(self.background_noise >= 0.0 && self.object_noise >= 0.0) {
            return Err(Error::BadConfig("noise levels must be non-negative".into()));
        }
        Ok(())
    }
}

fn draw_shape(rng: &mut ChaCha8Rng, h: usize, w: usize) -> impl Fn(usize, usize) -> bool {
    let ellipse = rng.gen_bool(0.5);
    let ry = rng.gen_range(h as f64 / 6.0..h as f64 / 3.0);
    let rx = rng.gen_range(w as f64 / 6.0..w as f64 / 3.0);
    let cy = rng.gen_range(ry * 0.5..h as f64 - ry * 0.5);
    let cx = rng.gen_range(rx * 0.5..w as f64 - rx * 0.5);
    move |x, y| {
        let dx = (x as f64 + 0.5 - cx) / rx;
        let dy = (y as f64 + 0.5 - cy) / ry;
        if ellipse {
            dx * dx + dy * dy <= 1.0
        } else {
            dx.abs() <= 1.0 && dy.abs() <= 1.0
        }
    }
}

/// Deterministic dataset for `(seed, cfg)`.
pub fn gen_synthetic(seed: u64, cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let universe = synthetic_universe(cfg.universe_size)?;
    let allowed: Vec<usize> = cfg.allowed.clone().unwrap_or_else(|| (0..cfg.universe_size).collect());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bg = Normal::new(0.0, cfg.background_noise.max(f64::MIN_POSITIVE)).expect("finite std");
    let obj = Normal::new(0.0, cfg.object_noise.max(f64::MIN_POSITIVE)).expect("finite std");
    let (h, w) = (cfg.height, cfg.width);
    let mut samples = Vec::with_capacity(cfg.num_images);
    for n in 0..cfg.num_images {
        let mut pixels: Vec<f64> = (0..h * w * 3).map(|_| 0.5 + bg.sample(&mut rng)).collect();
        // universe index owning each pixel, if any
        let mut owner: Vec<Option<usize>> = vec![None; h * w];
        for _ in 0..cfg.shapes_per_image {
            let cat = *allowed.choose(&mut rng).expect("allowed is non-empty");
            let (color, texture) = category_style(cat)?;
            let inside = draw_shape(&mut rng, h, w);
            let phase = (rng.gen_range(0..4), rng.gen_range(0..4));
            for y in 0..h {
                for x in 0..w {
                    if !inside(x, y) {
                        continue;
                    }
                    let k = texture.intensity(x, y, phase);
                    for c in 0..3 {
                        pixels[(y * w + x) * 3 + c] = color[c] * k + obj.sample(&mut rng);
                    }
                    owner[y * w + x] = Some(cat);
                }
            }
        }
        let mut present: Vec<usize> = owner.iter().flatten().copied().collect();
        present.sort_unstable();
        present.dedup();
        let categories: Vec<String> = present.iter().map(|&j| universe[j].clone()).collect();
        let labels: Vec<f64> = owner
            .iter()
            .map(|o| o.map_or(0.0, |j| (present.binary_search(&j).expect("present") + 1) as f64))
            .collect();
        let mask = one_hot_mask(&Tensor::new(&[h, w], labels)?, &categories)?;
        samples.push(SegmentationSample {
            id: format!("{}_{n:05}", cfg.id_prefix),
            image: Tensor::new(&[h, w, 3], pixels)?,
            mask,
            categories,
        });
    }
    Ok(Dataset { universe, samples })
}
