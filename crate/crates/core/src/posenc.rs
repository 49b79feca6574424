//! Parameter-free Fourier positional embeddings for patch grids.
//!
//! Grid coordinates are mapped to cell centres in `(-1, 1)` per axis. Band
//! `k` contributes `[sin(pi f_k u_x), cos(pi f_k u_x), sin(pi f_k u_y),
//! cos(pi f_k u_y)]`; slots past `4 * num_bands` are zero.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tensor, TokenSequence};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FourierConfig {
    pub num_bands: usize,
    pub max_resolution: usize,
    pub d: usize,
}

impl FourierConfig {
    pub fn new(num_bands: usize, max_resolution: usize, d: usize) -> Result<Self> {
        let cfg = Self { num_bands, max_resolution, d };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_dim(d: usize) -> Self {
        Self { num_bands: 8, max_resolution: 64, d }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_bands == 0 || self.max_resolution == 0 || self.d == 0 {
            return Err(Error::ConfigMismatch("fourier sizes must be positive".into()));
        }
        if 4 * self.num_bands > self.d {
            return Err(Error::ConfigMismatch(format!(
                "4 x {} bands do not fit in d = {}",
                self.num_bands, self.d
            )));
        }
        Ok(())
    }

    /// Geometric ladder ending at one full period across the grid:
    /// `f_k = 2^(k - num_bands + 1)`.
    pub fn frequencies(&self) -> Vec<f64> {
        (0..self.num_bands).map(|k| 2f64.powi(k as i32 - self.num_bands as i32 + 1)).collect()
    }
}

/// Patch layout of an image: `h x w` patches of side `p`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchGrid {
    pub h: usize,
    pub w: usize,
    pub p: usize,
}

impl PatchGrid {
    pub fn for_image(height: usize, width: usize, p: usize) -> Result<Self> {
        if p == 0 {
            return Err(Error::IndivisibleResolution { side: height, patch: p });
        }
        for side in [height, width] {
            if side == 0 || side % p != 0 {
                return Err(Error::IndivisibleResolution { side, patch: p });
            }
        }
        Ok(Self { h: height / p, w: width / p, p })
    }

    pub fn tokens(&self) -> usize {
        self.h * self.w
    }

    pub fn image_height(&self) -> usize {
        self.h * self.p
    }

    pub fn image_width(&self) -> usize {
        self.w * self.p
    }
}

fn cell_center(i: usize, n: usize) -> f64 {
    (2 * i + 1) as f64 / n as f64 - 1.0
}

/// Embedding of normalized coordinates `(u_x, u_y)`; no grid bounds check.
pub fn fourier_features(u_x: f64, u_y: f64, cfg: &FourierConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut out = vec![0.0; cfg.d];
    for (k, f) in cfg.frequencies().into_iter().enumerate() {
        let (sx, cx) = (PI * f * u_x).sin_cos();
        let (sy, cy) = (PI * f * u_y).sin_cos();
        out[4 * k..4 * k + 4].copy_from_slice(&[sx, cx, sy, cy]);
    }
    Ok(out)
}

/// Embedding of patch `(x, y)` (column, row) on `grid`.
pub fn fourier_embed(x: usize, y: usize, grid: &PatchGrid, cfg: &FourierConfig) -> Result<Vec<f64>> {
    if x >= grid.w || y >= grid.h {
        return Err(Error::OutOfGrid { x, y, w: grid.w, h: grid.h });
    }
    if grid.w > cfg.max_resolution || grid.h > cfg.max_resolution {
        return Err(Error::ConfigMismatch(format!(
            "{}x{} grid exceeds max_resolution {}",
            grid.h, grid.w, cfg.max_resolution
        )));
    }
    fourier_features(cell_center(x, grid.w), cell_center(y, grid.h), cfg)
}

/// The whole `[h*w, d]` positional field in row-major grid order.
pub fn fourier_field(grid: &PatchGrid, cfg: &FourierConfig) -> Result<Tensor> {
    let mut data = Vec::with_capacity(grid.tokens() * cfg.d);
    for y in 0..grid.h {
        for x in 0..grid.w {
            data.extend(fourier_embed(x, y, grid, cfg)?);
        }
    }
    Tensor::new(&[grid.tokens(), cfg.d], data)
}

/// `X_i = x_i + f_emb(x, y)` for every patch embedding.
pub fn apply_positional(patches: &TokenSequence, grid: &PatchGrid, cfg: &FourierConfig) -> Result<TokenSequence> {
    if patches.rank() != 2 || patches.rows() != grid.tokens() || patches.cols() != cfg.d {
        return Err(Error::ShapeMismatch(format!(
            "{:?} patch embeddings for a {}x{} grid of width {}",
            patches.shape(),
            grid.h,
            grid.w,
            cfg.d
        )));
    }
    let field = fourier_field(grid, cfg)?;
    let data = patches.data().iter().zip(field.data()).map(|(a, b)| a + b).collect();
    Tensor::new(patches.shape(), data)
}

/// Memoizes positional fields per grid size. Fields are pure functions of
/// `(grid, cfg)`, so sharing them is unobservable.
#[derive(Clone, Debug, Default)]
pub struct FieldCache {
    fields: Arc<RwLock<HashMap<(usize, usize), Arc<Tensor>>>>,
}

impl FieldCache {
    pub fn get(&self, grid: &PatchGrid, cfg: &FourierConfig) -> Result<Arc<Tensor>> {
        let key = (grid.h, grid.w);
        if let Some(t) = self.fields.read().expect("cache lock").get(&key) {
            if t.cols() == cfg.d {
                return Ok(t.clone());
            }
        }
        let t = Arc::new(fourier_field(grid, cfg)?);
        self.fields.write().expect("cache lock").insert(key, t.clone());
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_center_has_zero_sines_and_unit_cosines() {
        let cfg = FourierConfig::with_dim(40);
        let grid = PatchGrid { h: 5, w: 5, p: 1 };
        let e = fourier_embed(2, 2, &grid, &cfg).unwrap();
        for k in 0..cfg.num_bands {
            assert_eq!(e[4 * k], 0.0);
            assert_eq!(e[4 * k + 1], 1.0);
            assert_eq!(e[4 * k + 2], 0.0);
            assert_eq!(e[4 * k + 3], 1.0);
        }
        assert!(e[32..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_band_at_edge_coordinate() {
        let cfg = FourierConfig::new(1, 8, 4).unwrap();
        assert_eq!(cfg.frequencies(), vec![1.0]);
        let e = fourier_features(1.0, 0.0, &cfg).unwrap();
        assert!(e[0].abs() < 1e-15);
        assert_eq!(e[1], -1.0);
    }

    #[test]
    fn errors() {
        let cfg = FourierConfig::with_dim(32);
        let grid = PatchGrid { h: 2, w: 3, p: 1 };
        assert!(matches!(fourier_embed(3, 0, &grid, &cfg), Err(Error::OutOfGrid { .. })));
        assert!(matches!(FourierConfig::new(9, 8, 32), Err(Error::ConfigMismatch(_))));
        let five = Tensor::zeros(&[5, 32]);
        assert!(matches!(apply_positional(&five, &grid, &cfg), Err(Error::ShapeMismatch(_))));
        assert!(PatchGrid::for_image(5, 4, 2).is_err());
    }

    #[test]
    fn frequencies_strictly_increase() {
        let f = FourierConfig::with_dim(32).frequencies();
        assert!(f.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn cache_returns_the_computed_field() {
        let cfg = FourierConfig::with_dim(32);
        let grid = PatchGrid { h: 3, w: 4, p: 2 };
        let cache = FieldCache::default();
        let a = cache.get(&grid, &cfg).unwrap();
        assert_eq!(*a, fourier_field(&grid, &cfg).unwrap());
        assert!(Arc::ptr_eq(&a, &cache.get(&grid, &cfg).unwrap()));
    }
}
