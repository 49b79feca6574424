use std::collections::HashSet;

use crate::data::metrics::LabelMap;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One training or evaluation example: image `X [H,W,3]`, one-hot mask
/// `Y [H,W,|U|]` and the observed categories `U`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationSample {
    pub id: String,
    pub image: Tensor,
    pub mask: Tensor,
    pub categories: Vec<String>,
}

impl SegmentationSample {
    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }

    /// Checks the one-hot and subset invariants against `universe`.
    pub fn validate(&self, universe: &[String]) -> Result<()> {
        let (h, w) = match self.image.shape() {
            [h, w, 3] => (*h, *w),
            s => return Err(Error::ShapeMismatch(format!("image must be [H,W,3], got {s:?}"))),
        };
        if self.mask.shape() != [h, w, self.categories.len()] {
            return Err(Error::ShapeMismatch(format!(
                "mask {:?} for {h}x{w} image with {} categories",
                self.mask.shape(),
                self.categories.len()
            )));
        }
        let mut seen = HashSet::new();
        for c in &self.categories {
            if !universe.contains(c) {
                return Err(Error::CategoryMismatch(format!("{c:?} not in the category universe")));
            }
            if !seen.insert(c) {
                return Err(Error::DuplicateCategory(c.clone()));
            }
        }
        for px in self.mask.data().chunks_exact(self.categories.len()) {
            if px.iter().any(|&v| v != 0.0 && v != 1.0) || px.iter().sum::<f64>() > 1.0 {
                return Err(Error::ShapeMismatch("mask is not one-hot".into()));
            }
        }
        Ok(())
    }

    /// Channel `c` of the mask as booleans, row-major.
    pub fn channel(&self, c: usize) -> Vec<bool> {
        let k = self.categories.len();
        self.mask.data().iter().skip(c).step_by(k).map(|&v| v == 1.0).collect()
    }

    /// Labels with the given ids per category (`0` for background).
    pub fn label_map(&self, ids: &[u32]) -> LabelMap {
        let k = self.categories.len();
        let labels = self
            .mask
            .data()
            .chunks_exact(k)
            .map(|px| px.iter().position(|&v| v == 1.0).map_or(0, |c| ids[c]))
            .collect();
        LabelMap { height: self.height(), width: self.width(), labels }
    }
}

/// Expands a `[H,W]` map of local labels (`0` background, `k` meaning
/// `categories[k - 1]`) into a `[H,W,|U|]` one-hot stack.
pub fn one_hot_mask(label_map: &Tensor, categories: &[String]) -> Result<Tensor> {
    let (h, w) = match label_map.shape() {
        [h, w] => (*h, *w),
        s => return Err(Error::ShapeMismatch(format!("label map must be [H,W], got {s:?}"))),
    };
    let k = categories.len();
    if k == 0 {
        return Err(Error::ShapeMismatch("one-hot mask needs at least one category".into()));
    }
    let mut out = vec![0.0; h * w * k];
    for (px, &l) in label_map.data().iter().enumerate() {
        if l < 0.0 || l.fract() != 0.0 || l as usize > k {
            return Err(Error::UnknownLabel(l.max(0.0) as usize));
        }
        if l > 0.0 {
            out[px * k + l as usize - 1] = 1.0;
        }
    }
    Tensor::new(&[h, w, k], out)
}

/// Inverse of [`one_hot_mask`]: per-pixel argmax, background where no
/// channel is set.
pub fn labels_from_one_hot(mask: &Tensor) -> Result<Tensor> {
    let (h, w, k) = match mask.shape() {
        [h, w, k] => (*h, *w, *k),
        s => return Err(Error::ShapeMismatch(format!("mask must be [H,W,K], got {s:?}"))),
    };
    let data = mask
        .data()
        .chunks_exact(k)
        .map(|px| {
            let (best, v) = px.iter().enumerate().fold((0, 0.0), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            if v > 0.0 {
                (best + 1) as f64
            } else {
                0.0
            }
        })
        .collect();
    Tensor::new(&[h, w], data)
}

/// A set of samples over a named category universe.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub universe: Vec<String>,
    pub samples: Vec<SegmentationSample>,
}

impl Dataset {
    /// Global label id of a category: universe position + 1.
    pub fn category_id(&self, name: &str) -> Option<u32> {
        self.universe.iter().position(|c| c == name).map(|i| i as u32 + 1)
    }

    pub fn category_name(&self, id: u32) -> Option<&str> {
        id.checked_sub(1).and_then(|i| self.universe.get(i as usize)).map(String::as_str)
    }

    /// Every category appearing in any sample, in universe order.
    pub fn observed_categories(&self) -> Vec<String> {
        let seen: HashSet<&str> = self.samples.iter().flat_map(|s| s.categories.iter().map(String::as_str)).collect();
        self.universe.iter().filter(|c| seen.contains(c.as_str())).cloned().collect()
    }

    /// Ground-truth label map with global ids.
    pub fn label_map(&self, sample: &SegmentationSample) -> Result<LabelMap> {
        let ids = sample
            .categories
            .iter()
            .map(|c| self.category_id(c).ok_or_else(|| Error::CategoryMismatch(format!("{c:?} not in universe"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(sample.label_map(&ids))
    }

    pub fn validate(&self) -> Result<()> {
        self.samples.iter().try_for_each(|s| s.validate(&self.universe))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn all_background_is_all_zero() {
        let y = one_hot_mask(&Tensor::zeros(&[2, 3]), &names(3)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_pixel_label() {
        let mut l = Tensor::zeros(&[2, 2]);
        l.data_mut()[3] = 2.0;
        let y = one_hot_mask(&l, &names(3)).unwrap();
        assert_eq!(y.data().iter().filter(|&&v| v == 1.0).count(), 1);
        assert_eq!(y.at(&[1, 1, 1]), 1.0);
        assert_eq!(labels_from_one_hot(&y).unwrap(), l);
    }

    #[test]
    fn unknown_label_is_rejected() {
        let l = Tensor::filled(&[1, 1], 4.0);
        assert!(matches!(one_hot_mask(&l, &names(3)), Err(Error::UnknownLabel(4))));
    }
}
