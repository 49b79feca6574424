mod common;

use common::*;
use ovseg_core::posenc::{fourier_embed, fourier_field, FourierConfig, PatchGrid};
use ovseg_core::train::{build_encoder, AblationVariant, ExperimentConfig, FeatureCache, Model};
use ovseg_core::encoders::ImageRef;
use ovseg_core::{Error, Tensor};
use proptest::prelude::*;

fn cfg() -> FourierConfig {
    ExperimentConfig::default().fourier
}

#[test]
fn field_is_deterministic() {
    assert!(fourier_determinism(&cfg()));
}

#[test]
fn positions_are_added_exactly() {
    let err = fourier_additivity(&cfg());
    assert!(err <= 1e-12, "additivity error {err:e}");
}

#[test]
fn cells_are_distinct_on_every_grid_up_to_16() {
    let sep = fourier_min_separation(&cfg());
    assert!(sep > 1e-6, "two cells share an embedding (distance {sep:e})");
}

#[test]
fn neighbours_are_more_similar_than_distant_cells() {
    let failures = fourier_smoothness_failures(&cfg());
    assert!(failures.is_empty(), "smoothness fails on {failures:?}");
}

#[test]
fn doubled_grid_evaluates() {
    assert_eq!(fourier_double_grid().unwrap(), [1, 64, 64]);
}

#[test]
fn learned_table_cannot_serve_a_larger_grid() {
    let mut c = ExperimentConfig::default();
    c.variant = AblationVariant::BL0;
    let enc = build_encoder(&c).unwrap();
    let model = Model::new(&c).unwrap();
    let image = Tensor::filled(&[64, 64, 3], 0.5);
    let err = model.logits(&enc, &FeatureCache::default(), ImageRef { id: "big", pixels: &image }, &["red solid".into()]).unwrap_err();
    assert!(matches!(err, Error::ShapeMismatch(_)), "{err}");
}

#[test]
fn out_of_grid_coordinates_are_rejected() {
    let g = PatchGrid { h: 4, w: 4, p: 8 };
    assert!(matches!(fourier_embed(4, 0, &g, &cfg()), Err(Error::OutOfGrid { .. })));
}

proptest! {
    #[test]
    fn embeddings_have_constant_norm(h in 1usize..20, w in 1usize..20) {
        let c = cfg();
        let f = fourier_field(&PatchGrid { h, w, p: 8 }, &c).unwrap();
        for r in 0..f.rows() {
            let n: f64 = f.row(r).iter().map(|x| x * x).sum();
            prop_assert!((n - 2.0 * c.num_bands as f64).abs() < 1e-9);
        }
    }
}
