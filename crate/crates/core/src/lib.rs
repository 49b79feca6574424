//! Open-vocabulary semantic segmentation on CPU.
//!
//! Frozen visual and text encoders produce patch tokens and category
//! embeddings; Fourier positional features are added to the visual tokens,
//! a small transformer fuses both modalities, a convolutional decoder
//! upsamples back to pixels and a cosine-similarity head scores every pixel
//! against every category name.

pub mod autodiff;
pub mod data;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod io;
pub mod kernels;
pub mod nn;
pub mod params;
pub mod posenc;
pub mod seghead;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
