//! Land/water segmentation of aerial imagery followed by per-category
//! neural style transfer and recomposition into an artistic map.

pub mod checksum;
pub mod collage;
pub mod error;
pub mod eurosat;
pub mod mlp;
pub mod nst;
pub mod optim;
pub mod pipeline;
pub mod raster;
pub mod real;
pub mod synth;
pub mod vgg;

pub use error::{Error, Result};
pub use raster::{LabelMap, Raster};
