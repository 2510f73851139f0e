//! Data curation, balanced sampling and reference-case retrieval for
//! whole-slide histopathology images.

pub mod api;
mod binio;

pub mod augment;
pub mod catalog;
pub mod cluster;
pub mod color;
pub mod dump;
pub mod error;
pub mod features;
pub mod image;
pub mod pca;
pub mod pipeline;
pub mod probe;
pub mod retrieval;
pub mod sampler;
pub mod stain;
pub mod synth;

pub use error::{Error, Result};
