//! Bilingual dual-encoder image-text pre-training at desk scale.
//!
//! The pipeline runs in two phases: masked-autoencoder pre-training of the
//! vision transformer ([`mae`]), then contrastive fine-tuning of the image and
//! text encoders with multi-crop views ([`train`]). [`eval`] and [`analogy`]
//! consume the trained encoders.

pub mod analogy;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod mae;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod raster;
pub mod tokenizer;
pub mod toy;
pub mod train;

pub use error::{Error, ErrorKind, Result};
pub use ndarray;
