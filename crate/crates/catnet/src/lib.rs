//! Multimodal EEG-EMG tone decoding in pure Rust.
//!
//! The crate covers the full pipeline: digital preprocessing of continuous
//! recordings into trial tensors ([`sigproc`]), a reverse-mode autodiff
//! engine ([`autodiff`]), the cross-attention tone network itself
//! ([`encoder`], [`fusion`], [`heads`], [`model`]), domain-adversarial
//! training ([`training`]), split construction and metrics ([`evaluation`]),
//! and a bit-exact dataset container plus synthetic data generator
//! ([`dataio`]). The [`cli`] module wires everything into subcommands.
//!
//! Batch-level work (gradient accumulation, batch inference, per-recording
//! preprocessing) is data-parallel via rayon when the default `parallel`
//! feature is enabled; builds with `--no-default-features` fall back to a
//! sequential path that produces bit-identical results.

pub mod autodiff;
pub mod cli;
pub mod dataio;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod heads;
pub mod mat;
pub mod model;
pub mod par;
pub mod sigproc;
pub mod training;

pub use error::{Error, Result};
pub use mat::{Mat, Scalar};
