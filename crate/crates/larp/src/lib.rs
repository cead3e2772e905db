//! Holistic video tokenizer with a co-trained autoregressive prior.
//!
//! The crate bundles a small f64 tensor engine with reverse-mode
//! differentiation, synthetic video data, a stochastic vector quantizer, a
//! query-based encoder/decoder tokenizer, a lightweight AR prior trained
//! jointly with it, a downstream AR token generator with classifier-free
//! guidance, and a latent-space analysis toolkit. Everything runs on CPU in
//! 64-bit floats and is bitwise reproducible from a seed.

pub mod analysis;
pub mod blocks;
pub mod cli;
pub mod ckpt;
pub mod config;
pub mod error;
pub mod generator;
pub mod params;
pub mod prior;
pub mod quant;
pub mod rng;
pub mod tensor;
pub mod tokenizer;
pub mod train;
pub mod video;

pub use error::{Error, Result};
