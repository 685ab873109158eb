//! Shallow memory-aware Transformer for generating captions from sets of
//! region feature vectors.
//!
//! The crate is self-contained: a small reverse-mode differentiation engine
//! ([`tensor`]), the attention and encoder-decoder model ([`attention`],
//! [`transformer`]), decoding ([`decoding`]), cross-entropy and
//! self-critical training ([`training`]), caption metrics and object coverage
//! ([`metrics`]), synthetic data and file formats ([`data`]), and the
//! operator CLI ([`cli`]).

pub mod attention;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod decoding;
pub mod error;
pub mod metrics;
pub mod tensor;
pub mod training;
pub mod transformer;

pub use error::{Error, Result};
