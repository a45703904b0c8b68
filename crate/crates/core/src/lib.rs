//! Meme-incorporated open-domain dialogue.
//!
//! A decoder-only transformer reads a dialogue of text and meme tokens,
//! generates the next text response, then decides at a `[tag]` token whether
//! to attach a meme and which one, by regressing the meme's feature vector.

pub mod corpus;
pub mod decoding;
pub mod error;
pub mod evalkit;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
