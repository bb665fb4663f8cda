//! Universal-approximation constructions for single-layer attention whose
//! context tokens come from a finite vocabulary plus absolute positional
//! encodings.

pub mod construction;
pub mod embedding;
pub mod error;
pub mod fnn;
pub mod grid;
pub mod kronecker;
pub mod linalg;
pub mod nonuap;
pub mod random;
pub mod transformer;
pub mod vocab_pe;

pub use error::{Error, Result};
