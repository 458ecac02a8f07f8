//! Neural topic models whose topics line up with expert labels and authors.
//!
//! A Dirichlet-VAE encoder maps bag-of-words documents to posterior
//! concentrations; decoders reconstruct words and, optionally, authors. For
//! the aligned variants, each document's prior puts its mass only on topics
//! linked to the document's labels, so training pulls those topics toward the
//! labels. The [`eval`] module scores the result (coherence, diversity,
//! purity, NMI, label accuracy) and [`authors`] reads author interests out of
//! the author decoder.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod align;
pub mod authors;
pub mod cli;
pub mod corpus;
pub mod dirichlet;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod special;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
