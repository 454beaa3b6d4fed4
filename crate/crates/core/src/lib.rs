//! Multi-bit watermarking of token sequences with a learned
//! encoder/extractor pair.
//!
//! The pipeline: a sequence-to-sequence network turns a (masked) token
//! sequence plus a binary signature into a distribution over the vocabulary
//! per position; a Gumbel-Softmax reparameterization sharpens that
//! distribution while staying differentiable; a transformer extractor
//! recovers the signature from the (possibly transformed) distribution or
//! from finished text. Insertion decodes the distribution into coherent
//! text with a noise-perturbed beam search scored by extraction accuracy,
//! and verification turns recovered bits into a binomial z-score.

pub mod attacks;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod insertion;
pub mod nn;
pub mod rng;
pub mod stats;
pub mod tensor;
pub mod training;
pub mod verification;
pub mod wm_model;
pub mod word_vectors;

pub use error::Error;
pub type Result<T> = std::result::Result<T, Error>;
