//! Multi-step quantization-compensation search for discrete token sequences
//! that minimize a differentiable adversarial loss.
//!
//! Token sequences are relaxed to probability vectors parameterized by
//! logits ([`relaxation`]), scored by a composite margin/fluency/similarity
//! loss against a classifier and a reference model ([`loss`], [`models`]), and
//! quantized one position at a time while the remaining positions are
//! re-optimized to compensate ([`attack`]). A one-shot baseline and a
//! zeroth-order (loss-queries-only) variant are included, together with the
//! experiment harness used by the `mango` CLI ([`harness`]).

pub mod attack;
pub mod error;
pub mod harness;
pub mod loss;
pub mod models;
pub mod optimizers;
pub mod relaxation;

pub use error::{Error, Result};
