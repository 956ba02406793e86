//! Human-in-the-loop fine-tuning of a land-cover segmentation network.
//!
//! A pretrained encoder-decoder is adapted to a new area from a few hundred
//! point labels by retraining only its last layers over cached trunk
//! features. Point labels come from automatic query strategies (random,
//! entropy, min-margin, mistakes), a simulated random labeler, or an
//! interactive session driven by a person.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub(crate) mod codec;
pub mod error;
pub mod eval;
pub mod finetune;
pub mod harness;
pub mod kv;
pub mod label;
pub mod model;
pub mod nn;
pub mod palette;
pub mod query;
pub mod session;
pub mod synth;

pub use error::{Error, Result};
pub use label::{Extent, LabelPoint};
