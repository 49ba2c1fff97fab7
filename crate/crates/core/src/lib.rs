//! Allocation-only core of a BERT-style encoder pretrained jointly on masked
//! language modeling and word-level supertagging.
//!
//! Everything here is pure computation over in-memory data: corpus filters,
//! subword and supertag vocabularies, dynamic whole-word masking, a small
//! reverse-mode autodiff engine, the dual-head encoder, the pretraining and
//! fine-tuning loops, sequence-labeling metrics and a synthetic categorial
//! grammar. File formats, checkpoints and the command line live in the
//! companion `tagbert` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod corpus;
mod error;
pub mod finetune;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod pretrain;
pub mod rng;
pub mod syngen;
pub mod vocab;

pub use error::{Error, Result};
