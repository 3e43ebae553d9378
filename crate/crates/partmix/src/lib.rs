//! Part-descriptor mixing for cross-modality person retrieval.
//!
//! This crate trains a small part-based encoder on a synthetic two-modality
//! person dataset and regularizes it by mixing part descriptors across
//! images and modalities: mixed samples are synthesized as positives and
//! negatives, filtered by an entropy-based mining step, and fed to a
//! contrastive objective alongside the usual identity losses. Everything is
//! 64-bit, hand-differentiated, and verified against finite differences and
//! brute-force oracles.
//!
//! The narrative guide lives in `book/`; its code snippets are compiled as
//! doc-tests through the `partmix-book` crate.

pub mod augment;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod harness;
pub mod losses;
pub mod mining;
pub mod numerics;
pub mod rng;

pub use error::{Error, Result};
