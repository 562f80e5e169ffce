//! Desk-scale momentum-contrast pretraining lab for person re-identification.
//!
//! The crate wires a small reverse-mode autodiff core, a toy convolutional
//! encoder with a projection head, a two-view augmentation pipeline with
//! RandomErasing, the momentum-contrast training state machine (InfoNCE loss,
//! EMA key encoder, negative-key queue), a retrieval evaluation engine
//! (mAP / CMC) with a brute-force oracle, dataset curation rules, small-scale
//! and few-shot split samplers, and a deterministic synthetic corpus
//! generator for directional experiments.

pub mod augment;
pub mod autodiff;
pub mod encoder;
pub mod checkpoint;
pub mod curation;
pub mod diagnostics;
pub mod error;
pub mod mococore;
pub mod ppm;
pub mod protocol;
pub mod reideval;
pub mod synthgen;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
