//! Multi-modal face anti-spoofing with test-time domain adaptation.
//!
//! The pipeline, bottom-up:
//!
//! - [`numerics`]: tensors, a reverse-mode tape, Adam, dropout.
//! - [`synthdata`]: multi-domain, multi-modal synthetic datasets with
//!   controllable domain shift and missing-modality masks.
//! - [`model`]: per-modality extractors and classifiers, source training.
//! - [`crossmodal`]: feature adapters, their cosine regularization, and
//!   indicator-gated fusion of original and transformed features.
//! - [`pseudolabel`]: dropout-variance certainty weights and refined scores.
//! - [`adaptation`]: stability-weighted test-time adaptation.
//! - [`metrics`]: AUC, HTER and Youden thresholds.
//! - [`experiment`]: configuration and end-to-end runs used by the CLI.

pub mod adaptation;
pub mod crossmodal;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod parallel;
pub mod pseudolabel;
pub mod synthdata;

pub use error::{Error, Result};
