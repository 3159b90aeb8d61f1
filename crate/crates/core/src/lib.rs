//! Prototype-based, explainable multi-modal classification of bone health.
//!
//! The crate ingests precomputed image embeddings plus eleven clinical
//! features per patient, encodes both modalities, fuses them with a small
//! cross-modal attention block and classifies by weighted k-NN voting over
//! eighteen learned prototypes that are snapped onto real training cases.
//! Every prediction can be turned into an [`explain::ExplanationReport`].
//!
//! Module map:
//!
//! - [`dataset`]: patient records, file formats, WHO labelling, splitting,
//!   standardisation and the synthetic cohort generator.
//! - [`nn`]: dense layers, normalisation, dropout, reverse-mode gradients,
//!   AdamW with a cosine schedule and finite-difference checking.
//! - [`encoders`]: image and tabular encoders, the fusion block and the gate.
//! - [`kmeans`] and [`prototypes`]: prototype banks, initialisation, losses
//!   and projection.
//! - [`model`] and [`training`]: the assembled network, the multi-task
//!   objective, the training loop and checkpoints.
//! - [`explain`] and [`eval`]: inference, reports, metrics and ablations.
//! - [`cli`]: the `pmx` command-line front end.

pub mod cli;
pub mod dataset;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod explain;
pub mod kmeans;
pub mod model;
pub mod nn;
pub mod prototypes;
pub mod rng;
pub mod training;

pub use error::{PmxError, Result};
