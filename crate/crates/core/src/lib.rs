//! Toolkit for multi-dataset image segmentation: language-embedding
//! classification, label-space-specific query inference, set matching loss,
//! overlap-aware panoptic fusion, evaluation metrics and mixed label-space
//! benchmark construction.

pub mod benchgen;
pub mod cli;
pub mod error;
pub mod io;
pub mod mask;
pub mod matching;
pub mod metrics;
pub mod postproc;
pub mod semantics;

pub use error::{Error, Result};
