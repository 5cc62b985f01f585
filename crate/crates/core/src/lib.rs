//! Consultation-outcome prediction from a multi-view temporal knowledge
//! network fused with dialogue embeddings.

pub mod attr;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod dialogue;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub mod kg;
pub mod linalg;
pub mod predictor;
pub mod synthgen;
pub mod temporal;

pub use error::{Error, Result};
