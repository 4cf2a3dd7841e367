//! Computational model of the language familiarity effect in speaker
//! discrimination.
//!
//! For each language an unsupervised i-vector model (diagonal GMM-UBM plus
//! a total-variability subspace) is trained on that language alone. Test
//! utterances of every language are then embedded with every model and a
//! machine ABX task measures how well speakers are told apart. The LFE
//! score of a language pair is the relative increase of the ABX error when
//! the model was trained on the other language:
//!
//! ```text
//! features -> ubm -> tvspace -> abx -> stats -> report
//! ```
//!
//! [`pipeline`] runs the whole chain from an [`pipeline::ExperimentConfig`]
//! with content-addressed caching, [`report`] renders its tables and
//! figures, and [`synth`] builds audio-free synthetic
//! experiments for testing and demonstration.

pub mod abx;
pub mod codec;
pub mod corpus;
pub mod error;
pub mod features;
mod par;
pub mod pipeline;
pub mod report;
pub mod stats;
pub mod synth;
pub mod tvspace;
pub mod ubm;

pub use error::{Error, Result};
