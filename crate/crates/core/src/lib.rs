//! Metric-guided dense story retrieval for persona-grounded dialogue.
//!
//! A dense [`retriever::TextEncoder`] picks stories from a corpus, a
//! Fusion-in-Decoder [`generator::Seq2SeqModel`] writes the response, and
//! [`trainer`] distills retrieval preferences from how much each story helps
//! a frozen generator score against the reference.

pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod generator;
pub mod nn;
pub mod optim;
pub mod retriever;
pub mod synthetic;
pub mod textmetrics;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
