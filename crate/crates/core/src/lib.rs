//! Core algorithms for a desk-scale study of speech-recognizer
//! personalization: a small RNN-T model, transducer loss and decoding,
//! training recipes with layer freezing, checkpoint serialization, a
//! synthetic utterance corpus, and WER / task-success evaluation.

pub mod checkpoints;
pub mod error;
pub mod evaluation;
pub mod grad;
pub mod grammar;
pub mod model;
pub mod numerics;
pub mod synthcorpus;
pub mod training;
pub mod transducer;

pub use error::{Error, Result};
