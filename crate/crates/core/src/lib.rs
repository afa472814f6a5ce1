//! Decoding-strategy benchmark core for synthetic dysarthric speech.
//!
//! Builds severity-controlled synthetic corpora, trains four decoding
//! architectures over a shared acoustic encoder (CTC, attention seq2seq, and
//! two LM-coupled decoders), and scores hypotheses with alignment-based
//! WER/CER.

pub mod asr;
pub mod bridge;
pub mod corpus;
pub mod ctc;
pub mod encoder;
pub mod error;
pub mod lm;
pub mod metrics;
pub mod nn;
pub mod oracle;
pub mod rng;
pub mod search;
pub mod seq2seq;
pub mod stacks;
pub mod tensor;

pub use error::{Error, Result};
