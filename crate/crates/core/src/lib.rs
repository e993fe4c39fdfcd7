//! Speaker-adversarial representation learning for sequence recognition.
//!
//! An encoder maps feature sequences to a subsampled representation that
//! feeds a CTC head, an attention decoder and, through a gradient-reversal
//! node, a speaker classifier. The evaluation side measures how much speaker
//! identity survives in a representation: closed-set classification accuracy
//! and open-set verification EER from an embedding-network attacker.

pub mod adversary;
pub mod asr_eval;
pub mod attention;
pub mod autodiff;
pub mod cli;
pub mod ctc;
pub mod data;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod layers;
pub mod params;
pub mod seed;
pub mod speaker_eval;
pub mod storage;
pub mod trainer;

pub use error::{Error, Result};
