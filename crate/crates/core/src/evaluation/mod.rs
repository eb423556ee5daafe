//! Decoding and scoring: beam search, corpus BLEU and the paired sign test.

pub mod beam;
pub mod bleu;
pub mod sign;

pub use beam::{
    beam_decode, beam_search, decode_corpus, DecodeConfig, Hypothesis, ModelScorer, StepScorer,
};
pub use bleu::{corpus_bleu, sentence_bleu, BleuReport, Smoothing};
pub use sign::{sign_test, SignTestResult};
