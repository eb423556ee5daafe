use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EncodedSource, ModelParams, Transformer};
use crate::subword::{BOS_ID, EOS_ID, PAD_ID};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub length_penalty: f64,
    /// Output cap is `max_len_factor * source_len + 8` tokens.
    pub max_len_factor: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_size: 5,
            length_penalty: 1.0,
            max_len_factor: 1.5,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::Config("beam_size must be at least 1".into()));
        }
        if !self.length_penalty.is_finite() || !(self.max_len_factor >= 0.0) {
            return Err(Error::Config(
                "invalid length_penalty or max_len_factor".into(),
            ));
        }
        Ok(())
    }

    pub fn max_len(&self, source_len: usize) -> usize {
        (self.max_len_factor * source_len as f64).floor() as usize + 8
    }
}

/// Anything that can score the next token given equal-length prefixes.
pub trait StepScorer {
    fn next_log_probs(&self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Output tokens without the closing `</s>`.
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    /// `log_prob / (len + 1)^length_penalty`, the `+1` counting `</s>`.
    pub score: f64,
}

fn normalized(log_prob: f64, len_with_eos: usize, alpha: f64) -> f64 {
    log_prob / (len_with_eos as f64).powf(alpha)
}

/// Length-normalized beam search. At each step the `2k` best extensions are
/// ranked; an `</s>` extension among the first `k` finishes a hypothesis and
/// the best non-`</s>` extensions fill the `k` live slots. Search stops when
/// `k` hypotheses have finished or at `max_len`, where every live hypothesis
/// is closed. Ties go to the lower beam index, then the lower token id.
///
/// Pruning can drop the greedy path, so for `k > 1` the greedy hypothesis is
/// also scored and the better of the two is returned.
pub fn beam_search(
    scorer: &dyn StepScorer,
    cfg: &DecodeConfig,
    max_len: usize,
) -> Result<Hypothesis> {
    cfg.validate()?;
    let best = search(scorer, cfg.beam_size, cfg.length_penalty, max_len)?;
    if cfg.beam_size == 1 {
        return Ok(best);
    }
    let greedy = search(scorer, 1, cfg.length_penalty, max_len)?;
    Ok(better(best, greedy))
}

fn better(a: Hypothesis, b: Hypothesis) -> Hypothesis {
    match b.score.partial_cmp(&a.score) {
        Some(Ordering::Greater) => b,
        Some(Ordering::Equal) if b.tokens < a.tokens => b,
        _ => a,
    }
}

fn search(scorer: &dyn StepScorer, k: usize, alpha: f64, max_len: usize) -> Result<Hypothesis> {
    let mut live: Vec<(Vec<u32>, f64)> = vec![(Vec::new(), 0.0)];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for t in 0..=max_len {
        let prefixes: Vec<Vec<u32>> = live.iter().map(|(p, _)| p.clone()).collect();
        let lps = scorer.next_log_probs(&prefixes)?;
        if t == max_len {
            for ((tokens, lp), row) in live.into_iter().zip(&lps) {
                let log_prob = lp + row[EOS_ID as usize];
                finished.push(Hypothesis {
                    score: normalized(log_prob, tokens.len() + 1, alpha),
                    tokens,
                    log_prob,
                });
            }
            break;
        }
        let mut cands: Vec<(f64, usize, u32)> = Vec::new();
        for (b, ((_, lp), row)) in live.iter().zip(&lps).enumerate() {
            for (v, &x) in row.iter().enumerate() {
                let v = v as u32;
                if v == PAD_ID || v == BOS_ID || !x.is_finite() {
                    continue;
                }
                cands.push((lp + x, b, v));
            }
        }
        cands.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        cands.truncate(2 * k);
        let mut next = Vec::with_capacity(k);
        for (rank, &(log_prob, b, v)) in cands.iter().enumerate() {
            if v == EOS_ID {
                if rank < k {
                    let tokens = live[b].0.clone();
                    finished.push(Hypothesis {
                        score: normalized(log_prob, tokens.len() + 1, alpha),
                        tokens,
                        log_prob,
                    });
                }
            } else if next.len() < k {
                let mut tokens = live[b].0.clone();
                tokens.push(v);
                next.push((tokens, log_prob));
            }
        }
        if finished.len() >= k || next.is_empty() {
            break;
        }
        live = next;
    }
    finished
        .into_iter()
        .reduce(better)
        .ok_or_else(|| Error::Numerical("beam search produced no hypothesis".into()))
}

/// Adapts a trained model and one encoded source to [`StepScorer`].
pub struct ModelScorer<'a> {
    pub model: &'a Transformer,
    pub params: &'a ModelParams,
    pub source: EncodedSource,
}

impl StepScorer for ModelScorer<'_> {
    fn next_log_probs(&self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        self.model
            .next_log_probs(self.params, &self.source, prefixes)
    }
}

/// Translates one id sequence. An empty source yields an empty output.
pub fn beam_decode(
    model: &Transformer,
    params: &ModelParams,
    source: &[u32],
    cfg: &DecodeConfig,
) -> Result<Vec<u32>> {
    if source.is_empty() {
        return Ok(Vec::new());
    }
    let scorer = ModelScorer {
        model,
        params,
        source: model.encode(params, source)?,
    };
    let cap = model.config().max_positions - 1;
    let max_len = cfg.max_len(source.len()).min(cap);
    Ok(beam_search(&scorer, cfg, max_len)?.tokens)
}

/// Decodes every source in parallel; output order follows input order.
pub fn decode_corpus(
    model: &Transformer,
    params: &ModelParams,
    sources: &[Vec<u32>],
    cfg: &DecodeConfig,
) -> Result<Vec<Vec<u32>>> {
    sources
        .par_iter()
        .map(|s| beam_decode(model, params, s, cfg))
        .collect()
}
