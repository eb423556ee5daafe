//! A synthetic language pair for end-to-end experiments.
//!
//! Source sentences come from a class-level Markov chain over a small
//! invented lexicon. The target is a word-for-word cipher of the source into
//! a second lexicon, after which selected adjacent class pairs are swapped,
//! so every target token sits at most one position away from its source.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{LanguagePair, ParallelCorpus, Sentence};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, keyed_rng, tag};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Words per language.
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub train_pairs: usize,
    pub test_pairs: usize,
    /// Word classes driving the Markov chain and the reordering rule.
    pub classes: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            vocab_size: 50,
            min_len: 3,
            max_len: 12,
            train_pairs: 2000,
            test_pairs: 200,
            classes: 5,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthTask {
    pub train: ParallelCorpus,
    pub test: ParallelCorpus,
    pub source_words: Vec<String>,
    pub target_words: Vec<String>,
    /// Source word to target word.
    pub cipher: BTreeMap<String, String>,
}

fn lexicon(consonants: &str, vowels: &str, n: usize, rng: &mut impl Rng) -> Vec<String> {
    let cs: Vec<char> = consonants.chars().collect();
    let vs: Vec<char> = vowels.chars().collect();
    let syllables: Vec<String> = cs
        .iter()
        .flat_map(|c| vs.iter().map(move |v| format!("{c}{v}")))
        .collect();
    let mut words: Vec<String> = syllables
        .iter()
        .flat_map(|a| syllables.iter().map(move |b| format!("{a}{b}")))
        .collect();
    words.shuffle(rng);
    words.truncate(n);
    words
}

struct Grammar {
    class_of: Vec<usize>,
    members: Vec<Vec<usize>>,
    /// Cumulative class transition rows; row `classes` is the start state.
    transitions: Vec<Vec<f64>>,
    swaps: Vec<(usize, usize)>,
}

fn cumulative(weights: &[f64]) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    let mut acc = 0.0;
    weights
        .iter()
        .map(|w| {
            acc += w / total;
            acc
        })
        .collect()
}

fn draw(cum: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    cum.iter().position(|&c| u < c).unwrap_or(cum.len() - 1)
}

impl Grammar {
    fn new(cfg: &SynthConfig, rng: &mut impl Rng) -> Self {
        let k = cfg.classes;
        let class_of: Vec<usize> = (0..cfg.vocab_size).map(|w| w % k).collect();
        let mut members = vec![Vec::new(); k];
        for (w, &c) in class_of.iter().enumerate() {
            members[c].push(w);
        }
        // Peaked transitions so word order carries information.
        let transitions = (0..=k)
            .map(|_| {
                let w: Vec<f64> = (0..k).map(|_| rng.random::<f64>().powi(3) + 0.02).collect();
                cumulative(&w)
            })
            .collect();
        let mut pairs: Vec<(usize, usize)> = (0..k)
            .flat_map(|a| (0..k).map(move |b| (a, b)))
            .filter(|(a, b)| a != b)
            .collect();
        pairs.shuffle(rng);
        pairs.truncate(k);
        Self {
            class_of,
            members,
            transitions,
            swaps: pairs,
        }
    }

    fn sentence(&self, cfg: &SynthConfig, rng: &mut impl Rng) -> Vec<usize> {
        let len = rng.random_range(cfg.min_len..=cfg.max_len);
        let mut state = self.members.len();
        (0..len)
            .map(|_| {
                let c = draw(&self.transitions[state], rng);
                state = c;
                // Zipf-like preference inside a class.
                let m = &self.members[c];
                let w: Vec<f64> = (1..=m.len()).map(|r| 1.0 / r as f64).collect();
                m[draw(&cumulative(&w), rng)]
            })
            .collect()
    }

    /// Swaps adjacent words whose classes form a listed pair, left to right,
    /// without reusing a word.
    fn reorder(&self, words: &[usize]) -> Vec<usize> {
        let mut out = words.to_vec();
        let mut i = 0;
        while i + 1 < out.len() {
            let pair = (self.class_of[out[i]], self.class_of[out[i + 1]]);
            if self.swaps.contains(&pair) {
                out.swap(i, i + 1);
                i += 2;
            } else {
                i += 1;
            }
        }
        out
    }
}

/// Generates the train and test splits.
pub fn generate(cfg: &SynthConfig) -> Result<SynthTask> {
    if cfg.vocab_size < cfg.classes
        || cfg.classes < 2
        || cfg.min_len == 0
        || cfg.min_len > cfg.max_len
    {
        return Err(Error::Config(
            "synthetic task needs vocab_size >= classes >= 2 and 1 <= min_len <= max_len".into(),
        ));
    }
    if cfg.vocab_size > 400 {
        return Err(Error::Config(
            "synthetic vocabulary is limited to 400 words".into(),
        ));
    }
    let base = derive_seed(cfg.seed, tag::SYNTH);
    let mut rng = keyed_rng(base, 0);
    let source_words = lexicon("bdfgklmnprstvz", "aeiou", cfg.vocab_size, &mut rng);
    let target_words = lexicon("chjqwxy", "aeiouy", cfg.vocab_size, &mut rng);
    let mut cipher: Vec<usize> = (0..cfg.vocab_size).collect();
    cipher.shuffle(&mut rng);
    let grammar = Grammar::new(cfg, &mut rng);

    let make = |offset: usize, n: usize| -> Vec<(Sentence, Sentence)> {
        (0..n)
            .map(|i| {
                let mut r = keyed_rng(base, (offset + i + 1) as u64);
                let src = grammar.sentence(cfg, &mut r);
                let tgt = grammar.reorder(&src);
                let s = src.iter().map(|&w| source_words[w].clone()).collect();
                let t = tgt
                    .iter()
                    .map(|&w| target_words[cipher[w]].clone())
                    .collect();
                (Sentence::from_valid(s), Sentence::from_valid(t))
            })
            .collect()
    };
    let lp = LanguagePair::new("src", "tgt");
    let cipher_map = (0..cfg.vocab_size)
        .map(|w| (source_words[w].clone(), target_words[cipher[w]].clone()))
        .collect();
    Ok(SynthTask {
        train: ParallelCorpus::from_pairs(make(0, cfg.train_pairs), lp.clone()),
        test: ParallelCorpus::from_pairs(make(cfg.train_pairs, cfg.test_pairs), lp),
        source_words,
        target_words,
        cipher: cipher_map,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn small() -> SynthConfig {
        SynthConfig {
            train_pairs: 300,
            test_pairs: 50,
            ..Default::default()
        }
    }

    #[test]
    fn shape_and_lexicons() {
        let t = generate(&small()).unwrap();
        assert_eq!((t.train.len(), t.test.len()), (300, 50));
        let src: BTreeSet<&String> = t.source_words.iter().collect();
        let tgt: BTreeSet<&String> = t.target_words.iter().collect();
        assert_eq!((src.len(), tgt.len()), (50, 50));
        assert!(src.is_disjoint(&tgt));
        for p in t.train.pairs() {
            assert!((3..=12).contains(&p.source.len()));
            assert_eq!(p.source.len(), p.target.len());
        }
    }

    #[test]
    fn deterministic() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.train.pairs(), b.train.pairs());
        let c = generate(&SynthConfig { seed: 2, ..small() }).unwrap();
        assert_ne!(a.train.pairs(), c.train.pairs());
    }

    #[test]
    fn target_is_ciphered_source_with_adjacent_swaps() {
        let t = generate(&small()).unwrap();
        let values: BTreeSet<&String> = t.cipher.values().collect();
        assert_eq!(values.len(), 50);
        let mut swapped = 0;
        for p in t.train.pairs() {
            let mut c: Vec<&str> = p.source.iter().map(|w| t.cipher[w].as_str()).collect();
            let g: Vec<&str> = p.target.iter().map(String::as_str).collect();
            // Undo disjoint adjacent swaps greedily from the left.
            let mut i = 0;
            while i < c.len() {
                if c[i] != g[i] {
                    assert!(i + 1 < c.len() && c[i + 1] == g[i] && c[i] == g[i + 1]);
                    c.swap(i, i + 1);
                    swapped += 1;
                    i += 2;
                } else {
                    i += 1;
                }
            }
            assert_eq!(c, g);
        }
        assert!(swapped > 100, "{swapped}");
    }

    #[test]
    fn rejects_bad_config() {
        assert!(generate(&SynthConfig {
            min_len: 0,
            ..small()
        })
        .is_err());
        assert!(generate(&SynthConfig {
            classes: 1,
            ..small()
        })
        .is_err());
    }
}
