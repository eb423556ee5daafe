//! The sentence noise function used to build denoising data: a bounded local
//! shuffle, word dropout, and word blanking (or code-switching), applied in
//! that order.
//!
//! Each operation draws from its own sub-stream of the sentence's
//! [`RngStream`], so results depend only on `(seed, line index)`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Sentence;
use crate::error::{Error, Result};
use crate::rng::{tag, RngStream};
use crate::subword::MASK;

/// What a blanked position is replaced with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlankMode {
    #[default]
    Mask,
    /// Replace with a lexicon translation, falling back to the mask symbol.
    CodeSwitch,
}

/// How the noise operations are applied to a sentence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Application {
    /// Independent per-token draws with the configured probabilities.
    #[default]
    PerToken,
    /// Exactly one removal, one replacement and one nearby swap per sentence,
    /// each enabled when its parameter is non-trivial.
    OncePerSentence,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Word dropout probability.
    pub wd: f64,
    /// Word blank probability.
    pub wb: f64,
    /// Shuffle span.
    pub sk: usize,
    pub mask_symbol: String,
    #[serde(default)]
    pub mode: BlankMode,
    #[serde(default)]
    pub application: Application,
    #[serde(skip)]
    pub lexicon: Option<Arc<CodeSwitchLexicon>>,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            wd: 0.1,
            wb: 0.1,
            sk: 3,
            mask_symbol: MASK.to_owned(),
            mode: BlankMode::Mask,
            application: Application::PerToken,
            lexicon: None,
        }
    }
}

impl PartialEq for NoiseConfig {
    fn eq(&self, other: &Self) -> bool {
        self.wd == other.wd
            && self.wb == other.wb
            && self.sk == other.sk
            && self.mask_symbol == other.mask_symbol
            && self.mode == other.mode
            && self.application == other.application
            && self.lexicon.as_deref() == other.lexicon.as_deref()
    }
}

impl NoiseConfig {
    /// All three operations disabled.
    pub fn off() -> Self {
        Self {
            wd: 0.0,
            wb: 0.0,
            sk: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.wd) {
            return Err(Error::Config(format!(
                "wd must be in [0, 1], got {}",
                self.wd
            )));
        }
        if !(0.0..=1.0).contains(&self.wb) {
            return Err(Error::Config(format!(
                "wb must be in [0, 1], got {}",
                self.wb
            )));
        }
        if self.sk < 1 {
            return Err(Error::Config("sk must be at least 1".into()));
        }
        if self.mask_symbol.is_empty() || self.mask_symbol.contains(char::is_whitespace) {
            return Err(Error::Config(format!(
                "invalid mask symbol {:?}",
                self.mask_symbol
            )));
        }
        Ok(())
    }
}

/// Source word → candidate translations, each list non-empty.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CodeSwitchLexicon {
    entries: BTreeMap<String, Vec<String>>,
}

impl CodeSwitchLexicon {
    pub fn new(entries: BTreeMap<String, Vec<String>>) -> Result<Self> {
        for (word, translations) in &entries {
            if translations.is_empty() {
                return Err(Error::Input(format!(
                    "lexicon entry {word} has no translations"
                )));
            }
            for t in std::iter::once(word).chain(translations) {
                if t.is_empty() || t.contains(char::is_whitespace) {
                    return Err(Error::Input(format!("invalid lexicon token {t:?}")));
                }
            }
        }
        Ok(Self { entries })
    }

    pub fn get(&self, word: &str) -> Option<&[String]> {
        self.entries.get(word).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Parses `source<TAB>target1|target2|...` lines.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |message: &str| Error::Format {
                path: path.to_owned(),
                line: i + 1,
                message: message.to_owned(),
            };
            let (src, tgts) = line
                .split_once('\t')
                .ok_or_else(|| bad("expected source<TAB>targets"))?;
            let tgts: Vec<String> = tgts
                .split('|')
                .map(str::trim)
                .filter(|t| !t.is_empty())
                .map(str::to_owned)
                .collect();
            if tgts.is_empty() {
                return Err(bad("no translations"));
            }
            entries
                .entry(src.trim().to_owned())
                .or_default()
                .extend(tgts);
        }
        Self::new(entries).map_err(|e| Error::Format {
            path: path.to_owned(),
            line: 0,
            message: e.to_string(),
        })
    }
}

/// Reorders tokens by the key `i + u_i`, `u_i ~ U[0, sk)`, so no token moves
/// more than `sk - 1` places.
pub fn word_shuffle(s: &Sentence, sk: usize, rng: RngStream) -> Sentence {
    let mut r = rng.open(tag::SHUFFLE);
    let span = sk as f64;
    let mut keyed: Vec<(f64, usize)> = (0..s.len())
        .map(|i| (i as f64 + r.random::<f64>() * span, i))
        .collect();
    // Stable with respect to the original index on equal keys.
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Sentence::from_valid(
        keyed
            .into_iter()
            .map(|(_, i)| s.tokens()[i].clone())
            .collect(),
    )
}

/// Keeps token `i` iff its draw exceeds `wd`. A sentence that would lose every
/// token keeps one uniformly chosen token instead.
pub fn word_dropout(s: &Sentence, wd: f64, rng: RngStream) -> Sentence {
    if wd == 0.0 || s.is_empty() {
        return s.clone();
    }
    let mut r = rng.open(tag::DROPOUT);
    let kept: Vec<String> = s
        .iter()
        .filter(|_| r.random::<f64>() > wd)
        .cloned()
        .collect();
    if kept.is_empty() {
        let i = rng.open(tag::DROPOUT_FALLBACK).random_range(0..s.len());
        return Sentence::from_valid(vec![s.tokens()[i].clone()]);
    }
    Sentence::from_valid(kept)
}

/// Replaces token `i` with `mask_symbol` iff its draw is at most `wb`.
pub fn word_blank(s: &Sentence, wb: f64, mask_symbol: &str, rng: RngStream) -> Sentence {
    if wb == 0.0 {
        return s.clone();
    }
    let mut r = rng.open(tag::BLANK);
    Sentence::from_valid(
        s.iter()
            .map(|t| {
                if r.random::<f64>() <= wb {
                    mask_symbol.to_owned()
                } else {
                    t.clone()
                }
            })
            .collect(),
    )
}

/// Like [`word_blank`], but a selected word found in the lexicon is replaced
/// by a uniformly drawn translation. Position selection uses the same draws
/// as [`word_blank`].
pub fn code_switch_blank(
    s: &Sentence,
    wb: f64,
    lexicon: &CodeSwitchLexicon,
    mask_symbol: &str,
    rng: RngStream,
) -> Sentence {
    if wb == 0.0 {
        return s.clone();
    }
    let mut select = rng.open(tag::BLANK);
    let mut choose = rng.open(tag::CODE_SWITCH);
    Sentence::from_valid(
        s.iter()
            .map(|t| {
                if select.random::<f64>() > wb {
                    return t.clone();
                }
                match lexicon.get(t) {
                    Some(options) => options[choose.random_range(0..options.len())].clone(),
                    None => mask_symbol.to_owned(),
                }
            })
            .collect(),
    )
}

fn blank_or_switch(s: &Sentence, cfg: &NoiseConfig, rng: RngStream) -> Sentence {
    match (cfg.mode, cfg.lexicon.as_deref()) {
        (BlankMode::CodeSwitch, Some(lexicon)) => {
            code_switch_blank(s, cfg.wb, lexicon, &cfg.mask_symbol, rng)
        }
        _ => word_blank(s, cfg.wb, &cfg.mask_symbol, rng),
    }
}

fn noised_once(s: &Sentence, cfg: &NoiseConfig, rng: RngStream) -> Sentence {
    let mut r = rng.open(tag::ONCE);
    let mut tokens = s.tokens().to_vec();
    if cfg.sk > 1 && tokens.len() > 1 {
        let i = r.random_range(0..tokens.len() - 1);
        let reach = (cfg.sk - 1).min(tokens.len() - 1 - i);
        let j = i + r.random_range(1..=reach);
        tokens.swap(i, j);
    }
    if cfg.wd > 0.0 && tokens.len() > 1 {
        let i = r.random_range(0..tokens.len());
        tokens.remove(i);
    }
    if cfg.wb > 0.0 {
        let i = r.random_range(0..tokens.len());
        let replacement = match (cfg.mode, cfg.lexicon.as_deref()) {
            (BlankMode::CodeSwitch, Some(lex)) => match lex.get(&tokens[i]) {
                Some(options) => options[r.random_range(0..options.len())].clone(),
                None => cfg.mask_symbol.clone(),
            },
            _ => cfg.mask_symbol.clone(),
        };
        tokens[i] = replacement;
    }
    Sentence::from_valid(tokens)
}

/// The full noise function: shuffle, then dropout, then blank/code-switch.
pub fn noised(s: &Sentence, cfg: &NoiseConfig, rng: RngStream) -> Sentence {
    if s.is_empty() {
        return s.clone();
    }
    match cfg.application {
        Application::PerToken => {
            let shuffled = word_shuffle(s, cfg.sk, rng);
            let dropped = word_dropout(&shuffled, cfg.wd, rng);
            blank_or_switch(&dropped, cfg, rng)
        }
        Application::OncePerSentence => noised_once(s, cfg, rng),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashMap;

    fn sent(n: usize) -> Sentence {
        Sentence::from_valid((0..n).map(|i| format!("w{i}")).collect())
    }

    fn counts(s: &Sentence) -> HashMap<String, usize> {
        let mut m = HashMap::new();
        for t in s {
            *m.entry(t.clone()).or_default() += 1;
        }
        m
    }

    #[test]
    fn span_one_is_identity() {
        for line in 0..200 {
            let s = sent(1 + line as usize % 17);
            assert_eq!(word_shuffle(&s, 1, RngStream::new(5, line)), s);
        }
    }

    #[test]
    fn shuffle_displacement_bounded() {
        for sk in [2usize, 3, 5] {
            for line in 0..500 {
                let s = sent(1 + line as usize % 25);
                let out = word_shuffle(&s, sk, RngStream::new(11, line));
                for (new_pos, t) in out.iter().enumerate() {
                    let old_pos: usize = t[1..].parse().unwrap();
                    assert!(new_pos.abs_diff(old_pos) < sk, "sk={sk} {s} -> {out}");
                }
            }
        }
    }

    #[test]
    fn shuffle_is_permutation() {
        let s = Sentence::from_line("a b a c b a d");
        for sk in 1..6 {
            let out = word_shuffle(&s, sk, RngStream::new(3, sk as u64));
            assert_eq!(counts(&out), counts(&s));
        }
    }

    #[test]
    fn shuffle_empty() {
        assert!(word_shuffle(&Sentence::empty(), 3, RngStream::new(0, 0)).is_empty());
    }

    #[test]
    fn dropout_zero_is_identity() {
        let s = sent(9);
        assert_eq!(word_dropout(&s, 0.0, RngStream::new(1, 2)), s);
    }

    #[test]
    fn dropout_one_falls_back_to_single_token() {
        let s = sent(5);
        for line in 0..100 {
            let out = word_dropout(&s, 1.0, RngStream::new(1, line));
            assert_eq!(out.len(), 1);
            assert!(s.tokens().contains(&out.tokens()[0]));
        }
    }

    #[test]
    fn dropout_fallback_is_roughly_uniform() {
        let s = sent(4);
        let mut hits = [0usize; 4];
        for line in 0..4000 {
            let out = word_dropout(&s, 1.0, RngStream::new(8, line));
            hits[out.tokens()[0][1..].parse::<usize>().unwrap()] += 1;
        }
        assert!(hits.iter().all(|&h| (800..1200).contains(&h)), "{hits:?}");
    }

    #[test]
    fn dropout_rate_monte_carlo() {
        let s = sent(100);
        let kept: usize = (0..1000)
            .map(|line| word_dropout(&s, 0.1, RngStream::new(77, line)).len())
            .sum();
        let frac = kept as f64 / 100_000.0;
        assert!((frac - 0.9).abs() < 0.005, "{frac}");
    }

    #[test]
    fn blank_extremes() {
        let s = sent(7);
        assert_eq!(word_blank(&s, 0.0, MASK, RngStream::new(1, 1)), s);
        let all = word_blank(&s, 1.0, MASK, RngStream::new(1, 1));
        assert_eq!(all.len(), 7);
        assert!(all.iter().all(|t| t == MASK));
    }

    #[test]
    fn blank_rate_monte_carlo() {
        let s = sent(100);
        let masked: usize = (0..1000)
            .map(|line| {
                word_blank(&s, 0.1, MASK, RngStream::new(78, line))
                    .iter()
                    .filter(|t| *t == MASK)
                    .count()
            })
            .sum();
        let frac = masked as f64 / 100_000.0;
        assert!((frac - 0.1).abs() < 0.005, "{frac}");
    }

    #[test]
    fn code_switch_with_empty_lexicon_matches_blank() {
        let lex = CodeSwitchLexicon::default();
        for line in 0..100 {
            let s = sent(12);
            let rng = RngStream::new(4, line);
            assert_eq!(
                code_switch_blank(&s, 0.3, &lex, MASK, rng),
                word_blank(&s, 0.3, MASK, rng)
            );
        }
    }

    #[test]
    fn code_switch_forced() {
        let lex =
            CodeSwitchLexicon::new(BTreeMap::from([("cat".into(), vec!["Katze".into()])])).unwrap();
        let out = code_switch_blank(
            &Sentence::from_line("cat"),
            1.0,
            &lex,
            MASK,
            RngStream::new(0, 0),
        );
        assert_eq!(out, Sentence::from_line("Katze"));
    }

    #[test]
    fn lexicon_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("lex.tsv");
        fs::write(&p, "cat\tKatze|Mieze\ndog\tHund\n").unwrap();
        let lex = CodeSwitchLexicon::load(&p).unwrap();
        assert_eq!(lex.get("cat").unwrap(), ["Katze", "Mieze"]);
        assert_eq!(lex.get("dog").unwrap(), ["Hund"]);
        fs::write(&p, "cat\n").unwrap();
        assert!(CodeSwitchLexicon::load(&p).is_err());
    }

    #[test]
    fn all_off_is_identity() {
        let cfg = NoiseConfig::off();
        for line in 0..200 {
            let s = sent(1 + line as usize % 13);
            assert_eq!(noised(&s, &cfg, RngStream::new(9, line)), s);
        }
    }

    #[test]
    fn defaults_match_reference_script() {
        let cfg = NoiseConfig::default();
        assert_eq!((cfg.wd, cfg.wb, cfg.sk), (0.1, 0.1, 3));
    }

    #[test]
    fn noised_is_deterministic() {
        let cfg = NoiseConfig::default();
        let s = sent(20);
        let a = noised(&s, &cfg, RngStream::new(123, 45));
        let b = noised(&s, &cfg, RngStream::new(123, 45));
        assert_eq!(a, b);
    }

    #[test]
    fn noised_empty_input() {
        assert!(noised(
            &Sentence::empty(),
            &NoiseConfig::default(),
            RngStream::new(0, 0)
        )
        .is_empty());
    }

    #[test]
    fn once_per_sentence_mode() {
        let cfg = NoiseConfig {
            application: Application::OncePerSentence,
            ..NoiseConfig::default()
        };
        for line in 0..200 {
            let s = sent(2 + line as usize % 10);
            let out = noised(&s, &cfg, RngStream::new(6, line));
            assert_eq!(out.len(), s.len() - 1);
            assert_eq!(out.iter().filter(|t| *t == MASK).count(), 1);
        }
        let one = sent(1);
        assert_eq!(noised(&one, &cfg, RngStream::new(6, 0)).tokens(), [MASK]);
    }

    #[test]
    fn validation() {
        assert!(NoiseConfig {
            wd: 1.5,
            ..NoiseConfig::default()
        }
        .validate()
        .is_err());
        assert!(NoiseConfig {
            wb: -0.1,
            ..NoiseConfig::default()
        }
        .validate()
        .is_err());
        assert!(NoiseConfig {
            sk: 0,
            ..NoiseConfig::default()
        }
        .validate()
        .is_err());
        assert!(NoiseConfig::default().validate().is_ok());
    }

    fn lexicon_strategy() -> impl Strategy<Value = CodeSwitchLexicon> {
        prop::collection::btree_map("[a-e]", prop::collection::vec("[X-Z][a-c]", 1..3), 0..5)
            .prop_map(|m| CodeSwitchLexicon::new(m).unwrap())
    }

    proptest! {
        #[test]
        fn output_drawn_from_input_mask_or_lexicon(
            words in prop::collection::vec("[a-h]", 0..30),
            wd in 0.0f64..=1.0,
            wb in 0.0f64..=1.0,
            sk in 1usize..6,
            switch in any::<bool>(),
            lex in lexicon_strategy(),
            seed in any::<u64>(),
            line in any::<u64>(),
        ) {
            let s = Sentence::from_valid(words);
            let cfg = NoiseConfig {
                wd, wb, sk,
                mode: if switch { BlankMode::CodeSwitch } else { BlankMode::Mask },
                lexicon: Some(Arc::new(lex.clone())),
                ..NoiseConfig::default()
            };
            let out = noised(&s, &cfg, RngStream::new(seed, line));
            prop_assert!(out.len() <= s.len());
            prop_assert_eq!(out.is_empty(), s.is_empty());
            let input = counts(&s);
            let mut from_input: HashMap<String, usize> = HashMap::new();
            for t in &out {
                if input.contains_key(t) {
                    *from_input.entry(t.clone()).or_default() += 1;
                    continue;
                }
                let from_lexicon = switch
                    && s.iter().any(|w| lex.get(w).is_some_and(|o| o.contains(t)));
                prop_assert!(t == MASK || from_lexicon, "unexpected token {}", t);
            }
            for (t, c) in from_input {
                // Lexicon targets never collide with [a-h] words.
                prop_assert!(c <= input[&t]);
            }
        }

        #[test]
        fn blank_preserves_length(n in 0usize..40, wb in 0.0f64..=1.0, seed in any::<u64>()) {
            let s = sent(n);
            prop_assert_eq!(word_blank(&s, wb, MASK, RngStream::new(seed, 0)).len(), n);
        }
    }
}
