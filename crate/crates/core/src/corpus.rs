//! Parallel corpora, whitespace tokenization and temperature-based language
//! sampling for multilingual pools.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An ordered list of non-empty, whitespace-free tokens.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Sentence(Vec<String>);

impl Sentence {
    /// Builds a sentence, rejecting empty tokens and tokens with whitespace.
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        for t in &tokens {
            if t.is_empty() {
                return Err(Error::Input("empty token".into()));
            }
            if t.chars().any(char::is_whitespace) {
                return Err(Error::Input(format!("token {t:?} contains whitespace")));
            }
        }
        Ok(Sentence(tokens))
    }

    /// Whitespace tokenization with whitespace collapse. Cannot fail.
    pub fn from_line(line: &str) -> Self {
        Sentence(line.split_whitespace().map(str::to_owned).collect())
    }

    pub fn empty() -> Self {
        Sentence(Vec::new())
    }

    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn into_tokens(self) -> Vec<String> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, String> {
        self.0.iter()
    }

    /// Crate-internal constructor for token lists already known to be valid.
    pub(crate) fn from_valid(tokens: Vec<String>) -> Self {
        debug_assert!(tokens
            .iter()
            .all(|t| !t.is_empty() && !t.contains(char::is_whitespace)));
        Sentence(tokens)
    }
}

impl fmt::Display for Sentence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.join(" "))
    }
}

impl<'a> IntoIterator for &'a Sentence {
    type Item = &'a String;
    type IntoIter = std::slice::Iter<'a, String>;

    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    pub source: Sentence,
    pub target: Sentence,
    pub index: usize,
}

/// Source and target language tags, e.g. `("en", "de")`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LanguagePair {
    pub source: String,
    pub target: String,
}

impl LanguagePair {
    pub fn new(source: impl Into<String>, target: impl Into<String>) -> Self {
        Self {
            source: source.into(),
            target: target.into(),
        }
    }

    /// The `src-tgt` tag used as a key in multilingual pools.
    pub fn tag(&self) -> String {
        format!("{}-{}", self.source, self.target)
    }
}

impl Default for LanguagePair {
    fn default() -> Self {
        Self::new("src", "tgt")
    }
}

/// Aligned sentence pairs. Indices are always `0..len()`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelCorpus {
    pairs: Vec<SentencePair>,
    pub language_pair: LanguagePair,
    /// Pairs discarded during ingestion because one side was blank.
    pub dropped: usize,
}

impl ParallelCorpus {
    /// Builds a corpus from sentence pairs, dropping pairs with an empty side
    /// and renumbering the survivors.
    pub fn from_pairs(
        pairs: impl IntoIterator<Item = (Sentence, Sentence)>,
        language_pair: LanguagePair,
    ) -> Self {
        let mut kept = Vec::new();
        let mut dropped = 0;
        for (source, target) in pairs {
            if source.is_empty() || target.is_empty() {
                dropped += 1;
                continue;
            }
            let index = kept.len();
            kept.push(SentencePair {
                source,
                target,
                index,
            });
        }
        Self {
            pairs: kept,
            language_pair,
            dropped,
        }
    }

    pub fn pairs(&self) -> &[SentencePair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn sources(&self) -> impl Iterator<Item = &Sentence> {
        self.pairs.iter().map(|p| &p.source)
    }

    pub fn targets(&self) -> impl Iterator<Item = &Sentence> {
        self.pairs.iter().map(|p| &p.target)
    }

    /// Returns a corpus holding pairs `range`, renumbered from zero.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Self::from_pairs(
            self.pairs[range]
                .iter()
                .map(|p| (p.source.clone(), p.target.clone())),
            self.language_pair.clone(),
        )
    }

    /// Writes both sides as one-sentence-per-line files.
    pub fn write(&self, source_path: &Path, target_path: &Path) -> Result<()> {
        write_lines(source_path, self.sources())?;
        write_lines(target_path, self.targets())
    }
}

pub(crate) fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_owned).collect())
}

/// Writes sentences one per line, tokens joined by single spaces.
pub fn write_lines<'a>(path: &Path, lines: impl IntoIterator<Item = &'a Sentence>) -> Result<()> {
    let mut out = String::new();
    for s in lines {
        out.push_str(&s.to_string());
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a one-sentence-per-line file into whitespace-tokenized sentences.
pub fn read_sentences(path: &Path) -> Result<Vec<Sentence>> {
    Ok(read_lines(path)?
        .iter()
        .map(|l| Sentence::from_line(l))
        .collect())
}

/// Loads two line-aligned files into a corpus.
pub fn load_parallel(source_path: &Path, target_path: &Path) -> Result<ParallelCorpus> {
    let src = read_lines(source_path)?;
    let tgt = read_lines(target_path)?;
    if src.len() != tgt.len() {
        return Err(Error::Alignment {
            source_lines: src.len(),
            target_lines: tgt.len(),
        });
    }
    let corpus = ParallelCorpus::from_pairs(
        src.iter()
            .zip(&tgt)
            .map(|(s, t)| (Sentence::from_line(s), Sentence::from_line(t))),
        LanguagePair::default(),
    );
    if corpus.dropped > 0 {
        log::warn!(
            "dropped {} blank pairs from {} / {}",
            corpus.dropped,
            source_path.display(),
            target_path.display()
        );
    }
    Ok(corpus)
}

/// Records where a corpus came from and what ingestion did to it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub source_path: PathBuf,
    pub target_path: PathBuf,
    pub language_pair: LanguagePair,
    pub pairs: usize,
    pub dropped: usize,
}

impl CorpusManifest {
    pub fn describe(corpus: &ParallelCorpus, source_path: &Path, target_path: &Path) -> Self {
        Self {
            source_path: source_path.to_owned(),
            target_path: target_path.to_owned(),
            language_pair: corpus.language_pair.clone(),
            pairs: corpus.len(),
            dropped: corpus.dropped,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Several language pairs trained jointly, balanced by temperature `T`.
#[derive(Debug, Clone)]
pub struct MultilingualPool {
    pub corpora: BTreeMap<String, ParallelCorpus>,
    pub temperature: f64,
}

impl MultilingualPool {
    pub fn new(temperature: f64) -> Self {
        Self {
            corpora: BTreeMap::new(),
            temperature,
        }
    }

    /// Inserts a corpus under its language-pair tag.
    pub fn insert(&mut self, corpus: ParallelCorpus) {
        self.corpora.insert(corpus.language_pair.tag(), corpus);
    }

    pub fn single(corpus: ParallelCorpus, temperature: f64) -> Self {
        let mut pool = Self::new(temperature);
        pool.insert(corpus);
        pool
    }
}

fn temper(count: f64, temperature: f64) -> f64 {
    // Exact roots for the common temperatures keep small cases exact.
    if temperature == 1.0 {
        count
    } else if temperature == 2.0 {
        count.sqrt()
    } else if temperature == 3.0 {
        count.cbrt()
    } else {
        count.powf(1.0 / temperature)
    }
}

/// Per-language sampling probability `(N_l / ΣN)^(1/T)`, renormalized.
pub fn sampling_weights(pool: &MultilingualPool) -> Result<BTreeMap<String, f64>> {
    sampling_weights_from_sizes(
        pool.corpora.iter().map(|(k, c)| (k.clone(), c.len())),
        pool.temperature,
    )
}

/// [`sampling_weights`] on raw sizes.
pub fn sampling_weights_from_sizes(
    sizes: impl IntoIterator<Item = (String, usize)>,
    temperature: f64,
) -> Result<BTreeMap<String, f64>> {
    let sizes: BTreeMap<String, usize> = sizes.into_iter().collect();
    if sizes.is_empty() {
        return Err(Error::Config("empty multilingual pool".into()));
    }
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Config(format!(
            "temperature must be positive and finite, got {temperature}"
        )));
    }
    if let Some((tag, _)) = sizes.iter().find(|(_, &n)| n == 0) {
        return Err(Error::Config(format!("corpus {tag} is empty")));
    }
    // (N_l/ΣN)^(1/T) and N_l^(1/T) differ by a common factor that the
    // renormalization removes, so work on raw counts.
    let tempered: BTreeMap<String, f64> = sizes
        .into_iter()
        .map(|(k, n)| (k, temper(n as f64, temperature)))
        .collect();
    let total: f64 = tempered.values().sum();
    Ok(tempered.into_iter().map(|(k, w)| (k, w / total)).collect())
}

/// Draws language-pair tags according to precomputed weights.
#[derive(Debug, Clone)]
pub struct LanguageSampler {
    tags: Vec<String>,
    cumulative: Vec<f64>,
}

impl LanguageSampler {
    pub fn new(weights: &BTreeMap<String, f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Config("empty multilingual pool".into()));
        }
        let mut acc = 0.0;
        let mut tags = Vec::with_capacity(weights.len());
        let mut cumulative = Vec::with_capacity(weights.len());
        for (tag, w) in weights {
            acc += w;
            tags.push(tag.clone());
            cumulative.push(acc);
        }
        Ok(Self { tags, cumulative })
    }

    pub fn from_pool(pool: &MultilingualPool) -> Result<Self> {
        Self::new(&sampling_weights(pool)?)
    }

    pub fn tags(&self) -> &[String] {
        &self.tags
    }

    /// Index into [`Self::tags`] of the next draw.
    pub fn sample_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        if self.tags.len() == 1 {
            return 0;
        }
        let total = *self.cumulative.last().expect("non-empty");
        let u: f64 = rng.random::<f64>() * total;
        self.cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.tags.len() - 1)
    }
}

/// Draws one language-pair tag from the pool's temperature distribution.
pub fn sample_language<'a, R: Rng + ?Sized>(sampler: &'a LanguageSampler, rng: &mut R) -> &'a str {
    &sampler.tags[sampler.sample_index(rng)]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::keyed_rng;
    use std::io::Write;

    fn write_file(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        fs::File::create(&p)
            .unwrap()
            .write_all(text.as_bytes())
            .unwrap();
        p
    }

    #[test]
    fn sentence_rejects_bad_tokens() {
        assert!(Sentence::new(vec!["a".into(), "".into()]).is_err());
        assert!(Sentence::new(vec!["a b".into()]).is_err());
        assert!(Sentence::new(vec!["ab".into()]).is_ok());
    }

    #[test]
    fn single_line_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let s = write_file(dir.path(), "s", "a b\n");
        let t = write_file(dir.path(), "t", "c d e\n");
        let c = load_parallel(&s, &t).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.pairs()[0].source.tokens(), ["a", "b"]);
        assert_eq!(c.pairs()[0].target.tokens(), ["c", "d", "e"]);
    }

    #[test]
    fn blank_side_is_dropped_and_counted() {
        let dir = tempfile::tempdir().unwrap();
        let s = write_file(dir.path(), "s", "a\nb\nc\n");
        let t = write_file(dir.path(), "t", "x\n   \nz\n");
        let c = load_parallel(&s, &t).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.dropped, 1);
        let idx: Vec<usize> = c.pairs().iter().map(|p| p.index).collect();
        assert_eq!(idx, [0, 1]);
    }

    #[test]
    fn line_count_mismatch_reports_both_counts() {
        let dir = tempfile::tempdir().unwrap();
        let s = write_file(dir.path(), "s", "a\nb\nc\nd\ne\n");
        let t = write_file(dir.path(), "t", "a\nb\nc\nd\n");
        match load_parallel(&s, &t) {
            Err(Error::Alignment {
                source_lines,
                target_lines,
            }) => assert_eq!((source_lines, target_lines), (5, 4)),
            other => panic!("expected alignment error, got {other:?}"),
        }
    }

    #[test]
    fn missing_file_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let s = write_file(dir.path(), "s", "a\n");
        assert!(matches!(
            load_parallel(&s, &dir.path().join("nope")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn rewrite_reproduces_input_modulo_whitespace() {
        let dir = tempfile::tempdir().unwrap();
        let s = write_file(dir.path(), "s", "a  b\tc\n\nd e\n");
        let t = write_file(dir.path(), "t", "x\ny\n z  w \n");
        let c = load_parallel(&s, &t).unwrap();
        c.write(&dir.path().join("s2"), &dir.path().join("t2"))
            .unwrap();
        assert_eq!(
            fs::read_to_string(dir.path().join("s2")).unwrap(),
            "a b c\nd e\n"
        );
        assert_eq!(
            fs::read_to_string(dir.path().join("t2")).unwrap(),
            "x\nz w\n"
        );
    }

    fn sizes(v: &[(&str, usize)]) -> Vec<(String, usize)> {
        v.iter().map(|(k, n)| (k.to_string(), *n)).collect()
    }

    #[test]
    fn temperature_two_weights() {
        let w = sampling_weights_from_sizes(sizes(&[("A", 100), ("B", 400)]), 2.0).unwrap();
        assert_eq!(w["A"], 1.0 / 3.0);
        assert_eq!(w["B"], 2.0 / 3.0);
    }

    #[test]
    fn equal_sizes_are_uniform() {
        for t in [0.5, 1.0, 2.0, 7.0] {
            let w = sampling_weights_from_sizes(sizes(&[("A", 7), ("B", 7)]), t).unwrap();
            assert_eq!(w["A"], 0.5);
            assert_eq!(w["B"], 0.5);
        }
    }

    #[test]
    fn temperature_three_cube_roots() {
        // Oracle: cube roots of 1, 8, 27 are 1, 2, 3; normalized by 6.
        let w = sampling_weights_from_sizes(sizes(&[("A", 1), ("B", 8), ("C", 27)]), 3.0).unwrap();
        for (k, expected) in [("A", 1.0 / 6.0), ("B", 2.0 / 6.0), ("C", 3.0 / 6.0)] {
            assert!((w[k] - expected).abs() < 1e-12, "{k}: {}", w[k]);
        }
    }

    #[test]
    fn unit_temperature_is_proportional() {
        let w = sampling_weights_from_sizes(sizes(&[("A", 3), ("B", 5), ("C", 11)]), 1.0).unwrap();
        assert_eq!(w["A"], 3.0 / 19.0);
        assert_eq!(w["B"], 5.0 / 19.0);
        assert_eq!(w["C"], 11.0 / 19.0);
    }

    #[test]
    fn huge_temperature_is_near_uniform() {
        let w = sampling_weights_from_sizes(sizes(&[("A", 3), ("B", 5000), ("C", 1_000_000)]), 1e6)
            .unwrap();
        for v in w.values() {
            assert!((v - 1.0 / 3.0).abs() < 1e-5);
        }
    }

    #[test]
    fn empty_pool_is_config_error() {
        assert!(matches!(
            sampling_weights(&MultilingualPool::new(2.0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn single_language_always_drawn() {
        let sampler = LanguageSampler::new(&BTreeMap::from([("en-de".to_string(), 1.0)])).unwrap();
        let mut rng = keyed_rng(1, 0);
        assert!((0..100).all(|_| sample_language(&sampler, &mut rng) == "en-de"));
    }

    #[test]
    fn monte_carlo_matches_weights() {
        let w = sampling_weights_from_sizes(sizes(&[("A", 100), ("B", 400)]), 2.0).unwrap();
        let sampler = LanguageSampler::new(&w).unwrap();
        let mut rng = keyed_rng(2024, 0);
        let draws = 30_000;
        let a = (0..draws)
            .filter(|_| sample_language(&sampler, &mut rng) == "A")
            .count();
        let frac = a as f64 / draws as f64;
        assert!((frac - 1.0 / 3.0).abs() < 0.02, "{frac}");
    }

    #[test]
    fn fixed_seed_draws_repeat() {
        let w = sampling_weights_from_sizes(sizes(&[("A", 1), ("B", 2), ("C", 3)]), 2.0).unwrap();
        let sampler = LanguageSampler::new(&w).unwrap();
        let run = || {
            let mut rng = keyed_rng(9, 1);
            (0..50)
                .map(|_| sample_language(&sampler, &mut rng).to_owned())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
