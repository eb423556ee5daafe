//! Byte-pair encoding over the joint source+target corpus and the shared
//! vocabulary built from its output.
//!
//! Words are split into characters with an end-of-word marker glued to the
//! final character (`"ab"` becomes `["a", "b</w>"]`), so decoding is plain
//! concatenation up to each marker. Reserved symbols such as `<mask>` are
//! never split.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use crate::corpus::Sentence;
use crate::error::{Error, Result};

pub const END_OF_WORD: &str = "</w>";

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";
pub const MASK: &str = "<mask>";

/// Reserved symbols in id order.
pub const RESERVED: [&str; 5] = [PAD, BOS, EOS, UNK, MASK];

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const UNK_ID: u32 = 3;
pub const MASK_ID: u32 = 4;

pub fn is_reserved(symbol: &str) -> bool {
    RESERVED.contains(&symbol)
}

/// Learned merges in priority order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MergeTable {
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
}

impl MergeTable {
    /// Builds a table from an ordered merge list, rejecting duplicates.
    pub fn from_merges(merges: Vec<(String, String)>) -> Result<Self> {
        let mut ranks = HashMap::with_capacity(merges.len());
        for (i, pair) in merges.iter().enumerate() {
            if ranks.insert(pair.clone(), i).is_some() {
                return Err(Error::Input(format!(
                    "duplicate merge {} {}",
                    pair.0, pair.1
                )));
            }
        }
        Ok(Self { merges, ranks })
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn len(&self) -> usize {
        self.merges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.merges.is_empty()
    }

    pub fn end_of_word_marker(&self) -> &'static str {
        END_OF_WORD
    }

    /// Writes one `left right` line per merge.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (l, r) in &self.merges {
            out.push_str(l);
            out.push(' ');
            out.push_str(r);
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut merges = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(l), Some(r), None) if !l.is_empty() && !r.is_empty() => {
                    merges.push((l.to_owned(), r.to_owned()))
                }
                _ => {
                    return Err(Error::Format {
                        path: path.to_owned(),
                        line: i + 1,
                        message: "expected `left right`".into(),
                    })
                }
            }
        }
        Self::from_merges(merges).map_err(|e| Error::Format {
            path: path.to_owned(),
            line: 0,
            message: e.to_string(),
        })
    }

    fn rank(&self, left: &str, right: &str) -> Option<usize> {
        // HashMap<(String, String)> cannot be probed with borrowed strs
        // without allocating; the symbols are short.
        self.ranks
            .get(&(left.to_owned(), right.to_owned()))
            .copied()
    }
}

fn word_symbols(word: &str) -> Vec<String> {
    let mut symbols: Vec<String> = word.chars().map(String::from).collect();
    if let Some(last) = symbols.last_mut() {
        last.push_str(END_OF_WORD);
    }
    symbols
}

fn merge_pair(symbols: &mut Vec<String>, left: &str, right: &str) {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
            out.push(format!("{left}{right}"));
            i += 2;
        } else {
            out.push(std::mem::take(&mut symbols[i]));
            i += 1;
        }
    }
    *symbols = out;
}

/// Learns up to `num_merges` merges from whitespace-tokenized sentences.
///
/// Each step merges the most frequent adjacent pair (ties broken by the
/// lexicographically smallest `(left, right)`); learning stops early once no
/// pair occurs at least twice.
pub fn bpe_learn<'a>(
    corpus_lines: impl IntoIterator<Item = &'a Sentence>,
    num_merges: usize,
) -> Result<MergeTable> {
    let mut freq: BTreeMap<&str, u64> = BTreeMap::new();
    for s in corpus_lines {
        for w in s {
            if !is_reserved(w) {
                *freq.entry(w.as_str()).or_default() += 1;
            }
        }
    }
    if freq.is_empty() {
        return Err(Error::Config(
            "cannot learn BPE from an empty corpus".into(),
        ));
    }
    let mut words: Vec<(Vec<String>, u64)> = freq
        .into_iter()
        .map(|(w, c)| (word_symbols(w), c))
        .collect();

    let mut merges = Vec::with_capacity(num_merges);
    while merges.len() < num_merges {
        let mut counts: HashMap<(&str, &str), u64> = HashMap::new();
        for (symbols, c) in &words {
            for pair in symbols.windows(2) {
                *counts.entry((&pair[0], &pair[1])).or_default() += c;
            }
        }
        let best = counts
            .into_iter()
            .filter(|&(_, c)| c >= 2)
            .min_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let Some(((l, r), _)) = best else { break };
        let (l, r) = (l.to_owned(), r.to_owned());
        for (symbols, _) in &mut words {
            merge_pair(symbols, &l, &r);
        }
        merges.push((l, r));
    }
    MergeTable::from_merges(merges)
}

fn apply_word(word: &str, table: &MergeTable) -> Vec<String> {
    if is_reserved(word) {
        return vec![word.to_owned()];
    }
    let mut symbols = word_symbols(word);
    loop {
        let best = symbols
            .windows(2)
            .filter_map(|p| table.rank(&p[0], &p[1]))
            .min();
        let Some(rank) = best else { break };
        let (l, r) = &table.merges[rank];
        merge_pair(&mut symbols, l, r);
    }
    symbols
}

/// Segments every word of `sentence` into subword units.
pub fn bpe_apply(sentence: &Sentence, table: &MergeTable) -> Sentence {
    Sentence::from_valid(sentence.iter().flat_map(|w| apply_word(w, table)).collect())
}

/// Joins subword units back into words at end-of-word markers.
pub fn bpe_decode(subwords: &Sentence) -> Sentence {
    let mut words = Vec::new();
    let mut pending = String::new();
    for unit in subwords {
        if is_reserved(unit) {
            if !pending.is_empty() {
                words.push(std::mem::take(&mut pending));
            }
            words.push(unit.clone());
        } else if let Some(stem) = unit.strip_suffix(END_OF_WORD) {
            pending.push_str(stem);
            if !pending.is_empty() {
                words.push(std::mem::take(&mut pending));
            }
        } else {
            pending.push_str(unit);
        }
    }
    if !pending.is_empty() {
        words.push(pending);
    }
    Sentence::from_valid(words)
}

/// Bijection between subword symbols and integer ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<String>,
    id_of: HashMap<String, u32>,
}

impl Vocabulary {
    fn from_symbols(symbols: Vec<String>) -> Result<Self> {
        let mut id_of = HashMap::with_capacity(symbols.len());
        for (i, s) in symbols.iter().enumerate() {
            if id_of.insert(s.clone(), i as u32).is_some() {
                return Err(Error::Input(format!("duplicate vocabulary symbol {s}")));
            }
        }
        for (i, r) in RESERVED.iter().enumerate() {
            if id_of.get(*r) != Some(&(i as u32)) {
                return Err(Error::Input(format!(
                    "reserved symbol {r} must have id {i}"
                )));
            }
        }
        Ok(Self { symbols, id_of })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn id(&self, symbol: &str) -> Option<u32> {
        self.id_of.get(symbol).copied()
    }

    pub fn symbol(&self, id: u32) -> Option<&str> {
        self.symbols.get(id as usize).map(String::as_str)
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn mask_id(&self) -> u32 {
        MASK_ID
    }

    /// Maps subword units to ids; unknown units become `<unk>`.
    pub fn encode(&self, units: &Sentence) -> Vec<u32> {
        units.iter().map(|u| self.id(u).unwrap_or(UNK_ID)).collect()
    }

    /// Maps ids back to units, stopping at `</s>` and skipping `<pad>`/`<s>`.
    pub fn decode(&self, ids: &[u32]) -> Sentence {
        let mut out = Vec::new();
        for &id in ids {
            match id {
                EOS_ID => break,
                PAD_ID | BOS_ID => continue,
                _ => out.push(self.symbol(id).unwrap_or(UNK).to_owned()),
            }
        }
        Sentence::from_valid(out)
    }

    /// Writes `symbol<TAB>id` lines in id order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (i, s) in self.symbols.iter().enumerate() {
            out.push_str(&format!("{s}\t{i}\n"));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let bad = |message: &str| Error::Format {
                path: path.to_owned(),
                line: i + 1,
                message: message.to_owned(),
            };
            let (sym, id) = line
                .split_once('\t')
                .ok_or_else(|| bad("expected symbol<TAB>id"))?;
            let id: usize = id.trim().parse().map_err(|_| bad("bad id"))?;
            entries.push((id, sym.to_owned()));
        }
        entries.sort();
        if entries.iter().enumerate().any(|(i, (id, _))| *id != i) {
            return Err(Error::Format {
                path: path.to_owned(),
                line: 0,
                message: "ids must be contiguous from 0".into(),
            });
        }
        Self::from_symbols(entries.into_iter().map(|(_, s)| s).collect())
    }
}

/// Builds the joint vocabulary: reserved symbols first, then every observed
/// unit in lexicographic order.
pub fn build_vocab<'a>(subword_corpus: impl IntoIterator<Item = &'a Sentence>) -> Vocabulary {
    let mut seen: std::collections::BTreeSet<&str> = std::collections::BTreeSet::new();
    for s in subword_corpus {
        for u in s {
            if !is_reserved(u) {
                seen.insert(u);
            }
        }
    }
    let symbols = RESERVED
        .iter()
        .map(|s| s.to_string())
        .chain(seen.into_iter().map(str::to_owned))
        .collect();
    Vocabulary::from_symbols(symbols)
        .expect("reserved symbols are placed first and units are unique")
}
