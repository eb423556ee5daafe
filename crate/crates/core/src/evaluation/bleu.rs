use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Smoothing {
    /// Plain clipped precisions; any zero precision gives BLEU 0.
    #[default]
    None,
    /// `(m + 1) / (t + 1)` for orders 2..=4.
    AddOne,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    /// On a 0..=100 scale.
    pub bleu: f64,
    pub precisions: [f64; MAX_ORDER],
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl fmt::Display for BleuReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = self.precisions.map(|p| p * 100.0);
        write!(
            f,
            "BLEU = {:.2}, {:.1}/{:.1}/{:.1}/{:.1} (BP = {:.3}, ratio = {:.3}, hyp_len = {}, ref_len = {})",
            self.bleu,
            p[0],
            p[1],
            p[2],
            p[3],
            self.brevity_penalty,
            if self.ref_len == 0 { 0.0 } else { self.hyp_len as f64 / self.ref_len as f64 },
            self.hyp_len,
            self.ref_len
        )
    }
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts
                .entry(w.iter().map(AsRef::as_ref).collect())
                .or_insert(0) += 1;
        }
    }
    counts
}

#[derive(Debug, Default, Clone, Copy)]
struct Stats {
    matches: [usize; MAX_ORDER],
    totals: [usize; MAX_ORDER],
    hyp_len: usize,
    ref_len: usize,
}

fn segment_stats<S: AsRef<str>, T: AsRef<str>>(hyp: &[S], reference: &[T]) -> Stats {
    let mut st = Stats {
        hyp_len: hyp.len(),
        ref_len: reference.len(),
        ..Default::default()
    };
    for n in 1..=MAX_ORDER {
        let h = ngram_counts(hyp, n);
        let r = ngram_counts(reference, n);
        st.totals[n - 1] = hyp.len().saturating_sub(n - 1);
        st.matches[n - 1] = h
            .iter()
            .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
            .sum();
    }
    st
}

fn report(st: Stats, smoothing: Smoothing) -> BleuReport {
    let mut precisions = [0.0; MAX_ORDER];
    let mut log_sum = 0.0;
    let mut orders = 0;
    let mut zero = false;
    for n in 0..MAX_ORDER {
        let (m, t) = (st.matches[n] as f64, st.totals[n] as f64);
        let p = match smoothing {
            Smoothing::AddOne if n > 0 => (m + 1.0) / (t + 1.0),
            _ if st.totals[n] == 0 => continue,
            _ => m / t,
        };
        precisions[n] = p;
        if p == 0.0 {
            zero = true;
        } else {
            log_sum += p.ln();
        }
        orders += 1;
    }
    let brevity_penalty = if st.hyp_len == 0 {
        0.0
    } else if st.hyp_len >= st.ref_len {
        1.0
    } else {
        (1.0 - st.ref_len as f64 / st.hyp_len as f64).exp()
    };
    let bleu = if zero || orders == 0 || st.hyp_len == 0 {
        0.0
    } else {
        100.0 * brevity_penalty * (log_sum / orders as f64).exp()
    };
    BleuReport {
        bleu,
        precisions,
        matches: st.matches,
        totals: st.totals,
        brevity_penalty,
        hyp_len: st.hyp_len,
        ref_len: st.ref_len,
    }
}

/// Corpus-level BLEU-4 against one reference per segment. Orders for which
/// the hypotheses contain no n-grams at all are left out of the geometric mean.
pub fn corpus_bleu<H, R, S, T>(
    hypotheses: &[H],
    references: &[R],
    smoothing: Smoothing,
) -> Result<BleuReport>
where
    H: AsRef<[S]>,
    R: AsRef<[T]>,
    S: AsRef<str>,
    T: AsRef<str>,
{
    if hypotheses.len() != references.len() {
        return Err(Error::Input(format!(
            "{} hypotheses but {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut total = Stats::default();
    for (h, r) in hypotheses.iter().zip(references) {
        let st = segment_stats(h.as_ref(), r.as_ref());
        for n in 0..MAX_ORDER {
            total.matches[n] += st.matches[n];
            total.totals[n] += st.totals[n];
        }
        total.hyp_len += st.hyp_len;
        total.ref_len += st.ref_len;
    }
    Ok(report(total, smoothing))
}

/// Single-segment BLEU on the 0..=100 scale.
pub fn sentence_bleu<S: AsRef<str>, T: AsRef<str>>(
    hyp: &[S],
    reference: &[T],
    smoothing: Smoothing,
) -> f64 {
    report(segment_stats(hyp, reference), smoothing).bleu
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn identity_is_100() {
        let h = vec![toks("the cat sat on the mat"), toks("a b")];
        let r = corpus_bleu(&h, &h, Smoothing::None).unwrap();
        assert!((r.bleu - 100.0).abs() < 1e-9);
        assert_eq!(r.brevity_penalty, 1.0);
    }

    #[test]
    fn clipped_unigram_precision() {
        let h = vec![toks("the the the the the the the")];
        let r = vec![toks("the cat is on the mat")];
        let rep = corpus_bleu(&h, &r, Smoothing::None).unwrap();
        assert_eq!((rep.matches[0], rep.totals[0]), (2, 7));
        assert!((rep.precisions[0] - 2.0 / 7.0).abs() < 1e-15);
        assert_eq!(rep.matches[1], 0);
        assert_eq!(rep.bleu, 0.0);
    }

    #[test]
    fn brevity_penalty_fixture() {
        let h = vec![toks("a b c")];
        let r = vec![toks("a b c a b c")];
        let rep = corpus_bleu(&h, &r, Smoothing::None).unwrap();
        assert!((rep.brevity_penalty - (-1f64).exp()).abs() < 1e-9);
        // The 4-gram order is absent from the hypothesis; the rest are perfect.
        assert!((rep.bleu - 100.0 * (-1f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn geometric_mean_identity() {
        let h = vec![toks("a b c d e f g"), toks("x y z w v")];
        let r = vec![toks("a b c d x f g h"), toks("x y z w q")];
        let rep = corpus_bleu(&h, &r, Smoothing::None).unwrap();
        assert!(rep.precisions.iter().all(|&p| p > 0.0));
        let gm = (rep.precisions.iter().map(|p| p.ln()).sum::<f64>() / 4.0).exp();
        assert!((rep.bleu - rep.brevity_penalty * gm * 100.0).abs() < 1e-9);
        // Hand counts: 12 hypothesis unigrams, 10 matched.
        assert_eq!((rep.matches[0], rep.totals[0]), (10, 12));
    }

    #[test]
    fn add_one_smoothing() {
        let h = vec![toks("a b c")];
        let r = vec![toks("a c b")];
        let plain = corpus_bleu(&h, &r, Smoothing::None).unwrap();
        assert_eq!(plain.bleu, 0.0);
        let s = corpus_bleu(&h, &r, Smoothing::AddOne).unwrap();
        // Bigrams 0/2, trigrams 0/1, no 4-grams.
        assert_eq!(s.precisions, [1.0, 1.0 / 3.0, 0.5, 1.0]);
        assert!((s.bleu - 100.0 * (1.0f64 / 6.0).powf(0.25)).abs() < 1e-9);
    }

    #[test]
    fn count_mismatch_is_error() {
        let h = vec![toks("a")];
        let r: Vec<Vec<String>> = vec![];
        assert!(matches!(
            corpus_bleu(&h, &r, Smoothing::None),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn empty_hypothesis_scores_zero() {
        let h = vec![Vec::<String>::new()];
        let r = vec![toks("a b")];
        assert_eq!(corpus_bleu(&h, &r, Smoothing::AddOne).unwrap().bleu, 0.0);
    }

    fn corpus() -> impl Strategy<Value = Vec<(Vec<String>, Vec<String>)>> {
        let sent = prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d"]), 1..9)
            .prop_map(|v| v.into_iter().map(String::from).collect::<Vec<_>>());
        prop::collection::vec((sent.clone(), sent), 1..12)
    }

    proptest! {
        #[test]
        fn permutation_invariant(c in corpus(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let (h, r): (Vec<_>, Vec<_>) = c.iter().cloned().unzip();
            let base = corpus_bleu(&h, &r, Smoothing::None).unwrap();
            let mut idx: Vec<usize> = (0..c.len()).collect();
            idx.shuffle(&mut crate::rng::keyed_rng(seed, 0));
            let h2: Vec<_> = idx.iter().map(|&i| h[i].clone()).collect();
            let r2: Vec<_> = idx.iter().map(|&i| r[i].clone()).collect();
            let other = corpus_bleu(&h2, &r2, Smoothing::None).unwrap();
            prop_assert_eq!(base, other);
        }

        #[test]
        fn self_bleu_is_100(c in corpus()) {
            let (h, _): (Vec<_>, Vec<_>) = c.into_iter().unzip();
            let rep = corpus_bleu(&h, &h, Smoothing::None).unwrap();
            prop_assert!((rep.bleu - 100.0).abs() < 1e-9);
        }

        #[test]
        fn bounded(c in corpus()) {
            let (h, r): (Vec<_>, Vec<_>) = c.into_iter().unzip();
            for s in [Smoothing::None, Smoothing::AddOne] {
                let b = corpus_bleu(&h, &r, s).unwrap().bleu;
                prop_assert!((0.0..=100.0 + 1e-9).contains(&b));
            }
        }
    }
}
