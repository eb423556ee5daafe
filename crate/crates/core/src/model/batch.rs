use crate::error::{Error, Result};
use crate::subword::{BOS_ID, EOS_ID, PAD_ID};

/// Padded id matrices for one training or scoring batch.
///
/// The encoder sees `input + </s>`; the decoder is fed `<s> + output` and
/// predicts `output + </s>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceBatch {
    pub batch: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    /// `batch × src_len`, row-major.
    pub src_ids: Vec<u32>,
    pub src_lengths: Vec<usize>,
    /// `batch × tgt_len` decoder inputs.
    pub dec_in: Vec<u32>,
    /// `batch × tgt_len` prediction targets, `PAD` past each length.
    pub dec_out: Vec<u32>,
    pub tgt_lengths: Vec<usize>,
}

impl SequenceBatch {
    /// Builds a batch from `(input, output)` id sequences, truncating anything
    /// longer than `max_positions` (with a warning).
    pub fn from_pairs(pairs: &[(&[u32], &[u32])], max_positions: usize) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        if max_positions < 2 {
            return Err(Error::Config("max_positions must be at least 2".into()));
        }
        let clip = |s: &[u32]| -> usize {
            if s.len() + 1 > max_positions {
                log::warn!(
                    "truncating sequence of {} tokens to {}",
                    s.len(),
                    max_positions - 1
                );
                max_positions - 1
            } else {
                s.len()
            }
        };
        let src_lengths: Vec<usize> = pairs.iter().map(|(s, _)| clip(s) + 1).collect();
        let tgt_lengths: Vec<usize> = pairs.iter().map(|(_, t)| clip(t) + 1).collect();
        let src_len = *src_lengths.iter().max().expect("non-empty");
        let tgt_len = *tgt_lengths.iter().max().expect("non-empty");
        let batch = pairs.len();

        let mut src_ids = vec![PAD_ID; batch * src_len];
        let mut dec_in = vec![PAD_ID; batch * tgt_len];
        let mut dec_out = vec![PAD_ID; batch * tgt_len];
        for (b, (s, t)) in pairs.iter().enumerate() {
            let sl = src_lengths[b] - 1;
            let row = &mut src_ids[b * src_len..(b + 1) * src_len];
            row[..sl].copy_from_slice(&s[..sl]);
            row[sl] = EOS_ID;

            let tl = tgt_lengths[b] - 1;
            let din = &mut dec_in[b * tgt_len..(b + 1) * tgt_len];
            din[0] = BOS_ID;
            din[1..=tl].copy_from_slice(&t[..tl]);
            let dout = &mut dec_out[b * tgt_len..(b + 1) * tgt_len];
            dout[..tl].copy_from_slice(&t[..tl]);
            dout[tl] = EOS_ID;
        }
        Ok(Self {
            batch,
            src_len,
            tgt_len,
            src_ids,
            src_lengths,
            dec_in,
            dec_out,
            tgt_lengths,
        })
    }

    /// Fails if any id is outside the vocabulary.
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        let bad = self
            .src_ids
            .iter()
            .chain(&self.dec_in)
            .chain(&self.dec_out)
            .find(|&&id| id as usize >= vocab_size);
        match bad {
            Some(id) => Err(Error::Input(format!(
                "token id {id} out of range for vocabulary of {vocab_size}"
            ))),
            None => Ok(()),
        }
    }

    /// Non-padding target positions.
    pub fn target_tokens(&self) -> usize {
        self.tgt_lengths.iter().sum()
    }
}
