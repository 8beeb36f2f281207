//! Tokenization, vocabulary, dataset files and the synthetic corpus.

mod io;
mod synthetic;
mod vocab;

pub use io::{
    load_nli_tsv, load_sts_tsv, load_unlabeled, parse_nli, parse_sts, parse_unlabeled, write_nli_tsv, write_sts_tsv,
    write_unlabeled, LineError,
};
pub use synthetic::{bag_of_words_cosine, make_synthetic_corpus, SyntheticCorpus, SyntheticSizes};
pub use vocab::{build_vocab, normalize, tokenize, Vocab, CLS, PAD, SEP, SPECIAL_TOKENS, UNK};

use rand::seq::index;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {} malformed line(s): {}", errors.len(), summarize(errors))]
    Parse { path: PathBuf, errors: Vec<LineError> },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("vocabulary is frozen; cannot insert {0:?}")]
    FrozenVocab(String),
    #[error("max_len must be at least 3, got {0}")]
    MaxLen(usize),
    #[error("{0}")]
    Invalid(String),
}

fn summarize(errors: &[LineError]) -> String {
    let shown: Vec<String> = errors.iter().take(3).map(ToString::to_string).collect();
    let more = if errors.len() > 3 { format!("; ... {} more", errors.len() - 3) } else { String::new() };
    format!("{}{more}", shown.join("; "))
}

/// STS-style sentence pair with a gold similarity in `[0, 5]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SentencePairExample {
    pub sentence_a: String,
    pub sentence_b: String,
    pub gold: f32,
}

impl SentencePairExample {
    pub fn new(sentence_a: impl Into<String>, sentence_b: impl Into<String>, gold: f32) -> Result<Self, DataError> {
        if !(0.0..=5.0).contains(&gold) {
            return Err(DataError::Invalid(format!("gold score {gold} outside [0, 5]")));
        }
        Ok(Self { sentence_a: sentence_a.into(), sentence_b: sentence_b.into(), gold })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NliLabel {
    Contradiction,
    Entailment,
    Neutral,
}

impl NliLabel {
    pub const ALL: [NliLabel; 3] = [NliLabel::Contradiction, NliLabel::Entailment, NliLabel::Neutral];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NliLabel::Contradiction => "contradiction",
            NliLabel::Entailment => "entailment",
            NliLabel::Neutral => "neutral",
        }
    }
}

impl fmt::Display for NliLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NliLabel {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "contradiction" => Ok(NliLabel::Contradiction),
            "entailment" => Ok(NliLabel::Entailment),
            "neutral" => Ok(NliLabel::Neutral),
            other => Err(DataError::Invalid(format!("unknown NLI label {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NliExample {
    pub premise: String,
    pub hypothesis: String,
    pub label: NliLabel,
}

/// Token ids of one sentence framed by `[CLS]` ... `[SEP]`, unpadded.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EncodedSentence {
    pub token_ids: Vec<usize>,
    pub position_ids: Vec<usize>,
    pub attention_mask: Vec<bool>,
}

impl EncodedSentence {
    pub fn from_ids(token_ids: Vec<usize>) -> Self {
        let n = token_ids.len();
        Self { token_ids, position_ids: (0..n).collect(), attention_mask: vec![true; n] }
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn real_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m).count()
    }

    /// Extends with `[PAD]` up to `len`. Padded positions keep increasing
    /// position ids and a zero mask.
    pub fn padded(&self, len: usize) -> Self {
        let mut out = self.clone();
        for p in self.len()..len {
            out.token_ids.push(PAD);
            out.position_ids.push(p);
            out.attention_mask.push(false);
        }
        out
    }
}

/// Sentences padded to a common length and flattened row-major (`B * L`).
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedBatch {
    pub token_ids: Vec<usize>,
    pub position_ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub seq_len: usize,
    pub batch_size: usize,
}

impl EncodedBatch {
    /// Pads to the longest sentence in the batch (not to `max_len`).
    pub fn pad(sentences: &[EncodedSentence]) -> Self {
        let seq_len = sentences.iter().map(EncodedSentence::len).max().unwrap_or(0);
        Self::pad_to(sentences, seq_len)
    }

    pub fn pad_to(sentences: &[EncodedSentence], seq_len: usize) -> Self {
        let mut batch = Self {
            token_ids: Vec::with_capacity(sentences.len() * seq_len),
            position_ids: Vec::with_capacity(sentences.len() * seq_len),
            mask: Vec::with_capacity(sentences.len() * seq_len),
            seq_len,
            batch_size: sentences.len(),
        };
        for s in sentences {
            let p = s.padded(seq_len);
            batch.token_ids.extend(p.token_ids);
            batch.position_ids.extend(p.position_ids);
            batch.mask.extend(p.attention_mask);
        }
        batch
    }
}

/// Uniform subsample without replacement, keeping pool order.
///
/// `n >= pool.len()` returns the whole pool (with a warning when strictly larger).
pub fn subsample<T: Clone>(pool: &[T], n: usize, seed: u64) -> Vec<T> {
    if n >= pool.len() {
        if n > pool.len() {
            log::warn!("requested {n} samples from a pool of {}; using the whole pool", pool.len());
        }
        return pool.to_vec();
    }
    let mut rng = crate::rng::substream(seed, "subsample", &[n as u64]);
    let mut picked = index::sample(&mut rng, pool.len(), n).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| pool[i].clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subsample_contracts() {
        let pool: Vec<u32> = (0..50).collect();
        assert_eq!(subsample(&pool, 50, 3), pool);
        assert_eq!(subsample(&pool, 80, 3), pool);
        assert_eq!(subsample(&pool, 7, 3), subsample(&pool, 7, 3));
        assert_eq!(subsample(&pool, 1, 3).len(), 1);
        let s = subsample(&pool, 10, 9);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn padding_marks_only_real_tokens() {
        let s = EncodedSentence::from_ids(vec![CLS, 7, SEP]);
        let b = EncodedBatch::pad(&[s.clone(), EncodedSentence::from_ids(vec![CLS, SEP])]);
        assert_eq!(b.seq_len, 3);
        assert_eq!(b.mask, vec![true, true, true, true, true, false]);
        assert_eq!(b.token_ids[5], PAD);
    }

    #[test]
    fn gold_outside_range_is_rejected() {
        assert!(SentencePairExample::new("a", "b", 5.5).is_err());
        assert!(SentencePairExample::new("a", "b", 0.0).is_ok());
    }
}
