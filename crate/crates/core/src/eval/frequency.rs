use crate::data::{tokenize, DataError, Vocab, PAD};
use std::collections::{HashMap, HashSet};
use std::path::Path;

/// Token id occurrence counts over a reference corpus, most frequent first.
///
/// Counts are taken over tokenized sentences, so `[CLS]` and `[SEP]` are
/// counted once per sentence. Padding never occurs in unpadded sentences and
/// is never counted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrequencyTable {
    entries: Vec<(usize, u64)>,
}

impl FrequencyTable {
    pub fn from_corpus<S: AsRef<str>>(texts: &[S], vocab: &Vocab, max_len: usize) -> Result<Self, DataError> {
        let mut counts: HashMap<usize, u64> = HashMap::new();
        for t in texts {
            for id in tokenize(t.as_ref(), vocab, max_len)?.token_ids {
                if id != PAD {
                    *counts.entry(id).or_default() += 1;
                }
            }
        }
        Ok(Self::from_counts(counts))
    }

    fn from_counts(counts: HashMap<usize, u64>) -> Self {
        let mut entries: Vec<(usize, u64)> = counts.into_iter().filter(|&(_, c)| c > 0).collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        Self { entries }
    }

    /// `(token id, count)` sorted by count descending, then id ascending.
    pub fn entries(&self) -> &[(usize, u64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.entries.iter().map(|e| e.1).sum()
    }

    /// Ids of the `k` most frequent tokens.
    pub fn top_k(&self, k: usize) -> HashSet<usize> {
        self.entries.iter().take(k).map(|e| e.0).collect()
    }

    /// `token<TAB>count` lines in table order.
    pub fn to_tsv(&self, vocab: &Vocab) -> String {
        self.entries
            .iter()
            .map(|&(id, c)| format!("{}\t{c}\n", vocab.token(id).unwrap_or("[UNK]")))
            .collect()
    }

    pub fn save(&self, path: &Path, vocab: &Vocab) -> Result<(), DataError> {
        std::fs::write(path, self.to_tsv(vocab)).map_err(|source| DataError::Io { path: path.to_path_buf(), source })
    }

    /// Reads a `token<TAB>count` file; tokens missing from `vocab` are skipped.
    pub fn load(path: &Path, vocab: &Vocab) -> Result<Self, DataError> {
        let text =
            std::fs::read_to_string(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })?;
        let mut counts = HashMap::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let (tok, count) = line
                .split_once('\t')
                .and_then(|(t, c)| c.trim().parse::<u64>().ok().map(|c| (t, c)))
                .ok_or_else(|| DataError::Invalid(format!("{}: line {}: expected token<TAB>count", path.display(), i + 1)))?;
            if let Some(id) = vocab.id(tok) {
                *counts.entry(id).or_default() += count;
            }
        }
        Ok(Self::from_counts(counts))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_vocab, CLS, SEP};

    #[test]
    fn specials_lead_and_ties_break_by_id() {
        let corpus = ["b a", "a c", "c b"];
        let vocab = build_vocab(&corpus, 1).unwrap();
        let table = FrequencyTable::from_corpus(&corpus, &vocab, 16).unwrap();
        let ids: Vec<usize> = table.entries().iter().map(|e| e.0).collect();
        // CLS and SEP appear 3 times each, every word twice.
        assert_eq!(&ids[..2], &[CLS, SEP]);
        assert!(ids[2..].windows(2).all(|w| w[0] < w[1]));
        assert_eq!(table.total(), 12);
        assert_eq!(table.top_k(2), [CLS, SEP].into_iter().collect());
    }

    #[test]
    fn save_load_round_trip() {
        let corpus = ["the cat", "the dog the end"];
        let vocab = build_vocab(&corpus, 1).unwrap();
        let table = FrequencyTable::from_corpus(&corpus, &vocab, 16).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("freq.tsv");
        table.save(&p, &vocab).unwrap();
        assert_eq!(FrequencyTable::load(&p, &vocab).unwrap(), table);
        assert!(std::fs::read_to_string(&p).unwrap().starts_with("the\t3\n"));
    }
}
