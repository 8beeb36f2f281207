use super::{DataError, EncodedSentence};
use std::collections::HashMap;
use std::path::Path;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const SPECIAL_TOKENS: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

/// Token to id map with fixed special ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    frozen: bool,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    /// Specials only, open for insertion.
    pub fn new() -> Self {
        let mut v = Self { tokens: Vec::new(), index: HashMap::new(), frozen: false };
        for s in SPECIAL_TOKENS {
            v.push(s);
        }
        v
    }

    fn push(&mut self, token: &str) -> usize {
        let id = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    /// Returns the id of `token`, inserting it if new.
    pub fn insert(&mut self, token: &str) -> Result<usize, DataError> {
        if let Some(&id) = self.index.get(token) {
            return Ok(id);
        }
        if self.frozen {
            return Err(DataError::FrozenVocab(token.to_string()));
        }
        Ok(self.push(token))
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line, in id order.
    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let mut out = self.tokens.join("\n");
        out.push('\n');
        std::fs::write(path, out).map_err(|source| DataError::Io { path: path.to_path_buf(), source })
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text =
            std::fs::read_to_string(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })?;
        let lines: Vec<&str> = text.lines().map(|l| l.trim_end_matches('\r')).collect();
        if lines.len() < SPECIAL_TOKENS.len() || lines[..SPECIAL_TOKENS.len()] != SPECIAL_TOKENS {
            return Err(DataError::Invalid(format!("{}: vocabulary must start with the special tokens", path.display())));
        }
        let mut v = Self::new();
        for tok in &lines[SPECIAL_TOKENS.len()..] {
            v.insert(tok)?;
        }
        v.freeze();
        Ok(v)
    }
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation() || matches!(c, '“' | '”' | '‘' | '’' | '«' | '»' | '…' | '—' | '–' | '¿' | '¡')
}

/// Lowercases, splits on Unicode whitespace and strips edge punctuation.
pub fn normalize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(is_punct).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

/// `[CLS] tokens... [SEP]`, keeping at most `max_len - 2` content tokens.
pub fn tokenize(text: &str, vocab: &Vocab, max_len: usize) -> Result<EncodedSentence, DataError> {
    if max_len < 3 {
        return Err(DataError::MaxLen(max_len));
    }
    let mut ids = Vec::with_capacity(max_len);
    ids.push(super::CLS);
    ids.extend(normalize(text).iter().take(max_len - 2).map(|t| vocab.id_or_unk(t)));
    ids.push(super::SEP);
    Ok(EncodedSentence::from_ids(ids))
}

/// Tokens with `count >= min_count`, ordered by count descending then token.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], min_count: usize) -> Result<Vocab, DataError> {
    if corpus.is_empty() {
        return Err(DataError::EmptyCorpus);
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for text in corpus {
        for tok in normalize(text.as_ref()) {
            *counts.entry(tok).or_default() += 1;
        }
    }
    let mut entries: Vec<(String, usize)> =
        counts.into_iter().filter(|(t, c)| *c >= min_count.max(1) && !SPECIAL_TOKENS.contains(&t.as_str())).collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut vocab = Vocab::new();
    for (tok, _) in entries {
        vocab.insert(&tok)?;
    }
    vocab.freeze();
    Ok(vocab)
}
