use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Token ↔ index map with reserved padding and unknown entries.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    index: HashMap<String, usize>,
    tokens: Vec<String>,
}

impl Vocabulary {
    /// Builds a vocabulary from tokenized training documents.
    ///
    /// Tokens seen fewer than `min_count` times are dropped. The rest are
    /// numbered by descending frequency, ties broken by first appearance,
    /// after the reserved `PAD` and `UNK` entries.
    pub fn build<S: AsRef<str>>(corpus: &[Vec<S>], min_count: usize) -> Result<Self> {
        if corpus.iter().all(|doc| doc.is_empty()) {
            return Err(Error::EmptyCorpus);
        }
        let min_count = min_count.max(1);
        // token -> (count, first appearance)
        let mut counts: HashMap<&str, (usize, usize)> = HashMap::new();
        let mut seen = 0;
        for tok in corpus.iter().flatten() {
            let tok = tok.as_ref();
            if tok == PAD_TOKEN || tok == UNK_TOKEN {
                continue;
            }
            counts
                .entry(tok)
                .and_modify(|e| e.0 += 1)
                .or_insert_with(|| {
                    seen += 1;
                    (1, seen)
                });
        }
        let mut kept: Vec<(&str, usize, usize)> = counts
            .into_iter()
            .filter(|(_, (count, _))| *count >= min_count)
            .map(|(tok, (count, first))| (tok, count, first))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
        Ok(Self::from_tokens(
            kept.into_iter().map(|(tok, _, _)| tok.to_string()),
        ))
    }

    /// Rebuilds a vocabulary from its corpus tokens in index order
    /// (reserved entries excluded).
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Self {
        let mut all = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        all.extend(tokens);
        let index = all.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { index, tokens: all }
    }

    /// Vocabulary size including the reserved entries.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Index of `token`, or `UNK` for out-of-vocabulary tokens.
    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK)
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    /// Corpus tokens in index order, without the reserved entries.
    pub fn corpus_tokens(&self) -> &[String] {
        &self.tokens[2..]
    }

    pub fn decode(&self, indices: &[usize]) -> Vec<&str> {
        indices
            .iter()
            .map(|&i| self.token(i).unwrap_or(UNK_TOKEN))
            .collect()
    }

    /// One token per line, reserved entries excluded.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for tok in self.corpus_tokens() {
            out.push_str(tok);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Self {
        Self::from_tokens(text.lines().filter(|l| !l.is_empty()).map(str::to_string))
    }
}
