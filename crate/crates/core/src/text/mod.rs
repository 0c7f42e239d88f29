//! Corpus ingestion: CSV loading, tokenization, vocabulary, and encoding.

mod cache;
mod csv_format;
mod tokenize;
mod vocab;

use serde::Serialize;

pub use cache::{read_cache, write_cache, CachedCorpus, CACHE_MAGIC, CACHE_VERSION};
pub use csv_format::{load_csv, parse_csv, RawDocument};
pub use tokenize::tokenize;
pub use vocab::{Vocabulary, PAD, PAD_TOKEN, UNK, UNK_TOKEN};

use crate::error::{Error, Result};

pub const DEFAULT_MIN_COUNT: usize = 2;
pub const DEFAULT_MAX_LEN: usize = 256;

/// Padded index sequence with its class label.
///
/// The first and last `radius` entries are `PAD`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedDocument {
    indices: Vec<usize>,
    label: usize,
    radius: usize,
}

impl EncodedDocument {
    pub fn new(indices: Vec<usize>, label: usize, radius: usize) -> Result<Self> {
        if indices.len() < 2 * radius {
            return Err(Error::dim(
                "encoded document",
                format!("{} indices cannot hold 2·{radius} padding", indices.len()),
            ));
        }
        let n = indices.len();
        if indices[..radius].iter().chain(&indices[n - radius..]).any(|&i| i != PAD) {
            return Err(Error::dim("encoded document", "missing PAD border"));
        }
        Ok(Self {
            indices,
            label,
            radius,
        })
    }

    /// Encodes `tokens` and wraps them with `label`.
    pub fn from_tokens<S: AsRef<str>>(
        tokens: &[S],
        vocab: &Vocabulary,
        radius: usize,
        label: usize,
    ) -> Self {
        Self {
            indices: encode(tokens, vocab, radius),
            label,
            radius,
        }
    }

    /// Full padded sequence.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// Indices of the real tokens, padding stripped.
    pub fn content(&self) -> &[usize] {
        &self.indices[self.radius..self.indices.len() - self.radius]
    }

    pub fn label(&self) -> usize {
        self.label
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    /// Number of unpadded positions.
    pub fn len(&self) -> usize {
        self.indices.len() - 2 * self.radius
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn max_index(&self) -> usize {
        self.indices.iter().copied().max().unwrap_or(PAD)
    }
}

/// Maps tokens to indices (`UNK` for unknown ones) and adds `radius`
/// `PAD` entries at each end.
pub fn encode<S: AsRef<str>>(tokens: &[S], vocab: &Vocabulary, radius: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(tokens.len() + 2 * radius);
    out.extend(std::iter::repeat(PAD).take(radius));
    out.extend(tokens.iter().map(|t| vocab.id(t.as_ref())));
    out.extend(std::iter::repeat(PAD).take(radius));
    out
}

/// Tokenizes and encodes raw documents, truncating each to `max_len` tokens.
///
/// Documents with no tokens are skipped; the second value counts them.
pub fn encode_corpus(
    raw: &[RawDocument],
    vocab: &Vocabulary,
    radius: usize,
    max_len: usize,
) -> (Vec<EncodedDocument>, usize) {
    let mut skipped = 0;
    let docs = raw
        .iter()
        .filter_map(|doc| {
            let mut tokens = tokenize(&doc.text);
            tokens.truncate(max_len);
            if tokens.is_empty() {
                skipped += 1;
                return None;
            }
            Some(EncodedDocument::from_tokens(&tokens, vocab, radius, doc.label))
        })
        .collect();
    (docs, skipped)
}

/// Builds the vocabulary from the training documents only.
pub fn build_vocab_from_raw(raw: &[RawDocument], min_count: usize, max_len: usize) -> Result<Vocabulary> {
    let tokenized: Vec<Vec<String>> = raw
        .iter()
        .map(|d| {
            let mut t = tokenize(&d.text);
            t.truncate(max_len);
            t
        })
        .collect();
    Vocabulary::build(&tokenized, min_count)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorpusStats {
    pub documents: usize,
    pub class_histogram: Vec<usize>,
    pub vocab_size: usize,
    pub mean_len: f64,
    pub max_len: usize,
}

impl CorpusStats {
    pub fn compute(docs: &[EncodedDocument], vocab_size: usize, classes: usize) -> Self {
        let classes = docs
            .iter()
            .map(|d| d.label() + 1)
            .max()
            .unwrap_or(0)
            .max(classes);
        let mut class_histogram = vec![0; classes];
        for d in docs {
            class_histogram[d.label()] += 1;
        }
        let total: usize = docs.iter().map(EncodedDocument::len).sum();
        Self {
            documents: docs.len(),
            class_histogram,
            vocab_size,
            mean_len: if docs.is_empty() {
                0.0
            } else {
                total as f64 / docs.len() as f64
            },
            max_len: docs.iter().map(EncodedDocument::len).max().unwrap_or(0),
        }
    }
}
