//! Seeded toy corpora for desk-scale experiments.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::text::{EncodedDocument, Vocabulary};

/// Documents with their token strings and the vocabulary used to encode them.
#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub vocab: Vocabulary,
    pub docs: Vec<EncodedDocument>,
    pub texts: Vec<Vec<String>>,
}

impl SyntheticCorpus {
    fn encode(vocab: &Vocabulary, texts: Vec<Vec<String>>, labels: Vec<usize>, radius: usize) -> Self {
        let docs = texts
            .iter()
            .zip(labels)
            .map(|(t, y)| EncodedDocument::from_tokens(t, vocab, radius, y))
            .collect();
        Self { vocab: vocab.clone(), docs, texts }
    }
}

/// Two classes, each written only with its own set of keywords.
pub fn keyword_corpus(docs: usize, radius: usize, seed: u64) -> SyntheticCorpus {
    const KEYWORDS: usize = 8;
    let words: [Vec<String>; 2] =
        [0, 1].map(|class| (0..KEYWORDS).map(|k| format!("k{class}w{k}")).collect());
    let vocab = Vocabulary::from_tokens(words.iter().flatten().cloned());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut texts = Vec::with_capacity(docs);
    let mut labels = Vec::with_capacity(docs);
    for i in 0..docs {
        let label = i % 2;
        let len = rng.gen_range(4..=10);
        texts.push((0..len).map(|_| words[label].choose(&mut rng).unwrap().clone()).collect());
        labels.push(label);
    }
    SyntheticCorpus::encode(&vocab, texts, labels, radius)
}

/// Shape of the ambiguity corpus.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AmbiguityConfig {
    pub train_docs: usize,
    pub test_docs: usize,
    pub fillers: usize,
    pub doc_len: usize,
    /// Distance from the pivot (and decoy) to the word that decides the label.
    pub gap: usize,
    pub radius: usize,
}

impl Default for AmbiguityConfig {
    fn default() -> Self {
        Self { train_docs: 400, test_docs: 400, fillers: 40, doc_len: 12, gap: 2, radius: 1 }
    }
}

pub const PIVOT: &str = "like";
pub const DECOY: &str = "as";
pub const POSITIVE: [&str; 4] = ["good", "great", "nice", "fine"];
pub const NEGATIVE: [&str; 4] = ["bad", "poor", "awful", "weak"];

/// Corpus where the label is decided by the context of one pivot word.
///
/// Every document holds the pivot and a decoy, each followed `gap`
/// positions later by one positive and one negative word (in random
/// assignment), with random filler words everywhere else. The label is 0
/// when the word after the pivot is positive and 1 otherwise, so the
/// multiset of words carries no information; only the pairing does.
/// Returns `(train, test)` sharing one vocabulary.
pub fn ambiguity_corpus(cfg: AmbiguityConfig, seed: u64) -> (SyntheticCorpus, SyntheticCorpus) {
    assert!(cfg.doc_len >= 2 * (cfg.gap + 1), "documents too short for two patterns");
    let fillers: Vec<String> = (0..cfg.fillers).map(|i| format!("f{i}")).collect();
    let mut vocab_words = vec![PIVOT.to_string(), DECOY.to_string()];
    vocab_words.extend(POSITIVE.iter().chain(&NEGATIVE).map(|w| w.to_string()));
    vocab_words.extend(fillers.iter().cloned());
    let vocab = Vocabulary::from_tokens(vocab_words);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut make = |count: usize| {
        let mut texts = Vec::with_capacity(count);
        let mut labels = Vec::with_capacity(count);
        for _ in 0..count {
            let label = rng.gen_range(0..2);
            let mut doc: Vec<String> =
                (0..cfg.doc_len).map(|_| fillers.choose(&mut rng).unwrap().clone()).collect();
            let span = cfg.gap + 1;
            // two non-overlapping spans [start, start + gap]
            let (a, b) = loop {
                let a = rng.gen_range(0..=cfg.doc_len - span);
                let b = rng.gen_range(0..=cfg.doc_len - span);
                if a + span <= b || b + span <= a {
                    break (a, b);
                }
            };
            let pos = POSITIVE.choose(&mut rng).unwrap().to_string();
            let neg = NEGATIVE.choose(&mut rng).unwrap().to_string();
            let (after_pivot, after_decoy) = if label == 0 { (pos, neg) } else { (neg, pos) };
            doc[a] = PIVOT.into();
            doc[a + cfg.gap] = after_pivot;
            doc[b] = DECOY.into();
            doc[b + cfg.gap] = after_decoy;
            texts.push(doc);
            labels.push(label);
        }
        SyntheticCorpus::encode(&vocab, texts, labels, cfg.radius)
    };
    let train = make(cfg.train_docs);
    let test = make(cfg.test_docs);
    (train, test)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keyword_classes_use_disjoint_words() {
        let c = keyword_corpus(64, 2, 1);
        assert_eq!(c.docs.len(), 64);
        for (d, t) in c.docs.iter().zip(&c.texts) {
            assert!(t.iter().all(|w| w.starts_with(&format!("k{}", d.label()))));
            assert_eq!(d.radius(), 2);
            assert!(d.content().iter().all(|&i| i > 1));
        }
        assert_eq!(c.docs.iter().filter(|d| d.label() == 0).count(), 32);
    }

    #[test]
    fn ambiguity_label_follows_pivot_context() {
        let cfg = AmbiguityConfig::default();
        let (train, test) = ambiguity_corpus(cfg, 7);
        assert_eq!(train.docs.len(), cfg.train_docs);
        assert_eq!(test.docs.len(), cfg.test_docs);
        for (d, t) in train.docs.iter().chain(&test.docs).zip(train.texts.iter().chain(&test.texts)) {
            assert_eq!(t.len(), cfg.doc_len);
            let p = t.iter().position(|w| w == PIVOT).unwrap();
            let target = &t[p + cfg.gap];
            let expected = if POSITIVE.contains(&target.as_str()) { 0 } else { 1 };
            assert_eq!(d.label(), expected);
            // one word of each polarity, so counts alone say nothing
            assert_eq!(t.iter().filter(|w| POSITIVE.contains(&w.as_str())).count(), 1);
            assert_eq!(t.iter().filter(|w| NEGATIVE.contains(&w.as_str())).count(), 1);
            assert_eq!(t.iter().filter(|w| *w == DECOY).count(), 1);
        }
    }

    #[test]
    fn corpora_are_seeded() {
        let cfg = AmbiguityConfig::default();
        assert_eq!(ambiguity_corpus(cfg, 3).0.texts, ambiguity_corpus(cfg, 3).0.texts);
        assert_ne!(ambiguity_corpus(cfg, 3).0.texts, ambiguity_corpus(cfg, 4).0.texts);
    }
}
