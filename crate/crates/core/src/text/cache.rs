use std::path::Path;

use super::EncodedDocument;
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};

pub const CACHE_MAGIC: &[u8; 4] = b"ARED";
pub const CACHE_VERSION: u32 = 1;

/// Encoded documents together with the vocabulary size and region radius
/// they were encoded for.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CachedCorpus {
    pub vocab_size: usize,
    pub radius: usize,
    pub documents: Vec<EncodedDocument>,
}

/// Layout: magic, u32 version, u64 v, u64 c, u64 document count, then per
/// document u64 label, u64 length, and u32 indices.
pub fn write_cache(path: impl AsRef<Path>, corpus: &CachedCorpus) -> Result<()> {
    let mut w = Writer::default();
    w.bytes(CACHE_MAGIC);
    w.u32(CACHE_VERSION);
    w.u64(corpus.vocab_size as u64);
    w.u64(corpus.radius as u64);
    w.u64(corpus.documents.len() as u64);
    for doc in &corpus.documents {
        w.u64(doc.label() as u64);
        w.u64(doc.indices().len() as u64);
        for &i in doc.indices() {
            w.u32(i as u32);
        }
    }
    let path = path.as_ref();
    std::fs::write(path, w.buf).map_err(|e| Error::io(path, e))
}

pub fn read_cache(path: impl AsRef<Path>) -> Result<CachedCorpus> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader::new(&buf);
    if r.bytes(4, "magic")? != CACHE_MAGIC {
        return Err(Error::Format("not an encoded-corpus cache".into()));
    }
    let version = r.u32("version")?;
    if version != CACHE_VERSION {
        return Err(Error::Version { found: version, expected: CACHE_VERSION });
    }
    let vocab_size = r.u64("vocabulary size")? as usize;
    let radius = r.u64("radius")? as usize;
    let count = r.u64("document count")? as usize;
    let mut documents = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let label = r.u64("label")? as usize;
        let len = r.u64("document length")? as usize;
        let mut indices = Vec::with_capacity(len.min(1 << 20));
        for _ in 0..len {
            let idx = r.u32("token index")? as usize;
            if idx >= vocab_size {
                return Err(Error::Vocabulary { index: idx, size: vocab_size });
            }
            indices.push(idx);
        }
        documents.push(EncodedDocument::new(indices, label, radius)?);
    }
    if !r.is_at_end() {
        return Err(Error::Format("trailing bytes after cache payload".into()));
    }
    Ok(CachedCorpus { vocab_size, radius, documents })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::Vocabulary;

    #[test]
    fn round_trip_and_corruption() {
        let vocab = Vocabulary::from_tokens(["a", "b"].map(String::from));
        let documents = vec![
            EncodedDocument::from_tokens(&["a", "b", "q"], &vocab, 2, 1),
            EncodedDocument::from_tokens(&["b"], &vocab, 2, 0),
        ];
        let corpus = CachedCorpus { vocab_size: vocab.len(), radius: 2, documents };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.bin");
        write_cache(&path, &corpus).unwrap();
        assert_eq!(read_cache(&path).unwrap(), corpus);

        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_cache(&path), Err(Error::Truncated(_))));
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_cache(&path), Err(Error::Format(_))));
    }
}
