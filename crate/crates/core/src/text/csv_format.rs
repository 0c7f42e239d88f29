use std::fs::File;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};

/// A labeled document before tokenization. `label` is 0-based.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawDocument {
    pub label: usize,
    pub text: String,
}

/// Reads a benchmark CSV file: a 1-based class index followed by one or
/// more quoted text fields per record.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Vec<RawDocument>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_csv(file)
}

pub fn parse_csv<R: Read>(reader: R) -> Result<Vec<RawDocument>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut docs = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() < 2 {
            return Err(Error::Parse {
                line,
                message: format!("expected a class index and text, found {} field(s)", record.len()),
            });
        }
        let raw_label = record[0].trim();
        let value: i64 = raw_label.parse().map_err(|_| Error::Parse {
            line,
            message: format!("class index `{raw_label}` is not an integer"),
        })?;
        if value < 1 {
            return Err(Error::ClassIndex { line, value });
        }
        let text = record
            .iter()
            .skip(1)
            .collect::<Vec<_>>()
            .join(" ")
            .replace("\\n", "\n");
        docs.push(RawDocument {
            label: value as usize - 1,
            text,
        });
    }
    Ok(docs)
}
