//! Newline-delimited JSON corpora: `{"id": .., "text": .., "label": ..}` per line.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::chunker::{chunk, ChunkConfig, ChunkedDocument};
use crate::error::{Error, Result};
use crate::tokenizer::{encode, Vocabulary};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub id: String,
    pub text: String,
    pub label: usize,
}

/// Parses a corpus in file order. Blank lines are skipped; line numbers are 1-based.
pub fn parse_corpus(contents: &str, path: &str) -> Result<Vec<Record>> {
    let mut out = Vec::new();
    for (i, line) in contents.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn load_corpus(path: &Path) -> Result<Vec<Record>> {
    parse_corpus(&fs::read_to_string(path)?, &path.display().to_string())
}

/// Fails with the offending line when a label is outside `0..n_class`.
pub fn check_labels(records: &[Record], n_class: usize) -> Result<()> {
    match records.iter().position(|r| r.label >= n_class) {
        Some(i) => Err(Error::invalid(format!(
            "record {} ({}) has label {} but only {n_class} classes exist",
            i + 1,
            records[i].id,
            records[i].label
        ))),
        None => Ok(()),
    }
}

pub fn corpus_to_string(records: &[Record]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("record serializes"));
        s.push('\n');
    }
    s
}

pub fn write_corpus(path: &Path, records: &[Record]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(corpus_to_string(records).as_bytes())?;
    Ok(())
}

/// Tokenizes and chunks every record, keeping its label.
pub fn prepare(records: &[Record], vocab: &Vocabulary, cfg: &ChunkConfig) -> Result<Vec<(ChunkedDocument, usize)>> {
    records
        .iter()
        .map(|r| Ok((chunk(&encode(&r.text, vocab), cfg)?, r.label)))
        .collect()
}

pub fn label_counts(records: &[Record], n_class: usize) -> Vec<usize> {
    let mut c = vec![0; n_class];
    for r in records {
        if r.label < n_class {
            c[r.label] += 1;
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn empty_file_is_empty_corpus() {
        assert!(parse_corpus("", "x").unwrap().is_empty());
    }

    #[test]
    fn preserves_order() {
        let s = "{\"id\":\"a\",\"text\":\"one\",\"label\":0}\n{\"id\":\"b\",\"text\":\"\",\"label\":1}\n{\"id\":\"c\",\"text\":\"three\",\"label\":0}\n";
        let ids: Vec<String> = parse_corpus(s, "x").unwrap().into_iter().map(|r| r.id).collect();
        assert_eq!(ids, ["a", "b", "c"]);
    }

    #[test]
    fn malformed_line_is_named() {
        let s = "{\"id\":\"a\",\"text\":\"one\",\"label\":0}\n{\"id\":\"b\",\"text\":\n";
        match parse_corpus(s, "c.jsonl") {
            Err(Error::Parse { line, path, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(path, "c.jsonl");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn negative_or_out_of_range_labels_fail() {
        assert!(parse_corpus("{\"id\":\"a\",\"text\":\"\",\"label\":-1}", "x").is_err());
        let recs = parse_corpus("{\"id\":\"a\",\"text\":\"\",\"label\":2}", "x").unwrap();
        assert!(check_labels(&recs, 2).is_err());
        assert!(check_labels(&recs, 3).is_ok());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let recs = vec![Record {
            id: "x\ty".into(),
            text: "line\nbreak \"quoted\"".into(),
            label: 1,
        }];
        write_corpus(&path, &recs).unwrap();
        assert_eq!(load_corpus(&path).unwrap(), recs);
    }

    proptest! {
        #[test]
        fn write_then_parse_is_identity(items in prop::collection::vec((".*", ".*", 0usize..5), 0..20)) {
            let recs: Vec<Record> = items.into_iter().map(|(id, text, label)| Record { id, text, label }).collect();
            prop_assert_eq!(parse_corpus(&corpus_to_string(&recs), "p").unwrap(), recs);
        }
    }
}
