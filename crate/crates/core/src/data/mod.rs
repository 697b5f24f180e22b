//! Tokenization, training-data ingestion, collation, evaluation corpora,
//! and the seeded synthetic retrieval task.

pub mod batch;
pub mod corpus;
pub mod synthetic;
pub mod tokenizer;

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use batch::{collate, Batch, GenBatch, TokenBatch};
pub use corpus::{Corpus, Document, Qrels, Query};
pub use synthetic::{make_synthetic_task, SyntheticOptions, SyntheticTask};
pub use tokenizer::{detokenize, tokenize, BOS, EOS, PAD, VOCAB_SIZE};

use crate::error::{Error, Result};

/// One `(query, positive, hard negatives)` training triple.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainExample {
    pub query: String,
    pub positive: String,
    #[serde(default)]
    pub negatives: Vec<String>,
}

impl TrainExample {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.query.is_empty() {
            return Err("empty \"query\"".into());
        }
        if self.positive.is_empty() {
            return Err("empty \"positive\"".into());
        }
        if let Some(j) = self.negatives.iter().position(String::is_empty) {
            return Err(format!("empty negative at index {j}"));
        }
        Ok(())
    }
}

/// Reads one JSON object per line, preserving file order. Blank lines are
/// skipped; line numbers in errors are 1-based.
pub fn load_examples(path: &Path) -> Result<Vec<TrainExample>> {
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |reason: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let ex: TrainExample = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        ex.validate().map_err(parse_err)?;
        out.push(ex);
    }
    Ok(out)
}

pub fn write_examples(path: &Path, examples: &[TrainExample]) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    for ex in examples {
        serde_json::to_writer(&mut f, ex)?;
        writeln!(f).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn loads_in_file_order() {
        let f = write(&[
            r#"{"query": "q1", "positive": "p1", "negatives": ["n"]}"#,
            r#"{"query": "q2", "positive": "p2", "negatives": []}"#,
            r#"{"query": "q3", "positive": "p3"}"#,
        ]);
        let ex = load_examples(f.path()).unwrap();
        assert_eq!(ex.len(), 3);
        assert_eq!(ex.iter().map(|e| e.query.as_str()).collect::<Vec<_>>(), ["q1", "q2", "q3"]);
    }

    #[test]
    fn missing_field_names_the_line() {
        let f = write(&[
            r#"{"query": "q1", "positive": "p1"}"#,
            r#"{"query": "q2", "negatives": []}"#,
        ]);
        match load_examples(f.path()) {
            Err(Error::Parse { line, reason, .. }) => {
                assert_eq!(line, 2);
                assert!(reason.contains("positive"), "{reason}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_required_field_is_a_validation_error() {
        let f = write(&[r#"{"query": "", "positive": "p"}"#]);
        assert!(matches!(load_examples(f.path()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn eight_negatives_load() {
        let negs: Vec<String> = (0..8).map(|i| format!("neg {i}")).collect();
        let ex = TrainExample {
            query: "q".into(),
            positive: "p".into(),
            negatives: negs,
        };
        let f = tempfile::NamedTempFile::new().unwrap();
        write_examples(f.path(), &[ex.clone(), ex]).unwrap();
        let loaded = load_examples(f.path()).unwrap();
        assert!(loaded.iter().all(|e| e.negatives.len() == 8));
    }
}
