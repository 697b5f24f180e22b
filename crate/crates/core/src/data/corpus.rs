//! Evaluation corpora stored as JSON-lines files in one directory.
//!
//! ```text
//! documents.jsonl  {"id": str, "text": str}
//! queries.jsonl    {"id": str, "text": str}
//! qrels.jsonl      {"query_id": str, "doc_id": str, "relevance": int >= 0}
//! pairs.jsonl      {"text1": str, "text2": str, "score": float}   (optional)
//! ```

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
}

pub type Query = Document;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QrelLine {
    pub query_id: String,
    pub doc_id: String,
    pub relevance: u32,
}

/// Graded sentence-pair similarity judgement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub text1: String,
    pub text2: String,
    pub score: f64,
}

/// query id → doc id → relevance. Absent pairs have relevance 0.
pub type Qrels = BTreeMap<String, BTreeMap<String, u32>>;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub name: String,
    pub documents: Vec<Document>,
    pub queries: Vec<Query>,
    pub qrels: Qrels,
    pub pairs: Vec<ScoredPair>,
}

pub const DOCUMENTS: &str = "documents.jsonl";
pub const QUERIES: &str = "queries.jsonl";
pub const QRELS: &str = "qrels.jsonl";
pub const PAIRS: &str = "pairs.jsonl";

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    for r in rows {
        serde_json::to_writer(&mut f, r)?;
        writeln!(f).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    Ok(())
}

impl Corpus {
    pub fn relevance(&self, query_id: &str, doc_id: &str) -> u32 {
        self.qrels
            .get(query_id)
            .and_then(|m| m.get(doc_id))
            .copied()
            .unwrap_or(0)
    }

    /// Loads a corpus directory; the corpus is named after the directory.
    pub fn load(dir: &Path) -> Result<Self> {
        let documents: Vec<Document> = read_jsonl(&dir.join(DOCUMENTS))?;
        let queries: Vec<Query> = read_jsonl(&dir.join(QUERIES))?;
        let mut qrels = Qrels::new();
        for q in read_jsonl::<QrelLine>(&dir.join(QRELS))? {
            qrels.entry(q.query_id).or_default().insert(q.doc_id, q.relevance);
        }
        let pairs_path = dir.join(PAIRS);
        let pairs = if pairs_path.exists() {
            read_jsonl(&pairs_path)?
        } else {
            Vec::new()
        };
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "corpus".into());
        let corpus = Self {
            name,
            documents,
            queries,
            qrels,
            pairs,
        };
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for d in &self.documents {
            if !seen.insert(d.id.as_str()) {
                return Err(Error::invalid(format!("duplicate document id `{}`", d.id)));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for q in &self.queries {
            if !seen.insert(q.id.as_str()) {
                return Err(Error::invalid(format!("duplicate query id `{}`", q.id)));
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        write_jsonl(&dir.join(DOCUMENTS), &self.documents)?;
        write_jsonl(&dir.join(QUERIES), &self.queries)?;
        let lines: Vec<QrelLine> = self
            .qrels
            .iter()
            .flat_map(|(q, m)| {
                m.iter().map(move |(d, &r)| QrelLine {
                    query_id: q.clone(),
                    doc_id: d.clone(),
                    relevance: r,
                })
            })
            .collect();
        write_jsonl(&dir.join(QRELS), &lines)?;
        if !self.pairs.is_empty() {
            write_jsonl(&dir.join(PAIRS), &self.pairs)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut qrels = Qrels::new();
        qrels.entry("q1".into()).or_default().insert("d2".into(), 1);
        let c = Corpus {
            name: "toy".into(),
            documents: vec![
                Document { id: "d1".into(), text: "alpha".into() },
                Document { id: "d2".into(), text: "beta".into() },
            ],
            queries: vec![Document { id: "q1".into(), text: "b?".into() }],
            qrels,
            pairs: vec![],
        };
        let path = dir.path().join("toy");
        c.save(&path).unwrap();
        let back = Corpus::load(&path).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.relevance("q1", "d2"), 1);
        assert_eq!(back.relevance("q1", "d1"), 0);
    }

    #[test]
    fn bad_qrel_line_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(DOCUMENTS), "{\"id\":\"d\",\"text\":\"t\"}\n").unwrap();
        fs::write(dir.path().join(QUERIES), "{\"id\":\"q\",\"text\":\"t\"}\n").unwrap();
        fs::write(dir.path().join(QRELS), "{\"query_id\":\"q\",\"doc_id\":\"d\",\"relevance\":-1}\n").unwrap();
        assert!(matches!(Corpus::load(dir.path()), Err(Error::Parse { line: 1, .. })));
    }
}
