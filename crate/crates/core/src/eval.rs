//! Retrieval evaluation: exhaustive cosine ranking, nDCG@k, MAP, and
//! Spearman correlation for scored sentence pairs.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::corpus::Document;
use crate::data::{tokenize, Corpus};
use crate::error::{Error, Result};
use crate::losses::cosine_score;
use crate::model::checkpoint::hex;
use crate::model::Model;
use crate::tensor::Real;

/// Documents are embedded this many at a time.
const EMBED_CHUNK: usize = 32;

/// One query's ranking, best first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query_id: String,
    pub doc_ids: Vec<String>,
    pub scores: Vec<f64>,
}

/// Sorts documents by descending score, ties by ascending id.
pub fn rank(query_id: &str, doc_ids: &[String], scores: &[f64]) -> RankedList {
    let mut order: Vec<usize> = (0..doc_ids.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then_with(|| doc_ids[a].cmp(&doc_ids[b])));
    RankedList {
        query_id: query_id.to_string(),
        doc_ids: order.iter().map(|&i| doc_ids[i].clone()).collect(),
        scores: order.iter().map(|&i| scores[i]).collect(),
    }
}

/// Relevance of each judged document for one query.
pub type Judgements = BTreeMap<String, u32>;

fn gain(rel: u32) -> f64 {
    2f64.powi(rel as i32) - 1.0
}

pub fn ndcg_at_k(ranked: &RankedList, rel: &Judgements, k: usize) -> f64 {
    let dcg: f64 = ranked
        .doc_ids
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, d)| gain(rel.get(d).copied().unwrap_or(0)) / ((i + 2) as f64).log2())
        .sum();
    let mut ideal: Vec<u32> = rel.values().copied().filter(|&r| r > 0).collect();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = ideal
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &r)| gain(r) / ((i + 2) as f64).log2())
        .sum();
    if idcg == 0.0 {
        0.0
    } else {
        dcg / idcg
    }
}

/// Mean of precision at each relevant rank, over all relevant documents.
pub fn average_precision(ranked: &RankedList, rel: &Judgements) -> f64 {
    let total = rel.values().filter(|&&r| r > 0).count();
    if total == 0 {
        return 0.0;
    }
    let mut hits = 0;
    let mut sum = 0.0;
    for (i, d) in ranked.doc_ids.iter().enumerate() {
        if rel.get(d).copied().unwrap_or(0) > 0 {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    sum / total as f64
}

pub fn mean_average_precision(lists: &[RankedList], qrels: &BTreeMap<String, Judgements>) -> f64 {
    if lists.is_empty() {
        return 0.0;
    }
    let empty = Judgements::new();
    lists
        .iter()
        .map(|l| average_precision(l, qrels.get(&l.query_id).unwrap_or(&empty)))
        .sum::<f64>()
        / lists.len() as f64
}

/// 1-based ranks with ties sharing their mean rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let mean = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = mean;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}

/// Spearman rank correlation: Pearson correlation of tie-averaged ranks.
pub fn spearman(pred: &[f64], gold: &[f64]) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(Error::Shape {
            op: "spearman",
            lhs: vec![pred.len()],
            rhs: vec![gold.len()],
        });
    }
    if pred.len() < 2 {
        return Err(Error::invalid("spearman needs at least 2 pairs"));
    }
    pearson(&average_ranks(pred), &average_ranks(gold))
        .ok_or_else(|| Error::invalid("spearman is undefined for a constant score list"))
}

/// Expected nDCG@k of a uniformly random ranking, estimated by shuffling.
pub fn random_ndcg_baseline(n_docs: usize, relevant: &[u32], k: usize, trials: usize, seed: u64) -> f64 {
    let ids: Vec<String> = (0..n_docs).map(|i| format!("{i:08}")).collect();
    let rel: Judgements = relevant
        .iter()
        .enumerate()
        .map(|(i, &r)| (ids[i].clone(), r))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = ids.clone();
    let mut sum = 0.0;
    for _ in 0..trials {
        order.shuffle(&mut rng);
        let list = RankedList {
            query_id: String::new(),
            doc_ids: order.clone(),
            scores: vec![0.0; n_docs],
        };
        sum += ndcg_at_k(&list, &rel, k);
    }
    sum / trials as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Metric {
    Ndcg(usize),
    Map,
    Spearman,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Ndcg(k) => write!(f, "ndcg@{k}"),
            Self::Map => f.write_str("map"),
            Self::Spearman => f.write_str("spearman"),
        }
    }
}

impl FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "map" => Ok(Self::Map),
            "spearman" => Ok(Self::Spearman),
            other => {
                let k = other
                    .strip_prefix("ndcg@")
                    .ok_or_else(|| format!("unknown metric `{other}` (expected ndcg@K, map, spearman)"))?;
                match k.parse::<usize>() {
                    Ok(k) if k > 0 => Ok(Self::Ndcg(k)),
                    _ => Err(format!("bad cutoff in `{other}`")),
                }
            }
        }
    }
}

pub fn parse_metrics(list: &str) -> std::result::Result<Vec<Metric>, String> {
    let metrics: Vec<Metric> = list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()?;
    if metrics.is_empty() {
        return Err("no metrics requested".into());
    }
    Ok(metrics)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub checkpoint: String,
    pub timestamp: String,
    /// The first requested metric.
    pub main_metric: String,
    pub main_score: f64,
    pub metrics: BTreeMap<String, f64>,
    /// query id → metric → value, for per-query metrics.
    pub per_query: BTreeMap<String, BTreeMap<String, f64>>,
}

#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    /// Directory for cached document embeddings; `None` disables caching.
    pub cache_dir: Option<PathBuf>,
    /// Recorded in the report; defaults to the model fingerprint.
    pub checkpoint_id: Option<String>,
}

fn embed_documents<T: Real>(model: &Model<T>, docs: &[Document], what: &str) -> Result<Vec<Vec<T>>> {
    let max = model.config().max_seq_len;
    for d in docs {
        let len = tokenize(&d.text).len() + 2;
        if len > max {
            return Err(Error::SequenceTooLong {
                len,
                max,
                context: Some(format!("{what} `{}`", d.id)),
            });
        }
    }
    let chunks: Vec<Vec<Vec<T>>> = docs
        .par_chunks(EMBED_CHUNK)
        .map(|c| {
            let texts: Vec<&str> = c.iter().map(|d| d.text.as_str()).collect();
            model.encode_texts(&texts, EMBED_CHUNK)
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// SHA-256 over every document id and text.
pub fn corpus_hash(docs: &[Document]) -> String {
    let mut h = Sha256::new();
    for d in docs {
        h.update((d.id.len() as u64).to_le_bytes());
        h.update(d.id.as_bytes());
        h.update((d.text.len() as u64).to_le_bytes());
        h.update(d.text.as_bytes());
    }
    hex(&h.finalize())
}

fn cache_path<T: Real>(dir: &Path, model: &Model<T>, docs: &[Document]) -> PathBuf {
    let mut h = Sha256::new();
    h.update(model.fingerprint());
    h.update(T::DTYPE);
    h.update(corpus_hash(docs));
    dir.join(format!("{}.emb", hex(&h.finalize())))
}

fn read_cache(path: &Path, n: usize, d: usize) -> Option<Vec<Vec<f64>>> {
    let bytes = fs::read(path).ok()?;
    if bytes.len() != n * d * 8 {
        return None;
    }
    let flat: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Some(flat.chunks(d).map(<[f64]>::to_vec).collect())
}

fn write_cache(path: &Path, embs: &[Vec<f64>]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    let bytes: Vec<u8> = embs.iter().flatten().flat_map(|x| x.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

fn to_f64<T: Real>(v: Vec<Vec<T>>) -> Vec<Vec<f64>> {
    v.into_iter().map(|r| r.into_iter().map(Real::as_f64).collect()).collect()
}

/// Embeds every document (through the cache if given) and every query,
/// then ranks the whole corpus for each query.
pub fn rank_corpus<T: Real>(model: &Model<T>, corpus: &Corpus, cache_dir: Option<&Path>) -> Result<Vec<RankedList>> {
    if corpus.documents.is_empty() {
        return Err(Error::invalid(format!("corpus `{}` has no documents", corpus.name)));
    }
    let d = model.config().d_model;
    let cached = cache_dir.map(|dir| cache_path(dir, model, &corpus.documents));
    let doc_embs = match cached.as_deref().and_then(|p| read_cache(p, corpus.documents.len(), d)) {
        Some(e) => e,
        None => {
            let e = to_f64(embed_documents(model, &corpus.documents, "document")?);
            if let Some(p) = &cached {
                write_cache(p, &e)?;
            }
            e
        }
    };
    let query_embs = to_f64(embed_documents(model, &corpus.queries, "query")?);
    let doc_ids: Vec<String> = corpus.documents.iter().map(|d| d.id.clone()).collect();
    corpus
        .queries
        .iter()
        .zip(&query_embs)
        .map(|(q, qe)| {
            let scores = doc_embs
                .iter()
                .map(|de| cosine_score(qe, de))
                .collect::<Result<Vec<f64>>>()?;
            Ok(rank(&q.id, &doc_ids, &scores))
        })
        .collect()
}

fn pair_scores<T: Real>(model: &Model<T>, corpus: &Corpus) -> Result<(Vec<f64>, Vec<f64>)> {
    let as_docs = |f: fn(&crate::data::corpus::ScoredPair) -> &str| -> Vec<Document> {
        corpus
            .pairs
            .iter()
            .enumerate()
            .map(|(i, p)| Document {
                id: format!("pair {i}"),
                text: f(p).to_string(),
            })
            .collect()
    };
    let a = to_f64(embed_documents(model, &as_docs(|p| &p.text1), "text1 of")?);
    let b = to_f64(embed_documents(model, &as_docs(|p| &p.text2), "text2 of")?);
    let pred = a
        .iter()
        .zip(&b)
        .map(|(x, y)| cosine_score(x, y))
        .collect::<Result<Vec<f64>>>()?;
    Ok((pred, corpus.pairs.iter().map(|p| p.score).collect()))
}

/// Runs `metrics` on `corpus`. Per-query metrics are averaged over every
/// query in the corpus; queries without judgements score 0.
pub fn evaluate<T: Real>(model: &Model<T>, corpus: &Corpus, metrics: &[Metric], opts: &EvalOptions) -> Result<EvalReport> {
    let main = *metrics.first().ok_or_else(|| Error::invalid("no metrics requested"))?;
    let needs_ranking = metrics.iter().any(|m| !matches!(m, Metric::Spearman));
    let lists = if needs_ranking {
        if corpus.queries.is_empty() {
            return Err(Error::invalid(format!("corpus `{}` has no queries", corpus.name)));
        }
        rank_corpus(model, corpus, opts.cache_dir.as_deref())?
    } else {
        Vec::new()
    };
    let empty = Judgements::new();
    let mut values = BTreeMap::new();
    let mut per_query: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for &m in metrics {
        let name = m.to_string();
        let value = match m {
            Metric::Spearman => {
                if corpus.pairs.is_empty() {
                    return Err(Error::invalid(format!("corpus `{}` has no scored pairs for spearman", corpus.name)));
                }
                let (pred, gold) = pair_scores(model, corpus)?;
                spearman(&pred, &gold).map_err(|e| Error::invalid(format!("corpus `{}`: {e}", corpus.name)))?
            }
            Metric::Ndcg(_) | Metric::Map => {
                let mut sum = 0.0;
                for l in &lists {
                    let rel = corpus.qrels.get(&l.query_id).unwrap_or(&empty);
                    let v = match m {
                        Metric::Ndcg(k) => ndcg_at_k(l, rel, k),
                        _ => average_precision(l, rel),
                    };
                    per_query.entry(l.query_id.clone()).or_default().insert(name.clone(), v);
                    sum += v;
                }
                sum / lists.len() as f64
            }
        };
        values.insert(name, value);
    }
    Ok(EvalReport {
        dataset: corpus.name.clone(),
        checkpoint: opts.checkpoint_id.clone().unwrap_or_else(|| model.fingerprint()),
        timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        main_metric: main.to_string(),
        main_score: values[&main.to_string()],
        metrics: values,
        per_query,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn list(ids: &[&str]) -> RankedList {
        RankedList {
            query_id: "q".into(),
            doc_ids: ids.iter().map(|s| s.to_string()).collect(),
            scores: (0..ids.len()).rev().map(|x| x as f64).collect(),
        }
    }

    fn rel(pairs: &[(&str, u32)]) -> Judgements {
        pairs.iter().map(|(d, r)| (d.to_string(), *r)).collect()
    }

    #[test]
    fn ndcg_examples() {
        let r = rel(&[("a", 1)]);
        assert_eq!(ndcg_at_k(&list(&["a", "b", "c"]), &r, 10), 1.0);
        let v = ndcg_at_k(&list(&["b", "a", "c"]), &r, 10);
        assert!((v - 1.0 / 3f64.log2()).abs() < 1e-15);
        assert!((v - 0.6309).abs() < 5e-5);
        assert_eq!(ndcg_at_k(&list(&["b", "a"]), &rel(&[]), 10), 0.0);
        assert_eq!(ndcg_at_k(&list(&["b", "a"]), &r, 1), 0.0);
    }

    #[test]
    fn map_examples() {
        assert_eq!(average_precision(&list(&["a", "b", "c"]), &rel(&[("a", 1)])), 1.0);
        let ap = average_precision(&list(&["a", "b", "c"]), &rel(&[("a", 1), ("c", 2)]));
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(average_precision(&list(&["a"]), &rel(&[("a", 0)])), 0.0);
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        // ranks [1, 2.5, 2.5, 4] vs [1, 2, 3, 4]
        let s = spearman(&[1.0, 2.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((s - 4.5 / (4.5f64 * 5.0).sqrt()).abs() < 1e-15);
        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_err());
        assert!(spearman(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn ties_break_by_id() {
        let ids = vec!["d2".to_string(), "d1".into(), "d3".into()];
        let r = rank("q", &ids, &[0.5, 0.5, 0.9]);
        assert_eq!(r.doc_ids, vec!["d3", "d1", "d2"]);
    }

    #[test]
    fn metric_names() {
        assert_eq!(parse_metrics("ndcg@10,map").unwrap(), vec![Metric::Ndcg(10), Metric::Map]);
        assert!(parse_metrics("ndcg@0").is_err());
        assert!(parse_metrics("recall@5").is_err());
        assert!(parse_metrics("").is_err());
    }

    #[test]
    fn random_baseline_matches_closed_form() {
        // one relevant document among n: E = (1/n) Σ_{r≤k} 1/log2(r+1)
        let n = 50;
        let exact: f64 = (1..=10).map(|r| 1.0 / ((r + 1) as f64).log2()).sum::<f64>() / n as f64;
        let mc = random_ndcg_baseline(n, &[1], 10, 20_000, 1);
        assert!((mc - exact).abs() < 0.01, "{mc} vs {exact}");
    }
}
