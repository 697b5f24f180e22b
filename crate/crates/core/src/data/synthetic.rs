//! Seeded synthetic retrieval task.
//!
//! Every query names a key such as `KQ47` (two uppercase letters, two
//! digits); its positive passage mentions the same key among lowercase
//! filler words, and negatives mention other keys. Keys never occur inside
//! filler text, so a literal substring match on the key solves the task
//! exactly.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::corpus::{Corpus, Document, Qrels};
use crate::data::TrainExample;
use crate::error::{Error, Result};

const LETTERS: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ";
/// Number of distinct keys the generator can produce.
pub const MAX_KEYS: usize = 26 * 26 * 100;

const FILLER: &[&str] = &[
    "the", "a", "river", "stone", "blue", "old", "city", "market", "lamp", "song", "quiet", "green",
    "north", "paper", "window", "garden", "cold", "road", "small", "bright", "cloud", "bread",
    "iron", "sea", "tall", "music", "glass", "field", "warm", "tower", "night", "salt",
];

const QUERY_TEMPLATES: &[(&str, &str)] = &[
    ("find ", ""),
    ("where is ", "?"),
    ("about ", ""),
    ("", " info"),
    ("look up ", ""),
    ("notes on ", ""),
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticOptions {
    pub seed: u64,
    pub n_train: usize,
    /// Number of evaluation queries, one relevant document each.
    pub n_eval: usize,
    /// Size of the key pool shared by train and eval.
    pub n_keys: usize,
    /// Evaluation corpus size; documents beyond `n_eval` are distractors.
    pub n_docs: usize,
    pub n_negatives: usize,
    /// Filler words per passage, excluding the key.
    pub filler_words: std::ops::RangeInclusive<usize>,
}

impl SyntheticOptions {
    pub fn new(seed: u64, n_train: usize, n_eval: usize, n_keys: usize) -> Self {
        Self {
            seed,
            n_train,
            n_eval,
            n_keys,
            n_docs: (5 * n_eval).max(n_eval),
            n_negatives: 8,
            filler_words: 3..=5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask {
    pub train: Vec<TrainExample>,
    pub eval: Corpus,
    /// Key of each evaluation query, by query id.
    pub eval_keys: BTreeMap<String, String>,
}

/// Default-shaped task: 8 negatives, a corpus five times the query count.
pub fn make_synthetic_task(seed: u64, n_train: usize, n_eval: usize, n_keys: usize) -> Result<SyntheticTask> {
    SyntheticOptions::new(seed, n_train, n_eval, n_keys).generate()
}

fn key_from_index(i: usize) -> String {
    let digits = i % 100;
    let letters = i / 100;
    format!(
        "{}{}{:02}",
        LETTERS[letters / 26] as char,
        LETTERS[letters % 26] as char,
        digits
    )
}

struct Gen {
    rng: ChaCha8Rng,
    seen_passages: BTreeSet<String>,
    filler_words: std::ops::RangeInclusive<usize>,
}

impl Gen {
    fn passage(&mut self, key: &str) -> String {
        loop {
            let n = self.rng.gen_range(self.filler_words.clone());
            let mut words: Vec<&str> = (0..n).map(|_| *FILLER.choose(&mut self.rng).unwrap()).collect();
            let at = self.rng.gen_range(0..=words.len());
            words.insert(at, key);
            let text = words.join(" ");
            if self.seen_passages.insert(text.clone()) {
                return text;
            }
        }
    }

    fn query(&mut self, key: &str) -> String {
        let (pre, post) = QUERY_TEMPLATES.choose(&mut self.rng).unwrap();
        format!("{pre}{key}{post}")
    }
}

impl SyntheticOptions {
    pub fn generate(&self) -> Result<SyntheticTask> {
        if self.n_keys < 2 {
            return Err(Error::invalid(format!("n_keys must be at least 2, got {}", self.n_keys)));
        }
        if self.n_keys > MAX_KEYS {
            return Err(Error::invalid(format!(
                "n_keys {} exceeds the {MAX_KEYS} representable keys",
                self.n_keys
            )));
        }
        if self.n_eval >= self.n_keys {
            return Err(Error::invalid(format!(
                "n_eval ({}) must be smaller than n_keys ({}) so distractors have keys of their own",
                self.n_eval, self.n_keys
            )));
        }
        if self.n_docs < self.n_eval {
            return Err(Error::invalid("n_docs must be at least n_eval"));
        }
        if self.filler_words.is_empty() || *self.filler_words.end() < 2 {
            return Err(Error::invalid("too few filler words to build distinct passages"));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut key_ids = rand::seq::index::sample(&mut rng, MAX_KEYS, self.n_keys).into_vec();
        key_ids.sort_unstable();
        let keys: Vec<String> = key_ids.into_iter().map(key_from_index).collect();
        let mut g = Gen {
            rng,
            seen_passages: BTreeSet::new(),
            filler_words: self.filler_words.clone(),
        };

        // Evaluation split first so its passages are reserved.
        let mut order: Vec<usize> = (0..keys.len()).collect();
        order.shuffle(&mut g.rng);
        let (eval_key_idx, other_idx) = order.split_at(self.n_eval);
        let mut docs: Vec<(String, Option<usize>)> = Vec::with_capacity(self.n_docs);
        for (qi, &k) in eval_key_idx.iter().enumerate() {
            docs.push((g.passage(&keys[k]), Some(qi)));
        }
        for _ in self.n_eval..self.n_docs {
            let k = *other_idx.choose(&mut g.rng).unwrap();
            docs.push((g.passage(&keys[k]), None));
        }
        docs.shuffle(&mut g.rng);

        let mut documents = Vec::with_capacity(docs.len());
        let mut qrels = Qrels::new();
        let width = digits(docs.len());
        let qwidth = digits(self.n_eval);
        for (i, (text, owner)) in docs.into_iter().enumerate() {
            let id = format!("d{i:0width$}");
            if let Some(qi) = owner {
                qrels
                    .entry(format!("q{qi:0qwidth$}"))
                    .or_default()
                    .insert(id.clone(), 1);
            }
            documents.push(Document { id, text });
        }
        let mut queries = Vec::with_capacity(self.n_eval);
        let mut eval_keys = BTreeMap::new();
        for (qi, &k) in eval_key_idx.iter().enumerate() {
            let id = format!("q{qi:0qwidth$}");
            queries.push(Document {
                id: id.clone(),
                text: g.query(&keys[k]),
            });
            eval_keys.insert(id, keys[k].clone());
        }

        let mut train = Vec::with_capacity(self.n_train);
        for _ in 0..self.n_train {
            let k = g.rng.gen_range(0..keys.len());
            let query = g.query(&keys[k]);
            let positive = g.passage(&keys[k]);
            let mut negatives = Vec::with_capacity(self.n_negatives);
            for _ in 0..self.n_negatives {
                let mut other = g.rng.gen_range(0..keys.len() - 1);
                if other >= k {
                    other += 1;
                }
                negatives.push(g.passage(&keys[other]));
            }
            train.push(TrainExample {
                query,
                positive,
                negatives,
            });
        }

        Ok(SyntheticTask {
            train,
            eval: Corpus {
                name: format!("synthetic-{}", self.seed),
                documents,
                queries,
                qrels,
                pairs: Vec::new(),
            },
            eval_keys,
        })
    }
}

fn digits(n: usize) -> usize {
    n.max(1).to_string().len()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pure_in_seed() {
        let a = make_synthetic_task(7, 50, 10, 40).unwrap();
        let b = make_synthetic_task(7, 50, 10, 40).unwrap();
        let c = make_synthetic_task(8, 50, 10, 40).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn positives_contain_their_key() {
        let t = make_synthetic_task(3, 200, 20, 60).unwrap();
        for ex in &t.train {
            let key: String = ex.query.split(|c: char| !c.is_ascii_alphanumeric())
                .find(|w| w.len() == 4 && w.as_bytes()[0].is_ascii_uppercase())
                .unwrap()
                .to_string();
            assert!(ex.positive.contains(&key));
            assert!(ex.negatives.iter().all(|n| !n.contains(&key)));
            assert_eq!(ex.negatives.len(), 8);
        }
    }

    #[test]
    fn exactly_one_relevant_document_per_query() {
        let t = make_synthetic_task(5, 10, 30, 100).unwrap();
        assert_eq!(t.eval.documents.len(), 150);
        for q in &t.eval.queries {
            let rel = &t.eval.qrels[&q.id];
            assert_eq!(rel.len(), 1);
            let key = &t.eval_keys[&q.id];
            let holders: Vec<_> = t.eval.documents.iter().filter(|d| d.text.contains(key.as_str())).collect();
            assert_eq!(holders.len(), 1);
            assert!(rel.contains_key(&holders[0].id));
        }
    }

    #[test]
    fn train_and_eval_texts_are_disjoint() {
        let t = make_synthetic_task(11, 300, 20, 50).unwrap();
        let eval: BTreeSet<&str> = t.eval.documents.iter().map(|d| d.text.as_str()).collect();
        for ex in &t.train {
            assert!(!eval.contains(ex.positive.as_str()));
            assert!(ex.negatives.iter().all(|n| !eval.contains(n.as_str())));
        }
    }

    #[test]
    fn key_pool_limits() {
        assert!(make_synthetic_task(0, 1, 1, 1).is_err());
        assert!(make_synthetic_task(0, 1, 1, MAX_KEYS + 1).is_err());
        assert_eq!(key_from_index(0), "AA00");
        assert_eq!(key_from_index(MAX_KEYS - 1), "ZZ99");
    }
}
