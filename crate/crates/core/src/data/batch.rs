//! Padded token matrices and collation of training examples.

use crate::data::tokenizer::{tokenize, BOS, EOS, PAD};
use crate::data::TrainExample;
use crate::error::{Error, Result};

/// Row-major `[rows × cols]` token ids with a 0/1 validity mask. Rows are
/// right-padded with [`PAD`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub ids: Vec<u32>,
    pub mask: Vec<u8>,
    pub rows: usize,
    pub cols: usize,
}

impl TokenBatch {
    /// Pads `seqs` to the longest one. Every sequence must be non-empty.
    pub fn from_sequences(seqs: &[Vec<u32>]) -> Result<Self> {
        let cols = seqs.iter().map(Vec::len).max().unwrap_or(0);
        if seqs.iter().any(Vec::is_empty) {
            return Err(Error::invalid("empty sequence in batch"));
        }
        let mut ids = Vec::with_capacity(seqs.len() * cols);
        let mut mask = Vec::with_capacity(seqs.len() * cols);
        for s in seqs {
            ids.extend_from_slice(s);
            mask.extend(std::iter::repeat_n(1, s.len()));
            ids.extend(std::iter::repeat_n(PAD, cols - s.len()));
            mask.extend(std::iter::repeat_n(0, cols - s.len()));
        }
        Ok(Self {
            ids,
            mask,
            rows: seqs.len(),
            cols,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn row_ids(&self, r: usize) -> &[u32] {
        &self.ids[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mask(&self, r: usize) -> &[u8] {
        &self.mask[r * self.cols..(r + 1) * self.cols]
    }

    pub fn valid_len(&self, r: usize) -> usize {
        self.row_mask(r).iter().filter(|&&m| m == 1).count()
    }

    /// The unpadded rows, framing included.
    pub fn sequences(&self) -> Vec<Vec<u32>> {
        (0..self.rows)
            .map(|r| {
                self.row_ids(r)
                    .iter()
                    .zip(self.row_mask(r))
                    .filter(|(_, &m)| m == 1)
                    .map(|(&t, _)| t)
                    .collect()
            })
            .collect()
    }

    /// Sub-batch of the given rows, re-padded to their own longest row.
    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        let all = self.sequences();
        let picked: Vec<Vec<u32>> = rows.iter().map(|&r| all[r].clone()).collect();
        Self::from_sequences(&picked)
    }
}

/// `[BOS, tokens.., EOS]`.
pub fn frame(tokens: &[u32]) -> Vec<u32> {
    let mut out = Vec::with_capacity(tokens.len() + 2);
    out.push(BOS);
    out.extend_from_slice(tokens);
    out.push(EOS);
    out
}

/// Strips one leading BOS and one trailing EOS if present.
pub fn unframe(seq: &[u32]) -> &[u32] {
    let s = seq.strip_prefix(&[BOS]).unwrap_or(seq);
    s.strip_suffix(&[EOS]).unwrap_or(s)
}

/// Collated training examples. Negatives of every example are flattened
/// into one matrix; `neg_owner[j]` is the example that negative `j` came
/// from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub queries: TokenBatch,
    pub positives: TokenBatch,
    pub negatives: Option<TokenBatch>,
    pub neg_owner: Vec<usize>,
    /// Raw (unframed) byte tokens, kept for building generation inputs.
    pub query_tokens: Vec<Vec<u32>>,
    pub positive_tokens: Vec<Vec<u32>>,
    pub negative_tokens: Vec<Vec<u32>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.queries.rows
    }

    pub fn is_empty(&self) -> bool {
        self.queries.rows == 0
    }

    pub fn negatives_of(&self, example: usize) -> impl Iterator<Item = usize> + '_ {
        self.neg_owner
            .iter()
            .enumerate()
            .filter(move |(_, &o)| o == example)
            .map(|(j, _)| j)
    }
}

fn check_len(tokens: &[u32], max_len: usize, what: &str, example: usize) -> Result<()> {
    let framed = tokens.len() + 2;
    if framed > max_len {
        return Err(Error::SequenceTooLong {
            len: framed,
            max: max_len,
            context: Some(format!("example {example}, {what}")),
        });
    }
    Ok(())
}

/// Tokenizes, frames, and pads `examples`. Inputs whose framed length
/// exceeds `max_len` are rejected, never truncated.
pub fn collate(examples: &[TrainExample], max_len: usize) -> Result<Batch> {
    if examples.is_empty() {
        return Err(Error::invalid("cannot collate an empty example list"));
    }
    let mut q_tok = Vec::with_capacity(examples.len());
    let mut p_tok = Vec::with_capacity(examples.len());
    let mut n_tok = Vec::new();
    let mut neg_owner = Vec::new();
    for (i, ex) in examples.iter().enumerate() {
        let q = tokenize(&ex.query);
        let p = tokenize(&ex.positive);
        check_len(&q, max_len, "query", i)?;
        check_len(&p, max_len, "positive", i)?;
        for (j, n) in ex.negatives.iter().enumerate() {
            let n = tokenize(n);
            check_len(&n, max_len, &format!("negative {j}"), i)?;
            n_tok.push(n);
            neg_owner.push(i);
        }
        q_tok.push(q);
        p_tok.push(p);
    }
    let framed = |v: &[Vec<u32>]| v.iter().map(|t| frame(t)).collect::<Vec<_>>();
    Ok(Batch {
        queries: TokenBatch::from_sequences(&framed(&q_tok))?,
        positives: TokenBatch::from_sequences(&framed(&p_tok))?,
        negatives: if n_tok.is_empty() {
            None
        } else {
            Some(TokenBatch::from_sequences(&framed(&n_tok))?)
        },
        neg_owner,
        query_tokens: q_tok,
        positive_tokens: p_tok,
        negative_tokens: n_tok,
    })
}

/// Conditioning inputs `[BOS, query, EOS, passage, EOS]` for scoring
/// passages under a causal model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GenBatch {
    pub tokens: TokenBatch,
    /// `(row, position)` of each scored passage token, row-major.
    pub targets: Vec<(usize, usize)>,
    /// Number of scored tokens per row.
    pub lengths: Vec<usize>,
}

impl GenBatch {
    pub fn new(pairs: &[(&[u32], &[u32])], max_len: usize) -> Result<Self> {
        let mut seqs = Vec::with_capacity(pairs.len());
        let mut targets = Vec::new();
        let mut lengths = Vec::with_capacity(pairs.len());
        for (row, (q, p)) in pairs.iter().enumerate() {
            if p.is_empty() {
                return Err(Error::invalid(format!("pair {row}: passage has no tokens to score")));
            }
            let len = q.len() + p.len() + 3;
            if len > max_len {
                return Err(Error::SequenceTooLong {
                    len,
                    max: max_len,
                    context: Some(format!("query+passage pair {row}")),
                });
            }
            let mut s = Vec::with_capacity(len);
            s.push(BOS);
            s.extend_from_slice(q);
            s.push(EOS);
            let start = s.len();
            s.extend_from_slice(p);
            s.push(EOS);
            targets.extend((start..start + p.len()).map(|pos| (row, pos)));
            lengths.push(p.len());
            seqs.push(s);
        }
        if seqs.is_empty() {
            return Err(Error::invalid("empty generation batch"));
        }
        Ok(Self {
            tokens: TokenBatch::from_sequences(&seqs)?,
            targets,
            lengths,
        })
    }

    pub fn rows(&self) -> usize {
        self.tokens.rows
    }
}
