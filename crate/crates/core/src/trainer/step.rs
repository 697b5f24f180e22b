//! One optimisation step's worth of gradients, computed either with the
//! gradient cache or naively over the whole batch.
//!
//! The cached step runs in three phases:
//! 1. gradient-free embedding forwards, one micro-batch at a time;
//! 2. the contrastive loss over all collected embeddings, differentiated
//!    only down to the embeddings;
//! 3. a second forward of each micro-batch with gradients, seeded with its
//!    slice of the cached embedding gradients. The generation-side losses
//!    decompose per example and are added to the same reverse pass.
//!
//! Both paths leave their gradients in the model's parameter slots.

use std::ops::Range;

use crate::autodiff::{Tape, Var};
use crate::data::{Batch, GenBatch, TokenBatch};
use crate::error::{Error, Result};
use crate::losses::{contrastive_tape, cosine_pairs_tape, dpo_terms_tape, kl_terms_tape, DpoPair, LossWeights};
use crate::model::{mix64, DropoutPlan, Model};
use crate::params::ParamHost;
use crate::tensor::Real;

use super::reference::ReferenceScorer;
use super::Strategy;

/// Loss values of one step. Components are unweighted; `total` applies the
/// strategy's weights.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub total: f64,
    pub cl: f64,
    pub sft: f64,
    pub dpo: f64,
    pub kl: f64,
    /// Largest tape footprint seen during the step, in bytes.
    pub peak_tape_bytes: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct LossSetup<'a> {
    pub strategy: Strategy,
    pub weights: &'a LossWeights,
}

impl LossSetup<'_> {
    fn sft(&self) -> bool {
        self.strategy.uses_sft() && self.weights.lambda_sft > 0.0
    }

    fn dpo(&self) -> bool {
        self.strategy.uses_dpo() && self.weights.lambda_dpo > 0.0
    }

    fn kl(&self) -> bool {
        self.strategy.uses_kl() && self.weights.lambda_kl > 0.0
    }

    fn generation(&self) -> bool {
        self.sft() || self.dpo() || self.kl()
    }

    fn total(&self, l: &StepLosses) -> f64 {
        let w = self.weights;
        let mut t = w.lambda_cl * l.cl;
        if self.strategy.uses_sft() {
            t += w.lambda_sft * l.sft;
        }
        if self.strategy.uses_dpo() {
            t += w.lambda_dpo * l.dpo;
        }
        if self.strategy.uses_kl() {
            t += w.lambda_kl * l.kl;
        }
        t
    }
}

const KIND_QUERY: u64 = 0;
const KIND_POSITIVE: u64 = 1;
const KIND_NEGATIVE: u64 = 2;
const KIND_GENERATION: u64 = 3;

fn row_key(kind: u64, example: usize, ordinal: usize) -> u64 {
    mix64(kind << 60 ^ (example as u64) << 28 ^ ordinal as u64)
}

/// Examples `range` of a batch, re-padded to their own longest rows.
struct Chunk {
    range: Range<usize>,
    queries: TokenBatch,
    positives: TokenBatch,
    negatives: Option<TokenBatch>,
    /// Batch-level indices of this chunk's negatives; contiguous.
    neg_rows: Range<usize>,
    neg_keys: Vec<u64>,
}

impl Chunk {
    fn new(batch: &Batch, range: Range<usize>) -> Result<Self> {
        let rows: Vec<usize> = range.clone().collect();
        let neg: Vec<usize> = (0..batch.neg_owner.len())
            .filter(|&j| range.contains(&batch.neg_owner[j]))
            .collect();
        let neg_rows = match (neg.first(), neg.last()) {
            (Some(&a), Some(&b)) if b + 1 - a == neg.len() => a..b + 1,
            (None, None) => 0..0,
            _ => return Err(Error::invalid("negatives of a micro-batch are not contiguous")),
        };
        let mut neg_keys = Vec::with_capacity(neg.len());
        let mut ordinal = 0;
        for (k, &j) in neg.iter().enumerate() {
            let o = batch.neg_owner[j];
            if k > 0 && batch.neg_owner[neg[k - 1]] != o {
                ordinal = 0;
            }
            neg_keys.push(row_key(KIND_NEGATIVE, o, ordinal));
            ordinal += 1;
        }
        let negatives = match &batch.negatives {
            Some(n) if !neg.is_empty() => Some(n.select(&neg)?),
            _ => None,
        };
        Ok(Self {
            queries: batch.queries.select(&rows)?,
            positives: batch.positives.select(&rows)?,
            negatives,
            neg_rows,
            neg_keys,
            range,
        })
    }
}

struct ChunkEmb {
    q: Var,
    p: Var,
    n: Option<Var>,
}

fn plan(seed: Option<u64>, keys: Vec<u64>) -> Option<DropoutPlan> {
    seed.map(|seed| DropoutPlan { seed, row_keys: keys })
}

fn embed_chunk<T: Real>(model: &Model<T>, tape: &mut Tape<T>, c: &Chunk, seed: Option<u64>) -> Result<ChunkEmb> {
    let qk = c.range.clone().map(|i| row_key(KIND_QUERY, i, 0)).collect();
    let pk = c.range.clone().map(|i| row_key(KIND_POSITIVE, i, 0)).collect();
    let q = model.embed_tape(tape, &c.queries, plan(seed, qk).as_ref())?;
    let p = model.embed_tape(tape, &c.positives, plan(seed, pk).as_ref())?;
    let n = match &c.negatives {
        Some(n) => Some(model.embed_tape(tape, n, plan(seed, c.neg_keys.clone()).as_ref())?),
        None => None,
    };
    Ok(ChunkEmb { q, p, n })
}

/// Per-example values of the generation losses, summed in example order
/// at the end so reported values do not depend on micro-batching.
struct Terms {
    sft: Vec<f64>,
    dpo: Vec<f64>,
    kl: Vec<f64>,
}

impl Terms {
    fn new(n: usize) -> Self {
        Self {
            sft: vec![0.0; n],
            dpo: vec![0.0; n],
            kl: vec![0.0; n],
        }
    }

    fn add<T: Real>(dst: &mut [f64], tape: &Tape<T>, v: Var, owners: &[usize]) {
        for (&x, &o) in tape.value(v).iter().zip(owners) {
            dst[o] += x.as_f64();
        }
    }
}

/// Records the chunk's weighted SFT, DPO and KL terms, returning their sum.
#[allow(clippy::too_many_arguments)]
fn generation_losses<T: Real>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    reference: Option<&ReferenceScorer<T>>,
    batch: &Batch,
    c: &Chunk,
    emb: &ChunkEmb,
    setup: &LossSetup,
    seed: Option<u64>,
    terms: &mut Terms,
) -> Result<Option<Var>> {
    if !setup.generation() {
        return Ok(None);
    }
    let w = setup.weights;
    let b = batch.len();
    let with_negs = (0..b).filter(|&i| batch.negatives_of(i).next().is_some()).count();

    // Rows: for each example, its positive then its negatives.
    let mut pairs: Vec<(&[u32], &[u32])> = Vec::new();
    let mut keys = Vec::new();
    let mut row_owner = Vec::new();
    let mut cand = Vec::new();
    let mut spans = Vec::new();
    let p_rows = c.range.len();
    for i in c.range.clone() {
        let start = pairs.len();
        pairs.push((&batch.query_tokens[i], &batch.positive_tokens[i]));
        keys.push(row_key(KIND_GENERATION, i, 0));
        row_owner.push(i);
        cand.push((i - c.range.start, i - c.range.start));
        for (k, j) in batch.negatives_of(i).enumerate() {
            pairs.push((&batch.query_tokens[i], &batch.negative_tokens[j]));
            keys.push(row_key(KIND_GENERATION, i, k + 1));
            row_owner.push(i);
            cand.push((i - c.range.start, p_rows + j - c.neg_rows.start));
        }
        spans.push(start..pairs.len());
    }
    let gen = GenBatch::new(&pairs, model.config().max_seq_len)?;
    let scores = model.gen_scores_tape(tape, &gen, true, plan(seed, keys).as_ref())?;

    let mut parts = Vec::new();
    if setup.sft() {
        let pos: Vec<usize> = spans.iter().map(|s| s.start).collect();
        let picked = tape.gather(scores.means, &pos)?;
        let t = tape.mul_const(picked, vec![T::lit(-1.0 / b as f64); pos.len()])?;
        Terms::add(&mut terms.sft, tape, t, &c.range.clone().collect::<Vec<_>>());
        let s = tape.sum(t);
        parts.push(tape.scale(s, T::lit(w.lambda_sft)));
    }
    let groups: Vec<(usize, Range<usize>)> = c
        .range
        .clone()
        .zip(&spans)
        .filter(|(_, s)| s.len() >= 2)
        .map(|(i, s)| (i, s.clone()))
        .collect();
    if setup.dpo() && !groups.is_empty() {
        let reference = reference.ok_or_else(|| Error::invalid("DPO requires a reference scorer"))?;
        let ref_sums = reference.sums(model, &gen)?;
        let mut dpo_pairs = Vec::new();
        let mut owners = Vec::new();
        for (i, s) in &groups {
            let h = s.len() - 1;
            for neg in s.start + 1..s.end {
                dpo_pairs.push(DpoPair {
                    pos: s.start,
                    neg,
                    weight: 1.0 / (h * with_negs) as f64,
                });
                owners.push(*i);
            }
        }
        let t = dpo_terms_tape(tape, scores.sums, &ref_sums, &dpo_pairs, w.beta)?;
        Terms::add(&mut terms.dpo, tape, t, &owners);
        let s = tape.sum(t);
        parts.push(tape.scale(s, T::lit(w.lambda_dpo)));
    }
    if setup.kl() && !groups.is_empty() {
        let candidates = match emb.n {
            Some(n) => tape.concat(&[emb.p, n], 0)?,
            None => emb.p,
        };
        let s_rt = cosine_pairs_tape(tape, emb.q, candidates, &cand)?;
        let kl_groups: Vec<(Range<usize>, f64)> =
            groups.iter().map(|(_, s)| (s.clone(), 1.0 / with_negs as f64)).collect();
        let owners: Vec<usize> = groups.iter().flat_map(|(i, s)| std::iter::repeat_n(*i, s.len())).collect();
        let t = kl_terms_tape(tape, s_rt, scores.means, &kl_groups, w.kl_tau, w.stop_gen_grad)?;
        Terms::add(&mut terms.kl, tape, t, &owners);
        let s = tape.sum(t);
        parts.push(tape.scale(s, T::lit(w.lambda_kl)));
    }
    let mut total = None;
    for p in parts {
        total = Some(match total {
            None => p,
            Some(t) => tape.add(t, p)?,
        });
    }
    Ok(total)
}

fn finish(setup: &LossSetup, cl: f64, terms: &Terms, peak: usize) -> StepLosses {
    let sum = |v: &[f64]| v.iter().sum::<f64>();
    let mut l = StepLosses {
        total: 0.0,
        cl,
        sft: sum(&terms.sft),
        dpo: sum(&terms.dpo),
        kl: sum(&terms.kl),
        peak_tape_bytes: peak,
    };
    l.total = setup.total(&l);
    l
}

fn owners_of(batch: &Batch) -> &[usize] {
    &batch.neg_owner
}

/// Gradient-cached step. `micro` is the number of examples per micro-batch;
/// the last micro-batch may be smaller. `dropout_seed` enables LoRA dropout.
pub fn gradcache_step<T: Real>(
    model: &mut Model<T>,
    reference: Option<&ReferenceScorer<T>>,
    batch: &Batch,
    setup: &LossSetup,
    micro: usize,
    dropout_seed: Option<u64>,
) -> Result<StepLosses> {
    if micro == 0 {
        return Err(Error::invalid("micro-batch size must be positive"));
    }
    let b = batch.len();
    let d = model.config().d_model;
    let chunks: Vec<Chunk> = (0..b)
        .step_by(micro)
        .map(|s| Chunk::new(batch, s..(s + micro).min(b)))
        .collect::<Result<_>>()?;
    let mut peak = 0;

    // Phase 1: embeddings without a graph.
    let n_neg = batch.neg_owner.len();
    let mut q_all = Vec::with_capacity(b * d);
    let mut p_all = Vec::with_capacity(b * d);
    let mut n_all = Vec::with_capacity(n_neg * d);
    for c in &chunks {
        let mut tape = Tape::no_grad();
        let e = embed_chunk(model, &mut tape, c, dropout_seed)?;
        q_all.extend_from_slice(tape.value(e.q));
        p_all.extend_from_slice(tape.value(e.p));
        if let Some(n) = e.n {
            n_all.extend_from_slice(tape.value(n));
        }
        peak = peak.max(tape.value_bytes());
    }
    if q_all.len() != b * d || p_all.len() != b * d || n_all.len() != n_neg * d {
        return Err(Error::invalid("embedding cache does not cover the batch"));
    }

    // Phase 2: contrastive loss over the cached embeddings.
    let w = setup.weights;
    let mut tape = Tape::new();
    let q = tape.leaf(vec![b, d], q_all, true)?;
    let p = tape.leaf(vec![b, d], p_all, true)?;
    let n = if n_neg > 0 {
        Some(tape.leaf(vec![n_neg, d], n_all, true)?)
    } else {
        None
    };
    let cl = contrastive_tape(&mut tape, q, p, n.map(|n| (n, owners_of(batch))), w.tau, w.cross_negatives)?;
    let cl_value = tape.scalar(cl).as_f64();
    let weighted = tape.scale(cl, T::lit(w.lambda_cl));
    let grads = tape.backward(weighted)?;
    let zeros = |len: usize| vec![T::zero(); len];
    let gq = grads.wrt(q).map_or_else(|| zeros(b * d), <[T]>::to_vec);
    let gp = grads.wrt(p).map_or_else(|| zeros(b * d), <[T]>::to_vec);
    let gn = n.map(|n| grads.wrt(n).map_or_else(|| zeros(n_neg * d), <[T]>::to_vec));
    peak = peak.max(tape.value_bytes());
    drop(tape);

    // Phase 3: re-forward with gradients, inject cached embedding gradients.
    let mut terms = Terms::new(b);
    for c in &chunks {
        let mut tape = Tape::new();
        let e = embed_chunk(model, &mut tape, c, dropout_seed)?;
        let r = c.range.start * d..c.range.end * d;
        let mut seeds = vec![(e.q, gq[r.clone()].to_vec()), (e.p, gp[r].to_vec())];
        if let (Some(nv), Some(gn)) = (e.n, &gn) {
            seeds.push((nv, gn[c.neg_rows.start * d..c.neg_rows.end * d].to_vec()));
        }
        for (v, g) in &seeds {
            if tape.value(*v).len() != g.len() {
                return Err(Error::Shape {
                    op: "gradient cache",
                    lhs: tape.shape(*v).to_vec(),
                    rhs: vec![g.len()],
                });
            }
        }
        if let Some(l) = generation_losses(&mut tape, model, reference, batch, c, &e, setup, dropout_seed, &mut terms)? {
            seeds.push((l, vec![T::one()]));
        }
        peak = peak.max(tape.value_bytes());
        match tape.backward_seeded(&seeds) {
            Ok(g) => model.params_mut().accumulate(&g)?,
            // Nothing trainable is reachable (all parameters frozen).
            Err(Error::Detached) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(finish(setup, cl_value, &terms, peak))
}

fn full_batch_loss<T: Real>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    reference: Option<&ReferenceScorer<T>>,
    batch: &Batch,
    setup: &LossSetup,
    dropout_seed: Option<u64>,
) -> Result<(Var, f64, Terms)> {
    let w = setup.weights;
    let c = Chunk::new(batch, 0..batch.len())?;
    let e = embed_chunk(model, tape, &c, dropout_seed)?;
    let cl = contrastive_tape(tape, e.q, e.p, e.n.map(|n| (n, owners_of(batch))), w.tau, w.cross_negatives)?;
    let cl_value = tape.scalar(cl).as_f64();
    let mut total = tape.scale(cl, T::lit(w.lambda_cl));
    let mut terms = Terms::new(batch.len());
    if let Some(l) = generation_losses(tape, model, reference, batch, &c, &e, setup, dropout_seed, &mut terms)? {
        total = tape.add(total, l)?;
    }
    Ok((total, cl_value, terms))
}

/// The weighted training loss of a whole batch as one tape node.
pub fn batch_loss_tape<T: Real>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    reference: Option<&ReferenceScorer<T>>,
    batch: &Batch,
    setup: &LossSetup,
    dropout_seed: Option<u64>,
) -> Result<Var> {
    full_batch_loss(tape, model, reference, batch, setup, dropout_seed).map(|(v, _, _)| v)
}

/// Reference implementation: one graph over the whole batch, one reverse
/// pass from the total loss.
pub fn naive_step<T: Real>(
    model: &mut Model<T>,
    reference: Option<&ReferenceScorer<T>>,
    batch: &Batch,
    setup: &LossSetup,
    dropout_seed: Option<u64>,
) -> Result<StepLosses> {
    let mut tape = Tape::new();
    let (total, cl_value, terms) = full_batch_loss(&mut tape, model, reference, batch, setup, dropout_seed)?;
    let peak = tape.value_bytes();
    match tape.backward(total) {
        Ok(g) => model.params_mut().accumulate(&g)?,
        Err(Error::Detached) => {}
        Err(e) => return Err(e),
    }
    Ok(finish(setup, cl_value, &terms, peak))
}
