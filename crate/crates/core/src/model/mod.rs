//! Decoder-only transformer with a switchable attention mask, LoRA
//! adapters, pooling, and passage likelihood scoring.
//!
//! Layout: learned token and absolute position embeddings, `n_layers`
//! pre-norm blocks (RMS norm → multi-head attention → residual, RMS norm →
//! GELU MLP → residual), a final RMS norm, and an output projection tied to
//! the token embedding table. Projections have no bias. Weights are stored
//! `[d_in, d_out]` and applied as `x · W`.

pub mod checkpoint;
pub mod config;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::data::{GenBatch, TokenBatch};
use crate::error::{Error, Result};
use crate::params::{ParamHost, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

pub use config::{AttentionMode, LoraConfig, LoraTarget, ModelConfig, Pooling};

const INIT_STD: f64 = 0.02;
const NORM_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
struct LayerParams {
    attn_norm: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    mlp_norm: ParamId,
    w_up: ParamId,
    w_down: ParamId,
    /// target → (A: `[r, d_in]`, B: `[d_out, r]`)
    adapters: BTreeMap<LoraTarget, (ParamId, ParamId)>,
}

impl LayerParams {
    fn weight(&self, t: LoraTarget) -> ParamId {
        match t {
            LoraTarget::Q => self.wq,
            LoraTarget::K => self.wk,
            LoraTarget::V => self.wv,
            LoraTarget::O => self.wo,
            LoraTarget::Up => self.w_up,
            LoraTarget::Down => self.w_down,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    tok_emb: ParamId,
    pos_emb: ParamId,
    final_norm: ParamId,
    layers: Vec<LayerParams>,
    lora: Option<LoraConfig>,
}

impl<T> ParamHost<T> for Model<T> {
    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }
}

/// Seeds for LoRA dropout masks. `row_keys[b]` identifies batch row `b`
/// independently of how rows are grouped into micro-batches, so any
/// regrouping reproduces the same masks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DropoutPlan {
    pub seed: u64,
    pub row_keys: Vec<u64>,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions<'a> {
    pub mode: AttentionMode,
    /// Route through LoRA adapters when the model has them.
    pub adapters: bool,
    pub dropout: Option<&'a DropoutPlan>,
    pub logits: bool,
}

impl ForwardOptions<'_> {
    pub fn new(mode: AttentionMode) -> Self {
        Self {
            mode,
            adapters: true,
            dropout: None,
            logits: false,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// `[B, L, d_model]`, final-norm output.
    pub hidden: Var,
    /// `[B, L, vocab]`, when requested.
    pub logits: Option<Var>,
}

/// Passage likelihoods of a [`GenBatch`] recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct GenScores {
    /// Per scored token, row-major, `[M]`.
    pub token_logps: Var,
    /// Sum over each row's passage tokens, `[N]`.
    pub sums: Var,
    /// Mean over each row's passage tokens, `[N]`.
    pub means: Var,
}

/// Concrete values of a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardValues<T> {
    pub hidden: Tensor<T>,
    pub logits: Tensor<T>,
}

pub(crate) fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn normal_tensor<T: Real>(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(dist.sample(rng))).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// Closed-form parameter count of a model without adapters.
pub fn parameter_count(cfg: &ModelConfig) -> usize {
    let d = cfg.d_model;
    let per_layer = 4 * d * d + 2 * d * cfg.d_ff + 2 * d;
    cfg.vocab_size * d + cfg.max_seq_len * d + cfg.n_layers * per_layer + d
}

impl<T: Real> Model<T> {
    /// Scaled-normal (std 0.02) weights, unit norm gains. Identical
    /// `(config, seed)` give bitwise-identical parameters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = config.d_model;
        let add = |params: &mut ParamStore<T>, name: String, mut t: Tensor<T>| -> Result<ParamId> {
            t.set_requires_grad(true);
            params.insert(name, t)
        };
        let tok_emb = add(&mut params, "tok_emb".into(), normal_tensor(&mut rng, vec![config.vocab_size, d], INIT_STD))?;
        let pos_emb = add(&mut params, "pos_emb".into(), normal_tensor(&mut rng, vec![config.max_seq_len, d], INIT_STD))?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = |n: &str| format!("layers.{l}.{n}");
            let attn_norm = add(&mut params, p("attn_norm"), Tensor::filled(vec![d], T::one()))?;
            let wq = add(&mut params, p("wq"), normal_tensor(&mut rng, vec![d, d], INIT_STD))?;
            let wk = add(&mut params, p("wk"), normal_tensor(&mut rng, vec![d, d], INIT_STD))?;
            let wv = add(&mut params, p("wv"), normal_tensor(&mut rng, vec![d, d], INIT_STD))?;
            let wo = add(&mut params, p("wo"), normal_tensor(&mut rng, vec![d, d], INIT_STD))?;
            let mlp_norm = add(&mut params, p("mlp_norm"), Tensor::filled(vec![d], T::one()))?;
            let w_up = add(&mut params, p("w_up"), normal_tensor(&mut rng, vec![d, config.d_ff], INIT_STD))?;
            let w_down = add(&mut params, p("w_down"), normal_tensor(&mut rng, vec![config.d_ff, d], INIT_STD))?;
            layers.push(LayerParams {
                attn_norm,
                wq,
                wk,
                wv,
                wo,
                mlp_norm,
                w_up,
                w_down,
                adapters: BTreeMap::new(),
            });
        }
        let final_norm = add(&mut params, "final_norm".into(), Tensor::filled(vec![d], T::one()))?;
        Ok(Self {
            config,
            params,
            tok_emb,
            pos_emb,
            final_norm,
            layers,
            lora: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn lora(&self) -> Option<&LoraConfig> {
        self.lora.as_ref()
    }

    pub fn has_adapters(&self) -> bool {
        self.lora.is_some()
    }

    /// Attaches zero-initialised-B adapters to every target projection and
    /// freezes all base weights. The adapted model computes exactly what
    /// the base model did until the adapters are trained.
    pub fn apply_lora(&mut self, lora: LoraConfig, seed: u64) -> Result<()> {
        if self.lora.is_some() {
            return Err(Error::invalid("model already has LoRA adapters"));
        }
        lora.validate(&self.config)?;
        for id in self.params.ids().collect::<Vec<_>>() {
            self.params.get_mut(id).set_requires_grad(false);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut targets = lora.targets.clone();
        targets.sort();
        targets.dedup();
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for &t in &targets {
                let (din, dout) = t.dims(&self.config);
                let mut a = normal_tensor::<T>(&mut rng, vec![lora.r, din], 1.0 / (din as f64).sqrt());
                let mut b = Tensor::<T>::zeros(vec![dout, lora.r]);
                a.set_requires_grad(true);
                b.set_requires_grad(true);
                let name = t.weight_name();
                let ia = self.params.insert(format!("layers.{l}.{name}.lora_a"), a)?;
                let ib = self.params.insert(format!("layers.{l}.{name}.lora_b"), b)?;
                layer.adapters.insert(t, (ia, ib));
            }
        }
        self.lora = Some(LoraConfig { targets, ..lora });
        Ok(())
    }

    /// A copy without adapters whose base weights absorb them:
    /// `W ← W + (alpha/r)·(B·A)ᵀ` in this crate's `x · W` orientation.
    pub fn merged(&self) -> Result<Self> {
        let Some(lora) = &self.lora else {
            return Ok(self.clone());
        };
        let scale = lora.scale();
        let mut out = Self::new(self.config.clone(), 0)?;
        for id in out.params.ids().collect::<Vec<_>>() {
            let src = self.params.by_name(out.params.name(id)).expect("same base structure");
            out.params.get_mut(id).data_mut().copy_from_slice(src.data());
        }
        for (l, layer) in self.layers.iter().enumerate() {
            for (&t, &(ia, ib)) in &layer.adapters {
                let (din, dout) = t.dims(&self.config);
                let a = self.params.get(ia).data();
                let b = self.params.get(ib).data();
                let w = out.params.get_mut(out.layers[l].weight(t)).data_mut();
                for i in 0..din {
                    for o in 0..dout {
                        let mut acc = 0.0;
                        for k in 0..lora.r {
                            acc += b[o * lora.r + k].as_f64() * a[k * din + i].as_f64();
                        }
                        w[i * dout + o] = w[i * dout + o] + T::lit(scale * acc);
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            tok_emb: self.tok_emb,
            pos_emb: self.pos_emb,
            final_norm: self.final_norm,
            layers: self.layers.clone(),
            lora: self.lora.clone(),
        }
    }

    fn check_tokens(&self, batch: &TokenBatch) -> Result<()> {
        if batch.cols > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: batch.cols,
                max: self.config.max_seq_len,
                context: None,
            });
        }
        if let Some(&id) = batch.ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: self.config.vocab_size,
            });
        }
        if batch.rows == 0 || batch.cols == 0 {
            return Err(Error::invalid("empty token batch"));
        }
        Ok(())
    }

    /// `x · W`, plus `(alpha/r)·dropout(x)·Aᵀ·Bᵀ` when the adapter path is on.
    #[allow(clippy::too_many_arguments)]
    fn project(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        layer: usize,
        target: LoraTarget,
        w: Var,
        opts: &ForwardOptions,
        seq_len: usize,
    ) -> Result<Var> {
        let base = tape.matmul(x, w, false)?;
        if !opts.adapters {
            return Ok(base);
        }
        let Some(&(ia, ib)) = self.layers[layer].adapters.get(&target) else {
            return Ok(base);
        };
        let lora = self.lora.as_ref().expect("adapters imply a LoRA config");
        let a = self.params.bind(tape, ia);
        let b = self.params.bind(tape, ib);
        let mut input = x;
        if let (Some(plan), true) = (opts.dropout, lora.dropout > 0.0) {
            let mask = dropout_mask::<T>(plan, tape.shape(x), seq_len, layer, target, lora.dropout)?;
            input = tape.mul_const(x, mask)?;
        }
        let down = tape.matmul(input, a, true)?;
        let up = tape.matmul(down, b, true)?;
        let up = tape.scale(up, T::lit(lora.scale()));
        tape.add(base, up)
    }

    /// Records a forward pass on `tape`. Padding positions are masked out
    /// as attention keys in both modes; their own outputs are unspecified.
    pub fn forward_tape(&self, tape: &mut Tape<T>, batch: &TokenBatch, opts: &ForwardOptions) -> Result<ForwardOutput> {
        self.check_tokens(batch)?;
        let cfg = &self.config;
        let (bsz, len, d, h) = (batch.rows, batch.cols, cfg.d_model, cfg.n_heads);
        let dh = cfg.head_dim();

        let tok_emb = self.params.bind(tape, self.tok_emb);
        let pos_emb = self.params.bind(tape, self.pos_emb);
        let ids: Vec<usize> = batch.ids.iter().map(|&t| t as usize).collect();
        let tok = tape.embedding(tok_emb, &ids, &[bsz, len])?;
        let positions: Vec<usize> = (0..len).collect();
        let pos = tape.embedding(pos_emb, &positions, &[len])?;
        let mut x = tape.add_broadcast(tok, pos)?;

        let mut attn_mask = Vec::with_capacity(bsz * h * len * len);
        for b in 0..bsz {
            let row = batch.row_mask(b);
            let mut block = Vec::with_capacity(len * len);
            for i in 0..len {
                for (j, &valid) in row.iter().enumerate() {
                    block.push(valid == 0 || (opts.mode == AttentionMode::Causal && j > i));
                }
            }
            for _ in 0..h {
                attn_mask.extend_from_slice(&block);
            }
        }
        let inv_sqrt = T::lit(1.0 / (dh as f64).sqrt());
        let eps = T::lit(NORM_EPS);

        for (l, lp) in self.layers.iter().enumerate() {
            let g1 = self.params.bind(tape, lp.attn_norm);
            let hn = tape.rms_norm(x, g1, eps)?;
            let wq = self.params.bind(tape, lp.wq);
            let wk = self.params.bind(tape, lp.wk);
            let wv = self.params.bind(tape, lp.wv);
            let wo = self.params.bind(tape, lp.wo);
            let q = self.project(tape, hn, l, LoraTarget::Q, wq, opts, len)?;
            let k = self.project(tape, hn, l, LoraTarget::K, wk, opts, len)?;
            let v = self.project(tape, hn, l, LoraTarget::V, wv, opts, len)?;
            let split = |tape: &mut Tape<T>, t: Var| -> Result<Var> {
                let t = tape.reshape(t, vec![bsz, len, h, dh])?;
                tape.permute(t, &[0, 2, 1, 3])
            };
            let (q, k, v) = (split(tape, q)?, split(tape, k)?, split(tape, v)?);
            let scores = tape.batch_matmul(q, k, true)?;
            let scores = tape.scale(scores, inv_sqrt);
            let scores = tape.masked_fill(scores, attn_mask.clone(), T::neg_infinity())?;
            let probs = tape.softmax(scores, 3)?;
            let ctx = tape.batch_matmul(probs, v, false)?;
            let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
            let ctx = tape.reshape(ctx, vec![bsz, len, d])?;
            let o = self.project(tape, ctx, l, LoraTarget::O, wo, opts, len)?;
            x = tape.add(x, o)?;

            let g2 = self.params.bind(tape, lp.mlp_norm);
            let hn = tape.rms_norm(x, g2, eps)?;
            let w_up = self.params.bind(tape, lp.w_up);
            let w_down = self.params.bind(tape, lp.w_down);
            let up = self.project(tape, hn, l, LoraTarget::Up, w_up, opts, len)?;
            let act = tape.gelu(up);
            let down = self.project(tape, act, l, LoraTarget::Down, w_down, opts, len)?;
            x = tape.add(x, down)?;
        }
        let gf = self.params.bind(tape, self.final_norm);
        let hidden = tape.rms_norm(x, gf, eps)?;
        let logits = if opts.logits {
            Some(tape.matmul(hidden, tok_emb, true)?)
        } else {
            None
        };
        Ok(ForwardOutput { hidden, logits })
    }

    /// Embeddings `[B, d_model]`: forward in the configured embedding
    /// attention mode, then pooling.
    pub fn embed_tape(&self, tape: &mut Tape<T>, batch: &TokenBatch, dropout: Option<&DropoutPlan>) -> Result<Var> {
        let opts = ForwardOptions {
            dropout,
            ..ForwardOptions::new(self.config.embed_attention)
        };
        let out = self.forward_tape(tape, batch, &opts)?;
        pool_tape(tape, out.hidden, batch, self.config.pooling)
    }

    /// Causal log-likelihood of every passage token of `gen`, conditioned
    /// on its query. Only passage tokens are scored.
    pub fn gen_scores_tape(
        &self,
        tape: &mut Tape<T>,
        gen: &GenBatch,
        adapters: bool,
        dropout: Option<&DropoutPlan>,
    ) -> Result<GenScores> {
        let opts = ForwardOptions {
            mode: AttentionMode::Causal,
            adapters,
            dropout,
            logits: false,
        };
        let out = self.forward_tape(tape, &gen.tokens, &opts)?;
        let (len, d) = (gen.tokens.cols, self.config.d_model);
        let vocab = self.config.vocab_size;
        // Token at `pos` is predicted from the hidden state at `pos − 1`.
        let mut rows = Vec::with_capacity(gen.targets.len() * d);
        for &(r, pos) in &gen.targets {
            let base = (r * len + pos - 1) * d;
            rows.extend(base..base + d);
        }
        let m = gen.targets.len();
        let picked = tape.gather(out.hidden, &rows)?;
        let picked = tape.reshape(picked, vec![m, d])?;
        let tok_emb = self.params.bind(tape, self.tok_emb);
        let logits = tape.matmul(picked, tok_emb, true)?;
        let logp = tape.log_softmax(logits, 1)?;
        let idx: Vec<usize> = gen
            .targets
            .iter()
            .enumerate()
            .map(|(i, &(r, pos))| i * vocab + gen.tokens.row_ids(r)[pos] as usize)
            .collect();
        let token_logps = tape.gather(logp, &idx)?;
        let segments: Vec<usize> = gen.targets.iter().map(|&(r, _)| r).collect();
        let sums = tape.segment_sum(token_logps, &segments, gen.rows())?;
        let inv_len: Vec<T> = gen.lengths.iter().map(|&n| T::one() / T::lit(n as f64)).collect();
        let means = tape.mul_const(sums, inv_len)?;
        Ok(GenScores {
            token_logps,
            sums,
            means,
        })
    }

    // ----- value-level convenience --------------------------------------

    pub fn forward(&self, batch: &TokenBatch, mode: AttentionMode) -> Result<ForwardValues<T>> {
        let mut tape = Tape::no_grad();
        let opts = ForwardOptions {
            logits: true,
            ..ForwardOptions::new(mode)
        };
        let out = self.forward_tape(&mut tape, batch, &opts)?;
        let logits = out.logits.expect("requested");
        Ok(ForwardValues {
            hidden: Tensor::new(tape.shape(out.hidden).to_vec(), tape.value(out.hidden).to_vec())?,
            logits: Tensor::new(tape.shape(logits).to_vec(), tape.value(logits).to_vec())?,
        })
    }

    /// Inference embeddings `[B, d_model]`, dropout off.
    pub fn encode(&self, batch: &TokenBatch) -> Result<Tensor<T>> {
        let mut tape = Tape::no_grad();
        let e = self.embed_tape(&mut tape, batch, None)?;
        Tensor::new(tape.shape(e).to_vec(), tape.value(e).to_vec())
    }

    /// Embeds raw texts in chunks of `chunk` rows.
    pub fn encode_texts(&self, texts: &[&str], chunk: usize) -> Result<Vec<Vec<T>>> {
        let d = self.config.d_model;
        let mut out = Vec::with_capacity(texts.len());
        for (c, group) in texts.chunks(chunk.max(1)).enumerate() {
            let seqs: Vec<Vec<u32>> = group
                .iter()
                .map(|t| crate::data::batch::frame(&crate::data::tokenize(t)))
                .collect();
            if let Some((i, s)) = seqs.iter().enumerate().find(|(_, s)| s.len() > self.config.max_seq_len) {
                return Err(Error::SequenceTooLong {
                    len: s.len(),
                    max: self.config.max_seq_len,
                    context: Some(format!("text {}", c * chunk.max(1) + i)),
                });
            }
            let batch = TokenBatch::from_sequences(&seqs)?;
            let e = self.encode(&batch)?;
            out.extend(e.data().chunks(d).map(<[T]>::to_vec));
        }
        Ok(out)
    }

    /// `log π(wᵢ | [BOS, query, EOS, w<i])` for each passage token.
    pub fn sequence_log_probs(&self, query: &[u32], passage: &[u32]) -> Result<Vec<T>> {
        self.sequence_log_probs_with(query, passage, true)
    }

    pub(crate) fn sequence_log_probs_with(&self, query: &[u32], passage: &[u32], adapters: bool) -> Result<Vec<T>> {
        let gen = GenBatch::new(&[(query, passage)], self.config.max_seq_len)?;
        let mut tape = Tape::no_grad();
        let s = self.gen_scores_tape(&mut tape, &gen, adapters, None)?;
        Ok(tape.value(s.token_logps).to_vec())
    }
}

fn dropout_mask<T: Real>(
    plan: &DropoutPlan,
    shape: &[usize],
    seq_len: usize,
    layer: usize,
    target: LoraTarget,
    p: f64,
) -> Result<Vec<T>> {
    let d_in = *shape.last().unwrap();
    let n: usize = shape.iter().product();
    let rows = n / (seq_len * d_in);
    if rows != plan.row_keys.len() {
        return Err(Error::invalid(format!(
            "dropout plan has {} row keys for {rows} batch rows",
            plan.row_keys.len()
        )));
    }
    let keep = T::lit(1.0 / (1.0 - p));
    let site = (layer as u64) << 8 | target as u64;
    let mut mask = Vec::with_capacity(n);
    for &key in &plan.row_keys {
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(plan.seed ^ mix64(key ^ mix64(site))));
        for _ in 0..seq_len * d_in {
            mask.push(if rng.gen::<f64>() < p { T::zero() } else { keep });
        }
    }
    Ok(mask)
}

/// Pooling weights `[B, L]` for `strategy`; pad positions get weight 0.
pub fn pooling_weights<T: Real>(batch_mask: &[u8], rows: usize, cols: usize, strategy: Pooling) -> Result<Vec<T>> {
    let mut w = vec![T::zero(); rows * cols];
    for r in 0..rows {
        let mask = &batch_mask[r * cols..(r + 1) * cols];
        let valid: Vec<usize> = (0..cols).filter(|&j| mask[j] == 1).collect();
        if valid.is_empty() {
            return Err(Error::invalid(format!("row {r} has no valid tokens to pool")));
        }
        let row = &mut w[r * cols..(r + 1) * cols];
        match strategy {
            Pooling::First => row[valid[0]] = T::one(),
            Pooling::Last => row[*valid.last().unwrap()] = T::one(),
            Pooling::Mean => {
                let inv = T::one() / T::lit(valid.len() as f64);
                for &j in &valid {
                    row[j] = inv;
                }
            }
            Pooling::WeightedMean => {
                let n = valid.len() as f64;
                let total = n * (n + 1.0) / 2.0;
                for (rank, &j) in valid.iter().enumerate() {
                    row[j] = T::lit((rank + 1) as f64 / total);
                }
            }
        }
    }
    Ok(w)
}

/// Reduces hidden states `[B, L, d]` to `[B, d]`.
pub fn pool_tape<T: Real>(tape: &mut Tape<T>, hidden: Var, batch: &TokenBatch, strategy: Pooling) -> Result<Var> {
    let shape = tape.shape(hidden).to_vec();
    if shape.len() != 3 || shape[0] != batch.rows || shape[1] != batch.cols {
        return Err(Error::Shape {
            op: "pool",
            lhs: shape,
            rhs: vec![batch.rows, batch.cols],
        });
    }
    let (b, l, d) = (shape[0], shape[1], shape[2]);
    let w = pooling_weights::<T>(&batch.mask, b, l, strategy)?;
    let w = tape.constant(vec![b, 1, l], w)?;
    let pooled = tape.batch_matmul(w, hidden, false)?;
    tape.reshape(pooled, vec![b, d])
}

/// Value-level pooling of `hidden` (`[B, L, d]`) under a 0/1 `mask`.
pub fn pool<T: Real>(hidden: &Tensor<T>, mask: &[u8], strategy: Pooling) -> Result<Tensor<T>> {
    let s = hidden.shape();
    if s.len() != 3 || mask.len() != s[0] * s[1] {
        return Err(Error::Shape {
            op: "pool",
            lhs: s.to_vec(),
            rhs: vec![mask.len()],
        });
    }
    let batch = TokenBatch {
        ids: vec![0; mask.len()],
        mask: mask.to_vec(),
        rows: s[0],
        cols: s[1],
    };
    let mut tape = Tape::no_grad();
    let h = tape.constant(s.to_vec(), hidden.data().to_vec())?;
    let p = pool_tape(&mut tape, h, &batch, strategy)?;
    Tensor::new(tape.shape(p).to_vec(), tape.value(p).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::batch::frame;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            max_seq_len: 16,
            ..Default::default()
        }
    }

    fn batch(seqs: &[&[u32]]) -> TokenBatch {
        TokenBatch::from_sequences(&seqs.iter().map(|s| frame(s)).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let a = Model::<f32>::new(tiny(), 3).unwrap();
        let b = Model::<f32>::new(tiny(), 3).unwrap();
        let c = Model::<f32>::new(tiny(), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let cfg = ModelConfig {
            vocab_size: 259,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_seq_len: 64,
            ..Default::default()
        };
        let m = Model::<f32>::new(cfg.clone(), 0).unwrap();
        assert_eq!(m.params.numel(), parameter_count(&cfg));
        // 259·64 + 64·64 + 2·(4·64² + 2·64·256 + 2·64) + 64
        assert_eq!(parameter_count(&cfg), 119_296);
    }

    #[test]
    fn pooling_examples() {
        let h = Tensor::new(vec![1, 2, 2], vec![1.0f64, 1.0, 3.0, 3.0]).unwrap();
        assert_eq!(pool(&h, &[1, 1], Pooling::Mean).unwrap().data(), &[2.0, 2.0]);
        assert_eq!(pool(&h, &[1, 0], Pooling::Mean).unwrap().data(), &[1.0, 1.0]);
        let wm = pool(&h, &[1, 1], Pooling::WeightedMean).unwrap();
        for v in wm.data() {
            assert!((v - 7.0 / 3.0).abs() < 1e-12);
        }
        assert_eq!(pool(&h, &[1, 1], Pooling::First).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(pool(&h, &[1, 0], Pooling::Last).unwrap().data(), &[1.0, 1.0]);
        assert!(pool(&h, &[0, 0], Pooling::Mean).is_err());
    }

    #[test]
    fn out_of_range_and_too_long_inputs() {
        let m = Model::<f64>::new(tiny(), 0).unwrap();
        let bad = TokenBatch::from_sequences(&[vec![1, 300]]).unwrap();
        assert!(matches!(m.forward(&bad, AttentionMode::Causal), Err(Error::TokenOutOfRange { id: 300, .. })));
        let long = TokenBatch::from_sequences(&[vec![1; 17]]).unwrap();
        assert!(matches!(m.forward(&long, AttentionMode::Causal), Err(Error::SequenceTooLong { .. })));
    }

    #[test]
    fn single_sentence_embedding() {
        let m = Model::<f32>::new(tiny(), 1).unwrap();
        let e = m.encode(&batch(&[b"hi there".map(u32::from).as_slice()])).unwrap();
        assert_eq!(e.shape(), &[1, 16]);
    }

    #[test]
    fn lora_starts_as_a_no_op() {
        let base = Model::<f64>::new(tiny(), 5).unwrap();
        let mut adapted = base.clone();
        adapted
            .apply_lora(LoraConfig { r: 4, ..Default::default() }, 9)
            .unwrap();
        let b = batch(&[&[5, 6, 7], &[8, 9]]);
        for mode in [AttentionMode::Causal, AttentionMode::Bidirectional] {
            let x = base.forward(&b, mode).unwrap();
            let y = adapted.forward(&b, mode).unwrap();
            assert_eq!(x.logits, y.logits);
        }
        // only adapters are trainable: 2 layers × 4 targets × r·(d_in + d_out)
        assert_eq!(adapted.params.trainable_numel(), 2 * 4 * 4 * (16 + 16));
    }

    #[test]
    fn sequence_scores_only_passage_tokens() {
        let m = Model::<f64>::new(tiny(), 2).unwrap();
        let lp = m.sequence_log_probs(&[10, 11], &[20, 21, 22]).unwrap();
        assert_eq!(lp.len(), 3);
        assert!(lp.iter().all(|&x| x < 0.0));
        let too_long = m.sequence_log_probs(&[1; 8], &[2; 8]);
        assert!(matches!(too_long, Err(Error::SequenceTooLong { .. })));
    }
}
