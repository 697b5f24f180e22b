//! Fine-tuning objectives: contrastive, SFT, DPO, and the generation-augmented
//! KL consistency term.
//!
//! Each objective exists twice. The `*_tape` form records onto a [`Tape`] so
//! the trainer can differentiate it; the plain form takes concrete values and
//! is what callers outside training use.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// P_gen entries are floored at this value before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_cl: f64,
    pub lambda_dpo: f64,
    pub lambda_kl: f64,
    /// Weight of the SFT term in the `cl_sft` and `grl_sft` strategies.
    pub lambda_sft: f64,
    /// Contrastive temperature.
    pub tau: f64,
    /// Temperature applied to cosine scores inside P_rt.
    pub kl_tau: f64,
    pub beta: f64,
    /// Let every query see all hard negatives in the batch, not just its own.
    pub cross_negatives: bool,
    /// Stop KL gradients from reaching the generation branch.
    pub stop_gen_grad: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_cl: 1.0,
            lambda_dpo: 0.5,
            lambda_kl: 1.0,
            lambda_sft: 0.5,
            tau: 0.05,
            kl_tau: 0.05,
            beta: 0.1,
            cross_negatives: false,
            stop_gen_grad: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("tau", self.tau), ("kl_tau", self.kl_tau), ("beta", self.beta)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("loss.{name}"), format!("must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("lambda_cl", self.lambda_cl),
            ("lambda_dpo", self.lambda_dpo),
            ("lambda_kl", self.lambda_kl),
            ("lambda_sft", self.lambda_sft),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("loss.{name}"), format!("must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

// ----- tape forms -------------------------------------------------------

/// Cosine similarity of selected row pairs: `out[i] = cos(a[pairs[i].0], b[pairs[i].1])`.
pub fn cosine_pairs_tape<T: Real>(tape: &mut Tape<T>, a: Var, b: Var, pairs: &[(usize, usize)]) -> Result<Var> {
    let (sa, sb) = (tape.shape(a).to_vec(), tape.shape(b).to_vec());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
        return Err(Error::Shape {
            op: "cosine_pairs",
            lhs: sa,
            rhs: sb,
        });
    }
    let d = sa[1];
    let an = tape.normalize_rows(a)?;
    let bn = tape.normalize_rows(b)?;
    let ia: Vec<usize> = pairs.iter().flat_map(|&(i, _)| i * d..(i + 1) * d).collect();
    let ib: Vec<usize> = pairs.iter().flat_map(|&(_, j)| j * d..(j + 1) * d).collect();
    let ga = tape.gather(an, &ia)?;
    let gb = tape.gather(bn, &ib)?;
    let prod = tape.mul(ga, gb)?;
    let segments: Vec<usize> = (0..pairs.len() * d).map(|i| i / d).collect();
    tape.segment_sum(prod, &segments, pairs.len())
}

/// Temperature-scaled InfoNCE over in-batch positives and hard negatives.
///
/// `queries` and `positives` are `[B, d]`; `negatives` is `[N, d]` with
/// `owner[j]` the query that negative `j` belongs to. Unless `cross` is set,
/// a query only sees its own hard negatives. Returns the mean over queries.
pub fn contrastive_tape<T: Real>(
    tape: &mut Tape<T>,
    queries: Var,
    positives: Var,
    negatives: Option<(Var, &[usize])>,
    tau: f64,
    cross: bool,
) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("contrastive temperature must be positive, got {tau}")));
    }
    let (sq, sp) = (tape.shape(queries).to_vec(), tape.shape(positives).to_vec());
    if sq.len() != 2 || sq != sp {
        return Err(Error::Shape {
            op: "contrastive_loss",
            lhs: sq,
            rhs: sp,
        });
    }
    let b = sq[0];
    let qn = tape.normalize_rows(queries)?;
    let pn = tape.normalize_rows(positives)?;
    let mut logits = tape.matmul(qn, pn, true)?;
    let mut width = b;
    let mut mask = None;
    if let Some((neg, owner)) = negatives {
        let sn = tape.shape(neg).to_vec();
        if sn.len() != 2 || sn[1] != sq[1] || sn[0] != owner.len() {
            return Err(Error::Shape {
                op: "contrastive_loss",
                lhs: sq,
                rhs: sn,
            });
        }
        if let Some(&bad) = owner.iter().find(|&&o| o >= b) {
            return Err(Error::invalid(format!("negative owner {bad} outside batch of {b}")));
        }
        let nn = tape.normalize_rows(neg)?;
        let s_neg = tape.matmul(qn, nn, true)?;
        logits = tape.concat(&[logits, s_neg], 1)?;
        width = b + owner.len();
        if !cross {
            let mut m = vec![false; b * width];
            for i in 0..b {
                for (j, &o) in owner.iter().enumerate() {
                    m[i * width + b + j] = o != i;
                }
            }
            mask = Some(m);
        }
    }
    let mut logits = tape.scale(logits, T::lit(1.0 / tau));
    if let Some(m) = mask {
        logits = tape.masked_fill(logits, m, T::neg_infinity())?;
    }
    let logp = tape.log_softmax(logits, 1)?;
    let diag: Vec<usize> = (0..b).map(|i| i * width + i).collect();
    let picked = tape.gather(logp, &diag)?;
    let mean = tape.mean(picked);
    Ok(tape.neg(mean))
}

/// One preferred/dispreferred comparison. Indices refer to rows of the
/// sequence log-likelihood vectors passed to [`dpo_tape`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DpoPair {
    pub pos: usize,
    pub neg: usize,
    pub weight: f64,
}

/// `Σ weight · −log σ(β·[(π_pos − ref_pos) − (π_neg − ref_neg)])`.
///
/// Callers choose the weights; `1 / (negatives of the query · queries)`
/// gives the per-query mean over negatives averaged over queries.
pub fn dpo_tape<T: Real>(tape: &mut Tape<T>, policy: Var, reference: &[T], pairs: &[DpoPair], beta: f64) -> Result<Var> {
    let terms = dpo_terms_tape(tape, policy, reference, pairs, beta)?;
    Ok(tape.sum(terms))
}

/// The weighted per-pair terms of [`dpo_tape`], one per pair.
pub fn dpo_terms_tape<T: Real>(
    tape: &mut Tape<T>,
    policy: Var,
    reference: &[T],
    pairs: &[DpoPair],
    beta: f64,
) -> Result<Var> {
    if pairs.is_empty() {
        return Err(Error::invalid("DPO needs at least one negative"));
    }
    if tape.shape(policy) != [reference.len()] {
        return Err(Error::Shape {
            op: "dpo_loss",
            lhs: tape.shape(policy).to_vec(),
            rhs: vec![reference.len()],
        });
    }
    let pos: Vec<usize> = pairs.iter().map(|p| p.pos).collect();
    let neg: Vec<usize> = pairs.iter().map(|p| p.neg).collect();
    let pp = tape.gather(policy, &pos)?;
    let pn = tape.gather(policy, &neg)?;
    let gap = tape.sub(pp, pn)?;
    let ref_gap: Vec<T> = pairs.iter().map(|p| reference[p.neg] - reference[p.pos]).collect();
    let ref_gap = tape.constant(vec![pairs.len()], ref_gap)?;
    let z = tape.add(gap, ref_gap)?;
    let z = tape.scale(z, T::lit(beta));
    let ls = tape.log_sigmoid(z);
    let w: Vec<T> = pairs.iter().map(|p| T::lit(-p.weight)).collect();
    tape.mul_const(ls, w)
}

/// `Σ_g weight_g · KL(P_rt,g ‖ P_gen,g)` where group `g` covers the entries
/// `groups[g]` of the flat score vectors. P_rt is the softmax of
/// `s_rt / tau`, P_gen the softmax of `s_gen` floored at [`PROB_FLOOR`].
pub fn kl_tape<T: Real>(
    tape: &mut Tape<T>,
    s_rt: Var,
    s_gen: Var,
    groups: &[(Range<usize>, f64)],
    tau: f64,
    stop_gen_grad: bool,
) -> Result<Var> {
    let terms = kl_terms_tape(tape, s_rt, s_gen, groups, tau, stop_gen_grad)?;
    Ok(tape.sum(terms))
}

/// The weighted per-candidate terms of [`kl_tape`], group after group.
pub fn kl_terms_tape<T: Real>(
    tape: &mut Tape<T>,
    s_rt: Var,
    s_gen: Var,
    groups: &[(Range<usize>, f64)],
    tau: f64,
    stop_gen_grad: bool,
) -> Result<Var> {
    let m = tape.shape(s_rt).to_vec();
    if m.len() != 1 || tape.shape(s_gen) != m.as_slice() {
        return Err(Error::Shape {
            op: "kl_consistency_loss",
            lhs: m,
            rhs: tape.shape(s_gen).to_vec(),
        });
    }
    if groups.is_empty() {
        return Err(Error::invalid("KL consistency needs at least one candidate set"));
    }
    let width = groups.iter().map(|(r, _)| r.len()).max().unwrap();
    if let Some((r, _)) = groups.iter().find(|(r, _)| r.len() < 2 || r.end > m[0]) {
        return Err(Error::invalid(format!(
            "candidate set {r:?} must hold at least 2 of the {} scores",
            m[0]
        )));
    }
    let n = groups.len();
    // Lay groups out as a padded [n, width] matrix so one softmax covers all.
    let mut idx = Vec::with_capacity(n * width);
    let mut pad = Vec::with_capacity(n * width);
    let mut valid = Vec::with_capacity(m[0]);
    for (g, (r, _)) in groups.iter().enumerate() {
        for j in 0..width {
            let inside = j < r.len();
            idx.push(if inside { r.start + j } else { r.start });
            pad.push(!inside);
            if inside {
                valid.push(g * width + j);
            }
        }
    }
    let dist = |tape: &mut Tape<T>, s: Var, scale: f64| -> Result<Var> {
        let x = tape.gather(s, &idx)?;
        let x = tape.reshape(x, vec![n, width])?;
        let x = tape.scale(x, T::lit(scale));
        let x = tape.masked_fill(x, pad.clone(), T::neg_infinity())?;
        let lp = tape.log_softmax(x, 1)?;
        tape.gather(lp, &valid)
    };
    let lp = dist(tape, s_rt, 1.0 / tau)?;
    let gen = if stop_gen_grad { tape.detach(s_gen) } else { s_gen };
    let lq = dist(tape, gen, 1.0)?;
    let lq = tape.clamp_min(lq, T::lit(PROB_FLOOR.ln()));
    let p = tape.exp(lp);
    let diff = tape.sub(lp, lq)?;
    let terms = tape.mul(p, diff)?;
    let w: Vec<T> = groups.iter().flat_map(|(r, w)| std::iter::repeat_n(T::lit(*w), r.len())).collect();
    tape.mul_const(terms, w)
}

// ----- value forms --------------------------------------------------------

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine_score(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape {
            op: "cosine",
            lhs: vec![u.len()],
            rhs: vec![v.len()],
        });
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::invalid("cosine of a zero-norm vector"));
    }
    Ok(u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / (nu * nv))
}

/// Contrastive loss over `[B, d]` queries and positives and optional
/// `[B, H, d]` hard negatives, each query seeing only its own.
pub fn contrastive_loss(
    queries: &Tensor<f64>,
    positives: &Tensor<f64>,
    hard_negatives: Option<&Tensor<f64>>,
    tau: f64,
) -> Result<f64> {
    let mut tape = Tape::no_grad();
    let q = tape.constant(queries.shape().to_vec(), queries.data().to_vec())?;
    let p = tape.constant(positives.shape().to_vec(), positives.data().to_vec())?;
    let owner;
    let negs = match hard_negatives {
        Some(n) => {
            let s = n.shape();
            if s.len() != 3 || s[0] != queries.shape()[0] {
                return Err(Error::Shape {
                    op: "contrastive_loss",
                    lhs: queries.shape().to_vec(),
                    rhs: s.to_vec(),
                });
            }
            owner = (0..s[0] * s[1]).map(|j| j / s[1]).collect::<Vec<_>>();
            let v = tape.constant(vec![s[0] * s[1], s[2]], n.data().to_vec())?;
            Some((v, owner.as_slice()))
        }
        None => None,
    };
    let loss = contrastive_tape(&mut tape, q, p, negs, tau, false)?;
    Ok(tape.scalar(loss))
}

/// Mean token log-probability of a passage.
pub fn generation_score(token_logps: &[f64]) -> Result<f64> {
    if token_logps.is_empty() {
        return Err(Error::invalid("generation score of an empty passage"));
    }
    Ok(token_logps.iter().sum::<f64>() / token_logps.len() as f64)
}

/// Negative mean log-likelihood of the positive passage's tokens.
pub fn sft_loss(token_logps: &[f64]) -> Result<f64> {
    if token_logps.is_empty() {
        return Err(Error::invalid("SFT loss of an empty passage"));
    }
    Ok(-generation_score(token_logps)?)
}

/// Pairwise DPO loss averaged over the negatives. All log-probabilities
/// are sequence sums.
pub fn dpo_loss(policy_pos: f64, ref_pos: f64, policy_negs: &[f64], ref_negs: &[f64], beta: f64) -> Result<f64> {
    if policy_negs.len() != ref_negs.len() {
        return Err(Error::Shape {
            op: "dpo_loss",
            lhs: vec![policy_negs.len()],
            rhs: vec![ref_negs.len()],
        });
    }
    let h = policy_negs.len();
    let mut policy = vec![policy_pos];
    policy.extend_from_slice(policy_negs);
    let mut reference = vec![ref_pos];
    reference.extend_from_slice(ref_negs);
    let pairs: Vec<DpoPair> = (1..=h)
        .map(|neg| DpoPair {
            pos: 0,
            neg,
            weight: 1.0 / h as f64,
        })
        .collect();
    let mut tape = Tape::no_grad();
    let p = tape.constant(vec![h + 1], policy)?;
    let loss = dpo_tape(&mut tape, p, &reference, &pairs, beta)?;
    Ok(tape.scalar(loss))
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// `(softmax(s_rt / tau), softmax(s_gen))` over one candidate set.
pub fn relevance_distributions(s_rt: &[f64], s_gen: &[f64], tau: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if s_rt.len() != s_gen.len() {
        return Err(Error::Shape {
            op: "relevance_distributions",
            lhs: vec![s_rt.len()],
            rhs: vec![s_gen.len()],
        });
    }
    if s_rt.len() < 2 {
        return Err(Error::invalid("a candidate set needs at least 2 passages"));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    let scaled: Vec<f64> = s_rt.iter().map(|s| s / tau).collect();
    Ok((softmax(&scaled), softmax(s_gen)))
}

/// `KL(p ‖ q)`; zero-probability terms of `p` contribute nothing and `q` is
/// floored at [`PROB_FLOOR`].
pub fn kl_consistency_loss(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape {
            op: "kl_consistency_loss",
            lhs: vec![p.len()],
            rhs: vec![q.len()],
        });
    }
    for (name, d) in [("P_rt", p), ("P_gen", q)] {
        let total: f64 = d.iter().sum();
        if (total - 1.0).abs() > 1e-6 || d.iter().any(|&x| !(0.0..=1.0 + 1e-12).contains(&x)) {
            return Err(Error::invalid(format!("{name} is not a distribution (sums to {total})")));
        }
    }
    Ok(p
        .iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.max(PROB_FLOOR).ln()))
        .sum())
}

/// `λ_CL·L_CL + λ_DPO·L_DPO + λ_KL·L_KL`.
pub fn grl_total_loss(l_cl: f64, l_dpo: f64, l_kl: f64, w: &LossWeights) -> Result<f64> {
    for (name, v) in [("L_CL", l_cl), ("L_DPO", l_dpo), ("L_KL", l_kl)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} = {v}")));
        }
    }
    Ok(w.lambda_cl * l_cl + w.lambda_dpo * l_dpo + w.lambda_kl * l_kl)
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN2: f64 = std::f64::consts::LN_2;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_score(&[3.0, 4.0], &[3.0, 4.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_score(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_score(&[1.0, 2.0], &[2.0, 1.0]).unwrap() - 0.8).abs() < 1e-15);
        assert!(cosine_score(&[0.0, 0.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn contrastive_uniform_scores() {
        let q = t(vec![1, 2], vec![1.0, 0.0]);
        let p = t(vec![1, 2], vec![0.0, 1.0]);
        let n = t(vec![1, 3, 2], vec![0.0, 1.0, 0.0, 2.0, 0.0, 3.0]);
        let l = contrastive_loss(&q, &p, Some(&n), 0.05).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);

        let q = t(vec![2, 2], vec![1.0, 0.0, 1.0, 0.0]);
        let p = t(vec![2, 2], vec![0.0, 1.0, 0.0, 5.0]);
        let l = contrastive_loss(&q, &p, None, 1.0).unwrap();
        assert!((l - LN2).abs() < 1e-12);
    }

    #[test]
    fn contrastive_confident_positive() {
        // cos = 1 for the positive, 0 for negatives; tau = 0.1 gives logits 10, 0, 0, 0
        let q = t(vec![1, 2], vec![1.0, 0.0]);
        let p = t(vec![1, 2], vec![2.0, 0.0]);
        let n = t(vec![1, 3, 2], vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let l = contrastive_loss(&q, &p, Some(&n), 0.1).unwrap();
        let expected = -(10f64.exp() / (10f64.exp() + 3.0)).ln();
        assert!((l - expected).abs() < 1e-12);
        assert!((l - 1.36e-4).abs() < 5e-7);
    }

    #[test]
    fn contrastive_rejects_bad_inputs() {
        let q = t(vec![1, 2], vec![1.0, 0.0]);
        let p = t(vec![1, 3], vec![1.0, 0.0, 0.0]);
        assert!(contrastive_loss(&q, &p, None, 0.1).is_err());
        assert!(contrastive_loss(&q, &q, None, 0.0).is_err());
    }

    #[test]
    fn cross_negatives_switch() {
        let mut tape = Tape::<f64>::no_grad();
        let q = tape.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let p = tape.constant(vec![2, 2], vec![1.0, 0.1, 0.1, 1.0]).unwrap();
        let n = tape.constant(vec![2, 2], vec![1.0, 0.0, 1.0, 1.0]).unwrap();
        let owner = [0, 1];
        let own = contrastive_tape(&mut tape, q, p, Some((n, &owner)), 1.0, false).unwrap();
        let all = contrastive_tape(&mut tape, q, p, Some((n, &owner)), 1.0, true).unwrap();
        assert!(tape.scalar(all) > tape.scalar(own));
    }

    #[test]
    fn sft_and_generation_score_examples() {
        assert_eq!(sft_loss(&[0.0, 0.0]).unwrap(), 0.0);
        let v = 259f64;
        assert!((sft_loss(&[-v.ln(); 5]).unwrap() - v.ln()).abs() < 1e-12);
        assert_eq!(sft_loss(&[-1.0, -2.0, -3.0]).unwrap(), 2.0);
        assert_eq!(generation_score(&[-1.0, -2.0, -3.0]).unwrap(), -2.0);
        assert_eq!(generation_score(&[-0.5]).unwrap(), -0.5);
        assert!(sft_loss(&[]).is_err());
        assert!(generation_score(&[]).is_err());
    }

    #[test]
    fn dpo_examples() {
        let l = dpo_loss(-3.0, -3.0, &[-5.0, -1.0], &[-5.0, -1.0], 0.1).unwrap();
        assert!((l - LN2).abs() < 1e-12);
        // beta · gap = 1
        let l = dpo_loss(0.0, -10.0, &[0.0], &[0.0], 0.1).unwrap();
        assert!((l - (1.0 + (-1f64).exp()).ln()).abs() < 1e-12);
        assert!((l - 0.3133).abs() < 5e-5);
        // beta · gap = -10
        let l = dpo_loss(0.0, 100.0, &[0.0], &[0.0], 0.1).unwrap();
        assert!((l - 10.000_045_4).abs() < 1e-7);
        assert!(dpo_loss(0.0, 0.0, &[], &[], 0.1).is_err());
    }

    #[test]
    fn distribution_examples() {
        let (p, q) = relevance_distributions(&[0.3; 4], &[-2.0; 4], 0.05).unwrap();
        for x in p.iter().chain(&q) {
            assert!((x - 0.25).abs() < 1e-15);
        }
        let (p, _) = relevance_distributions(&[LN2, 0.0], &[0.0, 0.0], 1.0).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15 && (p[1] - 1.0 / 3.0).abs() < 1e-15);
        let (a, _) = relevance_distributions(&[1.0, 2.0, 3.0], &[0.0; 3], 0.5).unwrap();
        let (b, _) = relevance_distributions(&[8.0, 9.0, 10.0], &[0.0; 3], 0.5).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(relevance_distributions(&[1.0], &[1.0], 1.0).is_err());
        assert!(relevance_distributions(&[1.0, 2.0], &[1.0], 1.0).is_err());
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_consistency_loss(&[0.2, 0.8], &[0.2, 0.8]).unwrap(), 0.0);
        assert!((kl_consistency_loss(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - LN2).abs() < 1e-15);
        let pq = kl_consistency_loss(&[0.9, 0.1], &[0.5, 0.5]).unwrap();
        let qp = kl_consistency_loss(&[0.5, 0.5], &[0.9, 0.1]).unwrap();
        assert!((pq - 0.3681).abs() < 5e-5, "{pq}");
        assert!((qp - 0.5108).abs() < 5e-5, "{qp}");
        assert!(kl_consistency_loss(&[0.6, 0.6], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn kl_tape_matches_value_form() {
        let s_rt = [0.1, 0.5, -0.2, 0.9, 0.3];
        let s_gen = [-1.0, -2.5, -0.7, -1.1, -3.0];
        let mut tape = Tape::<f64>::no_grad();
        let a = tape.constant(vec![5], s_rt.to_vec()).unwrap();
        let b = tape.constant(vec![5], s_gen.to_vec()).unwrap();
        let groups = [(0..3, 0.5), (3..5, 0.5)];
        let kl = kl_tape(&mut tape, a, b, &groups, 0.2, false).unwrap();
        let mut expected = 0.0;
        for (r, _) in &groups {
            let (p, q) = relevance_distributions(&s_rt[r.clone()], &s_gen[r.clone()], 0.2).unwrap();
            expected += 0.5 * kl_consistency_loss(&p, &q).unwrap();
        }
        assert!((tape.scalar(kl) - expected).abs() < 1e-14);
    }

    #[test]
    fn grl_total_examples() {
        let w = LossWeights::default();
        let (a, b, c) = (0.731, 1.25, 0.0625);
        assert_eq!(grl_total_loss(a, b, c, &w).unwrap(), a + 0.5 * b + c);
        assert_eq!(grl_total_loss(0.0, 0.0, 0.0, &w).unwrap(), 0.0);
        let cl_only = LossWeights {
            lambda_dpo: 0.0,
            lambda_kl: 0.0,
            ..w.clone()
        };
        assert_eq!(grl_total_loss(a, b, c, &cl_only).unwrap(), a);
        let err = grl_total_loss(a, f64::NAN, c, &w).unwrap_err().to_string();
        assert!(err.contains("L_DPO"), "{err}");
    }
}
