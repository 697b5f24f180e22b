//! Finite-difference checks of each training loss through a small model.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::gradcheck::{finite_difference_check, Coverage, GradCheckReport};
use crate::data::{collate, SyntheticOptions, TrainExample};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::{LoraConfig, LoraTarget, Model, ModelConfig};
use crate::params::ParamHost;
use crate::trainer::{batch_loss_tape, gradcache_step, naive_step, LossSetup, ReferenceScorer, StepLosses, Strategy};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossComponent {
    Cl,
    Sft,
    Dpo,
    Kl,
    Grl,
}

impl LossComponent {
    pub const ALL: [LossComponent; 5] = [Self::Cl, Self::Sft, Self::Dpo, Self::Kl, Self::Grl];

    /// Strategy and weights under which the training loss is exactly this
    /// component (or the full GRL objective).
    fn setup(self, base: &LossWeights) -> (Strategy, LossWeights) {
        let only = |strategy, f: fn(&mut LossWeights)| {
            let mut w = LossWeights {
                lambda_cl: 0.0,
                lambda_dpo: 0.0,
                lambda_kl: 0.0,
                lambda_sft: 0.0,
                ..base.clone()
            };
            f(&mut w);
            (strategy, w)
        };
        match self {
            Self::Cl => only(Strategy::Cl, |w| w.lambda_cl = 1.0),
            Self::Sft => only(Strategy::ClSft, |w| w.lambda_sft = 1.0),
            Self::Dpo => only(Strategy::ClDpo, |w| w.lambda_dpo = 1.0),
            Self::Kl => only(Strategy::Grl, |w| w.lambda_kl = 1.0),
            Self::Grl => (Strategy::Grl, base.clone()),
        }
    }
}

impl fmt::Display for LossComponent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Cl => "cl",
            Self::Sft => "sft",
            Self::Dpo => "dpo",
            Self::Kl => "kl",
            Self::Grl => "grl",
        })
    }
}

impl FromStr for LossComponent {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.to_string() == s)
            .ok_or_else(|| Error::invalid(format!("unknown loss `{s}` (expected cl, sft, dpo, kl or grl)")))
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub n_examples: usize,
    pub n_negatives: usize,
    pub eps: f64,
    pub coverage: Coverage,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                d_model: 32,
                n_layers: 2,
                n_heads: 2,
                d_ff: 64,
                max_seq_len: 64,
                ..Default::default()
            },
            weights: LossWeights::default(),
            n_examples: 3,
            n_negatives: 2,
            eps: 1e-4,
            coverage: Coverage::Sample {
                per_tensor: 16,
                seed: 0,
            },
            seed: 0,
        }
    }
}

/// Checks reverse-mode gradients of one loss, over every trainable tensor
/// of a freshly initialised model, against central differences.
pub fn check_loss(component: LossComponent, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut model = Model::<f64>::new(opts.model.clone(), opts.seed)?;
    let task = SyntheticOptions {
        n_negatives: opts.n_negatives,
        n_docs: opts.n_examples.max(1),
        ..SyntheticOptions::new(opts.seed, opts.n_examples, 1, opts.n_examples.max(16))
    }
    .generate()?;
    let batch = collate(&task.train, opts.model.max_seq_len)?;
    let (strategy, weights) = component.setup(&opts.weights);
    let setup = LossSetup {
        strategy,
        weights: &weights,
    };
    // The reference is fixed at the unperturbed weights, as during training.
    let reference = strategy.uses_dpo().then(|| ReferenceScorer::new(&model));
    finite_difference_check(&mut model, opts.eps, opts.coverage, |m, tape| {
        batch_loss_tape(tape, m, reference.as_ref(), &batch, &setup, None)
    })
}

#[derive(Clone, Debug)]
pub struct EquivalenceOptions {
    pub model: ModelConfig,
    /// Adapters on every target with input dropout, moved off their zero
    /// init so they carry gradient. `None` checks full fine-tuning.
    pub lora: Option<LoraConfig>,
    pub weights: LossWeights,
    pub batch_size: usize,
    pub n_negatives: usize,
    pub micro_batch_sizes: Vec<usize>,
    pub strategies: Vec<Strategy>,
    pub dropout_seed: Option<u64>,
    pub seed: u64,
}

impl Default for EquivalenceOptions {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                d_model: 32,
                n_layers: 2,
                n_heads: 2,
                d_ff: 64,
                max_seq_len: 64,
                ..Default::default()
            },
            lora: Some(LoraConfig {
                r: 4,
                dropout: 0.1,
                targets: LoraTarget::ALL.to_vec(),
                ..Default::default()
            }),
            weights: LossWeights::default(),
            batch_size: 16,
            n_negatives: 2,
            micro_batch_sizes: vec![1, 2, 4, 8, 16],
            strategies: Strategy::ALL.to_vec(),
            dropout_seed: Some(7),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Equivalence {
    pub strategy: Strategy,
    pub micro_batch_size: usize,
    pub max_abs_diff: f64,
    pub naive: StepLosses,
    pub cached: StepLosses,
}

impl Equivalence {
    /// Every reported loss value is bitwise identical.
    pub fn losses_identical(&self) -> bool {
        let (a, b) = (&self.naive, &self.cached);
        a.total == b.total && a.cl == b.cl && a.sft == b.sft && a.dpo == b.dpo && a.kl == b.kl
    }
}

fn equivalence_model(opts: &EquivalenceOptions) -> Result<Model<f64>> {
    let mut model = Model::<f64>::new(opts.model.clone(), opts.seed)?;
    if let Some(lora) = &opts.lora {
        model.apply_lora(lora.clone(), opts.seed ^ 1)?;
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 2);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let ids: Vec<_> = model.params().ids().collect();
        for id in ids {
            if model.params().name(id).ends_with("lora_b") {
                for x in model.params_mut().get_mut(id).data_mut() {
                    *x = normal.sample(&mut rng);
                }
            }
        }
    }
    Ok(model)
}

fn param_grads(model: &Model<f64>) -> Vec<Vec<f64>> {
    model
        .params()
        .iter()
        .map(|(_, _, t)| t.grad().map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect()
}

/// Compares cached-step gradients and losses against one naive full-batch
/// pass, for every strategy and micro-batch size requested.
pub fn gradcache_equivalence(opts: &EquivalenceOptions) -> Result<Vec<Equivalence>> {
    let task = SyntheticOptions {
        n_negatives: opts.n_negatives,
        n_docs: opts.batch_size,
        ..SyntheticOptions::new(opts.seed, opts.batch_size, 1, opts.batch_size.max(16) * 2)
    }
    .generate()?;
    let examples: &[TrainExample] = &task.train;
    let batch = collate(examples, opts.model.max_seq_len)?;
    let base = equivalence_model(opts)?;
    let reference = ReferenceScorer::new(&base);
    let mut out = Vec::new();
    for &strategy in &opts.strategies {
        let setup = LossSetup {
            strategy,
            weights: &opts.weights,
        };
        let mut m = base.clone();
        let naive = naive_step(&mut m, Some(&reference), &batch, &setup, opts.dropout_seed)?;
        let expected = param_grads(&m);
        for &mb in &opts.micro_batch_sizes {
            let mut m = base.clone();
            let cached = gradcache_step(&mut m, Some(&reference), &batch, &setup, mb, opts.dropout_seed)?;
            let got = param_grads(&m);
            let max_abs_diff = expected
                .iter()
                .flatten()
                .zip(got.iter().flatten())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            out.push(Equivalence {
                strategy,
                micro_batch_size: mb,
                max_abs_diff,
                naive,
                cached,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for c in LossComponent::ALL {
            assert_eq!(c.to_string().parse::<LossComponent>().unwrap(), c);
        }
        assert!("nll".parse::<LossComponent>().is_err());
    }

    #[test]
    fn contrastive_gradients_match() {
        let opts = GradCheckOptions {
            model: ModelConfig {
                d_model: 16,
                n_layers: 1,
                n_heads: 2,
                d_ff: 32,
                max_seq_len: 48,
                ..Default::default()
            },
            coverage: Coverage::Sample {
                per_tensor: 4,
                seed: 1,
            },
            n_examples: 2,
            n_negatives: 1,
            ..Default::default()
        };
        let r = check_loss(LossComponent::Cl, &opts).unwrap();
        assert!(r.max_rel_error() < 1e-4, "{r:?}");
    }
}
