use grle::data::{collate, make_synthetic_task, TrainExample};
use grle::losses::LossWeights;
use grle::model::{LoraConfig, LoraTarget, Model, ModelConfig};
use grle::params::ParamHost;
use grle::trainer::{gradcache_step, naive_step, LossSetup, ReferenceScorer, StepLosses, Strategy};

fn tiny() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        max_seq_len: 64,
        ..Default::default()
    }
}

fn examples(n: usize, negatives: usize) -> Vec<TrainExample> {
    let mut t = make_synthetic_task(21, n, 2, 40).unwrap().train;
    for ex in &mut t {
        ex.negatives.truncate(negatives);
    }
    t
}

fn adapted(seed: u64, dropout: f64) -> Model<f64> {
    let mut m = Model::<f64>::new(tiny(), seed).unwrap();
    m.apply_lora(
        LoraConfig {
            r: 4,
            dropout,
            targets: LoraTarget::ALL.to_vec(),
            ..Default::default()
        },
        seed + 1,
    )
    .unwrap();
    // Move adapters off their zero init so every path carries gradient.
    for id in m.params().ids().collect::<Vec<_>>() {
        if m.params().name(id).ends_with("lora_b") {
            for (k, x) in m.params_mut().get_mut(id).data_mut().iter_mut().enumerate() {
                *x = 0.01 * ((k * 7 % 11) as f64 - 5.0);
            }
        }
    }
    m
}

fn grads(m: &Model<f64>) -> Vec<Vec<f64>> {
    m.params()
        .iter()
        .map(|(_, _, t)| t.grad().map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect()
}

fn max_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn run(strategy: Strategy, micro: Option<usize>, data: &[TrainExample], dropout: Option<u64>) -> (StepLosses, Vec<Vec<f64>>) {
    let mut m = adapted(3, 0.2);
    let reference = ReferenceScorer::new(&m);
    let weights = LossWeights::default();
    let setup = LossSetup {
        strategy,
        weights: &weights,
    };
    let batch = collate(data, 64).unwrap();
    let l = match micro {
        Some(mb) => gradcache_step(&mut m, Some(&reference), &batch, &setup, mb, dropout).unwrap(),
        None => naive_step(&mut m, Some(&reference), &batch, &setup, dropout).unwrap(),
    };
    (l, grads(&m))
}

#[test]
fn every_strategy_matches_naive_for_every_micro_batch() {
    let data = examples(6, 2);
    for strategy in Strategy::ALL {
        let (ln, gn) = run(strategy, None, &data, Some(99));
        assert!(gn.iter().flatten().any(|&g| g != 0.0));
        for mb in [1, 2, 4, 6] {
            let (lc, gc) = run(strategy, Some(mb), &data, Some(99));
            let d = max_diff(&gn, &gc);
            assert!(d < 1e-8, "{strategy} mb={mb}: max abs diff {d:e}");
            assert_eq!(ln.total, lc.total, "{strategy} mb={mb}");
            assert_eq!(ln.cl, lc.cl);
            assert_eq!(ln.sft, lc.sft);
            assert_eq!(ln.dpo, lc.dpo);
            assert_eq!(ln.kl, lc.kl);
        }
    }
}

#[test]
fn full_micro_batch_is_bitwise_naive() {
    let data = examples(4, 2);
    for strategy in Strategy::ALL {
        let (_, gn) = run(strategy, None, &data, None);
        let (_, gc) = run(strategy, Some(4), &data, None);
        assert_eq!(gn, gc, "{strategy}");
    }
}

#[test]
fn ragged_negative_counts() {
    let mut data = examples(5, 3);
    data[1].negatives.clear();
    data[3].negatives.truncate(1);
    let (ln, gn) = run(Strategy::Grl, None, &data, Some(5));
    let (lc, gc) = run(Strategy::Grl, Some(2), &data, Some(5));
    assert!(max_diff(&gn, &gc) < 1e-8);
    assert_eq!(ln.total, lc.total);
}

#[test]
fn activation_memory_follows_micro_batch() {
    let data = examples(8, 2);
    let (naive, _) = run(Strategy::Cl, None, &data, None);
    let (small, _) = run(Strategy::Cl, Some(1), &data, None);
    let (half, _) = run(Strategy::Cl, Some(4), &data, None);
    assert!(small.peak_tape_bytes < half.peak_tape_bytes);
    assert!(half.peak_tape_bytes < naive.peak_tape_bytes);
}
