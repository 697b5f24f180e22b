use grle::data::{tokenize, SyntheticOptions, SyntheticTask};
use grle::eval::{evaluate, random_ndcg_baseline, EvalOptions, Metric};
use grle::model::{LoraConfig, Model, ModelConfig};
use grle::trainer::{ReferenceScorer, Strategy, TrainConfig, Trainer};

fn tiny() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        ..Default::default()
    }
}

fn task(seed: u64, n_train: usize) -> SyntheticTask {
    SyntheticOptions {
        n_docs: 40,
        n_negatives: 2,
        ..SyntheticOptions::new(seed, n_train, 10, 100)
    }
    .generate()
    .unwrap()
}

fn train_config(strategy: Strategy) -> TrainConfig {
    TrainConfig {
        strategy,
        learning_rate: 1e-3,
        batch_size: 8,
        micro_batch_size: 4,
        checkpoint_every: 0,
        seed: 1,
        ..Default::default()
    }
}

#[test]
fn reference_scores_stay_at_initial_policy() {
    let t = task(2, 40);
    let pairs: Vec<(Vec<u32>, Vec<u32>)> = t.train[..4]
        .iter()
        .map(|ex| (tokenize(&ex.query), tokenize(&ex.positive)))
        .collect();
    for lora in [false, true] {
        let mut model = Model::<f64>::new(tiny(), 3).unwrap();
        if lora {
            model.apply_lora(LoraConfig { r: 4, ..Default::default() }, 4).unwrap();
        }
        let initial = model.clone();
        let mut trainer = Trainer::new(model, train_config(Strategy::Grl)).unwrap();
        match trainer.reference().unwrap() {
            ReferenceScorer::AdapterBypass => assert!(lora),
            ReferenceScorer::Snapshot(_) => assert!(!lora),
        }
        for chunk in t.train.chunks(8) {
            trainer.step(chunk).unwrap();
        }
        let reference = trainer.reference().unwrap();
        for (q, p) in &pairs {
            let frozen = reference.sequence_log_probs(trainer.model(), q, p).unwrap();
            assert_eq!(frozen, initial.sequence_log_probs(q, p).unwrap(), "lora {lora}");
            assert_ne!(frozen, trainer.model().sequence_log_probs(q, p).unwrap(), "lora {lora}");
        }
    }
}

#[test]
fn no_reference_without_dpo() {
    let model = Model::<f32>::new(tiny(), 0).unwrap();
    for s in [Strategy::Cl, Strategy::ClSft, Strategy::GrlSft] {
        let t = Trainer::new(model.clone(), train_config(s)).unwrap();
        assert!(t.reference().is_none(), "{s}");
    }
}

#[test]
fn fit_is_reproducible_and_checkpoints_round_trip() {
    let t = task(5, 48);
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let mut model = Model::<f32>::new(tiny(), 6).unwrap();
        model.apply_lora(LoraConfig { r: 4, ..Default::default() }, 7).unwrap();
        let mut trainer = Trainer::new(model, train_config(Strategy::Grl)).unwrap();
        let out = dir.path().join(name);
        let ckpt = trainer.fit(&t.train, &out).unwrap();
        (trainer.into_model(), out, ckpt)
    };
    let (model, a, ckpt) = run("a");
    let (_, b, _) = run("b");
    let read = |p: std::path::PathBuf| std::fs::read(p).unwrap();
    assert_eq!(read(a.join("metrics.jsonl")), read(b.join("metrics.jsonl")));
    assert_eq!(read(ckpt.join("weights.bin")), read(b.join("checkpoints/epoch-1/weights.bin")));

    let metrics = [Metric::Ndcg(10), Metric::Map];
    let opts = EvalOptions::default();
    let before = evaluate(&model, &t.eval, &metrics, &opts).unwrap();
    let loaded = Model::<f32>::load(&ckpt).unwrap();
    let after = evaluate(&loaded, &t.eval, &metrics, &opts).unwrap();
    assert_eq!(before.metrics, after.metrics);
    assert_eq!(before.checkpoint, after.checkpoint);
}

#[test]
fn untrained_model_scores_near_random_ranking() {
    let t = SyntheticOptions {
        n_docs: 500,
        ..SyntheticOptions::new(0, 10, 100, 1000)
    }
    .generate()
    .unwrap();
    let model = Model::<f32>::new(ModelConfig::default(), 0).unwrap();
    let got = evaluate(&model, &t.eval, &[Metric::Ndcg(10)], &EvalOptions::default())
        .unwrap()
        .main_score;
    let n_docs = t.eval.documents.len();
    let baseline = t
        .eval
        .queries
        .iter()
        .map(|q| {
            let rel: Vec<u32> = t.eval.qrels[&q.id].values().copied().collect();
            random_ndcg_baseline(n_docs, &rel, 10, 200, 1)
        })
        .sum::<f64>()
        / t.eval.queries.len() as f64;
    assert!((got - baseline).abs() <= 0.15, "untrained {got}, random {baseline}");
}
