use std::sync::Arc;

use lesionkit::data::{MemorySamples, SampleSource};
use lesionkit::imaging::Image;
use lesionkit::label::ClassLabel;
use lesionkit::losses::Loss;
use lesionkit::models::{build_model, load_checkpoint, ModelSpec};
use lesionkit::trainer::{evaluate_loss, predict_source, train, ClassWeighting, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SIZE: usize = 32;

/// Two overlapping classes: mel images are slightly redder than nv ones,
/// with a per-image brightness offset large enough to blur the boundary.
fn two_class_set(n_nv: usize, n_mel: usize, seed: u64) -> MemorySamples {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::new();
    for (label, n, red) in [(ClassLabel::Nv, n_nv, 0.45), (ClassLabel::Mel, n_mel, 0.55)] {
        for i in 0..n {
            let offset: f32 = rng.random_range(-0.12..0.12);
            let img = Image::from_fn(SIZE, SIZE, |_, _| {
                let jitter: f32 = rng.random_range(-0.1..0.1);
                [red + offset + jitter, 0.4 + jitter, 0.4 + jitter]
            });
            items.push((format!("{label}_{i}"), label, Arc::new(img)));
        }
    }
    MemorySamples { items }
}

fn config(weighting: ClassWeighting, seed: u64) -> TrainConfig {
    TrainConfig {
        initial_lr: 3e-3,
        batch_size: 16,
        max_epochs: 6,
        use_augment: false,
        use_dropout: false,
        class_weights: weighting,
        workers: 1,
        seed,
        ..TrainConfig::default()
    }
}

fn minority_recall(weighting: ClassWeighting, seed: u64) -> f64 {
    let train_set = two_class_set(190, 10, seed);
    let val = two_class_set(40, 40, seed + 100);
    let cfg = config(weighting, seed);
    let mut model = build_model(&cfg.model_spec(&ModelSpec {
        init_seed: seed,
        ..ModelSpec::tiny()
    }))
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    train(&mut model, &train_set, &val, &cfg, dir.path()).unwrap();
    let test = two_class_set(0, 60, seed + 200);
    let probs = predict_source(&mut model, &test, 32, 1).unwrap();
    probs.iter().filter(|p| p.argmax() == ClassLabel::Mel.index()).count() as f64 / test.len() as f64
}

#[test]
fn balanced_weights_lift_minority_recall() {
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in 0..5 {
        let plain = minority_recall(ClassWeighting::None, seed);
        let weighted = minority_recall(ClassWeighting::Balanced, seed);
        wins += usize::from(weighted >= plain);
        pairs.push((plain, weighted));
    }
    assert!(wins >= 3, "recall (unweighted, weighted) per seed: {pairs:?}");
}

#[test]
fn saved_checkpoint_reproduces_best_val_accuracy() {
    let train_set = two_class_set(30, 30, 7);
    let val = two_class_set(20, 20, 8);
    let cfg = config(ClassWeighting::None, 7);
    let mut model = build_model(&cfg.model_spec(&ModelSpec::tiny())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let outcome = train(&mut model, &train_set, &val, &cfg, dir.path()).unwrap();
    let mut reloaded = load_checkpoint(&outcome.checkpoint).unwrap();
    let loss = Loss::new(cfg.loss, cfg.gamma, None).unwrap();
    let (_, acc) = evaluate_loss(&mut reloaded, &val, &loss, 8, 1).unwrap();
    assert!(
        (acc - outcome.history.best_val_accuracy).abs() <= 1e-6,
        "{acc} vs {}",
        outcome.history.best_val_accuracy
    );
    let lrs: Vec<f64> = outcome.history.epochs.iter().map(|e| e.learning_rate).collect();
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]), "{lrs:?}");
}
