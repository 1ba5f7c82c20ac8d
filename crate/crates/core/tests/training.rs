//! End-to-end training on small synthetic corpora.

use owa_rank::data::{split, synthesize, Dataset, SynthSpec};
use owa_rank::eval::{evaluate, summarize};
use owa_rank::fw::LayerConfig;
use owa_rank::model::{train, RelevanceModel, TrainConfig, TrainHistory};
use owa_rank::spo::{precompute_targets, Problem, TargetCache};

fn corpus(seed: u64) -> (Dataset, Dataset, Dataset) {
    let data = synthesize(&SynthSpec::new(60, 8, 6, 2).with_seed(seed)).unwrap();
    split(&data, [0.6, 0.2, 0.2], seed).unwrap()
}

fn targets(sets: &[&Dataset], layer: &LayerConfig) -> TargetCache {
    let mut cache = TargetCache::new();
    for set in sets {
        let bias = set.bias();
        let problems: Vec<Problem> = set.samples.iter().map(|s| s.problem(&bias)).collect();
        precompute_targets(&problems, layer, &mut cache).unwrap();
    }
    cache
}

fn config(layer: LayerConfig, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::new(layer);
    cfg.epochs = 8;
    cfg.batch_size = 8;
    cfg.seed = seed;
    cfg.adam.learning_rate = 0.01;
    cfg
}

fn run(layer: LayerConfig, seed: u64) -> (RelevanceModel, TrainHistory, Dataset, TargetCache) {
    let (tr, va, te) = corpus(seed);
    let cache = targets(&[&tr, &va, &te], &layer);
    let (model, history) = train(&tr, &va, &config(layer, seed), &cache).unwrap();
    (model, history, te, cache)
}

#[test]
fn training_lowers_validation_regret() {
    let (_, history, _, _) = run(LayerConfig::new(0.0).with_iters(5, 10), 1);
    assert_eq!(history.records.len(), 9);
    let initial = history.records[0].valid_regret;
    let best = history.records[history.best_epoch].valid_regret;
    assert!(best < initial, "best {best} vs initial {initial}");
    assert!(history.records.iter().all(|r| r.train_loss.is_finite()));
}

#[test]
fn same_seed_same_history() {
    let layer = LayerConfig::new(0.5).with_iters(20, 60);
    let (m1, h1, _, _) = run(layer.clone(), 4);
    let (m2, h2, _, _) = run(layer, 4);
    assert_eq!(h1, h2);
    assert_eq!(m1, m2);
}

#[test]
fn thread_count_does_not_change_results() {
    let layer = LayerConfig::new(0.5).with_iters(20, 60);
    let in_pool = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| run(layer.clone(), 5).1)
    };
    assert_eq!(in_pool(1), in_pool(4));
}

#[test]
fn fair_layer_trains_and_evaluates() {
    let layer = LayerConfig::new(0.5).with_iters(20, 60);
    let (model, history, test, cache) = run(layer.clone(), 6);
    assert!(history.best_epoch <= 8);
    let summary = summarize(&evaluate(&model, &test, &layer, Some(&cache)).unwrap());
    assert_eq!(summary.queries, test.len());
    assert!(summary.mean_regret.unwrap() >= -1e-9);
    assert!(summary.mean_dcg > 0.0);
    assert!((0.0..=1.0).contains(&summary.worst_violation));
}
