//! SPO+ loss and subgradient against an exhaustive ranking solver.

use itertools::Itertools;
use ndarray::Array2;
use owa_rank::fw::LayerConfig;
use owa_rank::model::{backward, forward, MlpParams};
use owa_rank::policy::{argsort_perm, dcg, position_bias, GroupAssignment, Permutation, PositionBias};
use owa_rank::spo::{
    precompute_targets, regret, spo_plus_loss, spo_plus_subgradient, Problem, TargetCache,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Best ranking by enumeration (lambda = 0).
fn best_ranking(y: &[f64], b: &PositionBias) -> Permutation {
    let n = y.len();
    let order = (0..n)
        .permutations(n)
        .max_by(|p, q| {
            let s = |o: &Vec<usize>| -> f64 { o.iter().zip(b.as_slice()).map(|(&i, w)| y[i] * w).sum() };
            s(p).total_cmp(&s(q))
        })
        .unwrap();
    Permutation::new(order).unwrap()
}

fn exposures(p: &Permutation, b: &PositionBias) -> Vec<f64> {
    let mut out = vec![0.0; p.len()];
    for (rank, &item) in p.order().iter().enumerate() {
        out[item] = b.as_slice()[rank];
    }
    out
}

/// Exact lambda = 0 surrogate: `max_P y_pert^T P b - y_pert^T P*(y) b`.
fn exact_loss(y_hat: &[f64], y: &[f64], b: &PositionBias) -> f64 {
    let y_pert: Vec<f64> = y_hat.iter().zip(y).map(|(p, t)| 2.0 * p - t).collect();
    let plus = best_ranking(&y_pert, b);
    let star = best_ranking(y, b);
    dcg(&plus, &y_pert, b).unwrap() - dcg(&star, &y_pert, b).unwrap()
}

struct Instance {
    y: Vec<f64>,
    groups: GroupAssignment,
    bias: PositionBias,
}

impl Instance {
    fn random(rng: &mut impl Rng, n: usize) -> Self {
        Self {
            y: (0..n).map(|_| rng.random_range(0.0..3.0)).collect(),
            groups: GroupAssignment::new((0..n).map(|i| i % 2).collect(), 2).unwrap(),
            bias: position_bias(n).unwrap(),
        }
    }

    fn problem(&self) -> Problem<'_> {
        Problem {
            qid: "q",
            relevance: &self.y,
            groups: &self.groups,
            bias: &self.bias,
        }
    }

    fn cache(&self, layer: &LayerConfig) -> TargetCache {
        let mut cache = TargetCache::new();
        precompute_targets(&[self.problem()], layer, &mut cache).unwrap();
        cache
    }
}

#[test]
fn lambda_zero_matches_exhaustive_solver() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let layer = LayerConfig::new(0.0).with_iters(20, 50);
    for _ in 0..100 {
        let n = rng.random_range(2..=6);
        let inst = Instance::random(&mut rng, n);
        let cache = inst.cache(&layer);
        let y_hat: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..3.0)).collect();
        let grad = spo_plus_subgradient(&y_hat, &inst.problem(), &layer, &cache).unwrap();

        let y_pert: Vec<f64> = y_hat.iter().zip(&inst.y).map(|(p, t)| 2.0 * p - t).collect();
        let plus = exposures(&best_ranking(&y_pert, &inst.bias), &inst.bias);
        let star = exposures(&best_ranking(&inst.y, &inst.bias), &inst.bias);
        for i in 0..n {
            assert!((grad.d_y[i] - (plus[i] - star[i])).abs() <= 1e-12);
        }
        assert!((grad.loss - exact_loss(&y_hat, &inst.y, &inst.bias)).abs() <= 1e-12);
    }
}

#[test]
fn loss_upper_bounds_regret() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..200 {
        let lambda = [0.0, 0.0, 0.3, 0.7][trial % 4];
        let layer = LayerConfig::new(lambda);
        let n = rng.random_range(2..=6);
        let inst = Instance::random(&mut rng, n);
        let cache = inst.cache(&layer);
        let y_hat: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..3.0)).collect();
        let p = inst.problem();
        let loss = spo_plus_loss(&y_hat, &p, &layer, &cache).unwrap();
        let r = regret(&y_hat, &p, &layer, &cache).unwrap();
        assert!(loss >= r - 1e-3, "trial {trial} lambda {lambda}: loss {loss} < regret {r}");
        assert!(r >= -1e-3);
    }
}

#[test]
fn gradient_recomputes_from_stored_policies() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for lambda in [0.2, 0.5, 0.9] {
        let layer = LayerConfig::new(lambda).with_iters(40, 120);
        let inst = Instance::random(&mut rng, 8);
        let cache = inst.cache(&layer);
        let y_hat: Vec<f64> = (0..8).map(|_| rng.random::<f64>()).collect();
        let grad = spo_plus_subgradient(&y_hat, &inst.problem(), &layer, &cache).unwrap();
        let target = &cache.get("q", lambda).unwrap().training;
        let plus = grad.perturbed.item_exposures(&inst.bias).unwrap();
        let star = target.policy.item_exposures(&inst.bias).unwrap();
        for i in 0..8 {
            assert!((grad.d_y[i] - (1.0 - lambda) * (plus[i] - star[i])).abs() <= 1e-15);
        }
        let full = grad.loss_gradient();
        assert!(full.iter().zip(&grad.d_y).all(|(f, d)| *f == 2.0 * d));
    }
}

#[test]
fn scaling_predictions_keeps_the_lambda_zero_policy() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..20 {
        let y_hat: Vec<f64> = (0..6).map(|_| rng.random::<f64>()).collect();
        let doubled: Vec<f64> = y_hat.iter().map(|v| 2.0 * v).collect();
        assert_eq!(argsort_perm(&y_hat), argsort_perm(&doubled));
    }
}

#[test]
fn order_preserving_transform_has_zero_regret() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let layer = LayerConfig::new(0.0).with_iters(5, 10);
    for _ in 0..20 {
        let inst = Instance::random(&mut rng, 6);
        let cache = inst.cache(&layer);
        let y_hat: Vec<f64> = inst.y.iter().map(|v| (3.0 * v).exp() - 7.0).collect();
        assert_eq!(regret(&y_hat, &inst.problem(), &layer, &cache).unwrap(), 0.0);
    }
}

#[test]
fn negative_gradient_step_does_not_increase_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let layer = LayerConfig::new(0.0).with_iters(5, 10);
    let mut checked = 0;
    while checked < 50 {
        let n = rng.random_range(2..=6);
        let inst = Instance::random(&mut rng, n);
        let y_hat: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..3.0)).collect();
        let cache = inst.cache(&layer);
        let grad = spo_plus_subgradient(&y_hat, &inst.problem(), &layer, &cache).unwrap();
        let eta = 1e-3;
        let stepped: Vec<f64> = y_hat.iter().zip(&grad.d_y).map(|(v, g)| v - eta * g).collect();
        let before = exact_loss(&y_hat, &inst.y, &inst.bias);
        let after = exact_loss(&stepped, &inst.y, &inst.bias);
        assert!(after <= before + 1e-12, "loss rose from {before} to {after}");
        checked += 1;
    }
}

/// Perturbing one parameter changes the loss as `backward(2 d_y)` predicts.
#[test]
fn full_pipeline_finite_difference() {
    let layer = LayerConfig::new(0.0).with_iters(5, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut checked = 0;
    let mut attempts = 0;
    while checked < 10 {
        attempts += 1;
        assert!(attempts < 1000, "could not draw well separated instances");
        let n = rng.random_range(3..=5);
        let params = MlpParams::pyramid(3, 8, rng.random()).unwrap();
        let x = Array2::from_shape_simple_fn((n, 3), || rng.random_range(-1.0..1.0));
        let scores = forward(&params, &x).unwrap();
        let inst = Instance::random(&mut rng, n);
        let y_pert: Vec<f64> = scores.iter().zip(&inst.y).map(|(s, y)| 2.0 * s - y).collect();
        let separated = |v: &[f64]| {
            v.iter()
                .tuple_combinations()
                .all(|(a, b): (&f64, &f64)| (a - b).abs() >= 0.1)
        };
        if !separated(&scores) || !separated(&y_pert) || !separated(&inst.y) {
            continue;
        }
        let cache = inst.cache(&layer);
        let p = inst.problem();
        let grad = spo_plus_subgradient(&scores, &p, &layer, &cache).unwrap();
        if grad.d_y.iter().all(|g| *g == 0.0) {
            continue;
        }
        let analytic: Vec<f64> = backward(&params, &x, &grad.loss_gradient())
            .unwrap()
            .iter()
            .copied()
            .collect();
        let (k, &g) = analytic
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .unwrap();
        let h = 1e-6;
        let loss_at = |delta: f64| {
            let mut q = params.clone();
            *q.iter_mut().nth(k).unwrap() += delta;
            let s = forward(&q, &x).unwrap();
            spo_plus_loss(&s, &p, &layer, &cache).unwrap()
        };
        let fd = (loss_at(h) - loss_at(-h)) / (2.0 * h);
        assert!((fd - g).abs() <= 5e-3 * g.abs(), "fd {fd} vs analytic {g}");
        checked += 1;
    }
}
