//! Per-query solver and backward-pass timings on random instances.

use std::time::Instant;

use anyhow::Result;
use owa_rank::fw::{solve, LayerConfig};
use owa_rank::policy::{position_bias, GroupAssignment};
use owa_rank::spo::{precompute_targets, spo_plus_subgradient, Problem, TargetCache};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub n: usize,
    pub lambda: f64,
    pub groups: usize,
    pub queries: usize,
    pub iters_infer: usize,
    /// Inference solve with `iters_infer` iterations.
    pub infer_ms_per_query: f64,
    pub infer_us_per_iter: f64,
    pub iters_train: usize,
    /// Solve with `iters_train` iterations.
    pub forward_ms_per_query: f64,
    /// SPO+ subgradient, whose perturbed solve also runs `iters_train` iterations.
    pub backward_ms_per_query: f64,
}

struct Instance {
    relevance: Vec<f64>,
    scores: Vec<f64>,
    groups: GroupAssignment,
    qid: String,
}

fn instances(n: usize, m: usize, count: usize, seed: u64) -> Result<Vec<Instance>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(n as u64);
    (0..count)
        .map(|q| {
            let labels = (0..n).map(|_| rng.random_range(0..m)).collect();
            Ok(Instance {
                relevance: (0..n).map(|_| rng.random::<f64>()).collect(),
                scores: (0..n).map(|_| rng.random::<f64>()).collect(),
                groups: GroupAssignment::new(labels, m)?,
                qid: format!("bench-{n}-{q}"),
            })
        })
        .collect()
}

/// Times `queries` random instances of size `n`, one at a time.
pub fn measure(n: usize, m: usize, layer: &LayerConfig, queries: usize, seed: u64) -> Result<BenchRow> {
    let bias = position_bias(n)?;
    let insts = instances(n, m, queries, seed)?;
    let problems: Vec<Problem> = insts
        .iter()
        .map(|i| Problem {
            qid: &i.qid,
            relevance: &i.relevance,
            groups: &i.groups,
            bias: &bias,
        })
        .collect();
    let mut cache = TargetCache::new();
    precompute_targets(&problems, layer, &mut cache)?;

    let time = |f: &mut dyn FnMut(&Instance, &Problem) -> Result<()>| -> Result<f64> {
        let start = Instant::now();
        for (inst, p) in insts.iter().zip(&problems) {
            f(inst, p)?;
        }
        Ok(start.elapsed().as_secs_f64() * 1e3 / queries as f64)
    };
    let infer = layer.infer_fw();
    let train = layer.train_fw();
    let infer_ms = time(&mut |i, _| {
        solve(&i.scores, &i.groups, &bias, &infer)?;
        Ok(())
    })?;
    let forward_ms = time(&mut |i, _| {
        solve(&i.scores, &i.groups, &bias, &train)?;
        Ok(())
    })?;
    let backward_ms = time(&mut |i, p| {
        spo_plus_subgradient(&i.scores, p, layer, &cache)?;
        Ok(())
    })?;
    Ok(BenchRow {
        n,
        lambda: layer.lambda,
        groups: m,
        queries,
        iters_infer: layer.iters_infer,
        infer_ms_per_query: infer_ms,
        infer_us_per_iter: infer_ms * 1e3 / layer.iters_infer as f64,
        iters_train: layer.iters_train,
        forward_ms_per_query: forward_ms,
        backward_ms_per_query: backward_ms,
    })
}
