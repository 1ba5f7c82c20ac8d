//! Regret and the SPO+ surrogate of the OWA ranking layer.
//!
//! With `gamma = [(1 - lambda) vec(y b^T); 0; lambda]` the layer is a linear
//! program over `(Pi, r, z)`, so in maximization form
//!
//! ```text
//! loss(y_hat, y) = max_x (2 gamma_hat - gamma)^T x  -  (2 gamma_hat - gamma)^T x*(y)
//! ```
//!
//! and `2 gamma_hat - gamma` only differs from `gamma` in the score block,
//! where `y` is replaced by `y_pert = 2 y_hat - y`. Its subgradient with
//! respect to `y_hat` is `2 (1 - lambda) (Pi+ - Pi*) b`; [`SpoGradient::d_y`]
//! drops the constant 2 (it is absorbed by the learning rate) and
//! [`SpoGradient::loss_gradient`] restores it.
//!
//! Ground-truth targets are solved once per `(query, lambda)`. Each target
//! keeps two snapshots of the same Frank-Wolfe run: the inference-grade one
//! (used for regret) and the training-grade one at `iters_train` iterations
//! (used in the surrogate). Because the perturbed solve also runs
//! `iters_train` iterations, the gradient at `y_hat = y` is exactly zero.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{check_len, Error, Result};
use crate::fw::{objective, solve, solve_with_checkpoints, FwSolution, LayerConfig};
use crate::policy::{GroupAssignment, Permutation, PositionBias, RankingPolicy};

pub const TARGET_CACHE_FORMAT: &str = "owa-rank-targets";
pub const TARGET_CACHE_VERSION: u32 = 1;

/// One query as seen by the ranking layer.
#[derive(Debug, Clone, Copy)]
pub struct Problem<'a> {
    pub qid: &'a str,
    pub relevance: &'a [f64],
    pub groups: &'a GroupAssignment,
    pub bias: &'a PositionBias,
}

impl Problem<'_> {
    pub fn n(&self) -> usize {
        self.relevance.len()
    }
}

#[derive(Debug, Clone)]
pub struct TargetSolution {
    pub policy: RankingPolicy,
    /// `Pi* b`.
    pub item_exposures: Vec<f64>,
    /// `r* = A Pi* b`.
    pub group_exposures: Vec<f64>,
    /// `z* = OWA(r*)`.
    pub owa_value: f64,
    /// `f(Pi*, y)`.
    pub objective: f64,
    pub iterations: usize,
}

impl TargetSolution {
    fn from_solution(sol: FwSolution, bias: &PositionBias) -> Result<Self> {
        Ok(Self {
            item_exposures: sol.policy.item_exposures(bias)?,
            policy: sol.policy,
            group_exposures: sol.group_exposures,
            owa_value: sol.owa_value,
            objective: sol.objective,
            iterations: sol.iterations,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Target {
    /// Solved with `iters_infer`; defines regret.
    pub inference: TargetSolution,
    /// Solved with `iters_train`; anchors the surrogate.
    pub training: TargetSolution,
}

/// Solves the ground-truth problem once, keeping both snapshots.
pub fn compute_target(problem: &Problem, layer: &LayerConfig) -> Result<Target> {
    layer.validate()?;
    let (train, infer) = (layer.iters_train, layer.iters_infer);
    let fw = layer.fw(train.max(infer));
    let checkpoints: &[usize] = if train == infer {
        &[]
    } else {
        &[train.min(infer)]
    };
    let mut sols = solve_with_checkpoints(
        problem.relevance,
        problem.groups,
        problem.bias,
        &fw,
        checkpoints,
    )?;
    let last = TargetSolution::from_solution(sols.pop().expect("final solution"), problem.bias)?;
    let (inference, training) = match sols.pop() {
        None => (last.clone(), last),
        Some(early) => {
            let early = TargetSolution::from_solution(early, problem.bias)?;
            if train < infer {
                (last, early)
            } else {
                (early, last)
            }
        }
    };
    Ok(Target {
        inference,
        training,
    })
}

/// Read-only map from `(query id, lambda)` to solved targets.
#[derive(Debug, Clone, Default)]
pub struct TargetCache {
    entries: BTreeMap<(String, u64), Target>,
}

impl TargetCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Inserts a target unless the key is already present; entries are never
    /// replaced.
    pub fn insert(&mut self, qid: &str, lambda: f64, target: Target) {
        self.entries
            .entry((qid.to_string(), lambda.to_bits()))
            .or_insert(target);
    }

    pub fn contains(&self, qid: &str, lambda: f64) -> bool {
        self.entries
            .contains_key(&(qid.to_string(), lambda.to_bits()))
    }

    pub fn get(&self, qid: &str, lambda: f64) -> Result<&Target> {
        self.entries
            .get(&(qid.to_string(), lambda.to_bits()))
            .ok_or_else(|| Error::MissingTarget {
                qid: qid.to_string(),
                lambda,
            })
    }
}

/// Solves every missing target in parallel. Idempotent.
pub fn precompute_targets(
    problems: &[Problem],
    layer: &LayerConfig,
    cache: &mut TargetCache,
) -> Result<()> {
    let missing: Vec<&Problem> = problems
        .iter()
        .filter(|p| !cache.contains(p.qid, layer.lambda))
        .collect();
    let solved = missing
        .par_iter()
        .map(|p| compute_target(p, layer))
        .collect::<Result<Vec<_>>>()?;
    for (p, t) in missing.into_iter().zip(solved) {
        cache.insert(p.qid, layer.lambda, t);
    }
    Ok(())
}

/// Outcome of [`precompute_targets_persistent`].
#[derive(Debug, Clone, Default)]
pub struct CacheReport {
    pub loaded: usize,
    pub computed: usize,
    /// Read or write failure; the targets were recomputed or kept in memory.
    pub warnings: Vec<String>,
}

/// Like [`precompute_targets`], reusing records from `path` whose content
/// hash matches and rewriting the file afterwards. File problems are
/// reported in [`CacheReport::warnings`] rather than failing the run.
pub fn precompute_targets_persistent(
    problems: &[Problem],
    layer: &LayerConfig,
    cache: &mut TargetCache,
    path: &Path,
) -> Result<CacheReport> {
    layer.validate()?;
    let mut report = CacheReport::default();
    let stored = if path.exists() {
        match read_records(path) {
            Ok(records) => records,
            Err(e) => {
                report
                    .warnings
                    .push(format!("ignoring target cache {}: {e}", path.display()));
                BTreeMap::new()
            }
        }
    } else {
        BTreeMap::new()
    };

    let keys: Vec<String> = problems.iter().map(|p| content_key(p, layer)).collect();
    for (p, key) in problems.iter().zip(&keys) {
        if cache.contains(p.qid, layer.lambda) {
            continue;
        }
        if let Some(rec) = stored.get(key) {
            match rec.to_target(p, layer) {
                Ok(t) => {
                    cache.insert(p.qid, layer.lambda, t);
                    report.loaded += 1;
                }
                Err(e) => report
                    .warnings
                    .push(format!("discarding cached target for {}: {e}", p.qid)),
            }
        }
    }
    let before = cache.len();
    precompute_targets(problems, layer, cache)?;
    report.computed = cache.len() - before;

    let mut merged = stored;
    for (p, key) in problems.iter().zip(keys) {
        let target = cache.get(p.qid, layer.lambda)?;
        merged.insert(key.clone(), TargetRecord::new(key, p.qid, layer.lambda, target));
    }
    if let Err(e) = write_records(path, &merged) {
        report
            .warnings
            .push(format!("could not write target cache {}: {e}", path.display()));
    }
    Ok(report)
}

/// SHA-256 over everything the target depends on.
pub fn content_key(problem: &Problem, layer: &LayerConfig) -> String {
    #[derive(Serialize)]
    struct KeyMaterial<'a> {
        version: u32,
        qid: &'a str,
        relevance: &'a [f64],
        labels: &'a [usize],
        num_groups: usize,
        lambda: f64,
        iters_train: usize,
        iters_infer: usize,
        beta0: f64,
        weights: String,
    }
    let material = KeyMaterial {
        version: TARGET_CACHE_VERSION,
        qid: problem.qid,
        relevance: problem.relevance,
        labels: problem.groups.labels(),
        num_groups: problem.groups.num_groups(),
        lambda: layer.lambda,
        iters_train: layer.iters_train,
        iters_infer: layer.iters_infer,
        beta0: layer.beta0,
        weights: layer.weights.describe(),
    };
    let bytes = serde_json::to_vec(&material).expect("key material serializes");
    hex::encode(Sha256::digest(&bytes))
}

#[derive(Serialize, Deserialize)]
struct CacheHeader {
    format: String,
    version: u32,
}

#[derive(Serialize, Deserialize)]
struct SolutionRecord {
    atoms: Vec<(f64, Vec<usize>)>,
    iterations: usize,
}

#[derive(Serialize, Deserialize)]
struct TargetRecord {
    key: String,
    qid: String,
    lambda: f64,
    inference: SolutionRecord,
    training: SolutionRecord,
}

impl SolutionRecord {
    fn new(sol: &TargetSolution) -> Self {
        Self {
            atoms: sol
                .policy
                .atoms()
                .iter()
                .map(|(w, p)| (*w, p.order().to_vec()))
                .collect(),
            iterations: sol.iterations,
        }
    }

    fn to_solution(&self, problem: &Problem, layer: &LayerConfig) -> Result<TargetSolution> {
        let lambda = layer.lambda;
        let atoms = self
            .atoms
            .iter()
            .map(|(w, order)| Ok((*w, Permutation::new(order.clone())?)))
            .collect::<Result<Vec<_>>>()?;
        let policy = RankingPolicy::from_atoms(atoms)?;
        check_len(problem.n(), policy.n())?;
        let item_exposures = policy.item_exposures(problem.bias)?;
        let group_exposures = problem.groups.group_means(&item_exposures)?;
        let w = layer.weights.weights(group_exposures.len())?;
        let owa_value = crate::owa::owa(&w, &group_exposures)?;
        let utility: f64 = problem
            .relevance
            .iter()
            .zip(&item_exposures)
            .map(|(y, x)| y * x)
            .sum();
        Ok(TargetSolution {
            policy,
            item_exposures,
            group_exposures,
            owa_value,
            objective: (1.0 - lambda) * utility + lambda * owa_value,
            iterations: self.iterations,
        })
    }
}

impl TargetRecord {
    fn new(key: String, qid: &str, lambda: f64, target: &Target) -> Self {
        Self {
            key,
            qid: qid.to_string(),
            lambda,
            inference: SolutionRecord::new(&target.inference),
            training: SolutionRecord::new(&target.training),
        }
    }

    fn to_target(&self, problem: &Problem, layer: &LayerConfig) -> Result<Target> {
        Ok(Target {
            inference: self.inference.to_solution(problem, layer)?,
            training: self.training.to_solution(problem, layer)?,
        })
    }
}

fn read_records(path: &Path) -> Result<BTreeMap<String, TargetRecord>> {
    let mut lines = BufReader::new(File::open(path)?).lines();
    let header: CacheHeader = match lines.next() {
        Some(line) => serde_json::from_str(&line?)?,
        None => return Ok(BTreeMap::new()),
    };
    if header.format != TARGET_CACHE_FORMAT {
        return Err(Error::InvalidDataset(format!(
            "not a target cache (format {:?})",
            header.format
        )));
    }
    if header.version != TARGET_CACHE_VERSION {
        return Err(Error::UnsupportedVersion {
            kind: "target cache".into(),
            found: header.version,
            expected: TARGET_CACHE_VERSION,
        });
    }
    let mut out = BTreeMap::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TargetRecord = serde_json::from_str(&line)?;
        out.insert(rec.key.clone(), rec);
    }
    Ok(out)
}

fn write_records(path: &Path, records: &BTreeMap<String, TargetRecord>) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        serde_json::to_writer(
            &mut w,
            &CacheHeader {
                format: TARGET_CACHE_FORMAT.into(),
                version: TARGET_CACHE_VERSION,
            },
        )?;
        writeln!(w)?;
        for rec in records.values() {
            serde_json::to_writer(&mut w, rec)?;
            writeln!(w)?;
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// `f(Pi*(y), y) - f(policy, y)` with the inference-grade target.
pub fn regret_of_policy(
    policy: &RankingPolicy,
    problem: &Problem,
    layer: &LayerConfig,
    cache: &TargetCache,
) -> Result<f64> {
    let target = cache.get(problem.qid, layer.lambda)?;
    let achieved = objective(
        policy,
        problem.relevance,
        problem.groups,
        problem.bias,
        &layer.infer_fw(),
    )?;
    Ok(target.inference.objective - achieved)
}

/// Regret of the policy the layer produces from `y_hat`.
pub fn regret(
    y_hat: &[f64],
    problem: &Problem,
    layer: &LayerConfig,
    cache: &TargetCache,
) -> Result<f64> {
    check_len(problem.n(), y_hat.len())?;
    cache.get(problem.qid, layer.lambda)?;
    let sol = solve(y_hat, problem.groups, problem.bias, &layer.infer_fw())?;
    regret_of_policy(&sol.policy, problem, layer, cache)
}

#[derive(Debug, Clone)]
pub struct SpoGradient {
    /// `(1 - lambda) (Pi+ - Pi*) b`.
    pub d_y: Vec<f64>,
    /// Surrogate value `f(Pi+; y_pert) - f(Pi*; y_pert)`.
    pub loss: f64,
    /// `Pi+`, the solution under `2 y_hat - y`.
    pub perturbed: RankingPolicy,
}

impl SpoGradient {
    /// Subgradient of [`SpoGradient::loss`] itself, `2 d_y`.
    pub fn loss_gradient(&self) -> Vec<f64> {
        self.d_y.iter().map(|g| 2.0 * g).collect()
    }
}

/// One perturbed solve with `iters_train` iterations, then the difference of
/// exposures against the training-grade target.
pub fn spo_plus_subgradient(
    y_hat: &[f64],
    problem: &Problem,
    layer: &LayerConfig,
    cache: &TargetCache,
) -> Result<SpoGradient> {
    check_len(problem.n(), y_hat.len())?;
    let target = &cache.get(problem.qid, layer.lambda)?.training;
    let y_pert: Vec<f64> = y_hat
        .iter()
        .zip(problem.relevance)
        .map(|(p, y)| 2.0 * p - y)
        .collect();
    let sol = solve(&y_pert, problem.groups, problem.bias, &layer.train_fw())?;
    let plus = sol.policy.item_exposures(problem.bias)?;
    let lambda = layer.lambda;
    let d_y = plus
        .iter()
        .zip(&target.item_exposures)
        .map(|(p, s)| (1.0 - lambda) * (p - s))
        .collect();
    let anchor_utility: f64 = y_pert
        .iter()
        .zip(&target.item_exposures)
        .map(|(y, x)| y * x)
        .sum();
    let anchor = (1.0 - lambda) * anchor_utility + lambda * target.owa_value;
    Ok(SpoGradient {
        d_y,
        loss: sol.objective - anchor,
        perturbed: sol.policy,
    })
}

pub fn spo_plus_loss(
    y_hat: &[f64],
    problem: &Problem,
    layer: &LayerConfig,
    cache: &TargetCache,
) -> Result<f64> {
    Ok(spo_plus_subgradient(y_hat, problem, layer, cache)?.loss)
}
