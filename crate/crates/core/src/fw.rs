//! Frank-Wolfe with Moreau-envelope smoothing for the OWA fair-ranking
//! problem
//!
//! ```text
//! max_{Pi in Birkhoff}  (1 - lambda) * y^T Pi b  +  lambda * OWA_w(A Pi b)
//! ```
//!
//! Every iterate is a convex combination of permutation atoms, so the returned
//! policy comes with its own decomposition. Exposures are updated
//! incrementally and each iteration costs one sort of `n` scores plus `O(n)`
//! bookkeeping; the dense matrix is only built for the returned policy.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::owa::{owa, project_permutahedron, smoothed_owa, OwaWeights, SmoothingSchedule};
use crate::policy::{
    argsort_perm, expected_dcg, group_exposures, GroupAssignment, Permutation, PositionBias,
    RankingPolicy,
};

pub const DEFAULT_TRAIN_ITERS: usize = 100;
pub const DEFAULT_INFER_ITERS: usize = 500;
pub const DEFAULT_BETA0: f64 = 1.0;

/// How OWA weights are chosen for a query with `m` non-empty groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightSchedule {
    /// `w_j ∝ m + 1 - j`.
    #[default]
    Linear,
    /// Fixed weights; the query must have exactly that many non-empty groups.
    Explicit(OwaWeights),
}

impl WeightSchedule {
    pub fn weights(&self, m: usize) -> Result<OwaWeights> {
        match self {
            WeightSchedule::Linear => OwaWeights::linear(m),
            WeightSchedule::Explicit(w) => {
                check_len(w.len(), m)?;
                Ok(w.clone())
            }
        }
    }

    pub fn describe(&self) -> String {
        match self {
            WeightSchedule::Linear => "linear".to_string(),
            WeightSchedule::Explicit(w) => {
                let parts: Vec<String> = w.as_slice().iter().map(|v| v.to_string()).collect();
                format!("explicit:{}", parts.join(","))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FwConfig {
    pub lambda: f64,
    pub iterations: usize,
    pub beta0: f64,
    pub weights: WeightSchedule,
}

impl FwConfig {
    pub fn new(lambda: f64, iterations: usize) -> Self {
        Self {
            lambda,
            iterations,
            beta0: DEFAULT_BETA0,
            weights: WeightSchedule::Linear,
        }
    }

    pub fn with_beta0(mut self, beta0: f64) -> Self {
        self.beta0 = beta0;
        self
    }

    pub fn with_weights(mut self, weights: WeightSchedule) -> Self {
        self.weights = weights;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidParameter(format!(
                "lambda must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidParameter("iterations must be >= 1".into()));
        }
        SmoothingSchedule::new(self.beta0)?;
        Ok(())
    }
}

/// Settings of the OWA ranking layer shared by training and inference: the
/// perturbed solves in the backward pass use `iters_train`, predictions and
/// regret use `iters_infer`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerConfig {
    pub lambda: f64,
    pub beta0: f64,
    pub weights: WeightSchedule,
    pub iters_train: usize,
    pub iters_infer: usize,
}

impl LayerConfig {
    pub fn new(lambda: f64) -> Self {
        Self {
            lambda,
            beta0: DEFAULT_BETA0,
            weights: WeightSchedule::Linear,
            iters_train: DEFAULT_TRAIN_ITERS,
            iters_infer: DEFAULT_INFER_ITERS,
        }
    }

    pub fn with_iters(mut self, train: usize, infer: usize) -> Self {
        self.iters_train = train;
        self.iters_infer = infer;
        self
    }

    pub fn with_beta0(mut self, beta0: f64) -> Self {
        self.beta0 = beta0;
        self
    }

    pub fn train_fw(&self) -> FwConfig {
        self.fw(self.iters_train)
    }

    pub fn infer_fw(&self) -> FwConfig {
        self.fw(self.iters_infer)
    }

    /// Solver settings with an arbitrary iteration count.
    pub fn fw(&self, iterations: usize) -> FwConfig {
        FwConfig {
            lambda: self.lambda,
            iterations,
            beta0: self.beta0,
            weights: self.weights.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train_fw().validate()?;
        self.infer_fw().validate()
    }
}

#[derive(Debug, Clone)]
pub struct FwSolution {
    pub policy: RankingPolicy,
    /// Smoothed objective after each iteration.
    pub objective_trace: Vec<f64>,
    /// Frank-Wolfe gap `<P_k - Pi_{k-1}, grad>` of each iteration.
    pub fw_gaps: Vec<f64>,
    pub group_exposures: Vec<f64>,
    pub owa_value: f64,
    /// Unsmoothed objective of `policy` under the scores it was solved for.
    pub objective: f64,
    pub iterations: usize,
}

/// `(1 - lambda) * y^T Pi b + lambda * OWA_w(A Pi b)`.
pub fn objective(
    policy: &RankingPolicy,
    y: &[f64],
    groups: &GroupAssignment,
    b: &PositionBias,
    cfg: &FwConfig,
) -> Result<f64> {
    let utility = expected_dcg(policy, y, b)?;
    let exposures = group_exposures(policy, groups, b)?;
    let w = cfg.weights.weights(exposures.len())?;
    Ok((1.0 - cfg.lambda) * utility + cfg.lambda * owa(&w, &exposures)?)
}

/// Vertex of the Birkhoff polytope maximizing `<Pi, y_eff b^T>`.
pub fn linearized_subproblem(y_eff: &[f64]) -> Permutation {
    argsort_perm(y_eff)
}

/// Final convex weight of the initial vertex and of every step's vertex after
/// `t` updates with step size `2 / (k + 2)`: `rho_k = 2 (k + 1) / ((t + 1)(t + 2))`.
pub fn atom_weights_from_steps(t: usize) -> Vec<f64> {
    let denom = ((t + 1) * (t + 2)) as f64;
    (0..=t).map(|k| (2 * (k + 1)) as f64 / denom).collect()
}

pub fn solve(
    y_hat: &[f64],
    groups: &GroupAssignment,
    b: &PositionBias,
    cfg: &FwConfig,
) -> Result<FwSolution> {
    let mut out = solve_with_checkpoints(y_hat, groups, b, cfg, &[])?;
    Ok(out.pop().expect("final solution is always returned"))
}

/// Runs `cfg.iterations` iterations and additionally returns the iterate
/// reached after each of `checkpoints` iterations (ascending, each below
/// `cfg.iterations`). The final solution is always the last element.
///
/// A checkpoint at `k` is bit-identical to a separate solve with `k`
/// iterations, since the iterates do not depend on the horizon.
pub fn solve_with_checkpoints(
    y_hat: &[f64],
    groups: &GroupAssignment,
    b: &PositionBias,
    cfg: &FwConfig,
    checkpoints: &[usize],
) -> Result<Vec<FwSolution>> {
    cfg.validate()?;
    let n = y_hat.len();
    check_len(n, groups.num_items())?;
    check_len(n, b.len())?;
    if y_hat.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("scores must be finite".into()));
    }
    if checkpoints.windows(2).any(|p| p[0] >= p[1])
        || checkpoints.iter().any(|&k| k == 0 || k >= cfg.iterations)
    {
        return Err(Error::InvalidParameter(format!(
            "checkpoints {checkpoints:?} must be ascending within 1..{}",
            cfg.iterations
        )));
    }

    let w = cfg.weights.weights(groups.num_active())?;
    let w_tilde = w.tilde();
    let schedule = SmoothingSchedule::new(cfg.beta0)?;
    let lambda = cfg.lambda;
    let bias = b.as_slice();

    let initial = argsort_perm(y_hat);
    let mut item_exp = vertex_exposures(&initial, bias);
    let mut group_exp = groups.group_means(&item_exp)?;
    // raw weight of step k is k + 1; normalized by (k + 1)(k + 2) / 2
    let mut atoms: Vec<(f64, Permutation)> = vec![(1.0, initial)];

    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut gaps = Vec::with_capacity(cfg.iterations);
    let mut out = Vec::with_capacity(checkpoints.len() + 1);
    let mut next_checkpoint = checkpoints.iter().peekable();

    let mut scaled = vec![0.0; group_exp.len()];
    let mut effective = vec![0.0; n];
    for k in 1..=cfg.iterations {
        let beta = schedule.beta(k);
        for (s, e) in scaled.iter_mut().zip(&group_exp) {
            *s = e / beta;
        }
        let mu = project_permutahedron(&w_tilde, &scaled)?;
        // ascent direction of the smoothed OWA is -mu
        let push = groups.spread(&mu)?;
        for ((e, y), p) in effective.iter_mut().zip(y_hat).zip(&push) {
            *e = (1.0 - lambda) * y - lambda * p;
        }

        let vertex = linearized_subproblem(&effective);
        let vertex_exp = vertex_exposures(&vertex, bias);
        gaps.push(
            effective
                .iter()
                .zip(vertex_exp.iter().zip(&item_exp))
                .map(|(g, (v, x))| g * (v - x))
                .sum(),
        );

        let step = 2.0 / (k as f64 + 2.0);
        let keep = k as f64 / (k as f64 + 2.0);
        for (x, v) in item_exp.iter_mut().zip(&vertex_exp) {
            *x = keep * *x + step * v;
        }
        let vertex_groups = groups.group_means(&vertex_exp)?;
        for (x, v) in group_exp.iter_mut().zip(&vertex_groups) {
            *x = keep * *x + step * v;
        }

        let raw = (k + 1) as f64;
        match atoms.last_mut() {
            Some((weight, last)) if *last == vertex => *weight += raw,
            _ => atoms.push((raw, vertex)),
        }

        let utility: f64 = y_hat.iter().zip(&item_exp).map(|(y, x)| y * x).sum();
        trace.push((1.0 - lambda) * utility + lambda * smoothed_owa(&w, &group_exp, beta)?);

        if next_checkpoint.peek() == Some(&&k) {
            next_checkpoint.next();
            out.push(finish(&atoms, k, &trace, &gaps, y_hat, groups, b, &w, lambda)?);
        }
    }
    out.push(finish(
        &atoms,
        cfg.iterations,
        &trace,
        &gaps,
        y_hat,
        groups,
        b,
        &w,
        lambda,
    )?);
    Ok(out)
}

fn vertex_exposures(perm: &Permutation, bias: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; perm.len()];
    for (&item, &b) in perm.order().iter().zip(bias) {
        out[item] = b;
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn finish(
    atoms: &[(f64, Permutation)],
    k: usize,
    trace: &[f64],
    gaps: &[f64],
    y_hat: &[f64],
    groups: &GroupAssignment,
    b: &PositionBias,
    w: &OwaWeights,
    lambda: f64,
) -> Result<FwSolution> {
    let total = ((k + 1) * (k + 2)) as f64 / 2.0;
    let policy = RankingPolicy::from_atoms(
        atoms
            .iter()
            .map(|(raw, p)| (raw / total, p.clone()))
            .collect(),
    )?;
    let exposures = group_exposures(&policy, groups, b)?;
    let owa_value = owa(w, &exposures)?;
    let utility = expected_dcg(&policy, y_hat, b)?;
    Ok(FwSolution {
        objective: (1.0 - lambda) * utility + lambda * owa_value,
        policy,
        objective_trace: trace[..k].to_vec(),
        fw_gaps: gaps[..k].to_vec(),
        group_exposures: exposures,
        owa_value,
        iterations: k,
    })
}
