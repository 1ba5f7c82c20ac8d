//! Per-query evaluation of ranking policies and aggregation over a dataset.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, QuerySample};
use crate::error::Result;
use crate::fw::{solve, LayerConfig};
use crate::model::RelevanceModel;
use crate::policy::{expected_dcg, fairness_violations, RankingPolicy};
use crate::spo::{regret_of_policy, Problem, TargetCache};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub qid: String,
    /// `y^T Pi b` under the true relevance.
    pub dcg: f64,
    /// Per active group, in group-id order.
    pub violations: Vec<f64>,
    pub mean_violation: f64,
    pub max_violation: f64,
    /// Present when a target cache was supplied.
    pub regret: Option<f64>,
}

pub fn policy_metrics(
    policy: &RankingPolicy,
    problem: &Problem,
    layer: &LayerConfig,
    cache: Option<&TargetCache>,
) -> Result<QueryMetrics> {
    let violations = fairness_violations(policy, problem.groups, problem.bias)?;
    let regret = match cache {
        Some(c) => Some(regret_of_policy(policy, problem, layer, c)?),
        None => None,
    };
    Ok(QueryMetrics {
        qid: problem.qid.to_string(),
        dcg: expected_dcg(policy, problem.relevance, problem.bias)?,
        mean_violation: violations.iter().sum::<f64>() / violations.len() as f64,
        max_violation: violations.iter().copied().fold(0.0, f64::max),
        violations,
        regret,
    })
}

/// Solves the layer on `scorer`'s output for every query. Results keep the
/// dataset order regardless of the thread count.
pub fn evaluate_with<F>(
    dataset: &Dataset,
    layer: &LayerConfig,
    cache: Option<&TargetCache>,
    scorer: F,
) -> Result<Vec<QueryMetrics>>
where
    F: Fn(&QuerySample) -> Result<Vec<f64>> + Sync,
{
    let bias = dataset.bias();
    let fw = layer.infer_fw();
    dataset
        .samples
        .par_iter()
        .map(|s| {
            let scores = scorer(s)?;
            let sol = solve(&scores, &s.groups, &bias, &fw)?;
            policy_metrics(&sol.policy, &s.problem(&bias), layer, cache)
        })
        .collect()
}

pub fn evaluate(
    model: &RelevanceModel,
    dataset: &Dataset,
    layer: &LayerConfig,
    cache: Option<&TargetCache>,
) -> Result<Vec<QueryMetrics>> {
    evaluate_with(dataset, layer, cache, |s| model.scores(&s.features))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub queries: usize,
    pub mean_dcg: f64,
    /// Mean over queries of the mean group violation.
    pub mean_violation: f64,
    /// Mean over queries of the largest group violation.
    pub mean_max_violation: f64,
    /// Largest group violation of any query.
    pub worst_violation: f64,
    pub mean_regret: Option<f64>,
}

/// Sums run in slice order, so the result does not depend on threading.
pub fn summarize(metrics: &[QueryMetrics]) -> Summary {
    let n = metrics.len() as f64;
    let avg = |f: fn(&QueryMetrics) -> f64| metrics.iter().map(f).sum::<f64>() / n;
    let mean_regret = metrics
        .iter()
        .map(|m| m.regret)
        .sum::<Option<f64>>()
        .map(|s| s / n);
    Summary {
        queries: metrics.len(),
        mean_dcg: avg(|m| m.dcg),
        mean_violation: avg(|m| m.mean_violation),
        mean_max_violation: avg(|m| m.max_violation),
        worst_violation: metrics.iter().map(|m| m.max_violation).fold(0.0, f64::max),
        mean_regret: if metrics.is_empty() { None } else { mean_regret },
    }
}
