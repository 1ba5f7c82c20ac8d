//! Ordered weighted averaging and the machinery behind its smoothed gradient.
//!
//! With strictly decreasing weights the OWA functional `w · sort_ascending(x)`
//! is concave, impartial, equitable and monotone. It is nonsmooth, so the
//! solver works with the Moreau envelope of the convex function `-OWA_w`,
//! whose gradient is the Euclidean projection of `x / beta` onto the
//! permutahedron spanned by `w~ = -(w_m, ..., w_1)`. That projection reduces
//! to a nonincreasing isotonic regression solved by pool adjacent violators.

use itertools::Itertools;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Largest dimension accepted by [`owa_min_oracle`].
pub const ORACLE_MAX_DIM: usize = 8;

/// Normalized OWA weight vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OwaWeights(Vec<f64>);

impl OwaWeights {
    /// Fair (generalized Gini) weights: non-negative, summing to one and
    /// strictly decreasing.
    pub fn new(w: Vec<f64>) -> Result<Self> {
        let weights = Self::general(w)?;
        if weights.0.windows(2).any(|p| p[0] <= p[1]) {
            return Err(Error::InvalidWeights(
                "weights must be strictly decreasing".into(),
            ));
        }
        Ok(weights)
    }

    /// Weights that only need to lie on the simplex. Ordering is not checked,
    /// so the fairness properties do not hold in general.
    pub fn general(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::InvalidWeights("empty weight vector".into()));
        }
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidWeights(
                "weights must be finite and non-negative".into(),
            ));
        }
        let total: f64 = w.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidWeights(format!(
                "weights must sum to 1, got {total}"
            )));
        }
        Ok(Self(w))
    }

    /// Default schedule `w_j ∝ m + 1 - j`, normalized.
    pub fn linear(m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidWeights("need at least one group".into()));
        }
        let total = (m * (m + 1) / 2) as f64;
        Self::new((0..m).map(|j| (m - j) as f64 / total).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// `-(w_m, ..., w_1)`, the generator of the permutahedron whose projection
    /// gives the smoothed gradient.
    pub fn tilde(&self) -> Vec<f64> {
        self.0.iter().rev().map(|v| -v).collect()
    }
}

/// Smoothing schedule `beta_k = beta0 / sqrt(k)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothingSchedule {
    beta0: f64,
}

impl SmoothingSchedule {
    pub fn new(beta0: f64) -> Result<Self> {
        if !(beta0.is_finite() && beta0 > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "beta0 must be positive, got {beta0}"
            )));
        }
        Ok(Self { beta0 })
    }

    pub fn beta0(&self) -> f64 {
        self.beta0
    }

    /// Smoothing at iteration `k >= 1`.
    pub fn beta(&self, k: usize) -> f64 {
        debug_assert!(k >= 1);
        self.beta0 / (k as f64).sqrt()
    }
}

pub fn owa(w: &OwaWeights, x: &[f64]) -> Result<f64> {
    check_len(w.len(), x.len())?;
    let mut sorted = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(w.0.iter().zip(&sorted).map(|(a, b)| a * b).sum())
}

/// OWA as the minimum of `w_sigma · x` over every permutation `sigma`.
/// Exhaustive, so only usable for `m <= ORACLE_MAX_DIM`.
pub fn owa_min_oracle(w: &OwaWeights, x: &[f64]) -> Result<f64> {
    check_len(w.len(), x.len())?;
    let m = x.len();
    if m > ORACLE_MAX_DIM {
        return Err(Error::TooLarge {
            size: m,
            limit: ORACLE_MAX_DIM,
        });
    }
    Ok((0..m)
        .permutations(m)
        .map(|sigma| sigma.iter().zip(x).map(|(&s, v)| w.0[s] * v).sum::<f64>())
        .fold(f64::INFINITY, f64::min))
}

/// Least-squares fit of `s` under the constraint `v_1 >= v_2 >= ... >= v_m`,
/// by pool adjacent violators.
pub fn isotonic_nonincreasing(s: &[f64]) -> Vec<f64> {
    // (sum, count) per block
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(s.len());
    for &value in s {
        let mut sum = value;
        let mut count = 1usize;
        while let Some(&(prev_sum, prev_count)) = blocks.last() {
            if sum / count as f64 >= prev_sum / prev_count as f64 {
                sum += prev_sum;
                count += prev_count;
                blocks.pop();
            } else {
                break;
            }
        }
        blocks.push((sum, count));
    }
    let mut out = Vec::with_capacity(s.len());
    for (sum, count) in blocks {
        let mean = sum / count as f64;
        out.extend(std::iter::repeat_n(mean, count));
    }
    out
}

/// Euclidean projection of `z` onto `conv{ w_tilde_sigma : sigma }`.
pub fn project_permutahedron(w_tilde: &[f64], z: &[f64]) -> Result<Vec<f64>> {
    check_len(w_tilde.len(), z.len())?;
    let mut order: Vec<usize> = (0..z.len()).collect();
    order.sort_by(|&a, &b| z[b].total_cmp(&z[a]).then(a.cmp(&b)));
    let mut generator = w_tilde.to_vec();
    generator.sort_by(|a, b| b.total_cmp(a));

    let shifted: Vec<f64> = order
        .iter()
        .zip(&generator)
        .map(|(&i, g)| z[i] - g)
        .collect();
    let fitted = isotonic_nonincreasing(&shifted);

    let mut out = z.to_vec();
    for (&i, v) in order.iter().zip(&fitted) {
        out[i] -= v;
    }
    Ok(out)
}

/// Gradient of the Moreau envelope (parameter `beta`) of the convex function
/// `-OWA_w`, i.e. the projection of `x / beta` onto the permutahedron of
/// `w.tilde()`.
///
/// The smoothed OWA is the negated envelope, so its ascent direction is the
/// negation of this vector. As `beta -> 0` the result approaches a vertex `q`
/// with `-q · x = OWA_w(x)`.
pub fn smoothed_owa_gradient(w: &OwaWeights, x: &[f64], beta: f64) -> Result<Vec<f64>> {
    check_len(w.len(), x.len())?;
    if !(beta.is_finite() && beta > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "beta must be positive, got {beta}"
        )));
    }
    let scaled: Vec<f64> = x.iter().map(|v| v / beta).collect();
    project_permutahedron(&w.tilde(), &scaled)
}

/// Smoothed OWA value `-M_beta(x)` where `M_beta` is the Moreau envelope of
/// `-OWA_w`. Upper-bounds `OWA_w(x)` and converges to it as `beta -> 0`.
pub fn smoothed_owa(w: &OwaWeights, x: &[f64], beta: f64) -> Result<f64> {
    let mu = smoothed_owa_gradient(w, x, beta)?;
    let prox: Vec<f64> = x.iter().zip(&mu).map(|(a, m)| a - beta * m).collect();
    let norm_sq: f64 = mu.iter().map(|m| m * m).sum();
    Ok(owa(w, &prox)? - 0.5 * beta * norm_sq)
}
