//! Ranking policies over `n` items.
//!
//! A policy is a doubly stochastic matrix `Pi` where `Pi[(i, k)]` is the
//! probability that item `i` is shown at rank `k`. Policies produced here are
//! always built from an explicit convex combination of permutations, which is
//! kept as the source of truth; the dense matrix is a derived cache.

use ndarray::Array2;
use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// A ranking: `order()[k]` is the item placed at rank `k` (zero-based).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Permutation {
    order: Vec<usize>,
}

impl Permutation {
    pub fn new(order: Vec<usize>) -> Result<Self> {
        let n = order.len();
        let mut seen = vec![false; n];
        for &item in &order {
            if item >= n || seen[item] {
                return Err(Error::InvalidPermutation(format!(
                    "{order:?} is not a bijection on 0..{n}"
                )));
            }
            seen[item] = true;
        }
        Ok(Self { order })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// Rank of every item: `positions()[i]` is where item `i` is placed.
    pub fn positions(&self) -> Vec<usize> {
        let mut pos = vec![0; self.order.len()];
        for (rank, &item) in self.order.iter().enumerate() {
            pos[item] = rank;
        }
        pos
    }

    /// Permutation matrix with a one at `(item, rank)`.
    pub fn to_matrix(&self) -> Array2<f64> {
        let n = self.order.len();
        let mut m = Array2::zeros((n, n));
        for (rank, &item) in self.order.iter().enumerate() {
            m[(item, rank)] = 1.0;
        }
        m
    }
}

impl TryFrom<Vec<usize>> for Permutation {
    type Error = Error;

    fn try_from(order: Vec<usize>) -> Result<Self> {
        Self::new(order)
    }
}

impl From<Permutation> for Vec<usize> {
    fn from(p: Permutation) -> Self {
        p.order
    }
}

/// Position bias `b_j = 1 / log2(1 + j)` for ranks `j = 1..=n`.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionBias(Vec<f64>);

impl PositionBias {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }
}

pub fn position_bias(n: usize) -> Result<PositionBias> {
    if n == 0 {
        return Err(Error::InvalidParameter("position bias needs n >= 1".into()));
    }
    Ok(PositionBias(
        (1..=n).map(|j| 1.0 / ((1 + j) as f64).log2()).collect(),
    ))
}

/// Protected-group membership of the items of one query.
///
/// Only groups with at least one member take part in exposure computations;
/// they are indexed by "active row" in increasing group-id order. Each row of
/// the incidence matrix is normalized by the group size, so exposures are
/// per-group means.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupAssignment {
    labels: Vec<usize>,
    num_groups: usize,
    active: Vec<usize>,
    sizes: Vec<usize>,
    row_of_item: Vec<usize>,
}

impl GroupAssignment {
    pub fn new(labels: Vec<usize>, num_groups: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidGroups("no items".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&g| g >= num_groups) {
            return Err(Error::InvalidGroups(format!(
                "group id {bad} out of range for {num_groups} groups"
            )));
        }
        let mut counts = vec![0usize; num_groups];
        for &g in &labels {
            counts[g] += 1;
        }
        let mut row_of_group = vec![usize::MAX; num_groups];
        let mut active = Vec::new();
        let mut sizes = Vec::new();
        for (g, &c) in counts.iter().enumerate() {
            if c > 0 {
                row_of_group[g] = active.len();
                active.push(g);
                sizes.push(c);
            }
        }
        let row_of_item = labels.iter().map(|&g| row_of_group[g]).collect();
        Ok(Self {
            labels,
            num_groups,
            active,
            sizes,
            row_of_item,
        })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_items(&self) -> usize {
        self.labels.len()
    }

    /// Declared number of groups, including ones absent from this query.
    pub fn num_groups(&self) -> usize {
        self.num_groups
    }

    /// Group ids with at least one member, in increasing order.
    pub fn active_groups(&self) -> &[usize] {
        &self.active
    }

    pub fn num_active(&self) -> usize {
        self.active.len()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    /// Active row of each item.
    pub fn rows(&self) -> &[usize] {
        &self.row_of_item
    }

    /// Row-normalized incidence matrix over active groups.
    pub fn incidence(&self) -> Array2<f64> {
        let mut a = Array2::zeros((self.active.len(), self.labels.len()));
        for (i, &row) in self.row_of_item.iter().enumerate() {
            a[(row, i)] = 1.0 / self.sizes[row] as f64;
        }
        a
    }

    /// `A v`: per-group mean of an item-indexed vector.
    pub fn group_means(&self, item_values: &[f64]) -> Result<Vec<f64>> {
        check_len(self.labels.len(), item_values.len())?;
        let mut out = vec![0.0; self.active.len()];
        for (&row, v) in self.row_of_item.iter().zip(item_values) {
            out[row] += v;
        }
        for (o, &s) in out.iter_mut().zip(&self.sizes) {
            *o /= s as f64;
        }
        Ok(out)
    }

    /// `A^T mu`: spread a group-indexed vector back onto items.
    pub fn spread(&self, group_values: &[f64]) -> Result<Vec<f64>> {
        check_len(self.active.len(), group_values.len())?;
        Ok(self
            .row_of_item
            .iter()
            .map(|&row| group_values[row] / self.sizes[row] as f64)
            .collect())
    }
}

/// Convex combination of permutations together with its materialized matrix.
#[derive(Debug, Clone)]
pub struct RankingPolicy {
    atoms: Vec<(f64, Permutation)>,
    matrix: Array2<f64>,
}

impl RankingPolicy {
    pub fn from_atoms(atoms: Vec<(f64, Permutation)>) -> Result<Self> {
        let Some((_, first)) = atoms.first() else {
            return Err(Error::InvalidPolicy("no atoms".into()));
        };
        let n = first.len();
        if n == 0 {
            return Err(Error::InvalidPolicy("empty permutation".into()));
        }
        for (w, p) in &atoms {
            check_len(n, p.len())?;
            if !(w.is_finite() && *w >= 0.0) {
                return Err(Error::InvalidPolicy(format!("atom weight {w}")));
            }
        }
        let total: f64 = atoms.iter().map(|(w, _)| w).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidPolicy(format!(
                "atom weights sum to {total}"
            )));
        }
        let mut matrix = Array2::zeros((n, n));
        for (w, p) in &atoms {
            for (rank, &item) in p.order().iter().enumerate() {
                matrix[(item, rank)] += w;
            }
        }
        Ok(Self { atoms, matrix })
    }

    pub fn deterministic(perm: Permutation) -> Result<Self> {
        Self::from_atoms(vec![(1.0, perm)])
    }

    pub fn n(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn atoms(&self) -> &[(f64, Permutation)] {
        &self.atoms
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    /// `Pi b`: expected exposure of every item.
    pub fn item_exposures(&self, b: &PositionBias) -> Result<Vec<f64>> {
        check_len(self.n(), b.len())?;
        let mut out = vec![0.0; self.n()];
        for (w, p) in &self.atoms {
            for (rank, &item) in p.order().iter().enumerate() {
                out[item] += w * b.0[rank];
            }
        }
        Ok(out)
    }

    /// Largest deviation of any row or column sum from one.
    pub fn marginal_error(&self) -> f64 {
        let rows = self.matrix.rows().into_iter().map(|r| r.sum());
        let cols = self.matrix.columns().into_iter().map(|c| c.sum());
        rows.chain(cols).map(|s| (s - 1.0).abs()).fold(0.0, f64::max)
    }
}

pub fn dcg(perm: &Permutation, y: &[f64], b: &PositionBias) -> Result<f64> {
    check_len(perm.len(), y.len())?;
    check_len(perm.len(), b.len())?;
    Ok(perm
        .order()
        .iter()
        .zip(&b.0)
        .map(|(&item, bias)| y[item] * bias)
        .sum())
}

/// `y^T Pi b`.
pub fn expected_dcg(policy: &RankingPolicy, y: &[f64], b: &PositionBias) -> Result<f64> {
    check_len(policy.n(), y.len())?;
    let exposure = policy.item_exposures(b)?;
    Ok(y.iter().zip(&exposure).map(|(a, e)| a * e).sum())
}

/// `A Pi b` over the active groups.
pub fn group_exposures(
    policy: &RankingPolicy,
    groups: &GroupAssignment,
    b: &PositionBias,
) -> Result<Vec<f64>> {
    check_len(policy.n(), groups.num_items())?;
    groups.group_means(&policy.item_exposures(b)?)
}

/// `|E_g(Pi) - E_all(Pi)|` per active group, where `E_all` is the mean
/// exposure over all items.
pub fn fairness_violations(
    policy: &RankingPolicy,
    groups: &GroupAssignment,
    b: &PositionBias,
) -> Result<Vec<f64>> {
    let exposures = group_exposures(policy, groups, b)?;
    let overall = b.total() / policy.n() as f64;
    Ok(exposures.iter().map(|e| (e - overall).abs()).collect())
}

pub fn sample_ranking<'a, R: Rng + ?Sized>(
    policy: &'a RankingPolicy,
    rng: &mut R,
) -> Result<&'a Permutation> {
    if policy.atoms.len() == 1 {
        return Ok(&policy.atoms[0].1);
    }
    let index = WeightedIndex::new(policy.atoms.iter().map(|(w, _)| *w))
        .map_err(|e| Error::InvalidPolicy(e.to_string()))?;
    Ok(&policy.atoms[index.sample(rng)].1)
}

/// Items in decreasing score order, ties broken by lower index. Agrees with
/// `f64::total_cmp`.
pub fn argsort_perm(scores: &[f64]) -> Permutation {
    // integer keys sort about twice as fast as indirect float comparisons
    let mut keyed: Vec<(i64, usize)> = scores
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let bits = x.to_bits() as i64;
            let ascending = bits ^ ((((bits >> 63) as u64) >> 1) as i64);
            (!ascending, i)
        })
        .collect();
    keyed.sort_unstable();
    Permutation {
        order: keyed.into_iter().map(|(_, i)| i).collect(),
    }
}
