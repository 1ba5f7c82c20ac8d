//! Fair learning to rank through an ordered-weighted-average ranking layer.
//!
//! A per-item relevance model produces scores, a Frank-Wolfe solver turns
//! them into a stochastic ranking policy that trades expected DCG against an
//! OWA aggregation of group exposures, and training backpropagates SPO+
//! subgradients through that layer.
//!
//! | Module | Contents |
//! |--------|----------|
//! | [`owa`] | OWA functional, PAV isotonic regression, permutahedron projection |
//! | [`policy`] | Permutations, ranking policies, DCG, exposure and fairness metrics |
//! | [`fw`] | Smoothed Frank-Wolfe solver for the OWA ranking problem |
//! | [`spo`] | Regret, SPO+ loss and subgradient, precomputed targets |
//! | [`model`] | MLP scorer, Adam, training loop |
//! | [`data`] | LETOR parsing, group construction, synthetic data, splits |
//! | [`eval`] | Per-query evaluation of a trained model |

pub mod data;
pub mod error;
pub mod eval;
pub mod fw;
pub mod model;
pub mod owa;
pub mod policy;
pub mod spo;

pub use error::{Error, Result};
pub use fw::{solve, FwConfig, FwSolution, LayerConfig, WeightSchedule};
pub use owa::{owa, OwaWeights};
pub use policy::{GroupAssignment, Permutation, PositionBias, RankingPolicy};
