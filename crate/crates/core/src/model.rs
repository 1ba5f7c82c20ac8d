//! Per-item MLP scorer, Adam, and the SPO+ training loop.

use ndarray::{Array1, Array2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{check_len, Error, Result};
use crate::eval::{evaluate, summarize};
use crate::fw::{solve, FwSolution, LayerConfig};
use crate::policy::{GroupAssignment, PositionBias};
use crate::spo::{spo_plus_subgradient, TargetCache};

/// Fully connected layer `x -> x W + b`, with `W` stored `in x out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    /// He-style uniform init `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`, zero bias.
    pub fn he_uniform<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let limit = (6.0 / fan_in as f64).sqrt();
        Self {
            weight: Array2::from_shape_simple_fn((fan_in, fan_out), || {
                rng.random_range(-limit..limit)
            }),
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.ncols()
    }

    fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }
}

/// MLP parameters; also used for gradients and Adam moments of the same shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    layers: Vec<Dense>,
}

impl MlpParams {
    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidParameter("an MLP needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            check_len(pair[0].fan_out(), pair[1].fan_in())?;
        }
        for l in &layers {
            check_len(l.fan_out(), l.bias.len())?;
        }
        if layers[layers.len() - 1].fan_out() != 1 {
            return Err(Error::InvalidParameter("the output layer must be scalar".into()));
        }
        if layers
            .iter()
            .any(|l| l.weight.iter().chain(&l.bias).any(|v| !v.is_finite()))
        {
            return Err(Error::InvalidParameter("parameters must be finite".into()));
        }
        Ok(Self { layers })
    }

    /// Seeded network with widths `dims[0] -> dims[1] -> ... -> 1`.
    pub fn init(dims: &[usize], seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidParameter(format!("bad layer widths {dims:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::from_layers(
            dims.windows(2)
                .map(|p| Dense::he_uniform(p[0], p[1], &mut rng))
                .collect(),
        )
    }

    /// `d -> h -> h/2 -> h/4 -> 1`.
    pub fn pyramid(input_dim: usize, hidden: usize, seed: u64) -> Result<Self> {
        if hidden < 4 {
            return Err(Error::InvalidParameter(format!(
                "hidden width must be >= 4, got {hidden}"
            )));
        }
        Self::init(&[input_dim, hidden, hidden / 2, hidden / 4, 1], seed)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.fan_in(), l.fan_out()))
                .collect(),
        }
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    /// Widths from input to output.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Dense::fan_out))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Parameters in layer order, each weight matrix row-major then its bias.
    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weight.iter().chain(l.bias.iter()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &Self) {
        for (a, b) in self.iter_mut().zip(other.iter()) {
            *a += alpha * b;
        }
    }
}

/// Default first hidden width: the next power of two of `d`, within `[4, 256]`.
pub fn default_hidden(input_dim: usize) -> usize {
    input_dim.next_power_of_two().clamp(4, 256)
}

fn relu_inplace(x: &mut Array2<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Scores of every item row.
pub fn forward(params: &MlpParams, features: &Array2<f64>) -> Result<Vec<f64>> {
    check_len(params.input_dim(), features.ncols())?;
    let last = params.layers.len() - 1;
    let mut h = features.to_owned();
    for (i, layer) in params.layers.iter().enumerate() {
        h = layer.forward(&h);
        if i < last {
            relu_inplace(&mut h);
        }
    }
    Ok(h.column(0).to_vec())
}

/// Gradient of `sum_i d_scores[i] * forward(features)[i]` for every parameter.
pub fn backward(params: &MlpParams, features: &Array2<f64>, d_scores: &[f64]) -> Result<MlpParams> {
    check_len(params.input_dim(), features.ncols())?;
    check_len(features.nrows(), d_scores.len())?;
    let last = params.layers.len() - 1;
    // activations[i] is the input of layer i
    let mut activations = Vec::with_capacity(params.layers.len());
    let mut h = features.to_owned();
    for (i, layer) in params.layers.iter().enumerate() {
        let mut next = layer.forward(&h);
        if i < last {
            relu_inplace(&mut next);
        }
        activations.push(h);
        h = next;
    }

    let mut grads = params.zeros_like();
    let mut delta = Array2::from_shape_vec((d_scores.len(), 1), d_scores.to_vec())
        .expect("column vector shape");
    for i in (0..=last).rev() {
        let input = &activations[i];
        grads.layers[i].weight = input.t().dot(&delta);
        grads.layers[i].bias = delta.sum_axis(Axis(0));
        if i > 0 {
            let mut upstream = delta.dot(&params.layers[i].weight.t());
            // the input of layer i is a ReLU output; zero where it was clipped
            Zip::from(&mut upstream)
                .and(input)
                .for_each(|g, &a| {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                });
            delta = upstream;
        }
    }
    Ok(grads)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: MlpParams,
    pub v: MlpParams,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &MlpParams) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut MlpParams, grads: &MlpParams, state: &mut AdamState, cfg: &AdamConfig) {
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads.iter())
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        *p -= cfg.learning_rate * (*m / c1) / ((*v / c2).sqrt() + cfg.epsilon);
    }
}

/// Per-feature z-score fitted on training items. Constant features get unit scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit<'a>(matrices: impl IntoIterator<Item = &'a Array2<f64>>) -> Result<Self> {
        let mut count = 0usize;
        let mut sum: Option<Array1<f64>> = None;
        let mut sq: Option<Array1<f64>> = None;
        for m in matrices {
            count += m.nrows();
            let s = m.sum_axis(Axis(0));
            let q = m.mapv(|v| v * v).sum_axis(Axis(0));
            match (&mut sum, &mut sq) {
                (Some(a), Some(b)) => {
                    check_len(a.len(), s.len())?;
                    *a += &s;
                    *b += &q;
                }
                _ => {
                    sum = Some(s);
                    sq = Some(q);
                }
            }
        }
        let (sum, sq) = match (sum, sq) {
            (Some(a), Some(b)) if count > 0 => (a, b),
            _ => return Err(Error::InvalidDataset("no items to standardize".into())),
        };
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let scale = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let var = (q / n - m * m).max(0.0);
                if var > 1e-24 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, scale })
    }

    pub fn identity(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            scale: vec![1.0; d],
        }
    }

    pub fn apply(&self, features: &Array2<f64>) -> Result<Array2<f64>> {
        check_len(self.mean.len(), features.ncols())?;
        let mut out = features.to_owned();
        for mut row in out.rows_mut() {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.scale) {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }
}

/// Standardizer plus network: raw features in, scores out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceModel {
    pub params: MlpParams,
    pub standardizer: Standardizer,
}

impl RelevanceModel {
    pub fn new(params: MlpParams, standardizer: Standardizer) -> Result<Self> {
        check_len(params.input_dim(), standardizer.mean.len())?;
        check_len(standardizer.mean.len(), standardizer.scale.len())?;
        Ok(Self {
            params,
            standardizer,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.params.input_dim()
    }

    pub fn scores(&self, features: &Array2<f64>) -> Result<Vec<f64>> {
        forward(&self.params, &self.standardizer.apply(features)?)
    }
}

/// Scores the items and solves the layer with `iters_infer` iterations.
pub fn predict_policy(
    model: &RelevanceModel,
    features: &Array2<f64>,
    groups: &GroupAssignment,
    bias: &PositionBias,
    layer: &LayerConfig,
) -> Result<FwSolution> {
    let scores = model.scores(features)?;
    solve(&scores, groups, bias, &layer.infer_fw())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Queries per Adam step.
    pub batch_size: usize,
    /// First hidden width; `None` picks [`default_hidden`].
    pub hidden: Option<usize>,
    pub seed: u64,
    pub adam: AdamConfig,
    pub layer: LayerConfig,
}

impl TrainConfig {
    pub fn new(layer: LayerConfig) -> Self {
        Self {
            epochs: 20,
            batch_size: 256,
            hidden: None,
            seed: 0,
            adam: AdamConfig::default(),
            layer,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.layer.validate()?;
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch size must be positive".into()));
        }
        let a = &self.adam;
        if !(a.learning_rate > 0.0 && a.learning_rate.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "learning rate must be positive, got {}",
                a.learning_rate
            )));
        }
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.epsilon > 0.0) {
            return Err(Error::InvalidParameter(
                "Adam needs beta1, beta2 in [0, 1) and epsilon > 0".into(),
            ));
        }
        if self.hidden.is_some_and(|h| h < 4) {
            return Err(Error::InvalidParameter("hidden width must be >= 4".into()));
        }
        Ok(())
    }
}

/// Epoch 0 describes the untrained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean SPO+ loss over the epoch's training queries (a fresh pass at epoch 0).
    pub train_loss: f64,
    pub valid_regret: f64,
    pub valid_dcg: f64,
    pub valid_mean_violation: f64,
    pub valid_max_violation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// SPO+ training with Adam. The cache must hold targets for every training
/// and validation query at `cfg.layer.lambda`. Returns the parameters with the
/// lowest validation regret (earliest on ties).
pub fn train(
    train_set: &Dataset,
    valid_set: &Dataset,
    cfg: &TrainConfig,
    cache: &TargetCache,
) -> Result<(RelevanceModel, TrainHistory)> {
    cfg.validate()?;
    if train_set.is_empty() || valid_set.is_empty() {
        return Err(Error::InvalidDataset("training and validation sets must be nonempty".into()));
    }
    check_len(train_set.num_features, valid_set.num_features)?;
    let lambda = cfg.layer.lambda;
    for s in train_set.samples.iter().chain(&valid_set.samples) {
        cache.get(&s.qid, lambda)?;
    }

    let standardizer = Standardizer::fit(train_set.samples.iter().map(|s| &s.features))?;
    let inputs: Vec<Array2<f64>> = train_set
        .samples
        .iter()
        .map(|s| standardizer.apply(&s.features))
        .collect::<Result<_>>()?;
    let hidden = cfg.hidden.unwrap_or_else(|| default_hidden(train_set.num_features));
    let mut params = MlpParams::pyramid(train_set.num_features, hidden, cfg.seed)?;
    let mut adam = AdamState::new(&params);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let bias = train_set.bias();

    let query_step = |params: &MlpParams, i: usize| -> Result<(f64, MlpParams)> {
        let sample = &train_set.samples[i];
        let scores = forward(params, &inputs[i])?;
        let grad = spo_plus_subgradient(&scores, &sample.problem(&bias), &cfg.layer, cache)?;
        Ok((grad.loss, backward(params, &inputs[i], &grad.d_y)?))
    };
    let validate = |params: &MlpParams, epoch: usize, train_loss: f64| -> Result<EpochRecord> {
        let model = RelevanceModel::new(params.clone(), standardizer.clone())?;
        let summary = summarize(&evaluate(&model, valid_set, &cfg.layer, Some(cache))?);
        Ok(EpochRecord {
            epoch,
            train_loss,
            valid_regret: summary.mean_regret.unwrap_or(f64::NAN),
            valid_dcg: summary.mean_dcg,
            valid_mean_violation: summary.mean_violation,
            valid_max_violation: summary.mean_max_violation,
        })
    };

    let all: Vec<usize> = (0..train_set.len()).collect();
    let initial_losses = all
        .par_iter()
        .map(|&i| query_step(&params, i).map(|(l, _)| l))
        .collect::<Result<Vec<_>>>()?;
    let mut records = vec![validate(&params, 0, mean(&initial_losses))?];
    let mut best = (records[0].valid_regret, 0usize, params.clone());

    let mut order = all;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results = batch
                .par_iter()
                .map(|&i| query_step(&params, i))
                .collect::<Result<Vec<_>>>()?;
            // fixed summation order keeps runs reproducible
            let mut total = params.zeros_like();
            for (loss, g) in &results {
                loss_sum += loss;
                total.add_scaled(1.0 / batch.len() as f64, g);
            }
            adam_step(&mut params, &total, &mut adam, &cfg.adam);
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "parameters diverged in epoch {epoch}; lower the learning rate"
            )));
        }
        let record = validate(&params, epoch, loss_sum / order.len() as f64)?;
        if record.valid_regret < best.0 {
            best = (record.valid_regret, epoch, params.clone());
        }
        records.push(record);
    }

    let model = RelevanceModel::new(best.2, standardizer)?;
    Ok((
        model,
        TrainHistory {
            records,
            best_epoch: best.1,
        },
    ))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}
