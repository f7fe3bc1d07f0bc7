// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

//! Parameter vectors and the desk-scale classifiers trained by clients.
//!
//! Two model kinds are supported: multinomial softmax regression and a
//! one-hidden-layer tanh MLP. Both are flattened into a single
//! [`ParamVector`], which is what the ledger stores and what averaging and
//! the publish trigger operate on.
//!
//! Softmax layout: `W[K x in]`, then `b[K]`.
//! MLP layout: `W1[h x in]`, `b1[h]`, `W2[K x h]`, `b2[K]`.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn from_vec(values: Vec<f64>) -> Result<Self> {
        let v = Self(values);
        v.check_finite()?;
        Ok(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.0.iter().position(|x| !x.is_finite()) {
            Some(i) => Err(Error::NonFinite(i)),
            None => Ok(()),
        }
    }

    fn ensure_same_dim(&self, other: &Self) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Shape {
                expected: self.len(),
                found: other.len(),
            });
        }
        Ok(())
    }

    /// `self - other`.
    pub fn difference(&self, other: &Self) -> Result<Self> {
        self.ensure_same_dim(other)?;
        let v = Self(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect());
        v.check_finite()?;
        Ok(v)
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        let v = Self(self.0.iter().map(|x| x * factor).collect());
        v.check_finite()?;
        Ok(v)
    }

    /// In-place `self -= step * direction`.
    fn step_against(&mut self, direction: &[f64], step: f64) {
        for (w, g) in self.0.iter_mut().zip(direction) {
            *w -= step * g;
        }
    }
}

/// Elementwise mean of two models.
pub fn average(a: &ParamVector, b: &ParamVector) -> Result<ParamVector> {
    a.ensure_same_dim(b)?;
    let v = ParamVector(a.0.iter().zip(&b.0).map(|(x, y)| 0.5 * (x + y)).collect());
    v.check_finite()?;
    Ok(v)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Softmax,
    Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    /// Ignored for softmax.
    pub hidden_dim: usize,
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn softmax(input_dim: usize, num_classes: usize) -> Self {
        Self {
            kind: ModelKind::Softmax,
            input_dim,
            hidden_dim: 0,
            num_classes,
        }
    }

    pub fn mlp(input_dim: usize, hidden_dim: usize, num_classes: usize) -> Self {
        Self {
            kind: ModelKind::Mlp,
            input_dim,
            hidden_dim,
            num_classes,
        }
    }

    pub fn param_count(&self) -> usize {
        match self.kind {
            ModelKind::Softmax => self.num_classes * self.input_dim + self.num_classes,
            ModelKind::Mlp => {
                self.hidden_dim * self.input_dim
                    + self.hidden_dim
                    + self.num_classes * self.hidden_dim
                    + self.num_classes
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("model input_dim must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("model needs at least 2 classes".into()));
        }
        if self.kind == ModelKind::Mlp && self.hidden_dim == 0 {
            return Err(Error::Config("mlp hidden_dim must be positive".into()));
        }
        Ok(())
    }

    /// Genesis parameters: zeros for softmax, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    /// weights and zero biases for the MLP.
    pub fn initial_params(&self, rng: &mut RngStream) -> ParamVector {
        match self.kind {
            ModelKind::Softmax => ParamVector::zeros(self.param_count()),
            ModelKind::Mlp => {
                let (h, d, k) = (self.hidden_dim, self.input_dim, self.num_classes);
                let mut v = Vec::with_capacity(self.param_count());
                let b1 = 1.0 / (d as f64).sqrt();
                v.extend((0..h * d).map(|_| rng.random_range(-b1..b1)));
                v.extend(std::iter::repeat_n(0.0, h));
                let b2 = 1.0 / (h as f64).sqrt();
                v.extend((0..k * h).map(|_| rng.random_range(-b2..b2)));
                v.extend(std::iter::repeat_n(0.0, k));
                ParamVector(v)
            }
        }
    }

    fn check_params(&self, params: &ParamVector) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::Shape {
                expected: self.param_count(),
                found: params.len(),
            });
        }
        Ok(())
    }

    fn check_shard(&self, shard: &DatasetShard) -> Result<()> {
        if shard.input_dim != self.input_dim {
            return Err(Error::Shape {
                expected: self.input_dim,
                found: shard.input_dim,
            });
        }
        if let Some(&bad) = shard.labels.iter().find(|&&y| y >= self.num_classes) {
            return Err(Error::Argument(format!(
                "label {bad} outside [0, {})",
                self.num_classes
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Batches per epoch.
    pub batches: usize,
    pub epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            batch_size: 10,
            batches: 10,
            epochs: 1,
        }
    }
}

impl TrainConfig {
    /// Total number of SGD steps per local training call.
    pub fn local_updates(&self) -> usize {
        self.batches * self.epochs
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("train.learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Row-major feature matrix with one class label per row.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetShard {
    features: Vec<f64>,
    labels: Vec<usize>,
    input_dim: usize,
}

impl DatasetShard {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, input_dim: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Argument("dataset shard must be nonempty".into()));
        }
        if input_dim == 0 || features.len() != labels.len() * input_dim {
            return Err(Error::Shape {
                expected: labels.len() * input_dim,
                found: features.len(),
            });
        }
        Ok(Self {
            features,
            labels,
            input_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.input_dim..(i + 1) * self.input_dim]
    }

    /// Builds a shard from selected rows (repeats allowed).
    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        let mut features = Vec::with_capacity(rows.len() * self.input_dim);
        let mut labels = Vec::with_capacity(rows.len());
        for &r in rows {
            features.extend_from_slice(self.row(r));
            labels.push(self.labels[r]);
        }
        Self::new(features, labels, self.input_dim)
    }
}

/// Scratch space for a forward pass.
struct Forward {
    hidden: Vec<f64>,
    logits: Vec<f64>,
}

impl Forward {
    fn new(spec: &ModelSpec) -> Self {
        Self {
            hidden: vec![0.0; spec.hidden_dim],
            logits: vec![0.0; spec.num_classes],
        }
    }

    fn run(&mut self, spec: &ModelSpec, w: &[f64], x: &[f64]) {
        let (d, k) = (spec.input_dim, spec.num_classes);
        match spec.kind {
            ModelKind::Softmax => {
                let (weights, bias) = w.split_at(k * d);
                affine(weights, bias, x, &mut self.logits);
            }
            ModelKind::Mlp => {
                let h = spec.hidden_dim;
                let (w1, rest) = w.split_at(h * d);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(k * h);
                affine(w1, b1, x, &mut self.hidden);
                for a in &mut self.hidden {
                    *a = a.tanh();
                }
                affine(w2, b2, &self.hidden, &mut self.logits);
            }
        }
    }
}

fn affine(weights: &[f64], bias: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (o, (row, b)) in out.iter_mut().zip(weights.chunks_exact(cols).zip(bias)) {
        *o = b + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>();
    }
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
}

/// Index of the largest logit; the lowest index wins ties.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy of the model over the shard.
pub fn loss(spec: &ModelSpec, params: &ParamVector, shard: &DatasetShard) -> Result<f64> {
    spec.check_params(params)?;
    spec.check_shard(shard)?;
    let mut fwd = Forward::new(spec);
    let mut total = 0.0;
    for (i, &y) in shard.labels.iter().enumerate() {
        fwd.run(spec, params.as_slice(), shard.row(i));
        total += log_sum_exp(&fwd.logits) - fwd.logits[y];
    }
    Ok(total / shard.len() as f64)
}

/// Fraction of rows whose argmax prediction equals the label.
pub fn accuracy(spec: &ModelSpec, params: &ParamVector, shard: &DatasetShard) -> Result<f64> {
    spec.check_params(params)?;
    spec.check_shard(shard)?;
    let mut fwd = Forward::new(spec);
    let correct = shard
        .labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            fwd.run(spec, params.as_slice(), shard.row(i));
            argmax(&fwd.logits) == y
        })
        .count();
    Ok(correct as f64 / shard.len() as f64)
}

/// Analytic gradient of the mean cross-entropy over `batch`.
pub fn gradient(spec: &ModelSpec, params: &ParamVector, batch: &DatasetShard) -> Result<ParamVector> {
    spec.check_params(params)?;
    spec.check_shard(batch)?;
    let rows: Vec<usize> = (0..batch.len()).collect();
    let mut grad = vec![0.0; spec.param_count()];
    accumulate_gradient(spec, params.as_slice(), batch, &rows, &mut grad);
    let g = ParamVector(grad);
    g.check_finite()?;
    Ok(g)
}

/// Writes the mean gradient over `rows` of `shard` into `grad`.
fn accumulate_gradient(
    spec: &ModelSpec,
    w: &[f64],
    shard: &DatasetShard,
    rows: &[usize],
    grad: &mut [f64],
) {
    grad.fill(0.0);
    let (d, k) = (spec.input_dim, spec.num_classes);
    let mut fwd = Forward::new(spec);
    let mut delta = vec![0.0; k];
    let mut hidden_delta = vec![0.0; spec.hidden_dim];
    let scale = 1.0 / rows.len() as f64;

    for &r in rows {
        let x = shard.row(r);
        fwd.run(spec, w, x);
        let lse = log_sum_exp(&fwd.logits);
        for (dl, l) in delta.iter_mut().zip(&fwd.logits) {
            *dl = (l - lse).exp() * scale;
        }
        delta[shard.labels[r]] -= scale;

        match spec.kind {
            ModelKind::Softmax => {
                let (gw, gb) = grad.split_at_mut(k * d);
                outer_add(gw, &delta, x);
                add(gb, &delta);
            }
            ModelKind::Mlp => {
                let h = spec.hidden_dim;
                let w2 = &w[h * d + h..h * d + h + k * h];
                let (gw1, rest) = grad.split_at_mut(h * d);
                let (gb1, rest) = rest.split_at_mut(h);
                let (gw2, gb2) = rest.split_at_mut(k * h);
                outer_add(gw2, &delta, &fwd.hidden);
                add(gb2, &delta);
                for (j, hd) in hidden_delta.iter_mut().enumerate() {
                    let back: f64 = (0..k).map(|c| w2[c * h + j] * delta[c]).sum();
                    let a = fwd.hidden[j];
                    *hd = back * (1.0 - a * a);
                }
                outer_add(gw1, &hidden_delta, x);
                add(gb1, &hidden_delta);
            }
        }
    }
}

fn outer_add(target: &mut [f64], left: &[f64], right: &[f64]) {
    for (row, l) in target.chunks_exact_mut(right.len()).zip(left) {
        for (t, r) in row.iter_mut().zip(right) {
            *t += l * r;
        }
    }
}

fn add(target: &mut [f64], values: &[f64]) {
    for (t, v) in target.iter_mut().zip(values) {
        *t += v;
    }
}

/// Runs `cfg.local_updates()` minibatch SGD steps starting from `start`.
///
/// Each epoch reshuffles the shard; batches are consecutive slices of the
/// permutation, reshuffling again if an epoch needs more rows than the shard
/// holds. Shards smaller than one batch are sampled with replacement.
pub fn local_train(
    spec: &ModelSpec,
    start: &ParamVector,
    shard: &DatasetShard,
    cfg: &TrainConfig,
    rng: &mut RngStream,
) -> Result<ParamVector> {
    spec.check_params(start)?;
    spec.check_shard(shard)?;
    if cfg.batch_size == 0 {
        return Err(Error::Argument("batch_size must be positive".into()));
    }
    let n = shard.len();
    let mut params = start.clone();
    let mut grad = vec![0.0; spec.param_count()];
    let mut order: Vec<usize> = (0..n).collect();
    let mut batch = Vec::with_capacity(cfg.batch_size);

    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        let mut cursor = 0;
        for _ in 0..cfg.batches {
            batch.clear();
            if n < cfg.batch_size {
                batch.extend((0..cfg.batch_size).map(|_| rng.random_range(0..n)));
            } else {
                if cursor + cfg.batch_size > n {
                    order.shuffle(rng);
                    cursor = 0;
                }
                batch.extend_from_slice(&order[cursor..cursor + cfg.batch_size]);
                cursor += cfg.batch_size;
            }
            accumulate_gradient(spec, params.as_slice(), shard, &batch, &mut grad);
            params.step_against(&grad, cfg.learning_rate);
            params.check_finite()?;
        }
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;
    use std::f64::consts::LN_2;

    fn two_class_shard() -> DatasetShard {
        DatasetShard::new(vec![1.0, 0.5, -1.0, -0.5, 2.0, 1.0, -2.0, -1.5], vec![0, 1, 0, 1], 2)
            .unwrap()
    }

    fn random_instance(
        rng: &mut RngStream,
        kind: ModelKind,
    ) -> (ModelSpec, ParamVector, DatasetShard) {
        let d = rng.random_range(1..5);
        let k = rng.random_range(2..5);
        let spec = match kind {
            ModelKind::Softmax => ModelSpec::softmax(d, k),
            ModelKind::Mlp => ModelSpec::mlp(d, rng.random_range(1..4), k),
        };
        let params = ParamVector(
            (0..spec.param_count())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        );
        let n = rng.random_range(1..6);
        let features = (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let labels = (0..n).map(|_| rng.random_range(0..k)).collect();
        (spec, params, DatasetShard::new(features, labels, d).unwrap())
    }

    /// Scalar re-implementation of -log p(y | x) for a single softmax row.
    fn direct_softmax_nll(w: &[f64], x: &[f64], y: usize, k: usize) -> f64 {
        let d = x.len();
        let logits: Vec<f64> = (0..k)
            .map(|c| w[k * d + c] + (0..d).map(|j| w[c * d + j] * x[j]).sum::<f64>())
            .collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        -(logits[y].exp() / z).ln()
    }

    #[test]
    fn zero_weights_give_log_k_loss() {
        let shard = two_class_shard();
        let spec = ModelSpec::softmax(2, 2);
        let l = loss(&spec, &ParamVector::zeros(spec.param_count()), &shard).unwrap();
        assert!((l - LN_2).abs() < 1e-12);

        let spec10 = ModelSpec::softmax(2, 10);
        let l10 = loss(&spec10, &ParamVector::zeros(spec10.param_count()), &shard).unwrap();
        assert!((l10 - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn single_sample_loss_matches_direct_formula() {
        let mut r = rng::stream(3, 0);
        for _ in 0..20 {
            let spec = ModelSpec::softmax(3, 4);
            let w: Vec<f64> = (0..spec.param_count()).map(|_| r.random_range(-2.0..2.0)).collect();
            let x: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
            let y = r.random_range(0..4);
            let shard = DatasetShard::new(x.clone(), vec![y], 3).unwrap();
            let got = loss(&spec, &ParamVector(w.clone()), &shard).unwrap();
            assert!((got - direct_softmax_nll(&w, &x, y, 4)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_weights_predict_class_zero() {
        let spec = ModelSpec::softmax(2, 2);
        let acc = accuracy(&spec, &ParamVector::zeros(spec.param_count()), &two_class_shard())
            .unwrap();
        assert_eq!(acc, 0.5);

        let all_ones = DatasetShard::new(vec![1.0, 1.0], vec![1], 2).unwrap();
        assert_eq!(
            accuracy(&spec, &ParamVector::zeros(spec.param_count()), &all_ones).unwrap(),
            0.0
        );
    }

    #[test]
    fn fitted_model_separates_shard() {
        let spec = ModelSpec::softmax(2, 2);
        let shard = two_class_shard();
        let mut w = ParamVector::zeros(spec.param_count());
        for _ in 0..500 {
            let g = gradient(&spec, &w, &shard).unwrap();
            w.step_against(g.as_slice(), 0.5);
        }
        assert_eq!(accuracy(&spec, &w, &shard).unwrap(), 1.0);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut r = rng::stream(11, 0);
        for trial in 0..100 {
            let kind = if trial % 2 == 0 { ModelKind::Softmax } else { ModelKind::Mlp };
            let (spec, params, shard) = random_instance(&mut r, kind);
            let g = gradient(&spec, &params, &shard).unwrap();
            let h = 1e-5;
            for i in 0..params.len() {
                let mut plus = params.clone();
                plus.0[i] += h;
                let mut minus = params.clone();
                minus.0[i] -= h;
                let fd = (loss(&spec, &plus, &shard).unwrap() - loss(&spec, &minus, &shard).unwrap())
                    / (2.0 * h);
                let err = (fd - g.0[i]).abs() / fd.abs().max(g.0[i].abs()).max(1e-6);
                assert!(err < 1e-5, "trial {trial} coord {i}: fd {fd} analytic {}", g.0[i]);
            }
        }
    }

    #[test]
    fn saturated_softmax_has_vanishing_gradient() {
        let spec = ModelSpec::softmax(2, 2);
        // w separates x=[1,0] into class 0, scaled by 1e3
        let w = ParamVector(vec![1.0, 0.0, -1.0, 0.0, 0.0, 0.0]).scaled(1e3).unwrap();
        let shard = DatasetShard::new(vec![1.0, 0.0], vec![0], 2).unwrap();
        assert!(gradient(&spec, &w, &shard).unwrap().norm() < 1e-8);
    }

    #[test]
    fn gradient_is_duplication_invariant() {
        let mut r = rng::stream(5, 0);
        let (spec, params, shard) = random_instance(&mut r, ModelKind::Mlp);
        let doubled: Vec<usize> = (0..shard.len()).flat_map(|i| [i, i]).collect();
        let g1 = gradient(&spec, &params, &shard).unwrap();
        let g2 = gradient(&spec, &params, &shard.select(&doubled).unwrap()).unwrap();
        for (a, b) in g1.as_slice().iter().zip(g2.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_shard_is_rejected() {
        assert!(matches!(
            DatasetShard::new(vec![], vec![], 2),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn zero_step_size_leaves_model_unchanged() {
        let spec = ModelSpec::softmax(2, 2);
        let start = ParamVector(vec![0.3, -0.2, 0.1, 0.5, -0.4, 0.2]);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            batch_size: 2,
            batches: 3,
            epochs: 2,
        };
        let out = local_train(&spec, &start, &two_class_shard(), &cfg, &mut rng::stream(1, 0)).unwrap();
        assert_eq!(out, start);
    }

    #[test]
    fn single_full_batch_step_is_the_update_rule() {
        let spec = ModelSpec::softmax(2, 2);
        let shard = two_class_shard();
        let start = ParamVector(vec![0.3, -0.2, 0.1, 0.5, -0.4, 0.2]);
        let cfg = TrainConfig {
            learning_rate: 0.1,
            batch_size: shard.len(),
            batches: 1,
            epochs: 1,
        };
        let out = local_train(&spec, &start, &shard, &cfg, &mut rng::stream(1, 0)).unwrap();
        let g = gradient(&spec, &start, &shard).unwrap();
        for ((o, s), gi) in out.as_slice().iter().zip(start.as_slice()).zip(g.as_slice()) {
            assert!((o - (s - 0.1 * gi)).abs() < 1e-14);
        }
    }

    #[test]
    fn local_training_descends_on_separable_data() {
        let spec = ModelSpec::softmax(2, 2);
        let shard = two_class_shard();
        let start = ParamVector::zeros(spec.param_count());
        let cfg = TrainConfig {
            learning_rate: 0.05,
            batch_size: 2,
            batches: 2,
            epochs: 3,
        };
        let out = local_train(&spec, &start, &shard, &cfg, &mut rng::stream(2, 0)).unwrap();
        assert!(loss(&spec, &out, &shard).unwrap() < loss(&spec, &start, &shard).unwrap());
    }

    #[test]
    fn local_training_is_deterministic() {
        let mut r = rng::stream(8, 0);
        let (spec, params, shard) = random_instance(&mut r, ModelKind::Mlp);
        let cfg = TrainConfig {
            learning_rate: 0.1,
            batch_size: 3,
            batches: 4,
            epochs: 2,
        };
        let a = local_train(&spec, &params, &shard, &cfg, &mut rng::stream(4, 9)).unwrap();
        let b = local_train(&spec, &params, &shard, &cfg, &mut rng::stream(4, 9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn average_examples() {
        let a = ParamVector(vec![0.0, 0.0]);
        let b = ParamVector(vec![2.0, 4.0]);
        assert_eq!(average(&a, &b).unwrap().as_slice(), &[1.0, 2.0]);
        assert_eq!(average(&b, &b).unwrap(), b);
        assert!(matches!(
            average(&a, &ParamVector(vec![1.0])),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn shape_errors_are_reported() {
        let spec = ModelSpec::softmax(3, 2);
        let shard = two_class_shard();
        assert!(matches!(
            loss(&spec, &ParamVector::zeros(spec.param_count()), &shard),
            Err(Error::Shape { .. })
        ));
        assert!(matches!(
            accuracy(&spec, &ParamVector::zeros(2), &shard),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn mlp_initialization_is_seeded() {
        let spec = ModelSpec::mlp(4, 3, 2);
        let a = spec.initial_params(&mut rng::stream(1, 2));
        let b = spec.initial_params(&mut rng::stream(1, 2));
        assert_eq!(a, b);
        assert_eq!(a.len(), spec.param_count());
        let bound = 0.5;
        assert!(a.as_slice()[..12].iter().all(|w| w.abs() <= bound));
        assert!(a.norm() > 0.0);
    }

    proptest! {
        #[test]
        fn average_is_commutative_and_linear(
            xs in prop::collection::vec(-1e3..1e3f64, 1..16),
            scale in -10.0..10.0f64,
        ) {
            let a = ParamVector(xs.clone());
            let b = ParamVector(xs.iter().map(|x| x * 0.5 - 1.0).collect());
            prop_assert_eq!(average(&a, &b).unwrap(), average(&b, &a).unwrap());
            let lhs = average(&a.scaled(scale).unwrap(), &b.scaled(scale).unwrap()).unwrap();
            let rhs = average(&a, &b).unwrap().scaled(scale).unwrap();
            for (l, r) in lhs.as_slice().iter().zip(rhs.as_slice()) {
                prop_assert!((l - r).abs() <= 1e-9 * (1.0 + r.abs()));
            }
        }

        #[test]
        fn loss_is_nonnegative(seed in 0u64..500) {
            let mut r = rng::stream(seed, 0);
            let (spec, params, shard) = random_instance(&mut r, ModelKind::Softmax);
            let l = loss(&spec, &params, &shard).unwrap();
            prop_assert!(l >= 0.0 && l.is_finite());
        }
    }
}
