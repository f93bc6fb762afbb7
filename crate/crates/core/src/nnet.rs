//! Small dense ReLU network with softmax output, inverted dropout after the
//! last hidden layer, and momentum SGD over a flat parameter view.
//!
//! Parameters are laid out layer by layer: the weight matrix (input-major,
//! row-major `in x out`) followed by the bias vector.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossSpec;
use crate::rng::{seeded, SeededRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    #[serde(default)]
    pub dropout_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

impl NetConfig {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dims,
            output_dim,
            dropout_rate: 0.0,
            seed: 0,
        }
    }

    pub fn with_dropout(mut self, rate: f64) -> Self {
        self.dropout_rate = rate;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::Config("hidden layer widths must be positive".into()));
        }
        if self.output_dim < 2 {
            return Err(Error::Config(format!(
                "output_dim must be at least 2, got {}",
                self.output_dim
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_dim];
        widths.extend(&self.hidden_dims);
        widths.push(self.output_dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// Canonical single-line text form, e.g.
/// `input_dim=4;hidden_dims=8,8;output_dim=3;dropout_rate=0.2;seed=1`.
impl fmt::Display for NetConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let hidden: Vec<String> = self.hidden_dims.iter().map(|h| h.to_string()).collect();
        write!(
            f,
            "input_dim={};hidden_dims={};output_dim={};dropout_rate={:?};seed={}",
            self.input_dim,
            hidden.join(","),
            self.output_dim,
            self.dropout_rate,
            self.seed
        )
    }
}

impl FromStr for NetConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut cfg = NetConfig::new(0, Vec::new(), 0);
        let bad = |k: &str, v: &str| Error::Format(format!("bad net config field {k}={v}"));
        for field in s.trim().split(';').filter(|f| !f.is_empty()) {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("net config field without '=': {field}")))?;
            match key {
                "input_dim" => cfg.input_dim = value.parse().map_err(|_| bad(key, value))?,
                "hidden_dims" => {
                    cfg.hidden_dims = value
                        .split(',')
                        .filter(|v| !v.is_empty())
                        .map(|v| v.parse().map_err(|_| bad(key, value)))
                        .collect::<Result<_>>()?
                }
                "output_dim" => cfg.output_dim = value.parse().map_err(|_| bad(key, value))?,
                "dropout_rate" => cfg.dropout_rate = value.parse().map_err(|_| bad(key, value))?,
                "seed" => cfg.seed = value.parse().map_err(|_| bad(key, value))?,
                _ => return Err(Error::Format(format!("unknown net config field {key}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 128,
            epochs: 30,
            seed: 0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be >= 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        Ok(())
    }

    pub fn batches_per_epoch(&self, n_train: usize) -> usize {
        n_train.div_ceil(self.batch_size).max(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    config: NetConfig,
    layers: Vec<Dense>,
}

/// Activations kept from a forward pass for backpropagation.
struct Trace {
    /// Input to each layer (post-activation, post-dropout of the previous one).
    inputs: Vec<Array2<f64>>,
    /// Dropout scale mask applied to the last hidden activation, if any.
    mask: Option<Array2<f64>>,
    logits: Array2<f64>,
}

impl Network {
    /// He-initialised network seeded by `config.seed`.
    pub fn new(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(config.seed);
        let dims = config.layer_dims();
        let last = dims.len() - 1;
        let layers = dims
            .iter()
            .enumerate()
            .map(|(l, &(fan_in, fan_out))| {
                let gain = if l == last { 1.0 } else { 2.0 };
                let scale = (gain / fan_in as f64).sqrt();
                let weights = Array2::from_shape_simple_fn((fan_in, fan_out), || {
                    scale * rng.sample::<f64, _>(StandardNormal)
                });
                Dense {
                    weights,
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Ok(Self { config, layers })
    }

    pub fn zeros(config: NetConfig) -> Result<Self> {
        let mut net = Self::new(config)?;
        for layer in &mut net.layers {
            layer.weights.fill(0.0);
            layer.bias.fill(0.0);
        }
        Ok(net)
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn parameter_count(&self) -> usize {
        self.config.parameter_count()
    }

    pub fn get_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for layer in &self.layers {
            out.extend(layer.weights.iter());
            out.extend(layer.bias.iter());
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.parameter_count() {
            return Err(Error::InputShape(format!(
                "parameter vector has length {}, network expects {}",
                params.len(),
                self.parameter_count()
            )));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            for w in layer.weights.iter_mut() {
                *w = params[offset];
                offset += 1;
            }
            for b in layer.bias.iter_mut() {
                *b = params[offset];
                offset += 1;
            }
        }
        Ok(())
    }

    /// True for flat indices that hold weights (as opposed to biases).
    pub fn weight_mask(&self) -> Vec<bool> {
        let mut mask = Vec::with_capacity(self.parameter_count());
        for layer in &self.layers {
            mask.extend(std::iter::repeat_n(true, layer.weights.len()));
            mask.extend(std::iter::repeat_n(false, layer.bias.len()));
        }
        mask
    }

    fn check_batch(&self, batch: &ArrayView2<f64>) -> Result<()> {
        if batch.ncols() != self.config.input_dim {
            return Err(Error::InputShape(format!(
                "batch has {} columns, network expects {}",
                batch.ncols(),
                self.config.input_dim
            )));
        }
        Ok(())
    }

    fn trace(&self, batch: ArrayView2<f64>, rng: Option<&mut SeededRng>) -> Result<Trace> {
        self.check_batch(&batch)?;
        let n_layers = self.layers.len();
        let p = self.config.dropout_rate;
        let mut inputs = Vec::with_capacity(n_layers);
        let mut mask = None;
        let mut current = batch.to_owned();
        let mut rng = rng;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = current.dot(&layer.weights);
            z += &layer.bias;
            inputs.push(current);
            if l + 1 == n_layers {
                return Ok(Trace { inputs, mask, logits: z });
            }
            z.mapv_inplace(|v| v.max(0.0));
            if l + 2 == n_layers && p > 0.0 {
                if let Some(r) = rng.as_deref_mut() {
                    mask = Some(apply_dropout(&mut z, p, r));
                }
            }
            current = z;
        }
        unreachable!("network has at least one layer")
    }

    /// Logits for a batch; dropout is active only when a generator is given.
    pub fn forward(&self, batch: ArrayView2<f64>, dropout: Option<&mut SeededRng>) -> Result<Array2<f64>> {
        Ok(self.trace(batch, dropout)?.logits)
    }

    /// Positive-class (index 1) softmax probability of a two-logit network,
    /// or the probability of class 1 renormalised over the first two logits.
    pub fn positive_probability(&self, batch: ArrayView2<f64>, dropout: Option<&mut SeededRng>) -> Result<Vec<f64>> {
        let logits = self.forward(batch, dropout)?;
        Ok(logits.rows().into_iter().map(|r| sigmoid(r[1] - r[0])).collect())
    }

    /// Mean batch loss and its gradient with respect to the flat parameters.
    pub fn backward(&self, batch: ArrayView2<f64>, labels: &[usize], loss: LossSpec) -> Result<(f64, Vec<f64>)> {
        self.loss_and_grad(batch, labels, loss, None)
    }

    pub(crate) fn loss_and_grad(
        &self,
        batch: ArrayView2<f64>,
        labels: &[usize],
        loss: LossSpec,
        dropout: Option<&mut SeededRng>,
    ) -> Result<(f64, Vec<f64>)> {
        if labels.len() != batch.nrows() {
            return Err(Error::InputShape(format!(
                "{} labels for {} rows",
                labels.len(),
                batch.nrows()
            )));
        }
        if batch.nrows() == 0 {
            return Err(Error::Empty("batch has no rows".into()));
        }
        let trace = self.trace(batch, dropout)?;
        let rows = batch.nrows();
        let inv = 1.0 / rows as f64;
        let mut delta = Array2::<f64>::zeros(trace.logits.raw_dim());
        let mut total = 0.0;
        for ((logit_row, mut delta_row), &y) in trace
            .logits
            .rows()
            .into_iter()
            .zip(delta.rows_mut())
            .zip(labels)
        {
            let row = logit_row.as_slice().expect("standard layout");
            let out = delta_row.as_slice_mut().expect("standard layout");
            total += loss.value_and_grad(row, y, out)?;
        }
        delta *= inv;

        let mut grads: Vec<(Array2<f64>, Array1<f64>)> = Vec::with_capacity(self.layers.len());
        let n_layers = self.layers.len();
        for l in (0..n_layers).rev() {
            let input = &trace.inputs[l];
            let dw = input.t().dot(&delta);
            let db = delta.sum_axis(Axis(0));
            if l > 0 {
                let mut prev = delta.dot(&self.layers[l].weights.t());
                // `input` is the post-ReLU (and post-dropout) activation of layer l-1.
                if l + 1 == n_layers {
                    if let Some(mask) = &trace.mask {
                        prev *= mask;
                    }
                }
                ndarray::Zip::from(&mut prev).and(input).for_each(|d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
                delta = prev;
            }
            grads.push((dw, db));
        }
        let mut flat = Vec::with_capacity(self.parameter_count());
        for (dw, db) in grads.iter().rev() {
            flat.extend(dw.iter());
            flat.extend(db.iter());
        }
        Ok((total * inv, flat))
    }

    /// Mean loss over a dataset, evaluated in chunks without dropout.
    pub fn mean_loss(&self, x: ArrayView2<f64>, labels: &[usize], loss: LossSpec) -> Result<f64> {
        let logits = self.forward(x, None)?;
        let mut total = 0.0;
        for (row, &y) in logits.rows().into_iter().zip(labels) {
            total += loss.value(row.as_slice().expect("standard layout"), y)?;
        }
        Ok(total / labels.len().max(1) as f64)
    }

    pub(crate) fn add_scaled(&mut self, direction: &[f64], scale: f64) {
        let mut offset = 0;
        for layer in &mut self.layers {
            for w in layer.weights.iter_mut() {
                *w += scale * direction[offset];
                offset += 1;
            }
            for b in layer.bias.iter_mut() {
                *b += scale * direction[offset];
                offset += 1;
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Zeroes each entry with probability `p` and rescales survivors by
/// `1 / (1 - p)`. Returns the applied scale mask.
pub fn apply_dropout(acts: &mut Array2<f64>, p: f64, rng: &mut SeededRng) -> Array2<f64> {
    let keep = 1.0 / (1.0 - p);
    let mask = Array2::from_shape_simple_fn(acts.raw_dim(), || {
        if rng.random::<f64>() < p {
            0.0
        } else {
            keep
        }
    });
    *acts *= &mask;
    mask
}

/// Draws minibatch indices with replacement, proportionally to sample weights.
pub struct BatchSampler {
    dist: WeightedIndex<f64>,
    rng: SeededRng,
}

impl BatchSampler {
    pub fn new(weights: &[f64], seed: u64) -> Result<Self> {
        if weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::Config("sample weights must be positive and finite".into()));
        }
        let dist = WeightedIndex::new(weights)
            .map_err(|e| Error::Config(format!("invalid sample weights: {e}")))?;
        Ok(Self { dist, rng: seeded(seed) })
    }

    pub fn draw(&mut self, batch_size: usize) -> Vec<usize> {
        (0..batch_size).map(|_| self.dist.sample(&mut self.rng)).collect()
    }
}

/// Parameters recorded at the end of an epoch (1-based).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub params: Vec<f64>,
    pub train_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: Network,
    pub checkpoints: Vec<Checkpoint>,
}

pub(crate) fn gather_rows(x: ArrayView2<f64>, idx: &[usize]) -> Array2<f64> {
    x.select(Axis(0), idx)
}

pub(crate) fn check_training_inputs(x: ArrayView2<f64>, labels: &[usize], weights: &[f64]) -> Result<()> {
    if x.nrows() == 0 {
        return Err(Error::Empty("training set has no rows".into()));
    }
    if labels.len() != x.nrows() || weights.len() != x.nrows() {
        return Err(Error::InputShape(format!(
            "{} rows, {} labels, {} sample weights",
            x.nrows(),
            labels.len(),
            weights.len()
        )));
    }
    Ok(())
}

/// Momentum SGD with weighted minibatch sampling; one checkpoint per epoch.
///
/// Weight decay applies to weights only. Dropout (if configured) is active.
pub fn train(
    net: Network,
    x: ArrayView2<f64>,
    labels: &[usize],
    loss: LossSpec,
    sgd: &SgdConfig,
    sample_weights: &[f64],
) -> Result<TrainOutcome> {
    sgd.validate()?;
    check_training_inputs(x, labels, sample_weights)?;
    let mut net = net;
    let mut sampler = BatchSampler::new(sample_weights, sgd.seed)?;
    let mut dropout_rng = seeded(crate::rng::derive_seed(sgd.seed, &[0xD0]));
    let steps = sgd.batches_per_epoch(x.nrows());
    let decay_mask = net.weight_mask();
    let mut velocity = vec![0.0; net.parameter_count()];
    let mut checkpoints = Vec::with_capacity(sgd.epochs);
    for epoch in 1..=sgd.epochs {
        let mut epoch_loss = 0.0;
        for _ in 0..steps {
            let idx = sampler.draw(sgd.batch_size);
            let xb = gather_rows(x, &idx);
            let yb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let (value, grad) = net
                .loss_and_grad(xb.view(), &yb, loss, Some(&mut dropout_rng))
                .map_err(|e| divergence(epoch, e))?;
            if !value.is_finite() {
                return Err(Error::Divergence { epoch, reason: format!("batch loss {value}") });
            }
            epoch_loss += value;
            if sgd.learning_rate == 0.0 {
                continue;
            }
            let params = net.get_params();
            for (((v, g), &p), &decay) in velocity.iter_mut().zip(&grad).zip(&params).zip(&decay_mask) {
                let g = if decay { g + sgd.weight_decay * p } else { *g };
                *v = sgd.momentum * *v + g;
            }
            net.add_scaled(&velocity, -sgd.learning_rate);
        }
        let params = net.get_params();
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Divergence { epoch, reason: "non-finite parameters".into() });
        }
        checkpoints.push(Checkpoint {
            epoch,
            params,
            train_loss: epoch_loss / steps as f64,
        });
    }
    Ok(TrainOutcome { network: net, checkpoints })
}

pub(crate) fn divergence(epoch: usize, e: Error) -> Error {
    match e {
        Error::Numeric(reason) => Error::Divergence { epoch, reason },
        other => other,
    }
}
