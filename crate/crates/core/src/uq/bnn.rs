//! Mean-field Gaussian BNN trained with the reparameterisation trick, one
//! weight sample per optimisation step.
//!
//! The per-minibatch objective is `sum_b CE_b + kl_weight * KL(q || p)`,
//! divided by the batch size so the learning rate means the same thing as in
//! plain SGD. The default `kl_weight` is one over the number of batches per
//! epoch.

use ndarray::ArrayView2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{MonteCarloPrediction, SamplerConfig};
use crate::checkpoint::{ParamFile, Section};
use crate::error::{Error, Result};
use crate::losses::LossSpec;
use crate::nnet::{check_training_inputs, divergence, gather_rows, BatchSampler, NetConfig, Network, SgdConfig};
use crate::rng::{derive_seed, seeded, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BnnConfig {
    pub prior_std: f64,
    /// `None` uses one over the number of batches per epoch.
    pub kl_weight: Option<f64>,
    pub init_log_std: f64,
    /// Lower clamp on the log standard deviation.
    pub min_log_std: f64,
}

impl Default for BnnConfig {
    fn default() -> Self {
        Self { prior_std: 1.0, kl_weight: None, init_log_std: -5.0, min_log_std: -30.0 }
    }
}

impl BnnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.prior_std > 0.0 && self.prior_std.is_finite()) {
            return Err(Error::Config(format!("prior_std must be positive, got {}", self.prior_std)));
        }
        if let Some(w) = self.kl_weight {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("kl_weight must be >= 0, got {w}")));
            }
        }
        if !(self.init_log_std.is_finite() && self.min_log_std.is_finite() && self.init_log_std >= self.min_log_std) {
            return Err(Error::Config("init_log_std must be finite and >= min_log_std".into()));
        }
        Ok(())
    }

    pub fn resolved_kl_weight(&self, batches_per_epoch: usize) -> f64 {
        self.kl_weight.unwrap_or(1.0 / batches_per_epoch.max(1) as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnnPosterior {
    pub config: NetConfig,
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
    pub prior_std: f64,
}

impl BnnPosterior {
    pub fn kl(&self) -> f64 {
        self.mean
            .iter()
            .zip(&self.log_std)
            .map(|(&m, &r)| kl_divergence(m, r.exp(), self.prior_std))
            .sum()
    }

    /// Deterministic network at the posterior mean.
    pub fn mean_network(&self) -> Result<Network> {
        let mut net = Network::zeros(self.config.clone())?;
        net.set_params(&self.mean)?;
        Ok(net)
    }

    pub fn to_param_file(&self) -> ParamFile {
        ParamFile {
            config: self.config.clone(),
            params: self.mean.clone(),
            sections: vec![
                Section::vector("log_std", self.log_std.clone()),
                Section::vector("prior_std", vec![self.prior_std]),
            ],
        }
    }

    pub fn from_param_file(file: &ParamFile) -> Result<Self> {
        let log_std = file.section("log_std")?.data.clone();
        if log_std.len() != file.params.len() {
            return Err(Error::Format("log_std section does not match the parameter count".into()));
        }
        let prior_std = *file
            .section("prior_std")?
            .data
            .first()
            .ok_or_else(|| Error::Format("empty prior_std section".into()))?;
        Ok(Self { config: file.config.clone(), mean: file.params.clone(), log_std, prior_std })
    }
}

/// `KL(N(mu, sigma^2) || N(0, prior_std^2))` for one parameter.
pub fn kl_divergence(mu: f64, sigma: f64, prior_std: f64) -> f64 {
    (prior_std / sigma).ln() + (sigma * sigma + mu * mu) / (2.0 * prior_std * prior_std) - 0.5
}

#[derive(Debug, Clone)]
pub struct BnnOutcome {
    pub posterior: BnnPosterior,
    /// Posterior at the end of each epoch, epoch 1 first.
    pub epochs: Vec<BnnPosterior>,
    /// Mean per-example objective over each epoch's batches.
    pub train_loss: Vec<f64>,
}

pub fn bnn_train(
    config: NetConfig,
    x: ArrayView2<f64>,
    labels: &[usize],
    sgd: &SgdConfig,
    bnn: &BnnConfig,
    sample_weights: &[f64],
) -> Result<BnnOutcome> {
    sgd.validate()?;
    bnn.validate()?;
    check_training_inputs(x, labels, sample_weights)?;
    let mut net = Network::new(config.clone())?;
    let mut mean = net.get_params();
    let p = mean.len();
    let mut log_std = vec![bnn.init_log_std; p];
    let mut sampler = BatchSampler::new(sample_weights, sgd.seed)?;
    let mut dropout_rng = seeded(derive_seed(sgd.seed, &[0xD0]));
    let mut eps_rng = seeded(derive_seed(sgd.seed, &[0xB0]));
    let steps = sgd.batches_per_epoch(x.nrows());
    let kl_scale = bnn.resolved_kl_weight(steps) / sgd.batch_size as f64;
    let prior_var = bnn.prior_std * bnn.prior_std;
    let decay_mask = net.weight_mask();
    let mut v_mean = vec![0.0; p];
    let mut v_log_std = vec![0.0; p];
    let mut eps = vec![0.0; p];
    let mut theta = vec![0.0; p];
    let mut epochs = Vec::with_capacity(sgd.epochs);
    let mut train_loss = Vec::with_capacity(sgd.epochs);
    for epoch in 1..=sgd.epochs {
        let mut epoch_loss = 0.0;
        for _ in 0..steps {
            for ((e, t), (&m, &r)) in eps.iter_mut().zip(theta.iter_mut()).zip(mean.iter().zip(&log_std)) {
                *e = eps_rng.sample(StandardNormal);
                *t = m + r.exp() * *e;
            }
            net.set_params(&theta)?;
            let idx = sampler.draw(sgd.batch_size);
            let xb = gather_rows(x, &idx);
            let yb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let (ce, grad) = net
                .loss_and_grad(xb.view(), &yb, LossSpec::CrossEntropy, Some(&mut dropout_rng))
                .map_err(|e| divergence(epoch, e))?;
            let kl: f64 = if kl_scale > 0.0 {
                mean.iter().zip(&log_std).map(|(&m, &r)| kl_divergence(m, r.exp(), bnn.prior_std)).sum()
            } else {
                0.0
            };
            let objective = ce + kl_scale * kl;
            if !objective.is_finite() {
                return Err(Error::Divergence { epoch, reason: format!("objective {objective}") });
            }
            epoch_loss += objective;
            if sgd.learning_rate == 0.0 {
                continue;
            }
            for i in 0..p {
                let sigma = log_std[i].exp();
                let mut g_mean = grad[i] + kl_scale * mean[i] / prior_var;
                if decay_mask[i] {
                    g_mean += sgd.weight_decay * mean[i];
                }
                let g_log_std = grad[i] * eps[i] * sigma + kl_scale * (sigma * sigma / prior_var - 1.0);
                v_mean[i] = sgd.momentum * v_mean[i] + g_mean;
                v_log_std[i] = sgd.momentum * v_log_std[i] + g_log_std;
                mean[i] -= sgd.learning_rate * v_mean[i];
                log_std[i] = (log_std[i] - sgd.learning_rate * v_log_std[i]).max(bnn.min_log_std);
            }
        }
        if mean.iter().chain(&log_std).any(|v| !v.is_finite()) {
            return Err(Error::Divergence { epoch, reason: "non-finite variational parameters".into() });
        }
        train_loss.push(epoch_loss / steps as f64);
        epochs.push(BnnPosterior {
            config: config.clone(),
            mean: mean.clone(),
            log_std: log_std.clone(),
            prior_std: bnn.prior_std,
        });
    }
    let posterior = BnnPosterior { config, mean, log_std, prior_std: bnn.prior_std };
    Ok(BnnOutcome { posterior, epochs, train_loss })
}

/// One weight draw `mean + exp(log_std) * z`.
pub fn bnn_sample(post: &BnnPosterior, rng: &mut SeededRng) -> Vec<f64> {
    post.mean
        .iter()
        .zip(&post.log_std)
        .map(|(&m, &r)| {
            let z: f64 = rng.sample(StandardNormal);
            m + r.exp() * z
        })
        .collect()
}

pub fn bnn_predict(post: &BnnPosterior, batch: ArrayView2<f64>, sampler: SamplerConfig) -> Result<MonteCarloPrediction> {
    sampler.validate()?;
    let mut rng = seeded(sampler.seed);
    let mut net = Network::zeros(post.config.clone())?;
    let samples = (0..sampler.n_samples)
        .map(|_| {
            net.set_params(&bnn_sample(post, &mut rng))?;
            net.positive_probability(batch, None)
        })
        .collect::<Result<Vec<_>>>()?;
    MonteCarloPrediction::from_samples(samples)
}
