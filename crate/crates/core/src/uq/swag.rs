//! SWAG: Gaussian over SGD iterates with the SWA mean, a diagonal variance
//! from the running second moment, and a low-rank term from the deviations
//! of the last K collected iterates.

use ndarray::ArrayView2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{MonteCarloPrediction, SamplerConfig};
use crate::checkpoint::{ParamFile, Section};
use crate::error::{Error, Result};
use crate::nnet::{Checkpoint, NetConfig, Network};
use crate::rng::{seeded, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SwagConfig {
    /// Fraction of epochs skipped before collection starts.
    pub burn_in_fraction: f64,
    /// Upper bound on the deviation-matrix rank K.
    pub max_rank: usize,
}

impl Default for SwagConfig {
    fn default() -> Self {
        Self { burn_in_fraction: 0.4, max_rank: 20 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwagPosterior {
    pub config: NetConfig,
    pub mean: Vec<f64>,
    pub second_moment: Vec<f64>,
    /// K columns, each a collected iterate minus the SWA mean.
    pub deviations: Vec<Vec<f64>>,
    pub collected: usize,
}

impl SwagPosterior {
    pub fn rank(&self) -> usize {
        self.deviations.len()
    }

    pub fn diagonal_variance(&self) -> Vec<f64> {
        self.second_moment
            .iter()
            .zip(&self.mean)
            .map(|(s, m)| (s - m * m).max(0.0))
            .collect()
    }

    pub fn to_param_file(&self) -> ParamFile {
        let cols = self.mean.len();
        ParamFile {
            config: self.config.clone(),
            params: self.mean.clone(),
            sections: vec![
                Section::vector("second_moment", self.second_moment.clone()),
                Section {
                    name: "deviations".into(),
                    rows: self.deviations.len(),
                    cols,
                    data: self.deviations.concat(),
                },
                Section::vector("collected", vec![self.collected as f64]),
            ],
        }
    }

    pub fn from_param_file(file: &ParamFile) -> Result<Self> {
        let second = file.section("second_moment")?;
        let dev = file.section("deviations")?;
        let collected = file.section("collected")?;
        let p = file.params.len();
        if second.data.len() != p || (dev.rows > 0 && dev.cols != p) {
            return Err(Error::Format("SWAG sections do not match the parameter count".into()));
        }
        Ok(Self {
            config: file.config.clone(),
            mean: file.params.clone(),
            second_moment: second.data.clone(),
            deviations: dev.data.chunks(p.max(1)).map(<[f64]>::to_vec).take(dev.rows).collect(),
            collected: collected.data.first().copied().unwrap_or(0.0) as usize,
        })
    }
}

/// Builds the posterior from collected parameter vectors, oldest first.
pub fn swag_collect(config: NetConfig, iterates: &[&[f64]], max_rank: usize) -> Result<SwagPosterior> {
    let first = iterates
        .first()
        .ok_or_else(|| Error::Collection("no iterates collected".into()))?;
    let p = first.len();
    if p != config.parameter_count() || iterates.iter().any(|v| v.len() != p) {
        return Err(Error::InputShape("iterates do not match the network parameter count".into()));
    }
    if max_rank == 0 {
        return Err(Error::Config("max_rank must be positive".into()));
    }
    let mut mean = vec![0.0; p];
    let mut second = vec![0.0; p];
    for (n, theta) in iterates.iter().enumerate() {
        let w = 1.0 / (n + 1) as f64;
        for ((m, s), &t) in mean.iter_mut().zip(second.iter_mut()).zip(theta.iter()) {
            *m += (t - *m) * w;
            *s += (t * t - *s) * w;
        }
    }
    let k = max_rank.min(iterates.len());
    let deviations = iterates[iterates.len() - k..]
        .iter()
        .map(|theta| theta.iter().zip(&mean).map(|(t, m)| t - m).collect())
        .collect();
    Ok(SwagPosterior {
        config,
        mean,
        second_moment: second,
        deviations,
        collected: iterates.len(),
    })
}

/// Collects once per epoch after skipping the burn-in epochs.
pub fn swag_collect_from_training(
    config: NetConfig,
    checkpoints: &[Checkpoint],
    swag: &SwagConfig,
) -> Result<SwagPosterior> {
    let epochs = checkpoints.len();
    let burn_in = (swag.burn_in_fraction * epochs as f64).ceil() as usize;
    let iterates: Vec<&[f64]> = checkpoints
        .iter()
        .skip(burn_in)
        .map(|c| c.params.as_slice())
        .collect();
    if iterates.len() < 2 {
        return Err(Error::Collection(format!(
            "{} iterates after a burn-in of {burn_in} of {epochs} epochs; need at least 2",
            iterates.len()
        )));
    }
    swag_collect(config, &iterates, swag.max_rank)
}

/// `mean + sqrt(diag / 2) * z1 + D z2 / sqrt(2 (K - 1))`.
pub fn swag_sample(post: &SwagPosterior, rng: &mut SeededRng) -> Result<Vec<f64>> {
    let k = post.rank();
    if k < 2 {
        return Err(Error::Rank(k));
    }
    let diag = post.diagonal_variance();
    let low_rank_scale = 1.0 / (2.0 * (k - 1) as f64).sqrt();
    let mut theta: Vec<f64> = post
        .mean
        .iter()
        .zip(&diag)
        .map(|(m, d)| {
            let z: f64 = rng.sample(StandardNormal);
            m + (d / 2.0).sqrt() * z
        })
        .collect();
    for column in &post.deviations {
        let z: f64 = rng.sample(StandardNormal);
        let c = low_rank_scale * z;
        for (t, d) in theta.iter_mut().zip(column) {
            *t += c * d;
        }
    }
    Ok(theta)
}

/// N weight draws from the posterior, each evaluated on the batch.
pub fn swag_predict(post: &SwagPosterior, batch: ArrayView2<f64>, sampler: SamplerConfig) -> Result<MonteCarloPrediction> {
    sampler.validate()?;
    let mut rng = seeded(sampler.seed);
    let mut net = Network::zeros(post.config.clone())?;
    let samples = (0..sampler.n_samples)
        .map(|_| {
            net.set_params(&swag_sample(post, &mut rng)?)?;
            net.positive_probability(batch, None)
        })
        .collect::<Result<Vec<_>>>()?;
    MonteCarloPrediction::from_samples(samples)
}
