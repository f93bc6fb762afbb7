//! Uncertainty scores for deferral: softmax projection, deep ensembles,
//! SWAG, MC dropout and a mean-field Gaussian BNN.
//!
//! Sampling methods summarise the positive-class softmax output of their N
//! draws by its mean and population variance. The per-input values are
//! sorted before summing, so the result does not depend on member or draw
//! order.

mod bnn;
mod ensemble;
mod mc_dropout;
mod swag;

pub use bnn::{bnn_predict, bnn_sample, bnn_train, kl_divergence, BnnConfig, BnnOutcome, BnnPosterior};
pub use ensemble::ensemble_predict;
pub use mc_dropout::{mc_dropout_predict, McDropoutOutput};
pub use swag::{swag_collect, swag_collect_from_training, swag_predict, swag_sample, SwagConfig, SwagPosterior};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of Monte-Carlo draws (or ensemble members) and the seed for draws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { n_samples: 10, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::Config("n_samples must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScoreKind {
    /// `1 - 2 |s1 - 0.5|`, in [0, 1].
    SoftmaxProjection,
    /// Population variance of N positive-class probabilities, in [0, 0.25].
    Variance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyScores {
    pub kind: ScoreKind,
    pub values: Vec<f64>,
}

/// Per-input Monte-Carlo summary of positive-class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloPrediction {
    /// `samples[k][i]`: draw `k`, input `i`.
    pub samples: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl MonteCarloPrediction {
    pub fn from_samples(samples: Vec<Vec<f64>>) -> Result<Self> {
        let n = samples.len();
        if n == 0 {
            return Err(Error::Config("need at least one sample".into()));
        }
        let inputs = samples[0].len();
        if samples.iter().any(|s| s.len() != inputs) {
            return Err(Error::InputShape("samples cover different numbers of inputs".into()));
        }
        let mut mean = Vec::with_capacity(inputs);
        let mut variance = Vec::with_capacity(inputs);
        let mut column = vec![0.0; n];
        for i in 0..inputs {
            for (c, s) in column.iter_mut().zip(&samples) {
                *c = s[i];
            }
            let (m, v) = mean_and_population_variance(&mut column);
            mean.push(m);
            variance.push(v);
        }
        Ok(Self { samples, mean, variance })
    }

    pub fn scores(&self) -> UncertaintyScores {
        UncertaintyScores { kind: ScoreKind::Variance, values: self.variance.clone() }
    }
}

/// Sorts `values` in place, then returns their mean and population variance.
/// Identical values give exactly that value and zero.
pub fn mean_and_population_variance(values: &mut [f64]) -> (f64, f64) {
    values.sort_by(f64::total_cmp);
    if values.first() == values.last() {
        return (values.first().copied().unwrap_or(f64::NAN), 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Softmax-projection uncertainty `1 - 2 |s1 - 0.5|`.
pub fn softmax_uncertainty(s1: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&s1) {
        return Err(Error::Domain(format!("positive-class probability {s1} outside [0, 1]")));
    }
    Ok(1.0 - 2.0 * (s1 - 0.5).abs())
}

pub fn softmax_scores(positive_prob: &[f64]) -> Result<UncertaintyScores> {
    Ok(UncertaintyScores {
        kind: ScoreKind::SoftmaxProjection,
        values: positive_prob.iter().map(|&p| softmax_uncertainty(p)).collect::<Result<_>>()?,
    })
}

/// `true` where the input is deferred, i.e. its score exceeds `tau`.
pub fn defer_by_threshold(scores: &[f64], tau: f64) -> Vec<bool> {
    scores.iter().map(|&s| s > tau).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_projection_values() {
        assert_eq!(softmax_uncertainty(0.5).unwrap(), 1.0);
        assert_eq!(softmax_uncertainty(0.0).unwrap(), 0.0);
        assert_eq!(softmax_uncertainty(1.0).unwrap(), 0.0);
        assert_eq!(softmax_uncertainty(0.75).unwrap(), 0.5);
        assert!(matches!(softmax_uncertainty(1.2), Err(Error::Domain(_))));
        assert!(softmax_uncertainty(-0.1).is_err());
    }

    #[test]
    fn threshold_mask() {
        assert_eq!(defer_by_threshold(&[0.1, 0.2, 0.3], 0.15), vec![false, true, true]);
        assert_eq!(defer_by_threshold(&[0.1, 0.2, 0.3], 0.3), vec![false; 3]);
        assert_eq!(defer_by_threshold(&[0.1, 0.2, 0.3], 0.05), vec![true; 3]);
    }

    #[test]
    fn population_variance_of_two_members() {
        let p = MonteCarloPrediction::from_samples(vec![vec![0.4], vec![0.6]]).unwrap();
        assert!((p.mean[0] - 0.5).abs() < 1e-15);
        assert!((p.variance[0] - 0.01).abs() < 1e-15);
        assert!(MonteCarloPrediction::from_samples(vec![]).is_err());
    }

    proptest! {
        #[test]
        fn deferral_rate_non_increasing_in_tau(
            scores in prop::collection::vec(0.0f64..1.0, 1..50),
            t1 in 0.0f64..1.0,
            t2 in 0.0f64..1.0,
        ) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let count = |t| defer_by_threshold(&scores, t).iter().filter(|&&d| d).count();
            prop_assert!(count(hi) <= count(lo));
        }

        #[test]
        fn variance_scores_bounded_and_order_free(
            draws in prop::collection::vec(prop::collection::vec(0.0f64..=1.0, 5), 1..12),
        ) {
            let p = MonteCarloPrediction::from_samples(draws.clone()).unwrap();
            let mut reversed = draws;
            reversed.reverse();
            let q = MonteCarloPrediction::from_samples(reversed).unwrap();
            prop_assert_eq!(&p.mean, &q.mean);
            prop_assert_eq!(&p.variance, &q.variance);
            for &v in &p.variance {
                prop_assert!((0.0..=0.25).contains(&v));
            }
        }
    }
}
