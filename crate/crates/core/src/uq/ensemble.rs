use ndarray::ArrayView2;

use super::MonteCarloPrediction;
use crate::error::{Error, Result};
use crate::nnet::Network;

/// Mean and population variance of the members' positive-class probabilities.
pub fn ensemble_predict(members: &[Network], batch: ArrayView2<f64>) -> Result<MonteCarloPrediction> {
    let first = members
        .first()
        .ok_or_else(|| Error::Config("an ensemble needs at least one member".into()))?;
    let (input, output) = (first.config().input_dim, first.config().output_dim);
    if members
        .iter()
        .any(|m| m.config().input_dim != input || m.config().output_dim != output)
    {
        return Err(Error::Config("ensemble members disagree on input/output width".into()));
    }
    let samples = members
        .iter()
        .map(|m| m.positive_probability(batch, None))
        .collect::<Result<Vec<_>>>()?;
    MonteCarloPrediction::from_samples(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::NetConfig;
    use ndarray::Array2;

    fn member(seed: u64) -> Network {
        Network::new(NetConfig::new(3, vec![6], 2).with_seed(seed)).unwrap()
    }

    fn batch() -> Array2<f64> {
        Array2::from_shape_fn((8, 3), |(i, j)| ((i * 3 + j) as f64).sin())
    }

    #[test]
    fn identical_members_have_zero_variance() {
        let members = vec![member(1); 4];
        let p = ensemble_predict(&members, batch().view()).unwrap();
        assert!(p.variance.iter().all(|&v| v == 0.0));
        let single = member(1).positive_probability(batch().view(), None).unwrap();
        assert_eq!(p.mean, single);
    }

    #[test]
    fn member_order_does_not_matter() {
        let members: Vec<Network> = (0..5).map(member).collect();
        let mut shuffled = members.clone();
        shuffled.swap(0, 3);
        shuffled.swap(1, 4);
        let a = ensemble_predict(&members, batch().view()).unwrap();
        let b = ensemble_predict(&shuffled, batch().view()).unwrap();
        assert_eq!(a.mean, b.mean);
        assert_eq!(a.variance, b.variance);
    }

    #[test]
    fn rejects_empty_and_mismatched_ensembles() {
        assert!(matches!(ensemble_predict(&[], batch().view()), Err(Error::Config(_))));
        let odd = Network::new(NetConfig::new(3, vec![6], 3)).unwrap();
        assert!(ensemble_predict(&[member(0), odd], batch().view()).is_err());
    }
}
