//! Cross-entropy and the two learned-deferral surrogate losses.
//!
//! Class indices are 0-based. In an extended label space over `n` real
//! classes the deferral class is index `n`, i.e. the last logit of a row.
//! All losses are computed from max-shifted logits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of real classes plus an optional deferral class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    pub n: usize,
    pub extended: bool,
}

impl LabelSpace {
    pub fn binary(extended: bool) -> Self {
        Self { n: 2, extended }
    }

    /// Logit row width: `n`, or `n + 1` with the deferral class.
    pub fn width(&self) -> usize {
        self.n + usize::from(self.extended)
    }

    pub fn deferral_index(&self) -> Option<usize> {
        self.extended.then_some(self.n)
    }

    pub fn check_target(&self, target: usize) -> Result<()> {
        if target < self.n {
            Ok(())
        } else if Some(target) == self.deferral_index() {
            Err(Error::Label(format!(
                "target {target} is the deferral class, which is never a ground-truth label"
            )))
        } else {
            Err(Error::Label(format!(
                "target {target} outside label space of {} classes",
                self.n
            )))
        }
    }
}

/// Cost of non-deferral in the one-stage surrogate, in (0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OneStageCost(f64);

impl OneStageCost {
    pub fn new(alpha: f64) -> Result<Self> {
        if alpha > 0.0 && alpha <= 1.0 {
            Ok(Self(alpha))
        } else {
            Err(Error::Config(format!("alpha must lie in (0, 1], got {alpha}")))
        }
    }

    pub fn alpha(self) -> f64 {
        self.0
    }
}

/// Deferral cost in the two-stage surrogate, non-negative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoStageCost(f64);

impl TwoStageCost {
    pub fn new(beta: f64) -> Result<Self> {
        if beta >= 0.0 && beta.is_finite() {
            Ok(Self(beta))
        } else {
            Err(Error::Config(format!("beta must be finite and >= 0, got {beta}")))
        }
    }

    pub fn beta(self) -> f64 {
        self.0
    }
}

/// Which loss a network is trained with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LossSpec {
    CrossEntropy,
    OneStage(OneStageCost),
    TwoStage(TwoStageCost),
}

impl LossSpec {
    /// Label space implied by a logit row of `width` entries.
    pub fn label_space(&self, width: usize) -> LabelSpace {
        match self {
            LossSpec::CrossEntropy => LabelSpace { n: width, extended: false },
            LossSpec::OneStage(_) | LossSpec::TwoStage(_) => LabelSpace {
                n: width.saturating_sub(1),
                extended: true,
            },
        }
    }

    pub fn value(&self, logits: &[f64], target: usize) -> Result<f64> {
        match *self {
            LossSpec::CrossEntropy => loss_cross_entropy(logits, target),
            LossSpec::OneStage(c) => loss_one_stage(logits, target, c),
            LossSpec::TwoStage(c) => loss_two_stage(logits, target, c),
        }
    }

    pub fn grad(&self, logits: &[f64], target: usize) -> Result<Vec<f64>> {
        match *self {
            LossSpec::CrossEntropy => grad_cross_entropy(logits, target),
            LossSpec::OneStage(c) => grad_one_stage(logits, target, c),
            LossSpec::TwoStage(c) => grad_two_stage(logits, target, c),
        }
    }

    /// Validates the row, writes the gradient into `grad` and returns the loss.
    pub fn value_and_grad(&self, logits: &[f64], target: usize, grad: &mut [f64]) -> Result<f64> {
        validate(logits, target, self.label_space(logits.len()))?;
        debug_assert_eq!(grad.len(), logits.len());
        let lse = log_sum_exp(logits);
        for (g, &m) in grad.iter_mut().zip(logits) {
            *g = (m - lse).exp();
        }
        let d = logits.len() - 1;
        let value = match *self {
            LossSpec::CrossEntropy => {
                grad[target] -= 1.0;
                lse - logits[target]
            }
            LossSpec::OneStage(c) => {
                let alpha = c.alpha();
                let pair = pair_log_sum_exp(logits[target], logits[d]);
                grad[target] -= alpha + (1.0 - alpha) * (logits[target] - pair).exp();
                grad[d] -= (1.0 - alpha) * (logits[d] - pair).exp();
                alpha * (lse - logits[target]) + (1.0 - alpha) * (lse - pair)
            }
            LossSpec::TwoStage(c) => {
                let beta = c.beta();
                for g in grad.iter_mut() {
                    *g *= 1.0 + beta;
                }
                grad[target] -= 1.0;
                grad[d] -= beta;
                (lse - logits[target]) + beta * (lse - logits[d])
            }
        };
        Ok(value)
    }
}

/// `log(sum(exp(row)))`, shifted by the row maximum.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

fn pair_log_sum_exp(a: f64, b: f64) -> f64 {
    let max = a.max(b);
    max + ((a - max).exp() + (b - max).exp()).ln()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(row);
    row.iter().map(|&v| (v - lse).exp()).collect()
}

fn validate(logits: &[f64], target: usize, space: LabelSpace) -> Result<()> {
    if logits.len() < 2 || (space.extended && logits.len() < 3) {
        return Err(Error::InputShape(format!(
            "logit row of width {} too short for the loss",
            logits.len()
        )));
    }
    space.check_target(target)?;
    if let Some(bad) = logits.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite logit {bad}")));
    }
    Ok(())
}

/// Negative log softmax probability of `target`.
pub fn loss_cross_entropy(logits: &[f64], target: usize) -> Result<f64> {
    validate(logits, target, LabelSpace { n: logits.len(), extended: false })?;
    Ok(log_sum_exp(logits) - logits[target])
}

/// One-stage realizable surrogate over `n + 1` logits (last = deferral).
///
/// `-a log p_y - (1 - a) log(p_y + p_defer)`
pub fn loss_one_stage(logits: &[f64], target: usize, cost: OneStageCost) -> Result<f64> {
    validate(logits, target, LabelSpace { n: logits.len().saturating_sub(1), extended: true })?;
    let alpha = cost.alpha();
    let lse = log_sum_exp(logits);
    let pair = pair_log_sum_exp(logits[target], logits[logits.len() - 1]);
    Ok(alpha * (lse - logits[target]) + (1.0 - alpha) * (lse - pair))
}

/// Two-stage surrogate over `n + 1` logits (last = deferral).
///
/// `-log p_y - b log p_defer`
pub fn loss_two_stage(logits: &[f64], target: usize, cost: TwoStageCost) -> Result<f64> {
    validate(logits, target, LabelSpace { n: logits.len().saturating_sub(1), extended: true })?;
    let lse = log_sum_exp(logits);
    let d = logits.len() - 1;
    Ok((lse - logits[target]) + cost.beta() * (lse - logits[d]))
}

pub fn grad_cross_entropy(logits: &[f64], target: usize) -> Result<Vec<f64>> {
    let mut g = vec![0.0; logits.len()];
    LossSpec::CrossEntropy.value_and_grad(logits, target, &mut g)?;
    Ok(g)
}

pub fn grad_one_stage(logits: &[f64], target: usize, cost: OneStageCost) -> Result<Vec<f64>> {
    let mut g = vec![0.0; logits.len()];
    LossSpec::OneStage(cost).value_and_grad(logits, target, &mut g)?;
    Ok(g)
}

pub fn grad_two_stage(logits: &[f64], target: usize, cost: TwoStageCost) -> Result<Vec<f64>> {
    let mut g = vec![0.0; logits.len()];
    LossSpec::TwoStage(cost).value_and_grad(logits, target, &mut g)?;
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const LN3: f64 = 1.098_612_288_668_109_8;

    fn a(alpha: f64) -> OneStageCost {
        OneStageCost::new(alpha).unwrap()
    }

    fn b(beta: f64) -> TwoStageCost {
        TwoStageCost::new(beta).unwrap()
    }

    // Direct evaluation of the formulas without any shifting, used as an oracle
    // for moderate logits.
    fn naive_one_stage(m: &[f64], y: usize, alpha: f64) -> f64 {
        let z: f64 = m.iter().map(|v| v.exp()).sum();
        let d = m.len() - 1;
        -alpha * (m[y].exp() / z).ln() - (1.0 - alpha) * ((m[y].exp() + m[d].exp()) / z).ln()
    }

    fn naive_two_stage(m: &[f64], y: usize, beta: f64) -> f64 {
        let z: f64 = m.iter().map(|v| v.exp()).sum();
        let d = m.len() - 1;
        -(m[y].exp() / z).ln() - beta * (m[d].exp() / z).ln()
    }

    // Five-point central difference: truncation error O(h^4).
    fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let at = |d: f64| {
                    let mut p = x.to_vec();
                    p[i] += d;
                    f(&p)
                };
                (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h)
            })
            .collect()
    }

    #[test]
    fn one_stage_hand_values() {
        let zero = [0.0, 0.0, 0.0];
        assert!((loss_one_stage(&zero, 0, a(1.0)).unwrap() - LN3).abs() < 1e-12);
        let expected = 0.5 * LN3 + 0.5 * (1.5f64).ln();
        let got = loss_one_stage(&zero, 1, a(0.5)).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 0.7520).abs() < 1e-4);
        assert!((naive_one_stage(&zero, 1, 0.5) - got).abs() < 1e-12);
    }

    #[test]
    fn one_stage_deferral_logit_to_minus_infinity_is_two_class_ce() {
        let m = [0.3, -1.2, -1e6];
        let alpha = 0.7;
        let got = loss_one_stage(&m, 0, a(alpha)).unwrap();
        let ce2 = loss_cross_entropy(&m[..2], 0).unwrap();
        assert!((got - ce2).abs() < 1e-6, "{got} vs {ce2}");
    }

    #[test]
    fn two_stage_hand_values() {
        let zero = [0.0, 0.0, 0.0];
        assert!((loss_two_stage(&zero, 0, b(0.0)).unwrap() - LN3).abs() < 1e-12);
        let got = loss_two_stage(&zero, 0, b(1.0)).unwrap();
        assert!((got - 2.0 * LN3).abs() < 1e-9);
        assert!((got - 2.1972).abs() < 1e-4);
        assert!((naive_two_stage(&[0.2, -0.4, 1.1], 1, 0.6)
            - loss_two_stage(&[0.2, -0.4, 1.1], 1, b(0.6)).unwrap())
        .abs()
            < 1e-12);
    }

    #[test]
    fn two_stage_confident_target_goes_to_zero() {
        let got = loss_two_stage(&[60.0, 0.0, 0.0], 0, b(0.0)).unwrap();
        assert!(got < 1e-20);
    }

    #[test]
    fn cross_entropy_hand_values() {
        assert!((loss_cross_entropy(&[0.4, 0.4], 1).unwrap() - 2f64.ln()).abs() < 1e-15);
        let expected = (-20f64).exp().ln_1p();
        let got = loss_cross_entropy(&[10.0, -10.0], 0).unwrap();
        assert!((got - expected).abs() / expected < 1e-5);
        assert!((got - 2.06e-9).abs() < 1e-11);
        let shifted = loss_cross_entropy(&[110.0, 90.0], 0).unwrap();
        assert!((shifted - got).abs() < 1e-12);
    }

    #[test]
    fn label_errors() {
        assert!(matches!(loss_one_stage(&[0.0; 3], 2, a(0.5)), Err(Error::Label(_))));
        assert!(matches!(loss_two_stage(&[0.0; 3], 2, b(0.5)), Err(Error::Label(_))));
        assert!(matches!(loss_cross_entropy(&[0.0; 2], 2), Err(Error::Label(_))));
        assert!(matches!(
            loss_cross_entropy(&[f64::NAN, 0.0], 0),
            Err(Error::Numeric(_))
        ));
        assert!(matches!(
            loss_two_stage(&[0.0, f64::INFINITY, 0.0], 0, b(1.0)),
            Err(Error::Numeric(_))
        ));
        assert!(OneStageCost::new(0.0).is_err());
        assert!(OneStageCost::new(1.01).is_err());
        assert!(TwoStageCost::new(-0.1).is_err());
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let m = [0.5, -0.25, 2.0];
        let g = grad_cross_entropy(&m, 2).unwrap();
        let p = softmax(&m);
        for k in 0..3 {
            let onehot = if k == 2 { 1.0 } else { 0.0 };
            assert!((g[k] - (p[k] - onehot)).abs() < 1e-15);
        }
    }

    #[test]
    fn one_stage_gradient_at_alpha_one_is_extended_ce_gradient() {
        let m = [0.1, 1.3, -0.7];
        let g1 = grad_one_stage(&m, 1, a(1.0)).unwrap();
        let g2 = grad_cross_entropy(&m, 1).unwrap();
        for (x, y) in g1.iter().zip(&g2) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    fn rel_err(a: f64, n: f64) -> f64 {
        (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
    }

    proptest! {
        #[test]
        fn gradients_match_finite_differences(
            m in prop::collection::vec(-4.0f64..4.0, 3),
            y in 0usize..2,
            alpha in 0.05f64..1.0,
            beta in 0.0f64..3.0,
        ) {
            let h = 1e-3;
            let specs = [
                LossSpec::CrossEntropy,
                LossSpec::OneStage(a(alpha)),
                LossSpec::TwoStage(b(beta)),
            ];
            for spec in specs {
                let g = spec.grad(&m, y).unwrap();
                let fd = central_diff(|x| spec.value(x, y).unwrap(), &m, h);
                for (ga, gn) in g.iter().zip(&fd) {
                    prop_assert!(rel_err(*ga, *gn) < 1e-6, "{spec:?}: {ga} vs {gn}");
                }
            }
        }

        #[test]
        fn losses_are_shift_invariant_and_non_negative(
            m in prop::collection::vec(-30.0f64..30.0, 3),
            shift in -100.0f64..100.0,
            y in 0usize..2,
            alpha in 0.01f64..1.0,
            beta in 0.0f64..5.0,
        ) {
            let shifted: Vec<f64> = m.iter().map(|v| v + shift).collect();
            for spec in [LossSpec::CrossEntropy, LossSpec::OneStage(a(alpha)), LossSpec::TwoStage(b(beta))] {
                let l0 = spec.value(&m, y).unwrap();
                let l1 = spec.value(&shifted, y).unwrap();
                prop_assert!(l0 >= 0.0);
                prop_assert!((l0 - l1).abs() < 1e-12, "{spec:?}: {l0} vs {l1}");
            }
        }

        #[test]
        fn raising_deferral_logit_lowers_surrogates(
            m in prop::collection::vec(-5.0f64..5.0, 3),
            y in 0usize..2,
            beta in 0.01f64..3.0,
            bump in 0.01f64..2.0,
        ) {
            let mut up = m.clone();
            up[2] += bump;
            let two = TwoStageCost::new(beta).unwrap();
            // The deferral term always falls. The whole two-stage loss has
            // derivative (1 + b) p_defer - b in the deferral logit, so it
            // falls only while p_defer < b / (1 + b); it is convex in that
            // logit, so checking the upper end of the step suffices.
            let defer_term = |row: &[f64]| beta * (log_sum_exp(row) - row[2]);
            prop_assert!(defer_term(&up) < defer_term(&m));
            if softmax(&up)[2] < beta / (1.0 + beta) {
                prop_assert!(loss_two_stage(&up, y, two).unwrap() < loss_two_stage(&m, y, two).unwrap());
            }
            // Second term of the one-stage loss: -log(p_y + p_defer).
            let second = |row: &[f64]| log_sum_exp(row) - pair_log_sum_exp(row[y], row[2]);
            prop_assert!(second(&up) < second(&m));
        }
    }
}
