use serde::{Deserialize, Serialize};

use crate::autodiff::{huber_elem, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Weights of the composite objective
/// `recon + γ·codebook + ε·commit + η·adv`, plus the gradient-reversal scale,
/// the commitment β and the Huber threshold δ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub gamma: f64,
    pub epsilon: f64,
    pub eta: f64,
    /// Scale of the reversed gradient reaching the encoder from the speaker
    /// classifier. This is the knob swept when tuning disentanglement.
    pub adv_grad_weight: f64,
    pub beta: f64,
    pub delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            epsilon: 1.0,
            eta: 1.0,
            adv_grad_weight: 0.1,
            beta: 0.25,
            delta: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.gamma, self.epsilon, self.eta, self.adv_grad_weight, self.beta];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || !(self.delta > 0.0) {
            return Err(Error::Config("train.loss: weights must be ≥ 0 and delta > 0".into()));
        }
        Ok(())
    }
}

/// Mean elementwise Huber loss over paired slices.
pub fn huber(y: &[f64], y_hat: &[f64], delta: f64) -> Result<f64> {
    if y.len() != y_hat.len() || y.is_empty() {
        return Err(Error::shape("huber", &[y.len()], &[y_hat.len()]));
    }
    if !(delta > 0.0) {
        return Err(Error::invalid("huber delta must be positive"));
    }
    Ok(y.iter().zip(y_hat).map(|(a, b)| huber_elem(a - b, delta)).sum::<f64>() / y.len() as f64)
}

/// Loss terms of one step, as plain values.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossComponents {
    pub recon: f64,
    pub codebook: f64,
    pub commit: f64,
    pub adv: f64,
}

impl LossComponents {
    pub fn total(&self, w: &LossWeights) -> f64 {
        self.recon + w.gamma * self.codebook + w.epsilon * self.commit + w.eta * self.adv
    }
}

/// Weighted sum of the four loss terms on the tape.
pub fn total_loss<S: Scalar>(
    tape: &mut Tape<S>,
    recon: Var,
    codebook: Var,
    commit: Var,
    adv: Var,
    w: &LossWeights,
) -> Result<Var> {
    let cb = tape.scale(codebook, S::of(w.gamma))?;
    let cm = tape.scale(commit, S::of(w.epsilon))?;
    let ad = tape.scale(adv, S::of(w.eta))?;
    let t = tape.add(recon, cb)?;
    let t = tape.add(t, cm)?;
    tape.add(t, ad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn huber_values() {
        assert_eq!(huber(&[1.0, 2.0], &[1.0, 2.0], 1.0).unwrap(), 0.0);
        assert_eq!(huber(&[0.5], &[0.0], 1.0).unwrap(), 0.125);
        assert_eq!(huber(&[2.0], &[0.0], 1.0).unwrap(), 1.5);
        assert_eq!(huber(&[-2.0], &[0.0], 1.0).unwrap(), 1.5);
    }

    #[test]
    fn huber_is_c1_at_threshold() {
        let delta = 0.7;
        let f = |d: f64| huber(&[d], &[0.0], delta).unwrap();
        let h = 1e-9;
        assert!((f(delta - h) - f(delta + h)).abs() < 1e-6);
        // one-sided derivatives: d on the quadratic side, δ on the linear side
        let left = (f(delta - h) - f(delta - 2.0 * h)) / h;
        let right = (f(delta + 2.0 * h) - f(delta + h)) / h;
        assert!((left - delta).abs() < 1e-6 && (right - delta).abs() < 1e-6);
    }

    #[test]
    fn unit_weights_sum_components() {
        let c = LossComponents {
            recon: 1.0,
            codebook: 2.0,
            commit: 3.0,
            adv: 4.0,
        };
        let w = LossWeights::default();
        assert_eq!(c.total(&w), 10.0);
        let zero = LossWeights {
            gamma: 0.0,
            epsilon: 0.0,
            eta: 0.0,
            ..w
        };
        assert_eq!(c.total(&zero), 1.0);
    }
}
