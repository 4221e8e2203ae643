//! Speaker classifier behind gradient reversal.
//!
//! The head mean-pools the quantized bottleneck frames, reverses the gradient
//! with weight η, then applies `linear → relu → linear` to speaker logits.
//! Head parameters train normally; only the upstream signal is negated.

use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const ADV_FC1_W: &str = "adv.fc1.w";
pub const ADV_FC1_B: &str = "adv.fc1.b";
pub const ADV_FC2_W: &str = "adv.fc2.w";
pub const ADV_FC2_B: &str = "adv.fc2.b";

/// Speaker logits `[1 × S]` for one utterance's bottleneck output `[T′ × D]`.
pub fn adversary_logits<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ParamStore<S>,
    bottleneck_out: Var,
    weight: f64,
    trainable: bool,
) -> Result<Var> {
    let pooled = tape.mean_rows(bottleneck_out)?;
    let reversed = tape.grad_reverse(pooled, S::of(weight))?;
    let w1 = tape.param(ADV_FC1_W, params.get(ADV_FC1_W)?, trainable);
    let b1 = tape.param(ADV_FC1_B, params.get(ADV_FC1_B)?, trainable);
    let w2 = tape.param(ADV_FC2_W, params.get(ADV_FC2_W)?, trainable);
    let b2 = tape.param(ADV_FC2_B, params.get(ADV_FC2_B)?, trainable);
    let h = tape.linear(reversed, w1, b1)?;
    let h = tape.relu(h)?;
    tape.linear(h, w2, b2)
}

/// Softmax cross-entropy of the reversed-gradient classifier. The value does
/// not depend on `weight`; only gradients upstream of the reversal do.
pub fn adversarial_loss<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ParamStore<S>,
    bottleneck_out: Var,
    label: usize,
    weight: f64,
) -> Result<Var> {
    let logits = adversary_logits(tape, params, bottleneck_out, weight, true)?;
    tape.softmax_cross_entropy(logits, &[label])
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows of `logits [n × S]` whose argmax equals the label.
pub fn speaker_accuracy<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() || logits.rows() != labels.len() {
        return Err(Error::invalid(format!(
            "speaker_accuracy needs a non-empty batch with one label per row ({} rows, {} labels)",
            logits.rows(),
            labels.len()
        )));
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(r, &l)| argmax(logits.row(r)) == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_ties_lowest() {
        assert_eq!(argmax(&[1.0f32, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0f64; 4]), 0);
    }

    #[test]
    fn accuracy_rules() {
        let logits = Tensor::from_rows(&[vec![0.0f64, 1.0], vec![2.0, 1.0]]).unwrap();
        assert_eq!(speaker_accuracy(&logits, &[1, 0]).unwrap(), 1.0);
        assert_eq!(speaker_accuracy(&logits, &[0, 1]).unwrap(), 0.0);
        let constant = Tensor::full(&[4, 3], 0.5f64);
        assert_eq!(speaker_accuracy(&constant, &[0, 1, 2, 0]).unwrap(), 0.5);
        assert!(speaker_accuracy(&constant, &[]).is_err());
    }
}
