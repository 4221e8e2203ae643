mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vcaug_core::adversary::{adversarial_loss, speaker_accuracy, ADV_FC1_B, ADV_FC1_W, ADV_FC2_B, ADV_FC2_W};
use vcaug_core::autodiff::{ParamStore, Tape, Tensor};

const D: usize = 6;
const H: usize = 5;
const S: usize = 4;

fn head(seed: u64) -> ParamStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    p.insert(ADV_FC1_W, common::rand_tensor(&mut rng, &[D, H], 0.0));
    p.insert(ADV_FC1_B, common::rand_tensor(&mut rng, &[H], 0.0));
    p.insert(ADV_FC2_W, common::rand_tensor(&mut rng, &[H, S], 0.0));
    p.insert(ADV_FC2_B, common::rand_tensor(&mut rng, &[S], 0.0));
    p
}

/// Loss and gradient w.r.t. the bottleneck frames.
fn loss_and_grad(p: &ParamStore<f64>, x: &Tensor<f64>, label: usize, eta: f64) -> (f64, Vec<f64>) {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let l = adversarial_loss(&mut tape, p, xv, label, eta).unwrap();
    let g = tape.backward(l).unwrap();
    let d = g.get(xv).map_or(vec![0.0; x.len()], |t| t.data().to_vec());
    (tape.value(l).item(), d)
}

/// The same classifier written out by hand, without any reversal.
fn plain_loss(p: &ParamStore<f64>, x: &[f64], t: usize, label: usize) -> f64 {
    let mut pooled = [0.0; D];
    for r in 0..t {
        for c in 0..D {
            pooled[c] += x[r * D + c] / t as f64;
        }
    }
    let (w1, b1, w2, b2) = (
        p.get(ADV_FC1_W).unwrap(),
        p.get(ADV_FC1_B).unwrap(),
        p.get(ADV_FC2_W).unwrap(),
        p.get(ADV_FC2_B).unwrap(),
    );
    let h: Vec<f64> = (0..H)
        .map(|j| (b1.data()[j] + (0..D).map(|i| pooled[i] * w1.at(i, j)).sum::<f64>()).max(0.0))
        .collect();
    let z: Vec<f64> = (0..S)
        .map(|k| b2.data()[k] + (0..H).map(|j| h[j] * w2.at(j, k)).sum::<f64>())
        .collect();
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - z[label]
}

#[test]
fn uniform_logits_give_ln_s() {
    let mut p = head(0);
    p.insert(ADV_FC2_W, Tensor::zeros(&[H, S]));
    p.insert(ADV_FC2_B, Tensor::zeros(&[S]));
    let x = Tensor::full(&[3, D], 0.3);
    let (l, _) = loss_and_grad(&p, &x, 2, 0.1);
    assert!((l - 4f64.ln()).abs() < 1e-12);
    assert!((4f64.ln() - 1.3863).abs() < 1e-4);
}

#[test]
fn large_margin_drives_loss_to_zero() {
    let mut p = head(0);
    p.insert(ADV_FC2_W, Tensor::zeros(&[H, S]));
    p.insert(ADV_FC2_B, Tensor::new(vec![S], vec![0.0, 0.0, 800.0, 0.0]).unwrap());
    let (l, _) = loss_and_grad(&p, &Tensor::full(&[2, D], 1.0), 2, 1.0);
    assert!(l.abs() < 1e-300);
}

#[test]
fn invalid_label_is_an_error() {
    let p = head(1);
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::full(&[2, D], 0.1));
    assert!(adversarial_loss(&mut tape, &p, x, S, 0.1).is_err());
}

#[test]
fn reversed_gradient_is_minus_eta_times_plain() {
    let t = 5;
    for seed in 0..30 {
        let p = head(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let x = common::rand_tensor(&mut rng, &[t, D], 0.0);
        let label = rng.gen_range(0..S);
        let base = plain_loss(&p, x.data(), t, label);
        let h = 1e-6;
        let numeric: Vec<f64> = (0..x.len())
            .map(|i| {
                let mut a = x.data().to_vec();
                let mut b = a.clone();
                a[i] += h;
                b[i] -= h;
                (plain_loss(&p, &a, t, label) - plain_loss(&p, &b, t, label)) / (2.0 * h)
            })
            .collect();
        for eta in [0.0, 0.1, 1.0] {
            let (l, g) = loss_and_grad(&p, &x, label, eta);
            assert!((l - base).abs() < 1e-12, "loss depends on eta");
            for (gi, ni) in g.iter().zip(&numeric) {
                let want = -eta * ni;
                assert!((gi - want).abs() <= 1e-6 * (1.0 + want.abs()), "seed {seed} eta {eta}: {gi} vs {want}");
            }
            if eta == 0.0 {
                assert!(g.iter().all(|&v| v == 0.0));
            }
        }
    }
}

#[test]
fn head_parameters_train_normally() {
    // the head's own gradients do not depend on eta
    let p = head(3);
    let x = Tensor::from_fn(&[4, D], |i| (i as f64 * 0.7).cos());
    let grads = |eta: f64| {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let l = adversarial_loss(&mut tape, &p, xv, 1, eta).unwrap();
        let g = tape.backward(l).unwrap();
        tape.param_grads(&g)
    };
    assert_eq!(grads(0.0), grads(1.0));
}

#[test]
fn accuracy_examples() {
    let logits = Tensor::from_rows(&[vec![0.1, 2.0, -1.0], vec![3.0, 0.0, 0.0]]).unwrap();
    assert_eq!(speaker_accuracy(&logits, &[1, 0]).unwrap(), 1.0);
    // constant logits: every prediction is class 0
    let flat = Tensor::full(&[6, 3], 0.25f64);
    assert_eq!(speaker_accuracy(&flat, &[0, 1, 2, 0, 1, 2]).unwrap(), 2.0 / 6.0);
    assert!(speaker_accuracy(&flat, &[]).is_err());
}

#[test]
fn random_classifier_sits_at_chance() {
    let (n, s) = (10_000, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let logits: Tensor<f64> = Tensor::from_fn(&[n, s], |_| rng.gen());
    let labels: Vec<usize> = (0..n).map(|i| i % s).collect();
    let acc = speaker_accuracy(&logits, &labels).unwrap();
    let p = 1.0 / s as f64;
    let sigma = (p * (1.0 - p) / n as f64).sqrt();
    assert!((acc - p).abs() <= 3.0 * sigma, "accuracy {acc}");
}

proptest! {
    #[test]
    fn loss_value_invariant_under_eta(seed in any::<u64>(), eta in 0.0f64..5.0, t in 1usize..8) {
        let p = head(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 7);
        let x = common::rand_tensor(&mut rng, &[t, D], 0.0);
        let (a, _) = loss_and_grad(&p, &x, 0, eta);
        prop_assert!((a - plain_loss(&p, x.data(), t, 0)).abs() < 1e-12);
    }

    #[test]
    fn accuracy_in_unit_interval(seed in any::<u64>(), n in 1usize..50) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits: Tensor<f64> = Tensor::from_fn(&[n, 3], |_| rng.gen());
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        let a = speaker_accuracy(&logits, &labels).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
    }
}
