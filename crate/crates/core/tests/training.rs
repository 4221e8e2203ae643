mod common;

use std::collections::BTreeMap;

use proptest::prelude::*;

use vcaug_core::autodiff::{ParamStore, Tape, Tensor};
use vcaug_core::corpus::Utterance;
use vcaug_core::model::{Binding, VcModel};
use vcaug_core::training::{
    batch_objective, format_sig9, huber, random_batch, read_summary_table, select_model, train, Adam,
    CandidateSummary, LedgerRecord, LossComponents, LossWeights, MetricsLedger, RunOutput, SelectionThresholds,
    TrendCheck,
};

fn cand(label: &str, acc: f64, ppl: f64, recon: f64) -> CandidateSummary {
    CandidateSummary {
        label: label.into(),
        speaker_accuracy: acc,
        perplexity: ppl,
        recon_loss: recon,
    }
}

fn reference() -> Vec<CandidateSummary> {
    vec![
        cand("0.0", 0.80, 110.0, 0.038),
        cand("0.1", 0.12, 105.0, 0.045),
        cand("0.5", 0.11, 80.0, 0.070),
        cand("1.0", 0.10, 60.0, 0.085),
    ]
}

#[test]
fn huber_examples() {
    assert_eq!(huber(&[0.3, -2.0], &[0.3, -2.0], 1.0).unwrap(), 0.0);
    assert_eq!(huber(&[0.5], &[0.0], 1.0).unwrap(), 0.125);
    assert_eq!(huber(&[2.0], &[0.0], 1.0).unwrap(), 1.5);
    assert_eq!(huber(&[0.0], &[2.0], 1.0).unwrap(), 1.5);
    assert!(huber(&[1.0], &[1.0, 2.0], 1.0).is_err());
    assert!(huber(&[1.0], &[1.0], 0.0).is_err());
}

#[test]
fn huber_is_continuously_differentiable_at_delta() {
    for delta in [0.25, 1.0, 3.0] {
        let f = |d: f64| huber(&[d], &[0.0], delta).unwrap();
        let h = 1e-7;
        for side in [1.0, -1.0] {
            let k = side * delta;
            assert!((f(k - h) - f(k + h)).abs() < 1e-6);
            let left = (f(k - h) - f(k - 2.0 * h)) / h;
            let right = (f(k + 2.0 * h) - f(k + h)) / h;
            assert!((left - right).abs() < 1e-6, "delta {delta} side {side}");
            assert!((left - side * delta).abs() < 1e-6);
        }
    }
}

#[test]
fn total_with_unit_weights() {
    let c = LossComponents {
        recon: 1.0,
        codebook: 2.0,
        commit: 3.0,
        adv: 4.0,
    };
    assert_eq!(c.total(&LossWeights::default()), 10.0);
    let only_recon = LossWeights {
        gamma: 0.0,
        epsilon: 0.0,
        eta: 0.0,
        ..LossWeights::default()
    };
    assert_eq!(c.total(&only_recon), 1.0);
}

type Grads = BTreeMap<String, Tensor<f64>>;

fn objective_grads(model: &VcModel<f64>, batch: &[&Utterance], w: &LossWeights) -> [Grads; 5] {
    let mut tape = Tape::new();
    let g = batch_objective(&mut tape, model, batch, w, Binding::Train, None).unwrap();
    let grads = |v| {
        let gr = tape.backward(v).unwrap();
        tape.param_grads(&gr)
    };
    [grads(g.total), grads(g.recon), grads(g.codebook), grads(g.commit), grads(g.adv)]
}

#[test]
fn total_gradient_is_the_weighted_sum() {
    let run = common::load_config("toy.cfg");
    let model = VcModel::<f64>::new(run.model.clone()).unwrap();
    let batch = random_batch(&run.model, 12, 2, 4).unwrap();
    let refs: Vec<&Utterance> = batch.iter().collect();
    let w = LossWeights {
        gamma: 0.7,
        epsilon: 1.9,
        eta: 0.35,
        adv_grad_weight: 0.4,
        ..LossWeights::default()
    };
    let [total, recon, cb, cm, adv] = objective_grads(&model, &refs, &w);
    let zero = |g: &Grads, n: &str, len: usize| g.get(n).map_or(vec![0.0; len], |t| t.data().to_vec());
    for (name, t) in &total {
        let len = t.len();
        let (r, b, c, a) = (zero(&recon, name, len), zero(&cb, name, len), zero(&cm, name, len), zero(&adv, name, len));
        for i in 0..len {
            let want = r[i] + w.gamma * b[i] + w.epsilon * c[i] + w.eta * a[i];
            assert!((t.data()[i] - want).abs() <= 1e-10 * (1.0 + want.abs()), "{name}[{i}]");
        }
    }

    // with the auxiliary weights at zero only reconstruction remains
    let w0 = LossWeights {
        gamma: 0.0,
        epsilon: 0.0,
        eta: 0.0,
        ..w
    };
    let [total, recon, ..] = objective_grads(&model, &refs, &w0);
    for (name, t) in &total {
        if name.starts_with("enc.") || name.starts_with("dec.") {
            assert_eq!(Some(t), recon.get(name), "{name}");
        }
    }
}

#[test]
fn adam_zero_gradient_is_a_no_op() {
    let mut p = ParamStore::new();
    p.insert("w", Tensor::new(vec![3], vec![1.0f64, -2.0, 0.5]).unwrap());
    let before = p.clone();
    let mut opt = Adam::new(1e-3, 0.9, 0.999, 1e-8);
    let mut g = BTreeMap::new();
    g.insert("w".to_string(), Tensor::zeros(&[3]));
    opt.step(&mut p, &g).unwrap();
    assert_eq!(p, before);
}

#[test]
fn adam_first_step_by_hand() {
    let (lr, eps) = (0.01, 1e-8);
    let mut p = ParamStore::new();
    p.insert("w", Tensor::new(vec![2], vec![1.0f64, 1.0]).unwrap());
    let mut opt = Adam::new(lr, 0.9, 0.999, eps);
    let mut g = BTreeMap::new();
    g.insert("w".to_string(), Tensor::new(vec![2], vec![0.5, -4.0]).unwrap());
    opt.step(&mut p, &g).unwrap();
    // bias correction makes the first step −lr·g/(|g| + eps)
    let w = p.get("w").unwrap().data();
    assert!((w[0] - (1.0 - lr * 0.5 / (0.5 + eps))).abs() < 1e-12);
    assert!((w[1] - (1.0 + lr * 4.0 / (4.0 + eps))).abs() < 1e-12);
}

#[test]
fn ledger_line_format() {
    let r = LedgerRecord {
        step: 12,
        recon: 0.123456789012,
        codebook: 1.0,
        commit: 2.5e-7,
        adv: 1234567890.0,
        speaker_accuracy: 0.5,
        perplexity: 17.25,
    };
    assert_eq!(r.to_line(), "12\t0.123456789\t1\t2.5e-07\t1.23456789e+09\t0.5\t17.25");
    assert_eq!(LedgerRecord::parse_line(&r.to_line()).unwrap().step, 12);
    assert_eq!(format_sig9(0.0), "0");
    assert_eq!(format_sig9(-0.000123456789123), "-0.000123456789");
}

#[test]
fn ledger_rejects_repeated_steps_and_non_finite_values() {
    let r = |step, recon| LedgerRecord {
        step,
        recon,
        codebook: 0.0,
        commit: 0.0,
        adv: 0.0,
        speaker_accuracy: 0.0,
        perplexity: 1.0,
    };
    let mut l = MetricsLedger::new();
    l.push(r(0, 1.0)).unwrap();
    l.push(r(3, 1.0)).unwrap();
    assert!(l.push(r(3, 1.0)).is_err());
    assert!(l.push(r(4, f64::NAN)).is_err());
    assert_eq!(MetricsLedger::parse(&l.to_text()).unwrap(), l);
}

#[test]
fn overfit_probe_drops_below_a_tenth() {
    let (_, _, out) = common::overfit(0);
    let first = out.ledger.records()[0].recon;
    let last = out.ledger.final_window(0.1).unwrap().recon;
    assert!(last < 0.1 * first, "recon {first} → {last}");
}

#[test]
fn frozen_encoder_is_bit_identical_after_1000_steps() {
    let mut run = common::load_config("toy.cfg");
    run.model.encoder.frozen = true;
    run.train.steps = 1000;
    let data = run.dataset().unwrap();
    let start = run.build_model::<f32>().unwrap();
    let out = train(start.clone(), &data, &run.train, None).unwrap();
    let changed = |prefix: &str| {
        out.model
            .params()
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .any(|(n, t)| t != start.params().get(n).unwrap())
    };
    assert!(!changed("enc."));
    assert!(changed("dec.") && changed("vq.") && changed("spk."));
}

#[test]
fn same_seed_same_files() {
    let run = common::load_config("toy.cfg");
    let data = run.dataset().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let go = |name: &str| {
        let d = dir.path().join(name);
        let out = train(
            run.build_model::<f32>().unwrap(),
            &data,
            &run.train,
            Some(RunOutput { dir: &d, run: &run }),
        )
        .unwrap();
        let ledger = std::fs::read(d.join("ledger.tsv")).unwrap();
        let ckpt = std::fs::read(out.checkpoints.last().unwrap()).unwrap();
        (out.ledger, ledger, ckpt)
    };
    let a = go("a");
    let b = go("b");
    assert_eq!(a, b);
    assert_eq!(a.1, a.0.to_text().into_bytes());
    assert_eq!(a.0.len() as u64, run.train.steps);
}

#[test]
fn reference_table_selects_point_one() {
    let r = select_model(&reference(), &SelectionThresholds::default()).unwrap();
    assert!(r.criteria_met);
    assert_eq!(r.selected().label, "0.1");
    let passing: Vec<&str> = r.verdicts.iter().filter(|v| v.passes()).map(|v| v.summary.label.as_str()).collect();
    assert_eq!(passing, ["0.1", "0.5"]);

    let from_file = read_summary_table(common::config_path("reference_sweep.tsv")).unwrap();
    let r = select_model(&from_file, &SelectionThresholds::for_codebook(128)).unwrap();
    assert_eq!(r.selected().label, "0.1");
}

#[test]
fn trends_hold_on_the_reference_values() {
    assert!(TrendCheck::evaluate(&reference()).all());
}

#[test]
fn selection_edge_cases() {
    let r = select_model(&[cand("only", 0.9, 3.0, 1.0)], &SelectionThresholds::default()).unwrap();
    assert_eq!(r.selected().label, "only");
    assert!(!r.criteria_met && !r.verdicts[0].acc_ok && !r.verdicts[0].ppl_ok);

    let all_fail = [cand("a", 0.5, 10.0, 0.2), cand("b", 0.3, 10.0, 0.9), cand("c", 0.3, 10.0, 0.4)];
    let r = select_model(&all_fail, &SelectionThresholds::default()).unwrap();
    assert!(!r.criteria_met);
    assert_eq!(r.ranking, vec![2, 1, 0]);
    assert!(r.to_text().contains("no candidate meets criteria"));
    assert!(select_model(&[], &SelectionThresholds::default()).is_err());
}

proptest! {
    #[test]
    fn huber_is_symmetric_and_bounded(d in -50.0f64..50.0, delta in 0.01f64..10.0) {
        let a = huber(&[d], &[0.0], delta).unwrap();
        prop_assert_eq!(a, huber(&[-d], &[0.0], delta).unwrap());
        prop_assert!(a >= 0.0 && a <= 0.5 * d * d + 1e-12);
    }

    #[test]
    fn selection_is_deterministic(rows in prop::collection::vec((0.0f64..1.0, 1.0f64..128.0, 0.0f64..1.0), 1..8)) {
        let c: Vec<CandidateSummary> = rows.iter().enumerate().map(|(i, &(a, p, r))| cand(&i.to_string(), a, p, r)).collect();
        let t = SelectionThresholds::default();
        let x = select_model(&c, &t).unwrap();
        prop_assert_eq!(&x, &select_model(&c, &t).unwrap());
        let mut seen = x.ranking.clone();
        seen.sort();
        prop_assert_eq!(seen, (0..c.len()).collect::<Vec<_>>());
    }
}
