mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vcaug_core::autodiff::{GradCheckOptions, Tape};
use vcaug_core::model::{
    checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint, Binding, ModelConfig, VcModel,
    ENCODER_PREFIXES,
};
use vcaug_core::signal::MelSpectrogram;
use vcaug_core::training::{check_model_gradients, train};

fn mel(frames: usize, mels: usize, seed: u64) -> MelSpectrogram {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    MelSpectrogram::new(frames, mels, (0..frames * mels).map(|_| rng.gen_range(-8.0..2.0)).collect()).unwrap()
}

fn toy() -> ModelConfig {
    common::load_config("toy.cfg").model
}

#[test]
fn encoder_length_is_ceil_quarter() {
    let model = VcModel::<f32>::new(toy()).unwrap();
    for (t, want) in [(98, 25), (4, 1), (5, 2), (12, 3), (13, 4)] {
        let z = model.encode_values(&mel(t, 16, t as u64)).unwrap();
        assert_eq!(z.shape(), &[want, 8], "T = {t}");
        assert_eq!(want, t.div_ceil(4));
    }
    assert!(model.encode_values(&mel(3, 16, 0)).is_err());
}

#[test]
fn speaker_concat_widths() {
    let cfg = common::load_config("desk.cfg").model;
    let model = VcModel::<f32>::new(cfg.clone()).unwrap();
    let mut tape = Tape::new();
    let z = model.encode(&mut tape, &mel(98, 80, 0), Binding::Inference).unwrap();
    assert_eq!(tape.shape(z), &[25, 64]);
    let x = model.embed_and_concat(&mut tape, z, 3, Binding::Inference).unwrap();
    assert_eq!(tape.shape(x), &[25, 64 + 256]);
    // every frame carries the same speaker row
    let v = tape.value(x);
    for t in 1..25 {
        assert_eq!(&v.row(t)[64..], &v.row(0)[64..]);
    }
    assert!(model.embed_and_concat(&mut tape, z, cfg.n_speakers, Binding::Inference).is_err());
}

#[test]
fn decoder_output_is_trimmed_to_input_length() {
    let model = VcModel::<f32>::new(toy()).unwrap();
    for t in 4..=20 {
        let out = model.forward(&mel(t, 16, 100 + t as u64), 0).unwrap();
        assert_eq!((out.reconstruction.n_frames(), out.reconstruction.n_mels()), (t, 16));
    }
}

#[test]
fn decode_rejects_impossible_lengths() {
    let model = VcModel::<f32>::new(toy()).unwrap();
    let mut tape = Tape::new();
    let z = model.encode(&mut tape, &mel(8, 16, 0), Binding::Inference).unwrap();
    let x = model.embed_and_concat(&mut tape, z, 0, Binding::Inference).unwrap();
    assert!(model.decode(&mut tape, x, 9, Binding::Inference).is_err());
    assert!(model.decode(&mut tape, x, 0, Binding::Inference).is_err());
}

#[test]
fn forward_is_deterministic_and_speaker_only_reaches_the_decoder() {
    let model = VcModel::<f64>::new(toy()).unwrap();
    let m = mel(12, 16, 5);
    let a = model.forward(&m, 0).unwrap();
    let b = model.forward(&m, 0).unwrap();
    assert_eq!(a.reconstruction, b.reconstruction);
    assert_eq!(a.quantize, b.quantize);
    let c = model.forward(&m, 2).unwrap();
    assert_eq!(a.quantize, c.quantize);
    assert_eq!(a.adversary_logits, c.adversary_logits);
    assert_ne!(a.reconstruction, c.reconstruction);
    assert!(model.forward(&m, 3).is_err());
}

#[test]
fn same_seed_same_parameters() {
    let a = VcModel::<f32>::new(toy()).unwrap();
    let b = VcModel::<f32>::new(toy()).unwrap();
    assert_eq!(a, b);
    let mut cfg = toy();
    cfg.init_seed += 1;
    assert_ne!(a, VcModel::<f32>::new(cfg).unwrap());
}

#[test]
fn checkpoint_round_trip() {
    let run = common::load_config("toy.cfg");
    let model = run.build_model::<f32>().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.ckpt");
    save_checkpoint(&model, &run, 17, &p).unwrap();
    let ck = load_checkpoint(&p).unwrap();
    assert_eq!(ck.step, 17);
    assert_eq!(ck.config, run);
    assert_eq!(ck.model::<f32>().unwrap(), model);
    // writing the reloaded model gives the same bytes
    let again = checkpoint_bytes(&ck.model::<f32>().unwrap(), &ck.config, 17).unwrap();
    assert_eq!(again, std::fs::read(&p).unwrap());
    assert_eq!(ck.config_hash, run.hash().unwrap());
}

#[test]
fn tampered_checkpoints_are_rejected() {
    let run = common::load_config("toy.cfg");
    let model = run.build_model::<f32>().unwrap();
    let bytes = checkpoint_bytes(&model, &run, 0).unwrap();
    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    assert!(parse_checkpoint(&bad, "magic").is_err());
    let mut bad = bytes.clone();
    let last = bad.len() - 1;
    bad[last] ^= 0x01;
    assert!(parse_checkpoint(&bad, "payload").is_err());
    assert!(parse_checkpoint(&bytes[..bytes.len() - 3], "short").is_err());
    assert!(parse_checkpoint(&bytes, "ok").is_ok());
}

#[test]
fn encoder_import_copies_only_encoder_tensors() {
    let donor = VcModel::<f32>::new(toy()).unwrap();
    let mut cfg = toy();
    cfg.init_seed = 99;
    let mut model = VcModel::<f32>::new(cfg).unwrap();
    let before = model.clone();
    model.import_encoder(&donor).unwrap();
    for (name, t) in model.params().iter() {
        if ENCODER_PREFIXES.iter().any(|p| name.starts_with(p)) {
            assert_eq!(t, donor.params().get(name).unwrap(), "{name}");
        } else {
            assert_eq!(t, before.params().get(name).unwrap(), "{name}");
        }
    }

    let mut wider = toy();
    wider.encoder.model_dim = 16;
    let other = VcModel::<f32>::new(wider).unwrap();
    assert!(model.import_encoder(&other).is_err());
}

#[test]
fn frozen_encoder_survives_training() {
    let mut run = common::load_config("toy.cfg");
    run.model.encoder.frozen = true;
    run.train.steps = 100;
    let data = run.dataset().unwrap();
    let model = run.build_model::<f32>().unwrap();
    let start = model.clone();
    let out = train(model, &data, &run.train, None).unwrap();
    let mut decoder_moved = false;
    for (name, t) in out.model.params().iter() {
        let old = start.params().get(name).unwrap();
        if name.starts_with("enc.") {
            assert_eq!(t, old, "{name} changed");
        } else if name.starts_with("dec.") {
            decoder_moved |= t != old;
        }
    }
    assert!(decoder_moved);
}

#[test]
fn no_non_finite_outputs_over_100_seeds() {
    for seed in 0..100 {
        let mut cfg = toy();
        cfg.init_seed = seed;
        let model = VcModel::<f32>::new(cfg).unwrap();
        let out = model.forward(&mel(12, 16, seed), (seed % 3) as usize).unwrap();
        assert!(out.reconstruction.data().iter().all(|v| v.is_finite()), "seed {seed}");
        assert!(out.adversary_logits.iter().all(|v| v.is_finite()));
        assert!(out.quantize.perplexity >= 1.0 && out.quantize.perplexity <= 8.0);
    }
}

#[test]
fn full_objective_gradients_on_a_few_seeds() {
    let run = common::load_config("toy.cfg");
    let opts = GradCheckOptions {
        max_elems_per_param: Some(4),
        ..GradCheckOptions::default()
    };
    for seed in 0..3 {
        let report = check_model_gradients(&run.model, &run.train.loss, 12, seed, &opts).unwrap();
        assert!(report.max_rel_error() < 1e-4, "seed {seed}: {:?}", report.worst());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn shapes_hold_for_any_length(t in 4usize..40, spk in 0usize..3, seed in any::<u64>()) {
        let model = VcModel::<f32>::new(toy()).unwrap();
        let out = model.forward(&mel(t, 16, seed), spk).unwrap();
        prop_assert_eq!(out.reconstruction.n_frames(), t);
        prop_assert_eq!(out.quantize.indices.len(), t.div_ceil(4));
        prop_assert!(out.quantize.indices.iter().flatten().all(|&i| i < 8));
        prop_assert_eq!(out.adversary_logits.len(), 3);
    }
}
