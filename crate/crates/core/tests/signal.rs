use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vcaug_core::signal::{
    compute_log_mel, frame_count, melf_bytes, parse_melf, read_melf, read_wav, spec_augment, write_melf,
    FeatureConfig, MelSpectrogram, SpecAugmentPolicy, Waveform, LOG_FLOOR, MELF_HEADER_LEN,
};

fn tone(hz: f64, seconds: f64) -> Waveform {
    let n = (16_000.0 * seconds) as usize;
    let s = (0..n)
        .map(|i| (0.5 * (2.0 * std::f64::consts::PI * hz * i as f64 / 16_000.0).sin()) as f32)
        .collect();
    Waveform::new(s, 16_000).unwrap()
}

fn random_mel(frames: usize, mels: usize, seed: u64) -> MelSpectrogram {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    MelSpectrogram::new(frames, mels, (0..frames * mels).map(|_| rng.gen_range(-20.0..5.0)).collect()).unwrap()
}

#[test]
fn one_second_is_98_frames() {
    let cfg = FeatureConfig::default();
    assert_eq!((cfg.window_len(), cfg.hop_len()), (400, 160));
    assert_eq!(1 + (16_000 - 400) / 160, 98);
    let mel = compute_log_mel(&tone(440.0, 1.0), &cfg).unwrap();
    assert_eq!((mel.n_frames(), mel.n_mels()), (98, 80));
}

#[test]
fn silence_is_the_log_floor() {
    let w = Waveform::new(vec![0.0; 16_000], 16_000).unwrap();
    let mel = compute_log_mel(&w, &FeatureConfig::default()).unwrap();
    let floor = (1e-10f64).ln() as f32;
    assert!(mel.data().iter().all(|&v| v == floor));
}

#[test]
fn tone_peaks_in_the_bracketing_bin() {
    // HTK mel, 82 edges evenly spaced in mel over 125–7600 Hz
    let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
    let hz = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
    let (lo, hi) = (mel(125.0), mel(7600.0));
    let edges: Vec<f64> = (0..82).map(|i| hz(lo + (hi - lo) * i as f64 / 81.0)).collect();
    let centers = &edges[1..81];
    let m = centers.iter().rposition(|&c| c <= 1000.0).unwrap();
    assert!(centers[m] <= 1000.0 && 1000.0 < centers[m + 1]);
    // the triangle reaching higher at 1 kHz wins
    let rise = (1000.0 - edges[m + 1]) / (edges[m + 2] - edges[m + 1]);
    let expected = if rise > 0.5 { m + 1 } else { m };

    let out = compute_log_mel(&tone(1000.0, 0.5), &FeatureConfig::default()).unwrap();
    for t in 0..out.n_frames() {
        let f = out.frame(t);
        let arg = (0..f.len()).max_by(|&a, &b| f[a].total_cmp(&f[b])).unwrap();
        assert_eq!(arg, expected, "frame {t}");
    }
}

#[test]
fn melf_round_trip_and_size() {
    let dir = tempfile::tempdir().unwrap();
    let mel = random_mel(7, 80, 3);
    let p = dir.path().join("a.melf");
    write_melf(&p, &mel).unwrap();
    let back = read_melf(&p).unwrap();
    assert_eq!(back.n_frames(), 7);
    let bits = |m: &MelSpectrogram| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&back), bits(&mel));

    let big = MelSpectrogram::new(98, 80, vec![0.0; 98 * 80]).unwrap();
    assert_eq!(MELF_HEADER_LEN, 16);
    assert_eq!(melf_bytes(&big).len(), 16 + 98 * 80 * 4);
}

#[test]
fn melf_rejects_bad_magic_and_truncation() {
    let mut b = melf_bytes(&random_mel(2, 4, 0));
    assert!(parse_melf(&b[..b.len() - 1], "t").is_err());
    b[0] = b'X';
    assert!(parse_melf(&b, "t").is_err());
}

#[test]
fn pcm_scaling() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.wav");
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: 16_000,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(&p, spec).unwrap();
    for s in [-32768i16, 32767, 0] {
        w.write_sample(s).unwrap();
    }
    w.finalize().unwrap();
    let wave = read_wav(&p).unwrap();
    assert_eq!(wave.samples(), &[-1.0, 32767.0 / 32768.0, 0.0]);
}

#[test]
fn stereo_wav_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("s.wav");
    let spec = hound::WavSpec {
        channels: 2,
        sample_rate: 16_000,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(&p, spec).unwrap();
    w.write_sample(0i16).unwrap();
    w.write_sample(0i16).unwrap();
    w.finalize().unwrap();
    assert!(read_wav(&p).is_err());
}

#[test]
fn zero_masks_are_identity() {
    let mel = random_mel(20, 80, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    assert_eq!(spec_augment(&mel, &SpecAugmentPolicy::identity(), &mut rng), mel);
}

#[test]
fn one_freq_mask_is_one_band() {
    let policy = SpecAugmentPolicy {
        n_freq_masks: 1,
        max_freq_width: 8,
        n_time_masks: 0,
        max_time_width: 0,
        mask_value: 0.0,
    };
    // no input value equals the mask value
    let mel = MelSpectrogram::new(10, 80, (0..800).map(|i| 1.0 + (i % 13) as f32).collect()).unwrap();
    for seed in 0..200 {
        let out = spec_augment(&mel, &policy, &mut ChaCha8Rng::seed_from_u64(seed));
        let masked: Vec<usize> = (0..80).filter(|&m| out.at(0, m) == 0.0).collect();
        assert!(masked.len() <= 8);
        if let (Some(&a), Some(&b)) = (masked.first(), masked.last()) {
            assert_eq!(b - a + 1, masked.len(), "band not contiguous");
        }
        for t in 0..10 {
            for m in 0..80 {
                if masked.contains(&m) {
                    assert_eq!(out.at(t, m), 0.0);
                } else {
                    assert_eq!(out.at(t, m).to_bits(), mel.at(t, m).to_bits());
                }
            }
        }
    }
}

#[test]
fn full_width_time_mask() {
    let policy = SpecAugmentPolicy {
        n_freq_masks: 0,
        max_freq_width: 0,
        n_time_masks: 1,
        max_time_width: 12,
        mask_value: -3.0,
    };
    let mel = random_mel(12, 16, 5);
    let mut saw_full = false;
    for seed in 0..300 {
        let out = spec_augment(&mel, &policy, &mut ChaCha8Rng::seed_from_u64(seed));
        let masked: Vec<usize> = (0..12).filter(|&t| out.frame(t).iter().all(|&v| v == -3.0)).collect();
        saw_full |= masked.len() == 12;
        for t in (0..12).filter(|t| !masked.contains(t)) {
            assert_eq!(out.frame(t), mel.frame(t));
        }
    }
    assert!(saw_full);
}

proptest! {
    #[test]
    fn framing_formula(n in 400usize..40_000, hop in 1usize..400) {
        prop_assert_eq!(frame_count(n, 400, hop), Some(1 + (n - 400) / hop));
    }

    #[test]
    fn log_floor_holds(seed in 0u64..1000, amp in 0.0f32..1.0) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = (0..2000).map(|_| amp * rng.gen_range(-1.0f32..1.0)).collect();
        let mel = compute_log_mel(&Waveform::new(s, 16_000).unwrap(), &FeatureConfig::default()).unwrap();
        let floor = LOG_FLOOR.ln() as f32;
        prop_assert!(mel.data().iter().all(|&v| v >= floor));
    }

    #[test]
    fn spec_augment_shape_determinism_idempotence(seed in 0u64..10_000, t in 1usize..40, nf in 0usize..3, nt in 0usize..3) {
        let policy = SpecAugmentPolicy { n_freq_masks: nf, max_freq_width: 8, n_time_masks: nt, max_time_width: 10, mask_value: 0.0 };
        let mel = random_mel(t, 20, seed);
        let a = spec_augment(&mel, &policy, &mut ChaCha8Rng::seed_from_u64(seed));
        let b = spec_augment(&mel, &policy, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!((a.n_frames(), a.n_mels()), (t, 20));
        prop_assert_eq!(&a, &b);
        // masking the same regions again changes nothing
        let again = spec_augment(&a, &policy, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(again, a);
    }
}
