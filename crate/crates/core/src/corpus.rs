//! Utterance collections: directory corpora and the synthetic desk corpus.
//!
//! Directory corpora are laid out as `<corpus>/<speaker name>/*.{wav,melf}`
//! with a speaker map of `id<TAB>name` lines, ids dense from 0.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{compute_log_mel, read_melf, read_wav, FeatureConfig, MelSpectrogram, Waveform};

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub name: String,
    pub speaker: usize,
    pub mel: MelSpectrogram,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub utterances: Vec<Utterance>,
    pub speaker_names: Vec<String>,
}

impl Dataset {
    pub fn n_speakers(&self) -> usize {
        self.speaker_names.len()
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Per-bin mean and standard deviation over every frame.
    pub fn feature_stats(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let m = self
            .utterances
            .first()
            .map(|u| u.mel.n_mels())
            .ok_or_else(|| Error::invalid("empty dataset"))?;
        let mut sum = vec![0.0f64; m];
        let mut sq = vec![0.0f64; m];
        let mut n = 0usize;
        for u in &self.utterances {
            for t in 0..u.mel.n_frames() {
                for (j, &v) in u.mel.frame(t).iter().enumerate() {
                    sum[j] += v as f64;
                    sq[j] += (v as f64) * (v as f64);
                }
                n += 1;
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, mu)| (q / n as f64 - mu * mu).max(0.0).sqrt().max(1e-3))
            .collect();
        Ok((mean, std))
    }

    /// Per-speaker mean spectral envelope (mean over all frames, per mel bin).
    pub fn speaker_envelopes(&self) -> Vec<Vec<f64>> {
        let m = self.utterances.first().map_or(0, |u| u.mel.n_mels());
        let mut acc = vec![vec![0.0f64; m]; self.n_speakers()];
        let mut n = vec![0usize; self.n_speakers()];
        for u in &self.utterances {
            for t in 0..u.mel.n_frames() {
                for (a, &v) in acc[u.speaker].iter_mut().zip(u.mel.frame(t)) {
                    *a += v as f64;
                }
            }
            n[u.speaker] += u.mel.n_frames();
        }
        for (a, &k) in acc.iter_mut().zip(&n) {
            a.iter_mut().for_each(|v| *v /= k.max(1) as f64);
        }
        acc
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n_speakers: usize,
    pub utterances_per_speaker: usize,
    pub frames: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_speakers: 6,
            utterances_per_speaker: 10,
            frames: 32,
            seed: 7,
        }
    }
}

/// Vowel-like formant targets shared by every synthetic speaker.
const PHONES: [[f64; 3]; 8] = [
    [730.0, 1090.0, 2440.0],
    [270.0, 2290.0, 3010.0],
    [530.0, 1840.0, 2480.0],
    [300.0, 870.0, 2240.0],
    [660.0, 1720.0, 2410.0],
    [490.0, 1350.0, 1690.0],
    [570.0, 840.0, 2410.0],
    [440.0, 1020.0, 2240.0],
];

/// Unvoiced segments as `(low Hz, high Hz, amplitude)` noise bands:
/// near-silence, two fricatives and a nasal murmur.
const NOISE_PHONES: [(f64, f64, f64); 4] = [
    (200.0, 7000.0, 0.002),
    (4000.0, 7400.0, 0.35),
    (2000.0, 4500.0, 0.35),
    (150.0, 500.0, 0.5),
];

const N_PHONES: usize = PHONES.len() + NOISE_PHONES.len();

/// Adds noise shaped to `[lo, hi]` as a sum of random-phase sinusoids.
fn band_noise(out: &mut [f64], lo: f64, hi: f64, gain: f64, sr: f64, rng: &mut ChaCha8Rng) {
    let partials: Vec<(f64, f64)> = (0..48)
        .map(|_| (rng.gen_range(lo..hi), rng.gen_range(0.0..2.0 * PI)))
        .collect();
    let norm = gain * 4.0 / (partials.len() as f64).sqrt();
    for (i, v) in out.iter_mut().enumerate() {
        let t = i as f64 / sr;
        *v += norm * partials.iter().map(|&(f, ph)| (2.0 * PI * f * t + ph).sin()).sum::<f64>();
    }
}

#[derive(Debug, Clone)]
struct SpeakerVoice {
    f0: f64,
    formant_scale: f64,
    tilt_per_octave: f64,
    resonance_hz: f64,
    resonance_gain: f64,
}

fn speaker_voice(s: usize, n: usize, rng: &mut ChaCha8Rng) -> SpeakerVoice {
    let pos = if n > 1 { s as f64 / (n - 1) as f64 } else { 0.5 };
    SpeakerVoice {
        f0: 95.0 + 140.0 * pos + rng.gen_range(-5.0..5.0),
        formant_scale: 0.85 + 0.3 * ((s * 7 + 3) % n.max(1)) as f64 / n.max(2) as f64,
        tilt_per_octave: rng.gen_range(-0.5..-0.2),
        resonance_hz: 2600.0 + 3800.0 * ((s * 5 + 1) % n.max(1)) as f64 / n.max(1) as f64,
        resonance_gain: rng.gen_range(0.6..1.0),
    }
}

fn envelope(f: f64, formants: &[f64; 3], v: &SpeakerVoice) -> f64 {
    let peak = |center: f64, bw: f64| 1.0 / (1.0 + ((f - center) / bw).powi(2));
    let formant_sum: f64 = formants
        .iter()
        .zip([1.0, 0.6, 0.35])
        .map(|(&fc, gain)| gain * peak(fc * v.formant_scale, 90.0 + 0.05 * fc))
        .sum();
    let octaves = (f / 100.0).max(1.0).log2();
    let tilt = (v.tilt_per_octave * octaves).exp();
    tilt * (formant_sum + v.resonance_gain * peak(v.resonance_hz, 350.0) + 0.02)
}

/// Harmonic-stack "speech": a phone sequence of vowels (shared formant
/// targets) and noise segments drawn from a speaker-specific phone
/// distribution; each speaker adds its own pitch range, formant scaling,
/// spectral tilt and a fixed high-band resonance, so speaker identity is
/// present in the features.
pub fn synthetic_corpus(cfg: &SyntheticConfig, features: &FeatureConfig) -> Result<Dataset> {
    if cfg.n_speakers == 0 || cfg.utterances_per_speaker == 0 || cfg.frames == 0 {
        return Err(Error::Config("data.synthetic: counts must be positive".into()));
    }
    let sr = features.sample_rate_hz as f64;
    let hop = features.hop_len();
    let n_samples = features.window_len() + (cfg.frames - 1) * hop;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let voices: Vec<SpeakerVoice> = (0..cfg.n_speakers)
        .map(|s| speaker_voice(s, cfg.n_speakers, &mut rng))
        .collect();
    // each speaker favours some phones, as different readers favour different texts
    let phone_dists: Vec<WeightedIndex<f64>> = (0..cfg.n_speakers)
        .map(|_| {
            let w: Vec<f64> = (0..N_PHONES).map(|_| (1.2 * rng.gen_range(-1.5..1.5f64)).exp()).collect();
            WeightedIndex::new(w).expect("positive weights")
        })
        .collect();
    let mut utterances = Vec::new();
    for (s, voice) in voices.iter().enumerate() {
        for u in 0..cfg.utterances_per_speaker {
            // phone sequence over hop-sized blocks
            let n_blocks = n_samples.div_ceil(hop);
            let mut blocks = Vec::with_capacity(n_blocks);
            while blocks.len() < n_blocks {
                let phone = phone_dists[s].sample(&mut rng);
                let dur = rng.gen_range(4..10);
                blocks.extend(std::iter::repeat(phone).take(dur));
            }
            let vibrato = rng.gen_range(0.0..2.0 * PI);
            let f0_shift = rng.gen_range(0.85..1.15);
            let mut phases = vec![0.0f64; 96];
            let mut samples = vec![0.0f64; n_samples];
            let mut b = 0;
            while b < n_blocks {
                let phone = blocks[b];
                let end = (b..n_blocks).find(|&i| blocks[i] != phone).unwrap_or(n_blocks);
                let span = b * hop..(end * hop).min(n_samples);
                match phone {
                    p if p < PHONES.len() => {
                        for blk in b..end {
                            let f0 = voice.f0 * f0_shift * (1.0 + 0.05 * (vibrato + blk as f64 * 0.2).sin());
                            let n_harm = ((features.f_max_hz / f0) as usize).min(phases.len());
                            let amps: Vec<f64> = (1..=n_harm)
                                .map(|k| envelope(k as f64 * f0, &PHONES[p], voice))
                                .collect();
                            for i in blk * hop..((blk + 1) * hop).min(n_samples) {
                                let mut acc = 0.0;
                                for (k, (ph, &a)) in phases.iter_mut().zip(&amps).enumerate() {
                                    *ph += 2.0 * PI * (k + 1) as f64 * f0 / sr;
                                    acc += a * ph.sin();
                                }
                                samples[i] = acc;
                            }
                        }
                    }
                    p => {
                        let (lo, hi, gain) = NOISE_PHONES[p - PHONES.len()];
                        let scale = voice.formant_scale.sqrt();
                        band_noise(&mut samples[span], lo * scale, hi * scale, gain, sr, &mut rng);
                    }
                }
                b = end;
            }
            let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-9);
            let wave: Vec<f32> = samples
                .iter()
                .map(|v| (0.5 * v / peak + rng.gen_range(-1e-4..1e-4)) as f32)
                .collect();
            let wave = Waveform::new(wave, features.sample_rate_hz)?;
            utterances.push(Utterance {
                name: format!("spk{s}_utt{u:03}"),
                speaker: s,
                mel: compute_log_mel(&wave, features)?,
            });
        }
    }
    Ok(Dataset {
        utterances,
        speaker_names: (0..cfg.n_speakers).map(|s| format!("spk{s}")).collect(),
    })
}

/// Parses `id<TAB>name` lines; ids must be dense from 0.
pub fn read_speaker_map(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, name) = line.split_once('\t').ok_or_else(|| {
            Error::Config(format!("{}:{}: expected `id<TAB>name`", path.display(), lineno + 1))
        })?;
        let id: usize = id
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{}:{}: bad speaker id `{id}`", path.display(), lineno + 1)))?;
        entries.push((id, name.trim().to_string()));
    }
    entries.sort();
    for (expect, (id, _)) in entries.iter().enumerate() {
        if *id != expect {
            return Err(Error::Config(format!(
                "{}: speaker ids must be dense from 0 (missing or duplicate id near {expect})",
                path.display()
            )));
        }
    }
    Ok(entries.into_iter().map(|(_, n)| n).collect())
}

/// Sorted `.wav` / `.melf` files directly under `dir`.
pub fn feature_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && matches!(p.extension().and_then(|e| e.to_str()), Some("wav" | "melf")))
        .collect();
    files.sort();
    Ok(files)
}

/// Reads a `.melf` directly or featurizes a `.wav`.
pub fn load_features(path: &Path, features: &FeatureConfig) -> Result<MelSpectrogram> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("melf") => {
            let mel = read_melf(path)?;
            if mel.n_mels() != features.n_mels {
                return Err(Error::invalid(format!(
                    "{}: {} mel bins, expected {}",
                    path.display(),
                    mel.n_mels(),
                    features.n_mels
                )));
            }
            Ok(mel)
        }
        Some("wav") => compute_log_mel(&read_wav(path)?, features),
        _ => Err(Error::invalid(format!("{}: not a .wav or .melf file", path.display()))),
    }
}

pub fn load_corpus_dir(dir: &Path, speaker_names: &[String], features: &FeatureConfig) -> Result<Dataset> {
    let mut utterances = Vec::new();
    for (id, name) in speaker_names.iter().enumerate() {
        let sub = dir.join(name);
        if !sub.is_dir() {
            return Err(Error::Config(format!("speaker directory {} not found", sub.display())));
        }
        for f in feature_files(&sub)? {
            let mel = load_features(&f, features)?;
            utterances.push(Utterance {
                name: format!("{name}/{}", f.file_stem().and_then(|s| s.to_str()).unwrap_or("")),
                speaker: id,
                mel,
            });
        }
    }
    if utterances.is_empty() {
        return Err(Error::invalid(format!("corpus {} has no utterances", dir.display())));
    }
    Ok(Dataset {
        utterances,
        speaker_names: speaker_names.to_vec(),
    })
}
