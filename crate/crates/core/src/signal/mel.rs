use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{MelSpectrogram, Waveform};
use crate::error::{Error, Result};

/// Natural-log floor applied to mel magnitudes.
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub n_mels: usize,
    pub frame_size_ms: f64,
    pub frame_shift_ms: f64,
    pub f_min_hz: f64,
    pub f_max_hz: f64,
    pub sample_rate_hz: u32,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            n_mels: 80,
            frame_size_ms: 25.0,
            frame_shift_ms: 10.0,
            f_min_hz: 125.0,
            f_max_hz: 7600.0,
            sample_rate_hz: 16_000,
        }
    }
}

impl FeatureConfig {
    pub fn window_len(&self) -> usize {
        (self.sample_rate_hz as f64 * self.frame_size_ms / 1000.0).round() as usize
    }

    pub fn hop_len(&self) -> usize {
        (self.sample_rate_hz as f64 * self.frame_shift_ms / 1000.0).round() as usize
    }

    pub fn fft_len(&self) -> usize {
        self.window_len().next_power_of_two()
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Frames produced without tail padding: `1 + floor((n − window)/hop)`.
pub fn frame_count(n_samples: usize, window: usize, hop: usize) -> Option<usize> {
    (n_samples >= window && hop > 0).then(|| 1 + (n_samples - window) / hop)
}

/// Triangular HTK-scale filters over the positive FFT bins.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    /// `n_mels × n_bins` weights.
    weights: Vec<f64>,
    n_bins: usize,
    centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, fft_len: usize, sample_rate_hz: u32, f_min: f64, f_max: f64) -> Result<Self> {
        let nyquist = sample_rate_hz as f64 / 2.0;
        if n_mels == 0 || !(0.0..f_max).contains(&f_min) || f_max > nyquist {
            return Err(Error::invalid(format!(
                "bad filterbank: {n_mels} mels over {f_min}–{f_max} Hz at {sample_rate_hz} Hz"
            )));
        }
        let n_bins = fft_len / 2 + 1;
        let (lo, hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let mut weights = vec![0.0; n_mels * n_bins];
        for m in 0..n_mels {
            let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..n_bins {
                let f = k as f64 * sample_rate_hz as f64 / fft_len as f64;
                let w = if f > left && f <= center {
                    (f - left) / (center - left)
                } else if f > center && f < right {
                    (right - f) / (right - center)
                } else {
                    0.0
                };
                weights[m * n_bins + k] = w;
            }
        }
        Ok(Self {
            weights,
            n_bins,
            centers_hz: edges[1..=n_mels].to_vec(),
        })
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn apply(&self, magnitude: &[f64], out: &mut [f64]) {
        for (m, o) in out.iter_mut().enumerate() {
            let row = &self.weights[m * self.n_bins..(m + 1) * self.n_bins];
            *o = row.iter().zip(magnitude).map(|(w, x)| w * x).sum();
        }
    }
}

/// Hann window → magnitude spectrum → mel filterbank → `ln(max(x, 1e-10))`.
pub fn compute_log_mel(wave: &Waveform, cfg: &FeatureConfig) -> Result<MelSpectrogram> {
    if wave.sample_rate_hz() != cfg.sample_rate_hz {
        return Err(Error::invalid(format!(
            "waveform is {} Hz, feature config expects {} Hz",
            wave.sample_rate_hz(),
            cfg.sample_rate_hz
        )));
    }
    let window = cfg.window_len();
    let hop = cfg.hop_len();
    if window == 0 || hop == 0 {
        return Err(Error::invalid("frame size and shift must cover at least one sample"));
    }
    let n_frames = frame_count(wave.len(), window, hop).ok_or_else(|| {
        Error::invalid(format!(
            "waveform has {} samples, shorter than one {window}-sample window",
            wave.len()
        ))
    })?;
    let fft_len = cfg.fft_len();
    let bank = MelFilterbank::new(cfg.n_mels, fft_len, cfg.sample_rate_hz, cfg.f_min_hz, cfg.f_max_hz)?;
    // periodic Hann
    let hann: Vec<f64> = (0..window)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / window as f64).cos())
        .collect();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(fft_len);
    let mut buf = vec![Complex::new(0.0, 0.0); fft_len];
    let mut mag = vec![0.0; bank.n_bins()];
    let mut mel = vec![0.0; cfg.n_mels];
    let mut data = Vec::with_capacity(n_frames * cfg.n_mels);
    let samples = wave.samples();
    for t in 0..n_frames {
        let frame = &samples[t * hop..t * hop + window];
        for (i, b) in buf.iter_mut().enumerate() {
            *b = match frame.get(i) {
                Some(&s) => Complex::new(s as f64 * hann[i], 0.0),
                None => Complex::new(0.0, 0.0),
            };
        }
        fft.process(&mut buf);
        for (m, b) in mag.iter_mut().zip(&buf) {
            *m = b.norm();
        }
        bank.apply(&mag, &mut mel);
        data.extend(mel.iter().map(|&v| v.max(LOG_FLOOR).ln() as f32));
    }
    MelSpectrogram::new(n_frames, cfg.n_mels, data)
}
