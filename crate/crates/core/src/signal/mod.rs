//! Waveform I/O, the log-mel frontend, and SpecAugment masking.

mod io;
mod mel;
mod specaug;

pub use io::{melf_bytes, parse_melf, read_melf, read_wav, write_melf, write_wav, MELF_HEADER_LEN, MELF_MAGIC, MELF_VERSION};
pub use mel::{compute_log_mel, frame_count, hz_to_mel, mel_to_hz, FeatureConfig, MelFilterbank, LOG_FLOOR};
pub use specaug::{spec_augment, SpecAugmentPolicy};

use crate::error::{Error, Result};

/// Mono audio with amplitudes in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
    sample_rate_hz: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate_hz: u32) -> Result<Self> {
        if sample_rate_hz == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if let Some(pos) = samples.iter().position(|s| !s.is_finite() || s.abs() > 1.0) {
            return Err(Error::invalid(format!(
                "sample {pos} is {} (must be finite and within [-1, 1])",
                samples[pos]
            )));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// `frames × n_mels` natural-log mel magnitudes, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    data: Vec<f32>,
    n_frames: usize,
    n_mels: usize,
}

impl MelSpectrogram {
    pub fn new(n_frames: usize, n_mels: usize, data: Vec<f32>) -> Result<Self> {
        if n_mels == 0 {
            return Err(Error::invalid("n_mels must be positive"));
        }
        if data.len() != n_frames * n_mels {
            return Err(Error::invalid(format!(
                "mel data has {} values, expected {n_frames}×{n_mels}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("mel spectrogram contains non-finite values"));
        }
        Ok(Self {
            data,
            n_frames,
            n_mels,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * self.n_mels..(t + 1) * self.n_mels]
    }

    pub fn at(&self, t: usize, m: usize) -> f32 {
        self.data[t * self.n_mels + m]
    }

    /// Mean over frames per mel bin.
    pub fn bin_means(&self) -> Vec<f64> {
        let mut acc = vec![0.0f64; self.n_mels];
        for t in 0..self.n_frames {
            for (a, &v) in acc.iter_mut().zip(self.frame(t)) {
                *a += v as f64;
            }
        }
        acc.iter_mut().for_each(|a| *a /= self.n_frames.max(1) as f64);
        acc
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }
}
