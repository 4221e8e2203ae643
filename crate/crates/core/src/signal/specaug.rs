use rand::Rng;
use serde::{Deserialize, Serialize};

use super::MelSpectrogram;

/// Frequency and time masking; widths are drawn uniformly from `[0, max]`
/// (clamped to the axis extent) and starts uniformly over valid positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpecAugmentPolicy {
    pub n_freq_masks: usize,
    pub max_freq_width: usize,
    pub n_time_masks: usize,
    pub max_time_width: usize,
    pub mask_value: f32,
}

impl Default for SpecAugmentPolicy {
    fn default() -> Self {
        Self {
            n_freq_masks: 2,
            max_freq_width: 8,
            n_time_masks: 2,
            max_time_width: 10,
            mask_value: 0.0,
        }
    }
}

impl SpecAugmentPolicy {
    pub fn identity() -> Self {
        Self {
            n_freq_masks: 0,
            max_freq_width: 0,
            n_time_masks: 0,
            max_time_width: 0,
            mask_value: 0.0,
        }
    }
}

fn draw_band<R: Rng + ?Sized>(rng: &mut R, extent: usize, max_width: usize) -> (usize, usize) {
    let w = rng.gen_range(0..=max_width.min(extent));
    let start = rng.gen_range(0..=extent - w);
    (start, w)
}

pub fn spec_augment<R: Rng + ?Sized>(mel: &MelSpectrogram, policy: &SpecAugmentPolicy, rng: &mut R) -> MelSpectrogram {
    let mut out = mel.clone();
    let (t, m) = (mel.n_frames(), mel.n_mels());
    if t == 0 {
        return out;
    }
    let v = policy.mask_value;
    let data = out.data_mut();
    for _ in 0..policy.n_freq_masks {
        let (f0, w) = draw_band(rng, m, policy.max_freq_width);
        for frame in 0..t {
            data[frame * m + f0..frame * m + f0 + w].fill(v);
        }
    }
    for _ in 0..policy.n_time_masks {
        let (t0, w) = draw_band(rng, t, policy.max_time_width);
        data[t0 * m..(t0 + w) * m].fill(v);
    }
    out
}
