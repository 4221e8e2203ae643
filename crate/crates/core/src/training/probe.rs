//! Finite-difference check of the full training objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{batch_objective, LossWeights};
use crate::autodiff::{check_gradients, GradCheckOptions, GradCheckReport, Tensor};
use crate::bottleneck::{assign, codebook_name, gather, FrozenAssignment};
use crate::corpus::Utterance;
use crate::error::Result;
use crate::model::{Binding, ModelConfig, VcModel};
use crate::signal::MelSpectrogram;

/// The current codebook assignment of `mel`, as a fixed offset from `z_e`.
pub fn freeze_assignment(model: &VcModel<f64>, mel: &MelSpectrogram) -> Result<FrozenAssignment<f64>> {
    let z_e = model.encode_values(mel)?;
    let names: Vec<String> = (0..model.config().bottleneck.n_groups).map(codebook_name).collect();
    let books: Vec<&Tensor<f64>> = names.iter().map(|n| model.params().get(n)).collect::<Result<_>>()?;
    let indices = assign(&z_e, &books)?;
    let z_q = gather(&indices, &books)?;
    let offset = Tensor::new(
        z_e.shape().to_vec(),
        z_q.data().iter().zip(z_e.data()).map(|(q, e)| q - e).collect(),
    )?;
    Ok(FrozenAssignment { indices, offset })
}

/// Random batch of `batch` utterances with `frames` frames and distinct speakers.
pub fn random_batch(cfg: &ModelConfig, frames: usize, batch: usize, seed: u64) -> Result<Vec<Utterance>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..batch)
        .map(|i| {
            let data = (0..frames * cfg.n_mels()).map(|_| rng.gen_range(-2.0f32..2.0)).collect();
            Ok(Utterance {
                name: format!("probe{i}"),
                speaker: i % cfg.n_speakers,
                mel: MelSpectrogram::new(frames, cfg.n_mels(), data)?,
            })
        })
        .collect()
}

/// Checks every trainable tensor's gradient of the total loss at `f64`
/// against central differences. The quantizer is linearized around the
/// current assignment so the objective is smooth in the parameters.
pub fn check_model_gradients(
    cfg: &ModelConfig,
    weights: &LossWeights,
    frames: usize,
    seed: u64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut cfg = cfg.clone();
    cfg.init_seed = seed;
    let model = VcModel::<f64>::new(cfg.clone())?;
    let batch = random_batch(&cfg, frames, 2.min(cfg.n_speakers).max(1), seed)?;
    let frozen = batch
        .iter()
        .map(|u| freeze_assignment(&model, &u.mel))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Utterance> = batch.iter().collect();
    let trainable = {
        let mut p = model.params().clone();
        let names: Vec<String> = p.names().filter(|n| !model.is_trainable(n)).cloned().collect();
        for n in names {
            p.remove(&n);
        }
        p
    };
    check_gradients(
        |tape, params| {
            let mut m = model.clone();
            for (name, t) in params.iter() {
                *m.params_mut().get_mut(name)? = t.clone();
            }
            Ok(batch_objective(tape, &m, &refs, weights, Binding::Train, Some(&frozen))?.total)
        },
        &trainable,
        opts,
    )
}
