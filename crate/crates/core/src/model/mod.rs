//! The conversion network: conformer-style encoder with 4× subsampling,
//! grouped VQ bottleneck, speaker embedding concatenated across time, and a
//! BiLSTM + transposed-convolution decoder back to full frame rate.
//!
//! Sequences are time-major `[frames × channels]`. Input features are
//! standardized with per-bin statistics (`norm.mean`, `norm.std`) and the
//! decoder output is mapped back to log-mel units before the loss.

mod checkpoint;
mod config;

pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use config::{AdversaryConfig, BottleneckConfig, DecoderConfig, EncoderConfig, ModelConfig, SUBSAMPLE_FACTOR};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::adversary::adversary_logits;
use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::bottleneck::{self, FrozenAssignment, QuantizeOutput, QuantizeResult};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::signal::MelSpectrogram;

pub const NORM_MEAN: &str = "norm.mean";
pub const NORM_STD: &str = "norm.std";
pub const SPEAKER_EMBEDDING: &str = "spk.embedding";
/// Prefixes imported from a donor checkpoint in the frozen-encoder workflow.
pub const ENCODER_PREFIXES: [&str; 2] = ["enc.", "norm."];

const LN_EPS: f64 = 1e-5;

/// Whether parameters are bound as trainable leaves or as constants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binding {
    Train,
    Inference,
}

#[derive(Debug, Clone)]
pub struct GraphOptions<S> {
    pub binding: Binding,
    /// Gradient-reversal scale in front of the speaker classifier.
    pub adv_grad_weight: f64,
    /// Commitment weight inside the commitment loss.
    pub beta: f64,
    pub frozen_assignment: Option<FrozenAssignment<S>>,
}

impl<S> GraphOptions<S> {
    pub fn inference() -> Self {
        Self {
            binding: Binding::Inference,
            adv_grad_weight: 0.0,
            beta: 0.25,
            frozen_assignment: None,
        }
    }
}

/// Tape handles for one utterance.
#[derive(Debug, Clone)]
pub struct UttGraph {
    pub z_e: Var,
    pub quant: QuantizeOutput,
    /// Reconstruction in log-mel units, `[T × n_mels]`.
    pub recon: Var,
    pub logits: Var,
}

/// Inference result.
#[derive(Debug, Clone)]
pub struct Forward<S> {
    pub reconstruction: MelSpectrogram,
    pub quantize: QuantizeResult<S>,
    pub adversary_logits: Vec<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VcModel<S: Scalar> {
    config: ModelConfig,
    params: ParamStore<S>,
}

/// Deterministic per-tensor generator: the seed mixes the model seed with the tensor name.
fn tensor_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let h = Sha256::digest(name.as_bytes());
    let mut b = [0u8; 8];
    b.copy_from_slice(&h[..8]);
    ChaCha8Rng::seed_from_u64(u64::from_le_bytes(b) ^ seed)
}

fn uniform<S: Scalar>(seed: u64, name: &str, shape: &[usize], fan_in: usize) -> Tensor<S> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let mut rng = tensor_rng(seed, name);
    Tensor::from_fn(shape, |_| S::of(rng.gen_range(-bound..bound)))
}

impl<S: Scalar> VcModel<S> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut model = Self {
            params: ParamStore::new(),
            config,
        };
        model.init_params();
        Ok(model)
    }

    /// Rebuilds a model from stored tensors, checking every expected name and shape.
    pub fn from_params(config: ModelConfig, params: ParamStore<S>) -> Result<Self> {
        let reference = Self::new(config.clone())?;
        let mut problems = Vec::new();
        for (name, t) in reference.params.iter() {
            match params.get(name) {
                Ok(p) if p.shape() == t.shape() => {}
                Ok(p) => problems.push(format!("{name}: shape {:?}, expected {:?}", p.shape(), t.shape())),
                Err(_) => problems.push(format!("{name}: missing")),
            }
        }
        for name in params.names() {
            if !reference.params.contains(name) {
                problems.push(format!("{name}: unexpected"));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Config(format!("parameter mismatch: {}", problems.join("; "))));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn cast<T: Scalar>(&self) -> VcModel<T> {
        VcModel {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.config.encoder.frozen = frozen;
    }

    /// Whether the optimizer may update `name`.
    pub fn is_trainable(&self, name: &str) -> bool {
        !name.starts_with("norm.") && !(self.config.encoder.frozen && name.starts_with("enc."))
    }

    pub fn set_feature_stats(&mut self, mean: &[f64], std: &[f64]) -> Result<()> {
        let m = self.config.n_mels();
        if mean.len() != m || std.len() != m || std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::invalid("feature statistics must have n_mels entries with positive std"));
        }
        self.params
            .insert(NORM_MEAN, Tensor::new(vec![m], mean.iter().map(|&v| S::of(v)).collect())?);
        self.params
            .insert(NORM_STD, Tensor::new(vec![m], std.iter().map(|&v| S::of(v)).collect())?);
        Ok(())
    }

    /// Copies the encoder subtree (and feature statistics) from `donor`.
    pub fn import_encoder(&mut self, donor: &VcModel<S>) -> Result<()> {
        let mismatched = encoder_mismatches(&self.config, &donor.config);
        if !mismatched.is_empty() {
            return Err(Error::Config(format!("encoder config mismatch: {}", mismatched.join(", "))));
        }
        for prefix in ENCODER_PREFIXES {
            for (name, t) in donor.params.subtree(prefix) {
                self.params.insert(name, t);
            }
        }
        Ok(())
    }

    fn init_params(&mut self) {
        let c = self.config.clone();
        let seed = c.init_seed;
        let m = c.n_mels();
        let d = c.encoder.model_dim;
        let mut put = |name: String, shape: &[usize], fan_in: usize| {
            let t = uniform::<S>(seed, &name, shape, fan_in);
            self.params.insert(name, t);
        };
        put("enc.sub.conv1.w".into(), &[d, m, 3], m * 3);
        put("enc.sub.conv1.b".into(), &[d], m * 3);
        put("enc.sub.conv2.w".into(), &[d, d, 3], d * 3);
        put("enc.sub.conv2.b".into(), &[d], d * 3);
        let ff = d * c.encoder.ff_mult;
        for i in 0..c.encoder.n_blocks {
            let p = format!("enc.block{i}");
            for f in ["ff1", "ff2"] {
                put(format!("{p}.{f}.w1"), &[d, ff], d);
                put(format!("{p}.{f}.b1"), &[ff], d);
                put(format!("{p}.{f}.w2"), &[ff, d], ff);
                put(format!("{p}.{f}.b2"), &[d], ff);
            }
            for proj in ["q", "k", "v", "o"] {
                put(format!("{p}.att.w{proj}"), &[d, d], d);
                put(format!("{p}.att.b{proj}"), &[d], d);
            }
            put(format!("{p}.conv.pw1.w"), &[d, 2 * d], d);
            put(format!("{p}.conv.pw1.b"), &[2 * d], d);
            put(format!("{p}.conv.dw.w"), &[d, c.encoder.conv_kernel], c.encoder.conv_kernel);
            put(format!("{p}.conv.dw.b"), &[d], c.encoder.conv_kernel);
            put(format!("{p}.conv.pw2.w"), &[d, d], d);
            put(format!("{p}.conv.pw2.b"), &[d], d);
        }
        let gd = c.group_dim();
        for g in 0..c.bottleneck.n_groups {
            put(bottleneck::codebook_name(g), &[c.bottleneck.codebook_size, gd], gd);
        }
        put(SPEAKER_EMBEDDING.into(), &[c.n_speakers, c.speaker_dim], 1);
        let h = c.decoder.lstm_dim;
        let mut input = d + c.speaker_dim;
        for l in 0..c.decoder.n_lstm_layers {
            for dir in ["fwd", "bwd"] {
                let p = format!("dec.lstm{l}.{dir}");
                put(format!("{p}.w_ih"), &[input, 4 * h], h);
                put(format!("{p}.w_hh"), &[h, 4 * h], h);
                put(format!("{p}.b"), &[4 * h], h);
            }
            input = 2 * h;
        }
        let ch = c.decoder.conv_channels;
        let k = c.decoder.upsample_kernel;
        put("dec.up1.w".into(), &[2 * h, ch, k], 2 * h * k / 2);
        put("dec.up1.b".into(), &[ch], 2 * h * k / 2);
        put("dec.up2.w".into(), &[ch, ch, k], ch * k / 2);
        put("dec.up2.b".into(), &[ch], ch * k / 2);
        put("dec.out.w".into(), &[ch, m], ch);
        put("dec.out.b".into(), &[m], ch);
        let a = c.adversary.hidden_dim;
        put(crate::adversary::ADV_FC1_W.into(), &[d, a], d);
        put(crate::adversary::ADV_FC1_B.into(), &[a], d);
        put(crate::adversary::ADV_FC2_W.into(), &[a, c.n_speakers], a);
        put(crate::adversary::ADV_FC2_B.into(), &[c.n_speakers], a);

        // layer norms: unit gain, zero shift
        let mut ln = |name: String, dim: usize| {
            self.params.insert(format!("{name}.g"), Tensor::full(&[dim], S::one()));
            self.params.insert(format!("{name}.b"), Tensor::zeros(&[dim]));
        };
        for i in 0..c.encoder.n_blocks {
            for part in ["ff1.ln", "att.ln", "conv.ln", "ff2.ln", "ln_out"] {
                ln(format!("enc.block{i}.{part}"), d);
            }
        }
        ln("enc.ln_final".into(), d);
        self.params.insert(NORM_MEAN, Tensor::zeros(&[m]));
        self.params.insert(NORM_STD, Tensor::full(&[m], S::one()));
    }

    fn bind(&self, tape: &mut Tape<S>, name: &str, binding: Binding) -> Result<Var> {
        let trainable = binding == Binding::Train && self.is_trainable(name);
        Ok(tape.param(name, self.params.get(name)?, trainable))
    }

    fn linear(&self, tape: &mut Tape<S>, x: Var, w: &str, b: &str, binding: Binding) -> Result<Var> {
        let w = self.bind(tape, w, binding)?;
        let b = self.bind(tape, b, binding)?;
        tape.linear(x, w, b)
    }

    fn layer_norm(&self, tape: &mut Tape<S>, x: Var, prefix: &str, binding: Binding) -> Result<Var> {
        let g = self.bind(tape, &format!("{prefix}.g"), binding)?;
        let b = self.bind(tape, &format!("{prefix}.b"), binding)?;
        tape.layer_norm(x, g, b, LN_EPS)
    }

    /// Standardized, zero right-padded input `[4·ceil(T/4) × n_mels]`.
    fn prepare_input(&self, mel: &MelSpectrogram) -> Result<Tensor<S>> {
        let m = self.config.n_mels();
        if mel.n_mels() != m {
            return Err(Error::shape("encode", &[mel.n_frames(), mel.n_mels()], &[mel.n_frames(), m]));
        }
        let t = mel.n_frames();
        if t < SUBSAMPLE_FACTOR {
            return Err(Error::invalid(format!(
                "encoder needs at least {SUBSAMPLE_FACTOR} frames, got {t}"
            )));
        }
        let padded = t.div_ceil(SUBSAMPLE_FACTOR) * SUBSAMPLE_FACTOR;
        let mean = self.params.get(NORM_MEAN)?.data();
        let std = self.params.get(NORM_STD)?.data();
        let mut data = vec![S::zero(); padded * m];
        for f in 0..t {
            for (j, &v) in mel.frame(f).iter().enumerate() {
                data[f * m + j] = (S::of(v as f64) - mean[j]) / std[j];
            }
        }
        Tensor::new(vec![padded, m], data)
    }

    fn feed_forward(&self, tape: &mut Tape<S>, x: Var, p: &str, binding: Binding) -> Result<Var> {
        let h = self.layer_norm(tape, x, &format!("{p}.ln"), binding)?;
        let h = self.linear(tape, h, &format!("{p}.w1"), &format!("{p}.b1"), binding)?;
        let h = tape.swish(h)?;
        let h = self.linear(tape, h, &format!("{p}.w2"), &format!("{p}.b2"), binding)?;
        let h = tape.scale(h, S::of(0.5))?;
        tape.add(x, h)
    }

    fn self_attention(&self, tape: &mut Tape<S>, x: Var, p: &str, binding: Binding) -> Result<Var> {
        let d = self.config.encoder.model_dim;
        let heads = self.config.encoder.n_heads;
        let dh = d / heads;
        let h = self.layer_norm(tape, x, &format!("{p}.ln"), binding)?;
        let q = self.linear(tape, h, &format!("{p}.wq"), &format!("{p}.bq"), binding)?;
        let k = self.linear(tape, h, &format!("{p}.wk"), &format!("{p}.bk"), binding)?;
        let v = self.linear(tape, h, &format!("{p}.wv"), &format!("{p}.bv"), binding)?;
        let mut outs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let (lo, hi) = (hd * dh, (hd + 1) * dh);
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (tape.slice(q, 1, lo, hi)?, tape.slice(k, 1, lo, hi)?, tape.slice(v, 1, lo, hi)?)
            };
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, S::of(1.0 / (dh as f64).sqrt()))?;
            let attn = tape.softmax(scores)?;
            outs.push(tape.matmul(attn, vh)?);
        }
        let cat = if heads == 1 { outs[0] } else { tape.concat(&outs, 1)? };
        let o = self.linear(tape, cat, &format!("{p}.wo"), &format!("{p}.bo"), binding)?;
        tape.add(x, o)
    }

    fn conv_module(&self, tape: &mut Tape<S>, x: Var, p: &str, binding: Binding) -> Result<Var> {
        let d = self.config.encoder.model_dim;
        let k = self.config.encoder.conv_kernel;
        let h = self.layer_norm(tape, x, &format!("{p}.ln"), binding)?;
        let h = self.linear(tape, h, &format!("{p}.pw1.w"), &format!("{p}.pw1.b"), binding)?;
        // GLU
        let a = tape.slice(h, 1, 0, d)?;
        let gate = tape.slice(h, 1, d, 2 * d)?;
        let gate = tape.sigmoid(gate)?;
        let h = tape.mul(a, gate)?;
        let w = self.bind(tape, &format!("{p}.dw.w"), binding)?;
        let b = self.bind(tape, &format!("{p}.dw.b"), binding)?;
        let h = tape.depthwise_conv1d(h, w, b, (k - 1) / 2)?;
        let h = tape.swish(h)?;
        let h = self.linear(tape, h, &format!("{p}.pw2.w"), &format!("{p}.pw2.b"), binding)?;
        tape.add(x, h)
    }

    /// Encoder output `[ceil(T/4) × model_dim]`.
    pub fn encode(&self, tape: &mut Tape<S>, mel: &MelSpectrogram, binding: Binding) -> Result<Var> {
        let x = tape.constant(self.prepare_input(mel)?);
        let mut h = x;
        for conv in ["conv1", "conv2"] {
            let w = self.bind(tape, &format!("enc.sub.{conv}.w"), binding)?;
            let b = self.bind(tape, &format!("enc.sub.{conv}.b"), binding)?;
            h = tape.conv1d(h, w, b, 2, 1)?;
            h = tape.relu(h)?;
        }
        for i in 0..self.config.encoder.n_blocks {
            let p = format!("enc.block{i}");
            h = self.feed_forward(tape, h, &format!("{p}.ff1"), binding)?;
            h = self.self_attention(tape, h, &format!("{p}.att"), binding)?;
            h = self.conv_module(tape, h, &format!("{p}.conv"), binding)?;
            h = self.feed_forward(tape, h, &format!("{p}.ff2"), binding)?;
            h = self.layer_norm(tape, h, &format!("{p}.ln_out"), binding)?;
        }
        self.layer_norm(tape, h, "enc.ln_final", binding)
    }

    /// Appends the speaker embedding row to every frame: `[T′ × (D + speaker_dim)]`.
    pub fn embed_and_concat(
        &self,
        tape: &mut Tape<S>,
        bottleneck_out: Var,
        speaker: usize,
        binding: Binding,
    ) -> Result<Var> {
        if speaker >= self.config.n_speakers {
            return Err(Error::invalid(format!(
                "speaker id {speaker} out of range for {} speakers",
                self.config.n_speakers
            )));
        }
        let frames = tape.shape(bottleneck_out)[0];
        let table = self.bind(tape, SPEAKER_EMBEDDING, binding)?;
        let tiled = tape.embedding(table, &vec![speaker; frames])?;
        tape.concat(&[bottleneck_out, tiled], 1)
    }

    fn lstm_direction(&self, tape: &mut Tape<S>, x: Var, p: &str, reverse: bool, binding: Binding) -> Result<Var> {
        let h = self.config.decoder.lstm_dim;
        let t = tape.shape(x)[0];
        let gx = self.linear(tape, x, &format!("{p}.w_ih"), &format!("{p}.b"), binding)?;
        let whh = self.bind(tape, &format!("{p}.w_hh"), binding)?;
        let mut outs = vec![None; t];
        let mut state: Option<(Var, Var)> = None;
        let order: Vec<usize> = if reverse { (0..t).rev().collect() } else { (0..t).collect() };
        for step in order {
            let mut gates = if t == 1 { gx } else { tape.slice(gx, 0, step, step + 1)? };
            if let Some((hp, _)) = state {
                let rec = tape.matmul(hp, whh)?;
                gates = tape.add(gates, rec)?;
            }
            let hc = tape.lstm_cell(gates, state.map(|s| s.1))?;
            let hv = tape.slice(hc, 1, 0, h)?;
            let cv = tape.slice(hc, 1, h, 2 * h)?;
            outs[step] = Some(hv);
            state = Some((hv, cv));
        }
        let outs: Vec<Var> = outs.into_iter().map(|o| o.expect("every step visited")).collect();
        if outs.len() == 1 {
            Ok(outs[0])
        } else {
            tape.concat(&outs, 0)
        }
    }

    /// BiLSTM stack → two stride-2 transposed convolutions → projection to
    /// `n_mels`, trimmed to `target_len` frames and mapped to log-mel units.
    pub fn decode(&self, tape: &mut Tape<S>, x: Var, target_len: usize, binding: Binding) -> Result<Var> {
        let frames = tape.shape(x)[0];
        if target_len == 0 || target_len > SUBSAMPLE_FACTOR * frames {
            return Err(Error::invalid(format!(
                "target length {target_len} not in 1..={}",
                SUBSAMPLE_FACTOR * frames
            )));
        }
        let mut h = x;
        for l in 0..self.config.decoder.n_lstm_layers {
            let f = self.lstm_direction(tape, h, &format!("dec.lstm{l}.fwd"), false, binding)?;
            let b = self.lstm_direction(tape, h, &format!("dec.lstm{l}.bwd"), true, binding)?;
            h = tape.concat(&[f, b], 1)?;
        }
        let pad = (self.config.decoder.upsample_kernel - 2) / 2;
        for up in ["up1", "up2"] {
            let w = self.bind(tape, &format!("dec.{up}.w"), binding)?;
            let b = self.bind(tape, &format!("dec.{up}.b"), binding)?;
            h = tape.conv_transpose1d(h, w, b, 2, pad)?;
            h = tape.relu(h)?;
        }
        let y = self.linear(tape, h, "dec.out.w", "dec.out.b", binding)?;
        let y = if target_len < tape.shape(y)[0] {
            tape.slice(y, 0, 0, target_len)?
        } else {
            y
        };
        let std = tape.constant(self.params.get(NORM_STD)?.clone());
        let mean = tape.constant(self.params.get(NORM_MEAN)?.clone());
        let y = tape.mul(y, std)?;
        tape.add(y, mean)
    }

    /// Records the full path for one utterance: encode → quantize →
    /// speaker concat → decode, with the adversary fed from the quantized
    /// frames through gradient reversal.
    pub fn forward_graph(
        &self,
        tape: &mut Tape<S>,
        mel: &MelSpectrogram,
        speaker: usize,
        opts: &GraphOptions<S>,
    ) -> Result<UttGraph> {
        let binding = opts.binding;
        let z_e = self.encode(tape, mel, binding)?;
        let train_vq = binding == Binding::Train;
        let quant = bottleneck::quantize(
            tape,
            &self.params,
            z_e,
            self.config.bottleneck.n_groups,
            opts.beta,
            train_vq,
            opts.frozen_assignment.as_ref(),
        )?;
        let logits = adversary_logits(tape, &self.params, quant.z_q, opts.adv_grad_weight, train_vq)?;
        let x = self.embed_and_concat(tape, quant.z_q, speaker, binding)?;
        let recon = self.decode(tape, x, mel.n_frames(), binding)?;
        Ok(UttGraph {
            z_e,
            quant,
            recon,
            logits,
        })
    }

    /// Inference pass with parameters bound as constants.
    pub fn forward(&self, mel: &MelSpectrogram, speaker: usize) -> Result<Forward<S>> {
        let mut tape = Tape::new();
        let g = self.forward_graph(&mut tape, mel, speaker, &GraphOptions::inference())?;
        let recon = tape.value(g.recon);
        let reconstruction = MelSpectrogram::new(
            recon.rows(),
            recon.cols(),
            recon.data().iter().map(|v| v.f64() as f32).collect(),
        )?;
        Ok(Forward {
            reconstruction,
            quantize: QuantizeResult {
                z_q: tape.value(g.quant.z_q).clone(),
                indices: g.quant.indices.clone(),
                codebook_loss: tape.value(g.quant.codebook_loss).item().f64(),
                commit_loss: tape.value(g.quant.commit_loss).item().f64(),
                perplexity: bottleneck::grouped_perplexity(&g.quant.counts)?,
            },
            adversary_logits: tape.value(g.logits).data().to_vec(),
        })
    }

    /// Encoder output values without recording gradients.
    pub fn encode_values(&self, mel: &MelSpectrogram) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let z = self.encode(&mut tape, mel, Binding::Inference)?;
        Ok(tape.value(z).clone())
    }
}

/// Encoder-section keys whose values differ (the frozen flag is ignored).
pub fn encoder_mismatches(a: &ModelConfig, b: &ModelConfig) -> Vec<String> {
    let mut out = Vec::new();
    let (ea, eb) = (&a.encoder, &b.encoder);
    let checks = [
        ("encoder.n_blocks", ea.n_blocks == eb.n_blocks),
        ("encoder.model_dim", ea.model_dim == eb.model_dim),
        ("encoder.n_heads", ea.n_heads == eb.n_heads),
        ("encoder.ff_mult", ea.ff_mult == eb.ff_mult),
        ("encoder.conv_kernel", ea.conv_kernel == eb.conv_kernel),
        ("encoder.subsample_factor", ea.subsample_factor == eb.subsample_factor),
        ("features", a.features == b.features),
    ];
    for (key, same) in checks {
        if !same {
            out.push(key.to_string());
        }
    }
    out
}
