#![allow(dead_code)]

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vcaug_core::augment::convert;
use vcaug_core::autodiff::{check_gradients, GradCheckOptions, ParamStore, Tape, Tensor, Var};
use vcaug_core::corpus::Dataset;
use vcaug_core::signal::MelSpectrogram;
use vcaug_core::training::{train, TrainOutcome};
use vcaug_core::{Result, RunConfig};

pub fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

pub fn load_config(name: &str) -> RunConfig {
    RunConfig::load(config_path(name)).expect("shipped config loads")
}

/// Uniform values in `[-1, 1]` kept at least `gap` away from zero, so relu
/// and abs kinks stay outside the difference stencil.
pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.gen_range(-1.0..1.0);
        if v.abs() < gap {
            v.signum() * gap + v
        } else {
            v
        }
    })
}

pub const PRIMITIVES: [&str; 23] = [
    "matmul",
    "transpose",
    "add",
    "sub",
    "mul",
    "scale",
    "tanh",
    "sigmoid",
    "relu",
    "swish",
    "softmax",
    "softmax_cross_entropy",
    "sum_mean",
    "mean_rows",
    "layer_norm",
    "concat_slice",
    "embedding",
    "conv1d",
    "depthwise_conv1d",
    "conv_transpose1d",
    "lstm_cell",
    "grad_reverse",
    "huber",
];

/// Reduces `out` to a scalar through a fixed random projection so every
/// output element matters.
fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let shape = tape.shape(out).to_vec();
    let r = tape.constant(rand_tensor(&mut rng, &shape, 0.0));
    let m = tape.mul(out, r)?;
    tape.sum(m)
}

/// Max relative gradient error of one primitive on random operands with at
/// most 32 elements each.
pub fn primitive_error(name: &str, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut d = |lo: usize, hi: usize| rng.gen_range(lo..=hi);
    let (r, c, k) = (d(1, 4), d(1, 6), d(1, 5));
    let t = d(3, 8);
    let cin = d(1, 3);
    let cout = d(1, 3);
    let kern = d(1, 3);
    let h = d(1, 4);
    let mut p = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31) + 1);
    let mut put = |n: &str, shape: &[usize], gap: f64| p.insert(n, rand_tensor(&mut rng, shape, gap));
    match name {
        "matmul" => {
            put("a", &[r, k], 0.0);
            put("b", &[k, c], 0.0);
        }
        "transpose" | "tanh" | "sigmoid" | "swish" | "softmax" | "sum_mean" | "mean_rows" | "scale" | "grad_reverse" => {
            put("a", &[r, c], 0.0)
        }
        "relu" => put("a", &[r, c], 0.05),
        "add" | "sub" | "mul" => {
            put("a", &[r, c], 0.0);
            put("b", &[r, c], 0.0);
            put("row", &[c], 0.0);
        }
        "softmax_cross_entropy" => put("a", &[r, c.max(2)], 0.0),
        "layer_norm" => {
            put("a", &[r, c.max(2)], 0.0);
            put("g", &[c.max(2)], 0.0);
            put("b", &[c.max(2)], 0.0);
        }
        "concat_slice" => {
            put("a", &[r, c], 0.0);
            put("b", &[r, k], 0.0);
        }
        "embedding" => put("a", &[5, c], 0.0),
        "conv1d" => {
            put("x", &[t, cin], 0.0);
            put("w", &[cout, cin, kern], 0.0);
            put("b", &[cout], 0.0);
        }
        "depthwise_conv1d" => {
            put("x", &[t, cin], 0.0);
            put("w", &[cin, 2 * (kern / 2) + 1], 0.0);
            put("b", &[cin], 0.0);
        }
        "conv_transpose1d" => {
            put("x", &[t.min(5), cin], 0.0);
            put("w", &[cin, cout, 4], 0.0);
            put("b", &[cout], 0.0);
        }
        "lstm_cell" => {
            put("g", &[1, 4 * h], 0.0);
            put("c", &[1, h], 0.0);
        }
        "huber" => put("b", &[r, c], 0.0),
        other => panic!("unknown primitive {other}"),
    }
    if name == "huber" {
        // pred = target + d with |d| kept away from δ = 0.5
        let b = p.get("b")?.clone();
        let a = Tensor::from_fn(&[r, c], |i| {
            let d = if i % 2 == 0 { 0.1 + 0.05 * (i % 5) as f64 } else { -0.8 - 0.1 * (i % 4) as f64 };
            b.data()[i] + d
        });
        p.insert("a", a);
    }
    let labels: Vec<usize> = (0..r).map(|i| (i + seed as usize) % c.max(2)).collect();
    let picks: Vec<usize> = (0..r + 2).map(|i| (i * 3 + seed as usize) % 5).collect();
    let build = |tape: &mut Tape<f64>, p: &ParamStore<f64>| -> Result<Var> {
        let mut v = |n: &str| -> Result<Var> { Ok(tape.param(n, p.get(n)?, true)) };
        let out = match name {
            "matmul" => {
                let (a, b) = (v("a")?, v("b")?);
                tape.matmul(a, b)?
            }
            "transpose" => {
                let a = v("a")?;
                tape.transpose(a)?
            }
            "add" | "sub" | "mul" => {
                let (a, b, row) = (v("a")?, v("b")?, v("row")?);
                let x = match name {
                    "add" => tape.add(a, b)?,
                    "sub" => tape.sub(a, b)?,
                    _ => tape.mul(a, b)?,
                };
                tape.add(x, row)?
            }
            "scale" => {
                let a = v("a")?;
                tape.scale(a, -1.7)?
            }
            "tanh" => {
                let a = v("a")?;
                tape.tanh(a)?
            }
            "sigmoid" => {
                let a = v("a")?;
                tape.sigmoid(a)?
            }
            "relu" => {
                let a = v("a")?;
                tape.relu(a)?
            }
            "swish" => {
                let a = v("a")?;
                tape.swish(a)?
            }
            "softmax" => {
                let a = v("a")?;
                tape.softmax(a)?
            }
            "softmax_cross_entropy" => {
                let a = v("a")?;
                return tape.softmax_cross_entropy(a, &labels);
            }
            "sum_mean" => {
                let a = v("a")?;
                let s = tape.sum(a)?;
                let sq = tape.mul(a, a)?;
                let m = tape.mean(sq)?;
                return tape.add(s, m);
            }
            "mean_rows" => {
                let a = v("a")?;
                tape.mean_rows(a)?
            }
            "layer_norm" => {
                let (a, g, b) = (v("a")?, v("g")?, v("b")?);
                tape.layer_norm(a, g, b, 1e-5)?
            }
            "concat_slice" => {
                let (a, b) = (v("a")?, v("b")?);
                let cat = tape.concat(&[a, b], 1)?;
                let rows = tape.concat(&[cat, cat], 0)?;
                let w = tape.shape(rows)[1];
                tape.slice(rows, 1, 1.min(w - 1), w)?
            }
            "embedding" => {
                let a = v("a")?;
                tape.embedding(a, &picks)?
            }
            "conv1d" => {
                let (x, w, b) = (v("x")?, v("w")?, v("b")?);
                tape.conv1d(x, w, b, 2, 1)?
            }
            "depthwise_conv1d" => {
                let (x, w, b) = (v("x")?, v("w")?, v("b")?);
                let pad = tape.shape(w)[1] / 2;
                tape.depthwise_conv1d(x, w, b, pad)?
            }
            "conv_transpose1d" => {
                let (x, w, b) = (v("x")?, v("w")?, v("b")?);
                tape.conv_transpose1d(x, w, b, 2, 1)?
            }
            "lstm_cell" => {
                let (g, c) = (v("g")?, v("c")?);
                tape.lstm_cell(g, Some(c))?
            }
            "grad_reverse" => {
                let a = v("a")?;
                let sq = tape.mul(a, a)?;
                tape.grad_reverse(sq, 0.3)?
            }
            "huber" => {
                let (a, b) = (v("a")?, v("b")?);
                return tape.huber(a, b, 0.5);
            }
            _ => unreachable!(),
        };
        project(tape, out, seed)
    };
    Ok(check_gradients(build, &p, &GradCheckOptions::default())?.max_rel_error())
}

pub fn huber_distance(a: &MelSpectrogram, b: &MelSpectrogram) -> f64 {
    let n = a.data().len();
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = (x as f64 - y as f64).abs();
            if d < 1.0 {
                0.5 * d * d
            } else {
                d - 0.5
            }
        })
        .sum::<f64>()
        / n as f64
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean log-mel per bin over every frame of each speaker, computed here
/// rather than through the library.
pub fn envelopes(data: &Dataset) -> Vec<Vec<f64>> {
    let n_spk = data.utterances.iter().map(|u| u.speaker).max().map_or(0, |s| s + 1);
    let m = data.utterances[0].mel.n_mels();
    let mut acc = vec![vec![0.0; m]; n_spk];
    let mut n = vec![0usize; n_spk];
    for u in &data.utterances {
        for (i, &v) in u.mel.data().iter().enumerate() {
            acc[u.speaker][i % m] += v as f64;
        }
        n[u.speaker] += u.mel.n_frames();
    }
    for (a, k) in acc.iter_mut().zip(n) {
        a.iter_mut().for_each(|v| *v /= k as f64);
    }
    acc
}

pub struct Probe {
    pub initial_recon: f64,
    pub final_recon: f64,
    /// Per direction: mean Huber distance of same- and cross-speaker conversions.
    pub identity: Vec<(f64, f64)>,
    /// Per direction: distance of the converted envelope to target and source envelopes.
    pub shift: Vec<(f64, f64)>,
}

impl Probe {
    pub fn identity_ok(&self) -> bool {
        self.identity.iter().all(|(same, cross)| same < cross)
    }

    pub fn shift_ok(&self) -> bool {
        self.shift.iter().all(|(to_target, to_source)| to_target < to_source)
    }
}

pub fn overfit(seed: u64) -> (RunConfig, Dataset, TrainOutcome<f32>) {
    let mut run = load_config("probe.cfg");
    run.reseed(seed);
    let data = run.dataset().unwrap();
    let model = run.build_model::<f32>().unwrap();
    let out = train(model, &data, &run.train, None).unwrap();
    (run, data, out)
}

/// Trains the two-speaker probe model and converts every utterance of each
/// speaker to itself and to the other speaker.
pub fn conversion_probe(seed: u64) -> Probe {
    let (_, data, out) = overfit(seed);
    let env = envelopes(&data);
    let mut identity = Vec::new();
    let mut shift = Vec::new();
    for a in 0..2 {
        let b = 1 - a;
        let (mut same, mut cross, mut k) = (0.0, 0.0, 0);
        let mut conv_env = vec![0.0; env[0].len()];
        for u in data.utterances.iter().filter(|u| u.speaker == a) {
            let to_a = convert(&u.mel, a, &out.model).unwrap();
            let to_b = convert(&u.mel, b, &out.model).unwrap();
            same += huber_distance(&to_a, &u.mel);
            cross += huber_distance(&to_b, &u.mel);
            for (e, v) in conv_env.iter_mut().zip(to_b.bin_means()) {
                *e += v;
            }
            k += 1;
        }
        conv_env.iter_mut().for_each(|v| *v /= k as f64);
        identity.push((same / k as f64, cross / k as f64));
        shift.push((l2(&conv_env, &env[b]), l2(&conv_env, &env[a])));
    }
    let recs = out.ledger.records();
    Probe {
        initial_recon: recs[0].recon,
        final_recon: out.ledger.final_window(0.1).unwrap().recon,
        identity,
        shift,
    }
}
