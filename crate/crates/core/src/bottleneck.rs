//! Grouped vector quantization with codebook and commitment losses.
//!
//! The channel axis of `z_e [T′ × D]` is split into `G` groups of `D/G`
//! channels; each group has its own `K`-entry codebook stored under
//! `vq.group{g}.codebook`.

use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CODEBOOK_PREFIX: &str = "vq.";

pub fn codebook_name(group: usize) -> String {
    format!("vq.group{group}.codebook")
}

/// Index of the entry nearest to `z` under squared L2; ties go to the lowest index.
pub fn nearest_entry<S: Scalar>(z: &[S], codebook: &Tensor<S>) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for k in 0..codebook.rows() {
        let d: f64 = codebook
            .row(k)
            .iter()
            .zip(z)
            .map(|(&e, &x)| {
                let diff = (x - e).f64();
                diff * diff
            })
            .sum();
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

/// Per-frame, per-group codebook indices of `z_e [T′ × D]`.
pub fn assign<S: Scalar>(z_e: &Tensor<S>, codebooks: &[&Tensor<S>]) -> Result<Vec<Vec<usize>>> {
    let g = codebooks.len();
    let d = z_e.cols();
    if g == 0 || d % g != 0 {
        return Err(Error::shape("quantize", z_e.shape(), &[g]));
    }
    let gd = d / g;
    if let Some(cb) = codebooks.iter().find(|cb| cb.cols() != gd) {
        return Err(Error::shape("quantize", z_e.shape(), cb.shape()));
    }
    Ok((0..z_e.rows())
        .map(|t| {
            let row = z_e.row(t);
            codebooks
                .iter()
                .enumerate()
                .map(|(gi, cb)| nearest_entry(&row[gi * gd..(gi + 1) * gd], cb))
                .collect()
        })
        .collect())
}

/// Gathers and concatenates the selected entries into `[T′ × D]`.
pub fn gather<S: Scalar>(indices: &[Vec<usize>], codebooks: &[&Tensor<S>]) -> Result<Tensor<S>> {
    let gd = codebooks[0].cols();
    let mut data = Vec::with_capacity(indices.len() * gd * codebooks.len());
    for row in indices {
        for (gi, &k) in row.iter().enumerate() {
            data.extend_from_slice(codebooks[gi].row(k));
        }
    }
    Tensor::new(vec![indices.len(), gd * codebooks.len()], data)
}

/// `exp(−Σ pᵢ ln pᵢ)` of a usage histogram, with `0·ln 0 = 0`.
pub fn perplexity(counts: &[f64]) -> Result<f64> {
    let total: f64 = counts.iter().sum();
    if !(total > 0.0) || counts.iter().any(|&c| c < 0.0) {
        return Err(Error::invalid("perplexity needs non-negative counts with a positive sum"));
    }
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0.0)
        .map(|&c| {
            let p = c / total;
            -p * p.ln()
        })
        .sum();
    Ok(h.exp())
}

/// Mean over groups of the per-group perplexity.
pub fn grouped_perplexity(counts: &[Vec<f64>]) -> Result<f64> {
    let mut acc = 0.0;
    for c in counts {
        acc += perplexity(c)?;
    }
    Ok(acc / counts.len() as f64)
}

/// Codebook assignment held fixed while evaluating a linearized quantizer:
/// `z_q = z_e + offset`, losses use `indices`. The finite-difference oracle
/// uses this so the straight-through path is differentiable in its sense.
#[derive(Debug, Clone)]
pub struct FrozenAssignment<S> {
    pub indices: Vec<Vec<usize>>,
    pub offset: Tensor<S>,
}

/// Quantizer output recorded on a tape.
#[derive(Debug, Clone)]
pub struct QuantizeOutput {
    pub z_q: Var,
    /// `T′ × G` codebook indices.
    pub indices: Vec<Vec<usize>>,
    pub codebook_loss: Var,
    pub commit_loss: Var,
    /// Per group, per entry usage in this utterance.
    pub counts: Vec<Vec<f64>>,
}

/// Plain-value view of a quantization.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizeResult<S> {
    pub z_q: Tensor<S>,
    pub indices: Vec<Vec<usize>>,
    pub codebook_loss: f64,
    pub commit_loss: f64,
    pub perplexity: f64,
}

pub fn usage_counts(indices: &[Vec<usize>], n_groups: usize, k: usize) -> Vec<Vec<f64>> {
    let mut counts = vec![vec![0.0; k]; n_groups];
    for row in indices {
        for (g, &i) in row.iter().enumerate() {
            counts[g][i] += 1.0;
        }
    }
    counts
}

/// Mean over frames and groups of `‖a − b‖²` for `[T′ × D]` operands split in `g` groups.
fn grouped_sq_dist<S: Scalar>(tape: &mut Tape<S>, a: Var, b: Var, groups: usize) -> Result<Var> {
    let diff = tape.sub(a, b)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq)?;
    let frames = tape.shape(a)[0];
    tape.scale(total, S::of(1.0 / (frames * groups) as f64))
}

/// Vector-quantizes `z_e` against codebooks `vq.group*.codebook` from `params`.
///
/// `codebook_loss = mean ‖sg[z_e] − e‖²` reaches only the codebook,
/// `commit_loss = β · mean ‖z_e − sg[e]‖²` reaches only the encoder, and
/// `z_q` forwards the gathered entries while passing gradient to `z_e` unchanged.
pub fn quantize<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ParamStore<S>,
    z_e: Var,
    n_groups: usize,
    beta: f64,
    train_codebook: bool,
    frozen: Option<&FrozenAssignment<S>>,
) -> Result<QuantizeOutput> {
    let names: Vec<String> = (0..n_groups).map(codebook_name).collect();
    let tensors: Vec<&Tensor<S>> = names.iter().map(|n| params.get(n)).collect::<Result<_>>()?;
    let k = tensors[0].rows();
    let d = tape.shape(z_e)[1];
    let gd = d / n_groups;
    let indices = match frozen {
        Some(f) => f.indices.clone(),
        None => assign(tape.value(z_e), &tensors)?,
    };
    let counts = usage_counts(&indices, n_groups, k);
    let selected = gather(&indices, &tensors)?;

    let z_q = match frozen {
        Some(f) => {
            let off = tape.constant(f.offset.clone());
            tape.add(z_e, off)?
        }
        None => tape.straight_through(z_e, selected)?,
    };

    let cb_vars: Vec<Var> = names
        .iter()
        .zip(&tensors)
        .map(|(n, t)| tape.param(n, t, train_codebook))
        .collect();
    let mut gathered = Vec::with_capacity(n_groups);
    for (g, &cb) in cb_vars.iter().enumerate() {
        let idx: Vec<usize> = indices.iter().map(|row| row[g]).collect();
        gathered.push((g, tape.embedding(cb, &idx)?));
    }
    let e = if n_groups == 1 {
        gathered[0].1
    } else {
        let parts: Vec<Var> = gathered.iter().map(|&(_, v)| v).collect();
        tape.concat(&parts, 1)?
    };
    debug_assert_eq!(tape.shape(e)[1], gd * n_groups);

    let z_sg = tape.stop_gradient(z_e)?;
    let codebook_loss = grouped_sq_dist(tape, z_sg, e, n_groups)?;
    let e_sg = tape.stop_gradient(e)?;
    let commit = grouped_sq_dist(tape, z_e, e_sg, n_groups)?;
    let commit_loss = tape.scale(commit, S::of(beta))?;

    Ok(QuantizeOutput {
        z_q,
        indices,
        codebook_loss,
        commit_loss,
        counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(codebooks: Vec<Tensor<f64>>) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        for (g, cb) in codebooks.into_iter().enumerate() {
            p.insert(codebook_name(g), cb);
        }
        p
    }

    #[test]
    fn ties_pick_lowest_index() {
        let cb = Tensor::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(nearest_entry(&[0.0f64, 0.0], &cb), 0);
        let cb2 = Tensor::from_rows(&[vec![5.0, 5.0], vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(nearest_entry(&[0.0f64, 0.0], &cb2), 1);
    }

    #[test]
    fn exact_match_has_zero_losses() {
        let cb: Tensor<f64> = Tensor::from_fn(&[16, 2], |i| i as f64 * 0.25 - 1.0);
        let p = store(vec![cb.clone(), cb.clone()]);
        let row: Vec<f64> = cb.row(5).iter().chain(cb.row(9)).copied().collect();
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::new(vec![1, 4], row.clone()).unwrap());
        let q = quantize(&mut tape, &p, z, 2, 0.25, true, None).unwrap();
        assert_eq!(q.indices, vec![vec![5, 9]]);
        assert_eq!(tape.value(q.z_q).data(), &row[..]);
        assert_eq!(tape.value(q.codebook_loss).item(), 0.0);
        assert_eq!(tape.value(q.commit_loss).item(), 0.0);
    }

    #[test]
    fn loss_magnitudes() {
        // one group of dim 4, z_e − e = 1 everywhere
        let cb = Tensor::new(vec![1, 4], vec![0.0f64; 4]).unwrap();
        let p = store(vec![cb]);
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::full(&[1, 4], 1.0));
        let q = quantize(&mut tape, &p, z, 1, 0.25, true, None).unwrap();
        assert!((tape.value(q.codebook_loss).item() - 4.0).abs() < 1e-12);
        assert!((tape.value(q.commit_loss).item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn perplexity_values() {
        assert!((perplexity(&vec![1.0; 128]).unwrap() - 128.0).abs() < 1e-9);
        let mut one = vec![0.0; 128];
        one[7] = 3.0;
        assert_eq!(perplexity(&one).unwrap(), 1.0);
        let expected = (-(0.75f64 * 0.75f64.ln() + 0.25 * 0.25f64.ln())).exp();
        assert!((perplexity(&[3.0, 1.0]).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 1.7548).abs() < 1e-4);
        assert!(perplexity(&[0.0, 0.0]).is_err());
    }
}
