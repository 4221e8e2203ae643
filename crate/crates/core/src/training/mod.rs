//! Composite objective, Adam training loop, metrics ledger, the
//! adversarial-weight sweep and the model-selection rule.

mod adam;
mod ledger;
mod loss;
mod probe;
mod select;

pub use adam::Adam;
pub use ledger::{format_sig9, LedgerRecord, MetricsLedger, WindowSummary};
pub use loss::{huber, total_loss, LossComponents, LossWeights};
pub use probe::{check_model_gradients, freeze_assignment, random_batch};
pub use select::{
    read_summary_table, select_model, CandidateSummary, CandidateVerdict, SelectionReport, SelectionThresholds,
};

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversary::speaker_accuracy;
use std::collections::BTreeMap;

use crate::autodiff::{Tape, Tensor, Var};
use crate::bottleneck::{self, codebook_name, FrozenAssignment, CODEBOOK_PREFIX};
use crate::config::RunConfig;
use crate::corpus::{Dataset, Utterance};
use crate::error::{Error, Result};
use crate::model::{save_checkpoint, Binding, GraphOptions, UttGraph, VcModel, NORM_MEAN, NORM_STD};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    /// Linear ramp from 0 to `lr` over this many steps (0: constant).
    pub warmup_steps: u64,
    /// Learning-rate multiplier for the codebooks.
    pub codebook_lr_scale: f64,
    pub steps: u64,
    pub seed: u64,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Write a checkpoint every this many steps (0: only the final one).
    pub checkpoint_every: u64,
    /// Append new ledger records to disk every this many steps.
    pub ledger_every: u64,
    /// Fraction of the ledger averaged for final metrics.
    pub final_window_frac: f64,
    /// Seed codebooks with encoder outputs of the first batch.
    pub init_codebook_from_data: bool,
    /// Every this many steps, re-seed entries unused since the last check
    /// with encoder frames of the current batch (0: never).
    pub restart_dead_codes_every: u64,
    /// No restarts at or after this step.
    pub restart_dead_codes_until: u64,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            warmup_steps: 0,
            codebook_lr_scale: 1.0,
            steps: 800_000,
            seed: 0,
            batch_size: 8,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            checkpoint_every: 0,
            ledger_every: 100,
            final_window_frac: 0.1,
            init_codebook_from_data: true,
            restart_dead_codes_every: 0,
            restart_dead_codes_until: 0,
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            self.lr * (step + 1) as f64 / self.warmup_steps as f64
        } else {
            self.lr
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if !(self.lr > 0.0) || self.batch_size == 0 || !(0.0..=1.0).contains(&self.final_window_frac) {
            return Err(Error::Config(
                "train: lr and batch_size must be positive, final_window_frac in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Tape handles for one batch objective.
#[derive(Debug, Clone)]
pub struct BatchGraph {
    pub total: Var,
    pub recon: Var,
    pub codebook: Var,
    pub commit: Var,
    pub adv: Var,
    /// `[batch × n_speakers]`.
    pub logits: Var,
    pub labels: Vec<usize>,
    pub utterances: Vec<UttGraph>,
}

impl BatchGraph {
    pub fn components<S: Scalar>(&self, tape: &Tape<S>) -> LossComponents {
        let v = |x: Var| tape.value(x).item().f64();
        LossComponents {
            recon: v(self.recon),
            codebook: v(self.codebook),
            commit: v(self.commit),
            adv: v(self.adv),
        }
    }

    /// Per-group usage summed over the batch.
    pub fn counts(&self) -> Vec<Vec<f64>> {
        let mut acc = self.utterances[0].quant.counts.clone();
        for u in &self.utterances[1..] {
            for (a, c) in acc.iter_mut().zip(&u.quant.counts) {
                for (x, y) in a.iter_mut().zip(c) {
                    *x += y;
                }
            }
        }
        acc
    }
}

fn batch_mean<S: Scalar>(tape: &mut Tape<S>, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v)?;
    }
    tape.scale(acc, S::of(1.0 / vars.len() as f64))
}

/// Records the batch objective: each utterance reconstructs its own
/// features conditioned on its own speaker id; the terms are batch means.
pub fn batch_objective<S: Scalar>(
    tape: &mut Tape<S>,
    model: &VcModel<S>,
    batch: &[&Utterance],
    weights: &LossWeights,
    binding: Binding,
    frozen: Option<&[FrozenAssignment<S>]>,
) -> Result<BatchGraph> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut graphs = Vec::with_capacity(batch.len());
    let mut recons = Vec::new();
    let mut cbs = Vec::new();
    let mut cms = Vec::new();
    let mut logits = Vec::new();
    for (i, u) in batch.iter().enumerate() {
        let opts = GraphOptions {
            binding,
            adv_grad_weight: weights.adv_grad_weight,
            beta: weights.beta,
            frozen_assignment: frozen.map(|f| f[i].clone()),
        };
        let g = model.forward_graph(tape, &u.mel, u.speaker, &opts)?;
        let target = tape.constant(crate::autodiff::Tensor::new(
            vec![u.mel.n_frames(), u.mel.n_mels()],
            u.mel.data().iter().map(|&v| S::of(v as f64)).collect(),
        )?);
        recons.push(tape.huber(g.recon, target, S::of(weights.delta))?);
        cbs.push(g.quant.codebook_loss);
        cms.push(g.quant.commit_loss);
        logits.push(g.logits);
        graphs.push(g);
    }
    let labels: Vec<usize> = batch.iter().map(|u| u.speaker).collect();
    let recon = batch_mean(tape, &recons)?;
    let codebook = batch_mean(tape, &cbs)?;
    let commit = batch_mean(tape, &cms)?;
    let logits = if logits.len() == 1 { logits[0] } else { tape.concat(&logits, 0)? };
    let adv = tape.softmax_cross_entropy(logits, &labels)?;
    let total = total_loss(tape, recon, codebook, commit, adv, weights)?;
    Ok(BatchGraph {
        total,
        recon,
        codebook,
        commit,
        adv,
        logits,
        labels,
        utterances: graphs,
    })
}

/// Where a run writes its ledger (`ledger.tsv`) and checkpoints.
#[derive(Debug, Clone, Copy)]
pub struct RunOutput<'a> {
    pub dir: &'a Path,
    pub run: &'a RunConfig,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<S: Scalar> {
    pub model: VcModel<S>,
    pub ledger: MetricsLedger,
    pub checkpoints: Vec<PathBuf>,
}

fn has_default_stats<S: Scalar>(model: &VcModel<S>) -> bool {
    let p = model.params();
    match (p.get(NORM_MEAN), p.get(NORM_STD)) {
        (Ok(m), Ok(s)) => m.data().iter().all(|v| *v == S::zero()) && s.data().iter().all(|v| *v == S::one()),
        _ => true,
    }
}

/// Replaces every codebook entry with a random encoder frame (group slice)
/// from `batch`, plus a small uniform jitter.
pub fn init_codebooks_from<S: Scalar>(model: &mut VcModel<S>, batch: &[&Utterance], rng: &mut ChaCha8Rng) -> Result<()> {
    let groups = model.config().bottleneck.n_groups;
    let gd = model.config().group_dim();
    let mut frames: Vec<Vec<S>> = Vec::new();
    for u in batch {
        let z = model.encode_values(&u.mel)?;
        frames.extend((0..z.rows()).map(|t| z.row(t).to_vec()));
    }
    for g in 0..groups {
        let cb = model.params_mut().get_mut(&codebook_name(g))?;
        let k = cb.rows();
        for e in 0..k {
            let src = &frames[rng.gen_range(0..frames.len())][g * gd..(g + 1) * gd];
            for (j, &v) in src.iter().enumerate() {
                cb.data_mut()[e * gd + j] = v + S::of(rng.gen_range(-0.01..0.01));
            }
        }
    }
    Ok(())
}

/// Moves every entry with zero `usage` onto a random row of `frames`
/// (group slice), plus a small uniform jitter.
fn restart_dead_codes<S: Scalar>(
    model: &mut VcModel<S>,
    usage: &[Vec<f64>],
    frames: &[Vec<S>],
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let gd = model.config().group_dim();
    for (g, u) in usage.iter().enumerate() {
        let cb = model.params_mut().get_mut(&codebook_name(g))?;
        for (e, _) in u.iter().enumerate().filter(|(_, &c)| c == 0.0) {
            let src = &frames[rng.gen_range(0..frames.len())][g * gd..(g + 1) * gd];
            for (j, &v) in src.iter().enumerate() {
                cb.data_mut()[e * gd + j] = v + S::of(rng.gen_range(-0.01..0.01));
            }
        }
    }
    Ok(())
}

fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("ckpt_{step:08}.vcck"))
}

/// Trains `model` on `data` with Adam at a constant learning rate.
///
/// Ledger record `s` holds the metrics of the forward pass that precedes
/// update `s + 1`. Fresh models (default feature statistics) are fitted to
/// the corpus statistics first. Deterministic given `cfg.seed`.
pub fn train<S: Scalar>(
    mut model: VcModel<S>,
    data: &Dataset,
    cfg: &TrainConfig,
    output: Option<RunOutput<'_>>,
) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training needs a non-empty dataset"));
    }
    if data.n_speakers() > model.config().n_speakers {
        return Err(Error::Config(format!(
            "dataset has {} speakers, model.n_speakers is {}",
            data.n_speakers(),
            model.config().n_speakers
        )));
    }
    if has_default_stats(&model) {
        let (mean, std) = data.feature_stats()?;
        model.set_feature_stats(&mean, &std)?;
    }
    // batches come from their own stream, so runs differing only in loss
    // weights see the same batch sequence
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut code_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    code_rng.set_stream(1);
    let mut opt = Adam::new(cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut cb_opt = opt.clone();
    let mut ledger = MetricsLedger::new();
    let mut checkpoints = Vec::new();
    let ledger_path = output.map(|o| o.dir.join("ledger.tsv"));
    if let Some(o) = output {
        fs::create_dir_all(o.dir)?;
        fs::write(ledger_path.as_ref().expect("set with output"), "")?;
    }
    let mut flushed = 0usize;
    let k = model.config().bottleneck.codebook_size;
    let mut usage = vec![vec![0.0f64; k]; model.config().bottleneck.n_groups];

    let sample = |rng: &mut ChaCha8Rng| -> Vec<&Utterance> {
        (0..cfg.batch_size)
            .map(|_| &data.utterances[rng.gen_range(0..data.len())])
            .collect()
    };

    for step in 0..cfg.steps {
        let batch = sample(&mut rng);
        if step == 0 && cfg.init_codebook_from_data {
            init_codebooks_from(&mut model, &batch, &mut code_rng)?;
        }
        let mut tape = Tape::new();
        let graph = match batch_objective(&mut tape, &model, &batch, &cfg.loss, Binding::Train, None) {
            Ok(g) => g,
            Err(Error::NonFinite { op }) => return diverged(&model, output, step, format!("non-finite {op}")),
            Err(e) => return Err(e),
        };
        let comps = graph.components(&tape);
        let total = tape.value(graph.total).item().f64();
        if !total.is_finite() {
            return diverged(&model, output, step, format!("loss is {total}"));
        }
        let acc = speaker_accuracy(tape.value(graph.logits), &graph.labels)?;
        let ppl = bottleneck::grouped_perplexity(&graph.counts())?;
        ledger.push(LedgerRecord {
            step,
            recon: comps.recon,
            codebook: comps.codebook,
            commit: comps.commit,
            adv: comps.adv,
            speaker_accuracy: acc,
            perplexity: ppl,
        })?;

        let counts = graph.counts();
        for (acc, c) in usage.iter_mut().zip(&counts) {
            for (a, x) in acc.iter_mut().zip(c) {
                *a += x;
            }
        }
        let restart_due = cfg.restart_dead_codes_every > 0
            && step < cfg.restart_dead_codes_until
            && (step + 1) % cfg.restart_dead_codes_every == 0;
        let frames: Vec<Vec<S>> = if restart_due {
            graph
                .utterances
                .iter()
                .flat_map(|u| {
                    let z = tape.value(u.z_e);
                    (0..z.rows()).map(|t| z.row(t).to_vec()).collect::<Vec<_>>()
                })
                .collect()
        } else {
            Vec::new()
        };

        let grads = tape.backward(graph.total)?;
        let mut pg = tape.param_grads(&grads);
        pg.retain(|name, _| model.is_trainable(name));
        if pg.values().any(|g| !g.all_finite()) {
            return diverged(&model, output, step, "non-finite gradient".into());
        }
        let cb: BTreeMap<String, Tensor<S>> = pg
            .keys()
            .filter(|k| k.starts_with(CODEBOOK_PREFIX))
            .cloned()
            .collect::<Vec<_>>()
            .into_iter()
            .filter_map(|k| pg.remove_entry(&k))
            .collect();
        opt.lr = cfg.lr_at(step);
        opt.step(model.params_mut(), &pg)?;
        cb_opt.lr = cfg.lr_at(step) * cfg.codebook_lr_scale;
        cb_opt.step(model.params_mut(), &cb)?;
        if restart_due {
            restart_dead_codes(&mut model, &usage, &frames, &mut code_rng)?;
            usage.iter_mut().for_each(|u| u.iter_mut().for_each(|x| *x = 0.0));
        }

        let done = step + 1;
        if let Some(o) = output {
            if cfg.ledger_every > 0 && done % cfg.ledger_every == 0 {
                ledger.append_since(ledger_path.as_ref().expect("set with output"), flushed)?;
                flushed = ledger.len();
            }
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.steps {
                let p = checkpoint_path(o.dir, done);
                save_checkpoint(&model, o.run, done, &p)?;
                checkpoints.push(p);
            }
        }
    }
    if let Some(o) = output {
        ledger.append_since(ledger_path.as_ref().expect("set with output"), flushed)?;
        let p = checkpoint_path(o.dir, cfg.steps);
        save_checkpoint(&model, o.run, cfg.steps, &p)?;
        checkpoints.push(p);
    }
    Ok(TrainOutcome {
        model,
        ledger,
        checkpoints,
    })
}

fn diverged<S: Scalar, T>(model: &VcModel<S>, output: Option<RunOutput<'_>>, step: u64, msg: String) -> Result<T> {
    if let Some(o) = output {
        save_checkpoint(model, o.run, step, o.dir.join("last_good.vcck"))?;
    }
    Err(Error::Diverged { step, msg })
}

/// Directional checks over a sweep ordered by increasing weight.
#[derive(Debug, Clone, PartialEq)]
pub struct TrendCheck {
    pub acc_non_increasing: bool,
    /// `acc(first) > acc(second)`.
    pub acc_first_drop: bool,
    pub ppl_non_increasing: bool,
    /// `ppl(second) > ppl(last)`.
    pub ppl_drop: bool,
    pub recon_non_decreasing: bool,
}

impl TrendCheck {
    pub fn evaluate(c: &[CandidateSummary]) -> Self {
        let pairs = || c.windows(2);
        Self {
            acc_non_increasing: pairs().all(|w| w[1].speaker_accuracy <= w[0].speaker_accuracy),
            acc_first_drop: c.len() >= 2 && c[0].speaker_accuracy > c[1].speaker_accuracy,
            ppl_non_increasing: pairs().all(|w| w[1].perplexity <= w[0].perplexity),
            ppl_drop: c.len() >= 2 && c[1].perplexity > c[c.len() - 1].perplexity,
            recon_non_decreasing: pairs().all(|w| w[1].recon_loss >= w[0].recon_loss),
        }
    }

    pub fn all(&self) -> bool {
        self.acc_non_increasing && self.acc_first_drop && self.ppl_non_increasing && self.ppl_drop && self.recon_non_decreasing
    }
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub weights: Vec<f64>,
    /// Final-window metrics per weight, averaged over replicates.
    pub candidates: Vec<CandidateSummary>,
    /// `ledgers[weight][replicate]`.
    pub ledgers: Vec<Vec<MetricsLedger>>,
    pub trends: TrendCheck,
    pub selection: SelectionReport,
}

#[derive(Debug, Clone, Default)]
pub struct SweepOptions<'a> {
    pub threads: usize,
    pub out_dir: Option<&'a Path>,
}

/// One run per weight and replicate; weights come from `run.sweep`.
/// Replicate `r` reseeds training and initialization with `seed + r`, the
/// data stay fixed. Runs are independent and spread over `threads` workers.
pub fn sweep_adversarial_weight(run: &RunConfig, data: &Dataset, opts: &SweepOptions<'_>) -> Result<SweepReport> {
    let weights = &run.sweep.weights;
    if weights.len() < 2 {
        return Err(Error::invalid("a sweep needs at least two weights"));
    }
    let reps = run.sweep.replicates.max(1);
    let mut sorted = weights.to_vec();
    sorted.sort_by(f64::total_cmp);
    let jobs: Vec<(usize, usize)> = (0..sorted.len()).flat_map(|w| (0..reps).map(move |r| (w, r))).collect();
    let one = |(wi, r): (usize, usize)| -> Result<(CandidateSummary, MetricsLedger)> {
        let w = sorted[wi];
        let mut cfg = run.clone();
        cfg.train.loss.adv_grad_weight = w;
        cfg.train.seed = run.train.seed + r as u64;
        cfg.model.init_seed = run.model.init_seed + r as u64;
        let model = cfg.build_model::<f32>()?;
        let label = format_sig9(w);
        let dir = opts.out_dir.map(|d| {
            let d = d.join(format!("adv_{label}"));
            if reps > 1 {
                d.join(format!("rep_{r}"))
            } else {
                d
            }
        });
        let output = dir.as_deref().map(|dir| RunOutput { dir, run: &cfg });
        let outcome = train(model, data, &cfg.train, output)?;
        let window = outcome.ledger.final_window(cfg.train.final_window_frac)?;
        Ok((CandidateSummary::from_window(label, &window), outcome.ledger))
    };
    let threads = opts.threads.max(1);
    let mut results = Vec::with_capacity(jobs.len());
    for chunk in jobs.chunks(threads) {
        let outs: Vec<Result<(CandidateSummary, MetricsLedger)>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|&j| s.spawn(move || one(j))).collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::invalid("sweep worker panicked"))))
                .collect()
        });
        results.extend(outs);
    }
    let mut candidates = Vec::new();
    let mut ledgers = Vec::new();
    let mut it = results.into_iter();
    for &w in &sorted {
        let mut sum = CandidateSummary {
            label: format_sig9(w),
            speaker_accuracy: 0.0,
            perplexity: 0.0,
            recon_loss: 0.0,
        };
        let mut ls = Vec::new();
        for _ in 0..reps {
            let (c, l) = it.next().expect("every run executed")?;
            sum.speaker_accuracy += c.speaker_accuracy / reps as f64;
            sum.perplexity += c.perplexity / reps as f64;
            sum.recon_loss += c.recon_loss / reps as f64;
            ls.push(l);
        }
        candidates.push(sum);
        ledgers.push(ls);
    }
    let trends = TrendCheck::evaluate(&candidates);
    let thresholds = SelectionThresholds::for_codebook(run.model.bottleneck.codebook_size);
    let selection = select_model(&candidates, &thresholds)?;
    Ok(SweepReport {
        weights: sorted,
        candidates,
        ledgers,
        trends,
        selection,
    })
}
