use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};

use vcaug_core::augment::{emit_dataset, EmitOptions, SpeakerPool};
use vcaug_core::autodiff::GradCheckOptions;
use vcaug_core::corpus::feature_files;
use vcaug_core::model::load_checkpoint;
use vcaug_core::signal::{compute_log_mel, read_melf, read_wav, write_melf};
use vcaug_core::training::{
    check_model_gradients, format_sig9, read_summary_table, select_model, sweep_adversarial_weight, train,
    CandidateSummary, MetricsLedger, RunOutput, SelectionThresholds, SweepOptions,
};
use vcaug_core::{Error, RunConfig, VcModel32};

#[derive(Parser)]
#[command(name = "vcaug", version, about = "Voice-conversion training and ASR view generation")]
struct Cli {
    /// Seed for every random source (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for sweeps and augmentation.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Compute log-mel features for every WAV under a directory.
    Featurize {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArg,
    },
    /// Train one model; writes ledger.tsv and checkpoints into --out.
    Train {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// One training run per adversarial gradient weight, then trend checks and selection.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated weights (default: the config's sweep.weights).
        #[arg(long, value_delimiter = ',')]
        weights: Option<Vec<f64>>,
    },
    /// Apply the selection rule to ledgers or to a summary table.
    Select {
        paths: Vec<PathBuf>,
        #[arg(long, default_value_t = 0.2)]
        acc_max: f64,
        /// Defaults to half the codebook size.
        #[arg(long)]
        ppl_min: Option<f64>,
        #[arg(long, default_value_t = 128)]
        codebook_size: usize,
        #[arg(long, default_value_t = 0.1)]
        window: f64,
    },
    /// Convert one MELF file to a target speaker.
    Convert {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        speaker: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Emit paired original/converted views and a manifest for a corpus.
    Augment {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of the full training loss at f64.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long, default_value_t = 12)]
        frames: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Print checkpoint metadata.
    Inspect { checkpoint: PathBuf },
}

/// Process exit status for an error: 1 config, 2 data, 3 divergence.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) => 1,
                Error::Diverged { .. } | Error::NonFinite { .. } => 3,
                _ => 2,
            };
        }
        if let Some(e) = cause.downcast_ref::<clap::Error>() {
            return if e.use_stderr() { 1 } else { 0 };
        }
    }
    2
}

fn load_config(arg: &ConfigArg, seed: Option<u64>) -> anyhow::Result<RunConfig> {
    let mut cfg = match &arg.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.reseed(s);
    }
    Ok(cfg)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn featurize(input: &Path, out: &Path, cfg: &RunConfig) -> anyhow::Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut n = 0;
    for path in feature_files(input)?.into_iter().filter(|p| p.extension().is_some_and(|e| e == "wav")) {
        let wave = read_wav(&path).with_context(|| format!("reading {}", path.display()))?;
        let mel = compute_log_mel(&wave, &cfg.model.features).with_context(|| format!("featurizing {}", path.display()))?;
        let name = path.file_stem().ok_or_else(|| anyhow!("bad file name {}", path.display()))?;
        let dest = out.join(Path::new(name).with_extension("melf"));
        write_melf(&dest, &mel)?;
        println!("{}\t{}\t{}", path.display(), dest.display(), mel.n_frames());
        n += 1;
    }
    eprintln!("featurized {n} files");
    Ok(())
}

fn ledger_label(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    if stem == "ledger" {
        if let Some(dir) = path.parent().and_then(|d| d.file_name()) {
            return dir.to_string_lossy().into_owned();
        }
    }
    stem
}

fn is_summary_table(path: &Path) -> anyhow::Result<bool> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let first = text.lines().find(|l| !l.trim().is_empty() && !l.starts_with('#'));
    Ok(first.is_some_and(|l| l.split('\t').count() == 4))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Featurize { input, out, cfg } => featurize(&input, &out, &load_config(&cfg, cli.seed)?),
        Command::Train { cfg, out } => {
            let run = load_config(&cfg, cli.seed)?;
            let data = run.dataset()?;
            let model = run.build_model::<f32>()?;
            let outcome = train(model, &data, &run.train, Some(RunOutput { dir: &out, run: &run }))?;
            if let Ok(w) = outcome.ledger.final_window(run.train.final_window_frac) {
                println!(
                    "final\tspk_acc={}\tppl={}\trecon={}",
                    format_sig9(w.speaker_accuracy),
                    format_sig9(w.perplexity),
                    format_sig9(w.recon)
                );
            }
            for p in &outcome.checkpoints {
                println!("checkpoint\t{}", p.display());
            }
            Ok(())
        }
        Command::Sweep { cfg, out, weights } => {
            let mut run = load_config(&cfg, cli.seed)?;
            if let Some(w) = weights {
                run.sweep.weights = w;
            }
            let data = run.dataset()?;
            let report = sweep_adversarial_weight(
                &run,
                &data,
                &SweepOptions {
                    threads: cli.threads,
                    out_dir: Some(&out),
                },
            )?;
            let mut text = String::new();
            for c in &report.candidates {
                text.push_str(&format!(
                    "summary\t{}\t{}\t{}\t{}\n",
                    c.label,
                    format_sig9(c.speaker_accuracy),
                    format_sig9(c.perplexity),
                    format_sig9(c.recon_loss)
                ));
            }
            let t = &report.trends;
            for (name, ok) in [
                ("acc_non_increasing", t.acc_non_increasing),
                ("acc_first_drop", t.acc_first_drop),
                ("ppl_non_increasing", t.ppl_non_increasing),
                ("ppl_drop", t.ppl_drop),
                ("recon_non_decreasing", t.recon_non_decreasing),
            ] {
                text.push_str(&format!("trend\t{name}\t{}\n", if ok { "ok" } else { "violated" }));
            }
            text.push_str(&report.selection.to_text());
            fs::write(out.join("report.tsv"), &text)?;
            print!("{text}");
            Ok(())
        }
        Command::Select {
            paths,
            acc_max,
            ppl_min,
            codebook_size,
            window,
        } => {
            if paths.is_empty() {
                bail!(Error::Config("select: give at least one ledger or summary table".into()));
            }
            let mut candidates: Vec<CandidateSummary> = Vec::new();
            for p in &paths {
                if is_summary_table(p)? {
                    candidates.extend(read_summary_table(p).with_context(|| format!("reading {}", p.display()))?);
                } else {
                    let ledger = MetricsLedger::read(p).with_context(|| format!("reading {}", p.display()))?;
                    let w = ledger
                        .final_window(window)
                        .with_context(|| format!("{}: empty ledger", p.display()))?;
                    candidates.push(CandidateSummary::from_window(ledger_label(p), &w));
                }
            }
            let mut thresholds = SelectionThresholds::for_codebook(codebook_size);
            thresholds.acc_max = acc_max;
            if let Some(p) = ppl_min {
                thresholds.ppl_min = p;
            }
            print!("{}", select_model(&candidates, &thresholds)?.to_text());
            Ok(())
        }
        Command::Convert {
            checkpoint,
            input,
            speaker,
            out,
        } => {
            let model: VcModel32 = load_checkpoint(&checkpoint)
                .with_context(|| format!("loading {}", checkpoint.display()))?
                .model()?;
            let mel = read_melf(&input).with_context(|| format!("reading {}", input.display()))?;
            let converted = vcaug_core::augment::convert(&mel, speaker, &model)?;
            write_melf(&out, &converted)?;
            println!("{}\t{}\t{}", input.display(), out.display(), speaker);
            Ok(())
        }
        Command::Augment {
            cfg,
            checkpoint,
            corpus,
            out,
        } => {
            let run = load_config(&cfg, cli.seed)?;
            let model: VcModel32 = load_checkpoint(&checkpoint)
                .with_context(|| format!("loading {}", checkpoint.display()))?
                .model()?;
            let n = model.config().n_speakers;
            let pool = if run.augment.pool.is_empty() {
                SpeakerPool::all(n)?
            } else {
                SpeakerPool::new(run.augment.pool.clone(), n).map_err(|e| Error::Config(format!("augment.pool: {e}")))?
            };
            let report = emit_dataset(
                &corpus,
                &model,
                &pool,
                &out,
                &EmitOptions {
                    policy: &run.augment.policy,
                    features: &model.config().features,
                    seed: run.train.seed,
                    sampling_rate: run.augment.sampling_rate,
                    workers: cli.threads.max(run.augment.workers),
                },
            )?;
            println!("pairs\t{}", report.manifest.len());
            for (p, msg) in &report.failures {
                eprintln!("failed\t{}\t{msg}", p.display());
            }
            if !report.failures.is_empty() {
                bail!(Error::invalid(format!("{} input files could not be converted", report.failures.len())));
            }
            Ok(())
        }
        Command::Gradcheck { cfg, frames, tolerance } => {
            let run = load_config(&cfg, cli.seed)?;
            let report = check_model_gradients(
                &run.model,
                &run.train.loss,
                frames,
                run.train.seed,
                &GradCheckOptions::default(),
            )?;
            for (name, err) in &report.per_param {
                println!("param\t{name}\t{err:.3e}");
            }
            let max = report.max_rel_error();
            println!("checked\t{}", report.checked_elements);
            println!("max_rel_error\t{max:.3e}");
            if !(max < tolerance) {
                let worst = report.worst().map(|(n, _)| n.to_string()).unwrap_or_default();
                bail!(Error::Diverged {
                    step: 0,
                    msg: format!("gradient check failed: {worst} has relative error {max:.3e}"),
                });
            }
            Ok(())
        }
        Command::Inspect { checkpoint } => {
            let ck = load_checkpoint(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            println!("step\t{}", ck.step);
            println!("config_hash\t{}", hex(&ck.config_hash));
            println!("content_hash\t{}", hex(&ck.content_hash));
            println!("tensors\t{}", ck.tensors.len());
            println!("values\t{}", ck.tensors.n_values());
            for (name, t) in ck.tensors.iter() {
                let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
                println!("tensor\t{name}\t{}", dims.join("x"));
            }
            print!("{}", ck.config.to_toml()?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
