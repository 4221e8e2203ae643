//! Voice conversion as an ASR augmentation source: paired original and
//! converted views, each SpecAugmented independently.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::corpus::load_features;
use crate::error::{Error, Result};
use crate::model::VcModel;
use crate::scalar::Scalar;
use crate::signal::{melf_bytes, spec_augment, FeatureConfig, MelSpectrogram, SpecAugmentPolicy};

pub const MANIFEST_NAME: &str = "manifest.tsv";

/// Target speakers available for conversion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpeakerPool {
    ids: Vec<usize>,
}

impl SpeakerPool {
    pub fn new(ids: Vec<usize>, n_speakers: usize) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::invalid("speaker pool is empty"));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= n_speakers) {
            return Err(Error::invalid(format!("speaker id {bad} out of range for {n_speakers} speakers")));
        }
        Ok(Self { ids })
    }

    pub fn all(n_speakers: usize) -> Result<Self> {
        Self::new((0..n_speakers).collect(), n_speakers)
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub original: MelSpectrogram,
    pub converted: MelSpectrogram,
    pub target_speaker_id: usize,
    pub seed: u64,
}

pub fn sample_target<R: Rng>(pool: &SpeakerPool, rng: &mut R) -> usize {
    pool.ids[rng.gen_range(0..pool.ids.len())]
}

/// Re-synthesizes `mel` as `target`; the model is only read.
pub fn convert<S: Scalar>(mel: &MelSpectrogram, target: usize, model: &VcModel<S>) -> Result<MelSpectrogram> {
    if mel.n_mels() != model.config().n_mels() {
        return Err(Error::invalid(format!(
            "features have {} mel bins, model expects {}",
            mel.n_mels(),
            model.config().n_mels()
        )));
    }
    Ok(model.forward(mel, target)?.reconstruction)
}

/// Samples a target, then masks the original and the conversion with
/// independent draws, all from a generator seeded with `seed`.
pub fn make_view_pair<S: Scalar>(
    mel: &MelSpectrogram,
    model: &VcModel<S>,
    pool: &SpeakerPool,
    policy: &SpecAugmentPolicy,
    seed: u64,
) -> Result<ViewPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = sample_target(pool, &mut rng);
    let original = spec_augment(mel, policy, &mut rng);
    let converted = spec_augment(&convert(mel, target, model)?, policy, &mut rng);
    Ok(ViewPair {
        original,
        converted,
        target_speaker_id: target,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub source: PathBuf,
    pub original_view: PathBuf,
    pub converted_view: PathBuf,
    pub target_speaker_id: usize,
    pub seed: u64,
}

impl ManifestEntry {
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.source.display(),
            self.original_view.display(),
            self.converted_view.display(),
            self.target_speaker_id,
            self.seed
        )
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(Error::invalid(format!("manifest line needs 5 fields: {line:?}")));
        }
        let num = |s: &str| s.parse::<u64>().map_err(|_| Error::invalid(format!("bad number {s:?} in manifest")));
        Ok(Self {
            source: f[0].into(),
            original_view: f[1].into(),
            converted_view: f[2].into(),
            target_speaker_id: num(f[3])? as usize,
            seed: num(f[4])?,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmitReport {
    pub manifest: Vec<ManifestEntry>,
    pub skipped: usize,
    pub failures: Vec<(PathBuf, String)>,
}

#[derive(Debug, Clone)]
pub struct EmitOptions<'a> {
    pub policy: &'a SpecAugmentPolicy,
    pub features: &'a FeatureConfig,
    pub seed: u64,
    pub sampling_rate: f64,
    pub workers: usize,
}

/// Every `.wav`/`.melf` under `dir`, recursively, in sorted order.
pub fn corpus_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else if matches!(p.extension().and_then(|e| e.to_str()), Some("wav" | "melf")) {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Per-file seed: the run seed mixed with the corpus-relative path.
pub fn file_seed(seed: u64, relative: &Path) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(relative.to_string_lossy().as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

fn flat_name(relative: &Path) -> String {
    let stem = relative.with_extension("");
    stem.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("__")
}

enum Outcome {
    Done(ManifestEntry),
    Skipped,
    Failed(PathBuf, String),
}

fn emit_one<S: Scalar>(
    path: &Path,
    corpus: &Path,
    model: &VcModel<S>,
    pool: &SpeakerPool,
    opts: &EmitOptions<'_>,
    out: &Path,
) -> Outcome {
    let rel = path.strip_prefix(corpus).unwrap_or(path);
    let seed = file_seed(opts.seed, rel);
    if opts.sampling_rate < 1.0 {
        let u = (seed >> 11) as f64 / (1u64 << 53) as f64;
        if u >= opts.sampling_rate {
            return Outcome::Skipped;
        }
    }
    let run = || -> Result<ManifestEntry> {
        let mel = load_features(path, opts.features)?;
        let pair = make_view_pair(&mel, model, pool, opts.policy, seed)?;
        let flat = flat_name(rel);
        let orig = out.join(format!("{flat}.orig.melf"));
        let conv = out.join(format!("{flat}.conv.melf"));
        fs::write(&orig, melf_bytes(&pair.original))?;
        fs::write(&conv, melf_bytes(&pair.converted))?;
        Ok(ManifestEntry {
            source: path.to_path_buf(),
            original_view: orig,
            converted_view: conv,
            target_speaker_id: pair.target_speaker_id,
            seed,
        })
    };
    match run() {
        Ok(e) => Outcome::Done(e),
        Err(e) => Outcome::Failed(path.to_path_buf(), e.to_string()),
    }
}

/// Converts every feature file under `corpus` and writes the paired views
/// plus `manifest.tsv` (ordered by input path) into `out`. Unreadable inputs
/// are reported in `failures` and do not stop the run.
pub fn emit_dataset<S: Scalar>(
    corpus: &Path,
    model: &VcModel<S>,
    pool: &SpeakerPool,
    out: &Path,
    opts: &EmitOptions<'_>,
) -> Result<EmitReport> {
    let files = corpus_files(corpus)?;
    fs::create_dir_all(out)?;
    let workers = opts.workers.max(1).min(files.len().max(1));
    let mut outcomes: Vec<Option<Outcome>> = (0..files.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let chunks: Vec<_> = outcomes.chunks_mut(files.len().div_ceil(workers).max(1)).collect();
        let mut start = 0;
        for chunk in chunks {
            let first = start;
            start += chunk.len();
            let files = &files;
            s.spawn(move || {
                for (i, slot) in chunk.iter_mut().enumerate() {
                    *slot = Some(emit_one(&files[first + i], corpus, model, pool, opts, out));
                }
            });
        }
    });
    let mut report = EmitReport::default();
    let mut text = String::new();
    for o in outcomes.into_iter().map(|o| o.expect("every file visited")) {
        match o {
            Outcome::Done(e) => {
                text.push_str(&e.to_line());
                text.push('\n');
                report.manifest.push(e);
            }
            Outcome::Skipped => report.skipped += 1,
            Outcome::Failed(p, msg) => report.failures.push((p, msg)),
        }
    }
    fs::write(out.join(MANIFEST_NAME), text)?;
    Ok(report)
}
