//! Run configuration: model, training, data and augmentation sections in TOML.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{load_corpus_dir, read_speaker_map, synthetic_corpus, Dataset, SyntheticConfig};
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, ModelConfig, VcModel};
use crate::scalar::Scalar;
use crate::signal::SpecAugmentPolicy;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory corpus; the synthetic corpus is used when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub speaker_map: Option<PathBuf>,
    pub synthetic: SyntheticConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub policy: SpecAugmentPolicy,
    /// Target speaker ids; empty means every model speaker.
    pub pool: Vec<usize>,
    /// Fraction of corpus files converted.
    pub sampling_rate: f64,
    pub workers: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            policy: SpecAugmentPolicy::default(),
            pool: Vec::new(),
            sampling_rate: 1.0,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// Adversarial reversal scales to compare.
    pub weights: Vec<f64>,
    /// Training seeds per weight; metrics are averaged over them.
    pub replicates: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            weights: vec![0.0, 0.1, 0.5, 1.0],
            replicates: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub augment: AugmentConfig,
    pub sweep: SweepConfig,
}

impl RunConfig {
    /// Parses and validates; does not touch the filesystem.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file and checks that every referenced path exists.
    /// Relative paths resolve against the config file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut Option<PathBuf>| {
            if let Some(p) = p {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        };
        resolve(&mut cfg.model.donor_checkpoint);
        resolve(&mut cfg.data.corpus);
        resolve(&mut cfg.data.speaker_map);
        cfg.check_paths()?;
        Ok(cfg)
    }

    pub fn check_paths(&self) -> Result<()> {
        let keyed = [
            ("model.donor_checkpoint", &self.model.donor_checkpoint),
            ("data.corpus", &self.data.corpus),
            ("data.speaker_map", &self.data.speaker_map),
        ];
        for (key, p) in keyed {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(Error::Config(format!("{key}: path {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.data.corpus.is_some() != self.data.speaker_map.is_some() {
            return Err(Error::Config("data: corpus and speaker_map must be given together".into()));
        }
        if let Some(&bad) = self.augment.pool.iter().find(|&&id| id >= self.model.n_speakers) {
            return Err(Error::Config(format!(
                "augment.pool: speaker id {bad} out of range for {} speakers",
                self.model.n_speakers
            )));
        }
        if !(self.augment.sampling_rate > 0.0 && self.augment.sampling_rate <= 1.0) {
            return Err(Error::Config("augment.sampling_rate: must be in (0, 1]".into()));
        }
        if self.sweep.replicates == 0 {
            return Err(Error::Config("sweep.replicates: must be at least 1".into()));
        }
        if let Some(w) = self.sweep.weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
            return Err(Error::Config(format!("sweep.weights: {w} is not a finite non-negative weight")));
        }
        Ok(())
    }

    /// SHA-256 of the serialized config.
    pub fn hash(&self) -> Result<[u8; 32]> {
        Ok(Sha256::digest(self.to_toml()?.as_bytes()).into())
    }

    pub fn dataset(&self) -> Result<Dataset> {
        match (&self.data.corpus, &self.data.speaker_map) {
            (Some(dir), Some(map)) => {
                let names = read_speaker_map(map)?;
                load_corpus_dir(dir, &names, &self.model.features)
            }
            _ => synthetic_corpus(&self.data.synthetic, &self.model.features),
        }
    }

    /// Fresh model, with the donor encoder imported when one is configured.
    pub fn build_model<S: Scalar>(&self) -> Result<VcModel<S>> {
        let mut model = VcModel::new(self.model.clone())?;
        if let Some(path) = &self.model.donor_checkpoint {
            let donor = load_checkpoint(path)?.model::<S>()?;
            model.import_encoder(&donor)?;
        }
        Ok(model)
    }

    /// Applies a single seed to every random source.
    pub fn reseed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.model.init_seed = seed;
        self.data.synthetic.seed = seed;
    }
}
