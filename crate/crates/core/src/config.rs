//! Experiment configuration: one TOML file layered over a named profile.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::data::{SplitMode, SynthSpec};
use crate::dsp::PreprocessConfig;
use crate::error::{Error, Result};
use crate::eval::PostprocessConfig;
use crate::fusion::{FusionConfig, FusionTrainConfig};
use crate::mae::{MaeConfig, PretrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    /// Small models and short schedules that run on one CPU core.
    Desk,
    /// Full-scale model sizes and optimiser settings.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub profile: Profile,
    /// Seed for the split, initialisation, masking, shuffling and dropout.
    /// The synthetic corpus has its own seed under `synth`.
    pub seed: u64,
    /// Existing corpus directory (with `manifest.json`); when absent the
    /// synthetic generator is used.
    pub corpus_dir: Option<PathBuf>,
    pub synth: SynthSpec,
    pub preprocess: PreprocessConfig,
    pub split: SplitMode,
    /// Negatives kept per positive training window.
    pub negative_ratio: usize,
    pub mae: MaeConfig,
    pub pretrain: PretrainConfig,
    pub fusion: FusionConfig,
    pub train: FusionTrainConfig,
    pub postprocess: PostprocessConfig,
    pub threshold: f64,
}

impl ExperimentConfig {
    pub fn desk() -> Self {
        Self {
            profile: Profile::Desk,
            seed: 1,
            corpus_dir: None,
            synth: SynthSpec::default(),
            preprocess: PreprocessConfig::default(),
            split: SplitMode::RandomSession { test_sessions: 4 },
            negative_ratio: 10,
            mae: MaeConfig::default(),
            pretrain: PretrainConfig::default(),
            fusion: FusionConfig { d_f: 32, adapter_layers: 2, fusion_layers: 2, ..FusionConfig::default() },
            train: FusionTrainConfig { epochs: 6, batch_size: 32, lr: 1e-3, lr_min: 1e-5, weight_decay: 0.01 },
            postprocess: PostprocessConfig::default(),
            threshold: 0.5,
        }
    }

    pub fn full() -> Self {
        Self {
            profile: Profile::Full,
            mae: MaeConfig::full(),
            pretrain: PretrainConfig::full(),
            fusion: FusionConfig::default(),
            train: FusionTrainConfig::default(),
            ..Self::desk()
        }
    }

    pub fn for_profile(p: Profile) -> Self {
        match p {
            Profile::Desk => Self::desk(),
            Profile::Full => Self::full(),
        }
    }

    /// Parses TOML text. Keys present in the text override the profile named
    /// by its `profile` key (desk when absent); unknown keys are errors.
    pub fn from_toml(text: &str) -> Result<Self> {
        let overlay: Value = toml::from_str(text).map_err(|e| Error::Toml(e.to_string()))?;
        let profile = match overlay.get("profile") {
            Some(p) => serde_json::from_value(p.clone()).map_err(|e| Error::Config(format!("profile: {e}")))?,
            None => Profile::Desk,
        };
        let mut base = serde_json::to_value(Self::for_profile(profile))?;
        merge(&mut base, overlay);
        let cfg: Self = serde_json::from_value(base).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(format!("config file {}", path.display())),
            _ => Error::Io(e),
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Toml(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.mae.validate()?;
        self.fusion.validate()?;
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        if self.negative_ratio == 0 {
            return Err(Error::Config("negative ratio must be positive".into()));
        }
        if self.mae.channels != self.synth.channels && self.corpus_dir.is_none() {
            return Err(Error::Config(format!(
                "encoder expects {} channels but the generator makes {}",
                self.mae.channels, self.synth.channels
            )));
        }
        if let Some(dir) = &self.corpus_dir {
            if !dir.join("manifest.json").is_file() {
                return Err(Error::MissingArtifact(format!("corpus manifest {}", dir.join("manifest.json").display())));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form (keys sorted, compact).
    pub fn fingerprint(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical_json(&v).as_bytes()))
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Compact JSON with object keys in sorted order.
pub fn canonical_json(v: &Value) -> String {
    match v {
        Value::Object(m) => {
            let mut keys: Vec<&String> = m.keys().collect();
            keys.sort();
            let body: Vec<String> =
                keys.iter().map(|k| format!("{}:{}", Value::String((*k).clone()), canonical_json(&m[*k]))).collect();
            format!("{{{}}}", body.join(","))
        }
        Value::Array(a) => format!("[{}]", a.iter().map(canonical_json).collect::<Vec<_>>().join(",")),
        other => other.to_string(),
    }
}
