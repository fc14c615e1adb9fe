//! JSON experiment config, its content hash, and stamping of artifacts with
//! that hash so any output can be traced back to the config that made it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::ClassLabel;
use crate::error::{Error, Result};
use crate::evaluation::ClassPair;
use crate::models::{load_meta, sidecar_path, BackboneConfig};
use crate::pretext::PretextConfig;
use crate::training::{RunEnv, TrainConfig};
use crate::transforms::{AugPolicy, PreprocConfig};

/// Environment variable that overrides `train.seed`.
pub const SEED_ENV: &str = "CXRLAB_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "camelCase")]
pub struct DataConfig {
    /// Manifest CSV (`id,path,label,boxes,group`); image paths are relative to it.
    pub manifest: Option<PathBuf>,
    pub test_fraction: f64,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            test_fraction: 0.2,
            split_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "camelCase")]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "camelCase")]
pub struct EvalConfig {
    pub kfold: usize,
    pub pairs: Vec<ClassPair>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            kfold: 5,
            pairs: ClassPair::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "camelCase")]
pub struct InterpretConfig {
    /// Encoder layer for GradCAM and feature maps; the deepest layer if unset.
    pub layer: Option<String>,
    pub target_class: ClassLabel,
    /// Images analysed per run (in manifest order of the test split).
    pub max_images: usize,
    /// Histogram bin width of box sizes, in reference pixels.
    pub bin_width: f64,
}

impl Default for InterpretConfig {
    fn default() -> Self {
        Self {
            layer: None,
            target_class: ClassLabel::Typical,
            max_images: 16,
            bin_width: 8.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "camelCase")]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub preproc: PreprocConfig,
    pub augment: AugPolicy,
    pub pretext: PretextConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub interpret: InterpretConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Apply the `CXRLAB_SEED` override if `value` is given.
    pub fn with_seed_override(mut self, value: Option<&str>) -> Result<Self> {
        if let Some(v) = value {
            self.train.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(self)
    }

    /// Load from `path` (defaults when absent) with the environment seed override.
    pub fn resolve(path: Option<&Path>) -> Result<Self> {
        let cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        let cfg = cfg.with_seed_override(std::env::var(SEED_ENV).ok().as_deref())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.data.test_fraction > 0.0 && self.data.test_fraction < 1.0) {
            return Err(Error::Config(format!(
                "data.testFraction must lie in (0, 1), got {}",
                self.data.test_fraction
            )));
        }
        self.preproc.validate()?;
        self.augment.validate()?;
        self.pretext.moco.validate()?;
        self.model.backbone.validate()?;
        self.train.validate()?;
        if self.eval.kfold < 2 {
            return Err(Error::Config(format!("eval.kfold must be >= 2, got {}", self.eval.kfold)));
        }
        if !(self.interpret.bin_width > 0.0) {
            return Err(Error::Config("interpret.binWidth must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON of the resolved config.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex(&Sha256::digest(canonical.as_bytes()))
    }

    pub fn run_env(&self, out_dir: impl Into<PathBuf>) -> RunEnv {
        let mut env = RunEnv::new(out_dir, self.preproc.clone(), self.augment.clone(), self.model.backbone.clone());
        env.experiment_hash = Some(self.hash());
        env
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

/// A JSON report carrying the hash of the config that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Stamped<T> {
    pub config_hash: String,
    #[serde(flatten)]
    pub body: T,
}

pub fn write_stamped_json<T: Serialize>(path: &Path, config_hash: &str, body: &T) -> Result<()> {
    let stamped = Stamped {
        config_hash: config_hash.to_string(),
        body,
    };
    let text = serde_json::to_string_pretty(&stamped)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Index of non-JSON artifacts (PNG, CSV) in one directory: the config hash
/// plus each file's SHA-256.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ArtifactIndex {
    pub config_hash: String,
    pub files: BTreeMap<String, String>,
}

pub const ARTIFACT_INDEX: &str = "artifacts.json";

impl ArtifactIndex {
    /// Record `files` (inside `dir`) in `dir/artifacts.json`, merging with an
    /// existing index written by the same config.
    pub fn record(dir: &Path, config_hash: &str, files: &[PathBuf]) -> Result<()> {
        let path = dir.join(ARTIFACT_INDEX);
        let mut index = match std::fs::read_to_string(&path) {
            Ok(text) => {
                let idx: ArtifactIndex = serde_json::from_str(&text)?;
                if idx.config_hash == config_hash {
                    idx
                } else {
                    ArtifactIndex::default()
                }
            }
            Err(_) => ArtifactIndex::default(),
        };
        index.config_hash = config_hash.to_string();
        for f in files {
            let name = f
                .strip_prefix(dir)
                .unwrap_or(f)
                .to_string_lossy()
                .into_owned();
            index.files.insert(name, file_sha256(f)?);
        }
        let text = serde_json::to_string_pretty(&index)? + "\n";
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

/// Config hash recorded for an artifact: the `configHash` field of a JSON
/// report, the `experimentHash` of a checkpoint sidecar, or else the entry of
/// the directory's artifact index (whose file digest must also still match).
pub fn recorded_hash(artifact: &Path) -> Result<String> {
    let ext = artifact.extension().and_then(|e| e.to_str()).unwrap_or("");
    if ext == "safetensors" {
        let meta = load_meta(artifact)?;
        return meta.experiment_hash.ok_or_else(|| {
            Error::Compat(format!("{} carries no experiment hash", sidecar_path(artifact).display()))
        });
    }
    if ext == "json" && artifact.file_name().is_some_and(|n| n != ARTIFACT_INDEX) {
        let text = std::fs::read_to_string(artifact).map_err(|e| Error::io(artifact, e))?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        if let Some(h) = value.get("configHash").and_then(|h| h.as_str()) {
            return Ok(h.to_string());
        }
        if let Some(h) = value.get("experimentHash").and_then(|h| h.as_str()) {
            return Ok(h.to_string());
        }
    }
    let dir = artifact.parent().unwrap_or(Path::new("."));
    let index_path = dir.join(ARTIFACT_INDEX);
    let text = std::fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let index: ArtifactIndex = serde_json::from_str(&text)?;
    let name = artifact.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let digest = index
        .files
        .get(&name)
        .ok_or_else(|| Error::Compat(format!("{} is not listed in {}", name, index_path.display())))?;
    if *digest != file_sha256(artifact)? {
        return Err(Error::Compat(format!("{} was modified after it was written", artifact.display())));
    }
    Ok(index.config_hash)
}

/// Check that `artifact` was produced by `cfg`.
pub fn verify_artifact(cfg: &ExperimentConfig, artifact: &Path) -> Result<()> {
    let recorded = recorded_hash(artifact)?;
    let expected = cfg.hash();
    if recorded == expected {
        Ok(())
    } else {
        Err(Error::Compat(format!(
            "{}: recorded config hash {recorded} does not match {expected}",
            artifact.display()
        )))
    }
}
