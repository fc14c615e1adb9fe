//! Checkpoint files: a safetensors archive of parameters keyed by canonical
//! name, plus a JSON sidecar (same stem, `.json`) describing where it came from.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BackboneConfig, BackboneName, Classifier, EncoderDecoder};
use crate::error::{Error, Result};
use crate::nn::{Parameterized, TransferReport};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Stage {
    Baseline,
    MultitaskStage1,
    MultitaskStage2,
    MultitaskStage3,
    MocoPretrain,
    InpaintPretrain,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase")]
pub struct CheckpointMeta {
    pub backbone: BackboneName,
    pub feature_dim: usize,
    pub stage: Stage,
    pub epoch: usize,
    /// Hash of the fields that decide parameter shapes; see [`compat_hash`].
    pub config_hash: String,
    pub dtype: String,
    #[serde(default)]
    pub num_classes: Option<usize>,
    /// Hash of the resolved experiment config that produced the checkpoint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment_hash: Option<String>,
}

/// Where a checkpoint was written, with its identifying sidecar fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CheckpointRef {
    pub path: PathBuf,
    pub stage: Stage,
    pub epoch: usize,
    pub config_hash: String,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// SHA-256 over the backbone fields that fix encoder parameter shapes.
pub fn compat_hash(cfg: &BackboneConfig, dtype: &str) -> String {
    let key = format!("{}|{}|{}", cfg.name.name(), cfg.feature_dim, dtype);
    let digest = Sha256::digest(key.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

impl CheckpointMeta {
    pub fn new<T: Scalar>(cfg: &BackboneConfig, stage: Stage, epoch: usize, num_classes: Option<usize>) -> Self {
        Self {
            backbone: cfg.name,
            feature_dim: cfg.feature_dim,
            stage,
            epoch,
            config_hash: compat_hash(cfg, T::DTYPE),
            dtype: T::DTYPE.to_string(),
            num_classes,
            experiment_hash: None,
        }
    }
}

fn dtype_of<T: Scalar>() -> Dtype {
    if T::DTYPE == "f64" {
        Dtype::F64
    } else {
        Dtype::F32
    }
}

/// Write all parameters of `model` and the sidecar. Output is byte-stable:
/// tensors are ordered by name and no free-form metadata is embedded.
pub fn save_checkpoint<T: Scalar>(
    model: &dyn Parameterized<T>,
    meta: &CheckpointMeta,
    path: &Path,
) -> Result<CheckpointRef> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let state = model.state_dict();
    let buffers: Vec<(String, Vec<usize>, Vec<u8>)> = state
        .into_iter()
        .map(|(n, v)| {
            let shape = v.shape().to_vec();
            let std = v.as_standard_layout();
            (n, shape, T::to_le_bytes_vec(std.as_slice().expect("standard layout")))
        })
        .collect();
    let views = buffers
        .iter()
        .map(|(n, shape, bytes)| {
            TensorView::new(dtype_of::<T>(), shape.clone(), bytes)
                .map(|v| (n.clone(), v))
                .map_err(|e| Error::Compat(format!("tensor {n}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    safetensors::tensor::serialize_to_file(views, &None, path)
        .map_err(|e| Error::Compat(format!("writing {}: {e}", path.display())))?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(meta)?;
    std::fs::write(&side, json + "\n").map_err(|e| Error::io(&side, e))?;
    Ok(CheckpointRef {
        path: path.to_path_buf(),
        stage: meta.stage,
        epoch: meta.epoch,
        config_hash: meta.config_hash.clone(),
    })
}

pub fn load_meta(path: &Path) -> Result<CheckpointMeta> {
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Compat(format!("sidecar {}: {e}", side.display())))
}

/// Read every tensor of a checkpoint written at scalar width `T`.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(BTreeMap<String, ArrayD<T>>, CheckpointMeta)> {
    let meta = load_meta(path)?;
    if meta.dtype != T::DTYPE {
        return Err(Error::Compat(format!(
            "{} holds {} tensors, loader expects {}",
            path.display(),
            meta.dtype,
            T::DTYPE
        )));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::Compat(format!("{}: {e}", path.display())))?;
    let mut out = BTreeMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != dtype_of::<T>() {
            return Err(Error::Compat(format!("tensor {name} has dtype {:?}", view.dtype())));
        }
        let values = T::from_le_bytes_slice(view.data());
        let arr = ArrayD::from_shape_vec(IxDyn(view.shape()), values)
            .map_err(|e| Error::Compat(format!("tensor {name}: {e}")))?;
        out.insert(name, arr);
    }
    Ok((out, meta))
}

fn check_compat<T: Scalar>(meta: &CheckpointMeta, cfg: &BackboneConfig, path: &Path) -> Result<()> {
    if meta.backbone != cfg.name || meta.feature_dim != cfg.feature_dim {
        return Err(Error::Compat(format!(
            "{} was written for {} (featureDim {}), model is {} (featureDim {})",
            path.display(),
            meta.backbone,
            meta.feature_dim,
            cfg.name,
            cfg.feature_dim
        )));
    }
    let expected = compat_hash(cfg, T::DTYPE);
    if meta.config_hash != expected {
        return Err(Error::Compat(format!(
            "{}: config hash {} does not match {expected}",
            path.display(),
            meta.config_hash
        )));
    }
    Ok(())
}

/// Load every parameter of `model` from a checkpoint. All names must match
/// with identical shapes; tensors the model does not have are an error too.
pub fn load_full<T: Scalar>(
    model: &mut dyn Parameterized<T>,
    cfg: &BackboneConfig,
    path: &Path,
) -> Result<(TransferReport, CheckpointMeta)> {
    let (state, meta) = load_checkpoint::<T>(path)?;
    check_compat::<T>(&meta, cfg, path)?;
    let report = model.load_matching(&state);
    if !report.shape_mismatch.is_empty() || !report.missing_in_source.is_empty() || !report.unused_in_source.is_empty() {
        return Err(Error::Compat(format!("{}: {}", path.display(), report.describe())));
    }
    Ok((report, meta))
}

/// Load the `encoder.*` tensors of a checkpoint into `model`, after checking
/// that it was written for the same backbone. Any missing, surplus or
/// mis-shaped encoder tensor is an error naming all of them.
pub fn load_encoder<T: Scalar>(
    model: &mut dyn Parameterized<T>,
    cfg: &BackboneConfig,
    path: &Path,
) -> Result<TransferReport> {
    let (state, meta) = load_checkpoint::<T>(path)?;
    check_compat::<T>(&meta, cfg, path)?;
    let encoder: BTreeMap<_, _> = state.into_iter().filter(|(k, _)| k.starts_with("encoder.")).collect();
    transfer_encoder(model, &encoder).map_err(|e| Error::Compat(format!("{}: {e}", path.display())))
}

/// By-name transfer restricted to the shared encoder.
pub fn transfer_encoder<T: Scalar>(
    model: &mut dyn Parameterized<T>,
    source: &BTreeMap<String, ArrayD<T>>,
) -> std::result::Result<TransferReport, String> {
    let source: BTreeMap<_, _> = source
        .iter()
        .filter(|(k, _)| k.starts_with("encoder."))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    let mut report = model.load_matching(&source);
    report.missing_in_source.retain(|n| n.starts_with("encoder."));
    if report.matched.is_empty()
        || !report.shape_mismatch.is_empty()
        || !report.missing_in_source.is_empty()
        || !report.unused_in_source.is_empty()
    {
        return Err(format!("incompatible encoder weights: {}", report.describe()));
    }
    Ok(report)
}

/// Classifier (encoder + class head) from a classification or multi-task
/// checkpoint; the decoder of a multi-task checkpoint is ignored.
pub fn load_classifier<T: Scalar>(cfg: &BackboneConfig, path: &Path) -> Result<(Classifier<T>, CheckpointMeta)> {
    let (state, meta) = load_checkpoint::<T>(path)?;
    check_compat::<T>(&meta, cfg, path)?;
    let num_classes = meta.num_classes.ok_or_else(|| {
        Error::Compat(format!("{} has no classification head (stage {:?})", path.display(), meta.stage))
    })?;
    let state: BTreeMap<_, _> = state
        .into_iter()
        .filter(|(k, _)| k.starts_with("encoder.") || k.starts_with("head."))
        .collect();
    let mut model = Classifier::build(cfg, num_classes, 0)?;
    let report = model.load_matching(&state);
    if !report.shape_mismatch.is_empty() || !report.missing_in_source.is_empty() || !report.unused_in_source.is_empty() {
        return Err(Error::Compat(format!("{}: {}", path.display(), report.describe())));
    }
    Ok((model, meta))
}

/// Encoder-decoder from a multi-task checkpoint.
pub fn load_encoder_decoder<T: Scalar>(cfg: &BackboneConfig, path: &Path) -> Result<(EncoderDecoder<T>, CheckpointMeta)> {
    let meta = load_meta(path)?;
    let num_classes = meta.num_classes.unwrap_or(super::NUM_CLASSES);
    let mut model = EncoderDecoder::build(cfg, num_classes, 0)?;
    let (_, meta) = load_full(&mut model, cfg, path)?;
    Ok((model, meta))
}
