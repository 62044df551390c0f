//! `model.ckpt`: 8-byte magic, little-endian u32 manifest length, JSON
//! manifest, then every parameter as little-endian f32 in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::explain::ExplainerSpec;
use crate::nn::{ArchConfig, DefectNet, Mode, PriorModel};
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DKPT0001";
pub const CHECKPOINT_VERSION: u32 = 1;
const PRIOR_PREFIX: &str = "prior.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
    /// Byte length.
    pub len: usize,
}

/// The stage-1 network a guided model builds its priors with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorSection {
    pub arch: ArchConfig,
    pub explainer: ExplainerSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub arch: ArchConfig,
    pub mode: Mode,
    pub params: Vec<ParamEntry>,
    /// sha256 of the blob, lowercase hex.
    pub digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior: Option<PriorSection>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// sha256 of a whole file, lowercase hex.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Write `net` (and its embedded prior model, if any); returns the file digest.
pub fn save_checkpoint<T: Scalar>(net: &DefectNet<T>, path: &Path) -> Result<String> {
    let mut blob = Vec::new();
    let mut params = Vec::new();
    let mut push = |name: String, t: &Tensor<T>| {
        let offset = blob.len();
        for v in t.data() {
            blob.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        params.push(ParamEntry {
            name,
            shape: t.shape().to_vec(),
            offset,
            len: blob.len() - offset,
        });
    };
    for (name, t) in net.params() {
        push(name.to_string(), t);
    }
    let prior = net.prior_model.as_ref().map(|p| {
        for (name, t) in p.net.params() {
            push(format!("{PRIOR_PREFIX}{name}"), t);
        }
        PriorSection {
            arch: p.net.config().clone(),
            explainer: p.explainer.clone(),
        }
    });
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_VERSION,
        arch: net.config().clone(),
        mode: net.mode(),
        params,
        digest: sha256_hex(&blob),
        prior,
    };
    let json = serde_json::to_vec(&manifest)?;
    let len = u32::try_from(json.len()).map_err(|_| Error::Format("checkpoint manifest too large".into()))?;
    let mut bytes = Vec::with_capacity(12 + json.len() + blob.len());
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&len.to_le_bytes());
    bytes.extend_from_slice(&json);
    bytes.extend_from_slice(&blob);

    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Parse and verify a checkpoint file into its manifest and named tensors.
pub fn read_checkpoint(path: &Path) -> Result<(CheckpointManifest, Vec<(String, Tensor<f32>)>)> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a DKPT0001 checkpoint"));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let json = bytes.get(12..12 + len).ok_or_else(|| bad("truncated manifest"))?;
    let manifest: CheckpointManifest =
        serde_json::from_slice(json).map_err(|e| bad(&format!("manifest: {e}")))?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported format version {}", manifest.format_version)));
    }
    let blob = &bytes[12 + len..];
    let found = sha256_hex(blob);
    if found != manifest.digest {
        return Err(Error::Digest {
            expected: manifest.digest.clone(),
            found,
        });
    }
    let mut end = 0;
    let mut tensors = Vec::with_capacity(manifest.params.len());
    for p in &manifest.params {
        let count: usize = p.shape.iter().product();
        if p.offset < end || p.len != 4 * count || p.offset + p.len > blob.len() {
            return Err(bad(&format!("parameter {} has an invalid extent", p.name)));
        }
        end = p.offset + p.len;
        let data = blob[p.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push((p.name.clone(), Tensor::new(p.shape.clone(), data)?));
    }
    Ok((manifest, tensors))
}

pub fn load_checkpoint(path: &Path) -> Result<DefectNet<f32>> {
    let (manifest, tensors) = read_checkpoint(path)?;
    let (prior_params, own): (Vec<_>, Vec<_>) = tensors.into_iter().partition(|(n, _)| n.starts_with(PRIOR_PREFIX));
    let mut net = DefectNet::from_params(manifest.arch, manifest.mode, own)?;
    match manifest.prior {
        Some(section) => {
            let params = prior_params
                .into_iter()
                .map(|(n, t)| (n[PRIOR_PREFIX.len()..].to_string(), t))
                .collect();
            net.prior_model = Some(Box::new(PriorModel {
                net: DefectNet::from_params(section.arch, Mode::Baseline, params)?,
                explainer: section.explainer,
            }));
        }
        None if !prior_params.is_empty() => {
            return Err(Error::Format("prior parameters without a prior section".into()));
        }
        None => {}
    }
    Ok(net)
}

/// Copy every compatible parameter of the checkpoint at `path` into `net`,
/// warning about the ones that do not fit. Returns the skipped names.
pub fn warm_start_from_checkpoint(net: &mut DefectNet<f32>, path: &Path) -> Result<Vec<String>> {
    let source = load_checkpoint(path)?;
    let skipped = net.warm_start_from(&source);
    let untouched: Vec<&String> = net
        .param_names()
        .iter()
        .filter(|n| source.param(n).map(|t| Some(t.shape()) != net.param(n).map(|v| v.shape())).unwrap_or(true))
        .collect();
    if !skipped.is_empty() || !untouched.is_empty() {
        log::warn!(
            "warm start from {}: skipped {:?}; left at init {:?}",
            path.display(),
            skipped,
            untouched
        );
    }
    Ok(skipped)
}
