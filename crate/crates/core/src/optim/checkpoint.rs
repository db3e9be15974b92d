//! PRCKPT1 checkpoints: `PRCKPT1\n`, the manifest length in decimal and a
//! newline, a pretty-printed JSON manifest, then the little-endian payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::AdamW;
use crate::error::{Error, Result};
use crate::nn::Module;
use crate::scalar::Scalar;
use crate::tensor::{SeededRng, Tensor};
use crate::vit::{PatchHeads, ViTConfig, ViTModel};

pub const CHECKPOINT_MAGIC: &[u8] = b"PRCKPT1\n";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerEcho {
    pub step: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub epoch: u64,
    pub config: ViTConfig,
    pub grid: (usize, usize),
    pub head_classes: usize,
    pub patch_heads: String,
    pub optimizer: Option<OptimizerEcho>,
    pub payload_bytes: usize,
    pub payload_sha256: String,
    pub tensors: Vec<TensorEntry>,
}

/// A loaded checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub model: ViTModel<T>,
    pub optimizer: Option<AdamW<T>>,
    pub epoch: u64,
    pub manifest: Manifest,
}

fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn heads_kind<T>(h: &PatchHeads<T>) -> &'static str {
    match h {
        PatchHeads::Absent => "absent",
        PatchHeads::Distinct(_) => "distinct",
        PatchHeads::Shared(_) => "shared",
        PatchHeads::ReuseClassifier => "reuse",
    }
}

fn push_tensor<T: Scalar>(entries: &mut Vec<TensorEntry>, payload: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    let offset = payload.len();
    for &v in t.data() {
        v.write_le(payload);
    }
    entries.push(TensorEntry {
        name: name.to_string(),
        shape: t.shape().to_vec(),
        dtype: T::DTYPE.to_string(),
        offset,
        length: payload.len() - offset,
    });
}

/// Writes model parameters (and optionally AdamW state) to `path`.
pub fn save_checkpoint<T: Scalar>(model: &ViTModel<T>, optimizer: Option<&AdamW<T>>, epoch: u64, path: &Path) -> Result<()> {
    let mut entries = Vec::new();
    let mut payload = Vec::new();
    for p in model.parameters() {
        push_tensor(&mut entries, &mut payload, &p.name, &p.tensor);
    }
    let optimizer = optimizer.map(|opt| {
        for (name, (m, v)) in opt.moments() {
            push_tensor(&mut entries, &mut payload, &format!("optim.m.{name}"), m);
            push_tensor(&mut entries, &mut payload, &format!("optim.v.{name}"), v);
        }
        OptimizerEcho {
            step: opt.steps_taken(),
            lr: opt.lr,
            weight_decay: opt.weight_decay,
            beta1: opt.beta1,
            beta2: opt.beta2,
            eps: opt.eps,
        }
    });
    let manifest = Manifest {
        epoch,
        config: model.config.clone(),
        grid: model.grid(),
        head_classes: model.head_classes(),
        patch_heads: heads_kind(&model.patch_heads).to_string(),
        optimizer,
        payload_bytes: payload.len(),
        payload_sha256: sha256_hex(&payload),
        tensors: entries,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(CHECKPOINT_MAGIC.len() + 16 + text.len() + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(format!("{}\n", text.len()).as_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&payload);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Parses and integrity-checks a checkpoint file, returning its manifest and
/// tensors by name (converted to `T`).
pub fn read_checkpoint<T: Scalar>(path: &Path) -> Result<(Manifest, BTreeMap<String, Tensor<T>>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
    if !bytes.starts_with(CHECKPOINT_MAGIC) {
        return Err(bad("missing PRCKPT1 magic".into()));
    }
    let rest = &bytes[CHECKPOINT_MAGIC.len()..];
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("truncated manifest length".into()))?;
    let len: usize = std::str::from_utf8(&rest[..nl])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("unreadable manifest length".into()))?;
    let body = &rest[nl + 1..];
    if body.len() < len {
        return Err(bad(format!("manifest needs {len} bytes, file has {}", body.len())));
    }
    let manifest: Manifest = serde_json::from_slice(&body[..len]).map_err(|e| bad(format!("manifest: {e}")))?;
    let payload = &body[len..];
    if payload.len() != manifest.payload_bytes {
        return Err(bad(format!(
            "payload is {} bytes, manifest promises {} (truncated or padded file)",
            payload.len(),
            manifest.payload_bytes
        )));
    }
    if sha256_hex(payload) != manifest.payload_sha256 {
        return Err(bad("payload checksum mismatch".into()));
    }
    let mut cursor = 0;
    let mut tensors = BTreeMap::new();
    for e in &manifest.tensors {
        let width = match e.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return Err(bad(format!("tensor `{}` has unknown dtype {other}", e.name))),
        };
        let numel: usize = e.shape.iter().product();
        if e.offset != cursor || e.length != numel * width || e.offset + e.length > payload.len() {
            return Err(bad(format!("tensor `{}` has inconsistent offset/length", e.name)));
        }
        cursor += e.length;
        let raw = &payload[e.offset..e.offset + e.length];
        let data: Vec<T> = if width == T::BYTES {
            raw.chunks_exact(width).map(T::read_le).collect()
        } else if width == 4 {
            raw.chunks_exact(4)
                .map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect()
        } else {
            raw.chunks_exact(8)
                .map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap())))
                .collect()
        };
        if tensors.insert(e.name.clone(), Tensor::new(&e.shape, data)?).is_some() {
            return Err(bad(format!("tensor `{}` appears twice", e.name)));
        }
    }
    if cursor != payload.len() {
        return Err(bad("manifest does not cover the whole payload".into()));
    }
    Ok((manifest, tensors))
}

/// Copies every parameter of `model` from `tensors`, failing with the name of
/// the first missing or mis-shaped tensor.
pub fn load_parameters<T: Scalar>(model: &mut ViTModel<T>, tensors: &BTreeMap<String, Tensor<T>>) -> Result<()> {
    for p in model.parameters() {
        match tensors.get(&p.name) {
            None => return Err(Error::Checkpoint(format!("checkpoint has no tensor `{}`", p.name))),
            Some(t) if t.shape() != p.tensor.shape() => {
                return Err(Error::CheckpointShape {
                    name: p.name.clone(),
                    expected: p.tensor.shape().to_vec(),
                    found: t.shape().to_vec(),
                })
            }
            Some(_) => {}
        }
    }
    model.visit_mut(&mut |p| p.tensor = tensors[&p.name].clone());
    Ok(())
}

/// Loads parameters from `path` into an existing model of matching layout.
pub fn load_into<T: Scalar>(model: &mut ViTModel<T>, path: &Path) -> Result<u64> {
    let (manifest, tensors) = read_checkpoint(path)?;
    load_parameters(model, &tensors)?;
    Ok(manifest.epoch)
}

/// Rebuilds the model described by the manifest and loads it.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let (manifest, tensors) = read_checkpoint::<T>(path)?;
    let mut config = manifest.config.clone();
    let with_heads = manifest.patch_heads != "absent";
    config.share_patch_heads = manifest.patch_heads == "shared";
    config.reuse_m0_head = manifest.patch_heads == "reuse";
    let mut model = ViTModel::new(&config, manifest.grid, manifest.head_classes, with_heads, &mut SeededRng::new(0, 0))
        .map_err(|e| Error::Checkpoint(format!("{}: manifest config: {e}", path.display())))?;
    model.config = manifest.config.clone();
    load_parameters(&mut model, &tensors)?;
    let optimizer = manifest.optimizer.as_ref().map(|echo| {
        let mut opt = AdamW::new(echo.lr, echo.weight_decay);
        opt.beta1 = echo.beta1;
        opt.beta2 = echo.beta2;
        opt.eps = echo.eps;
        let mut moments = BTreeMap::new();
        for (name, t) in &tensors {
            if let Some(param) = name.strip_prefix("optim.m.") {
                if let Some(v) = tensors.get(&format!("optim.v.{param}")) {
                    moments.insert(param.to_string(), (t.clone(), v.clone()));
                }
            }
        }
        opt.restore(echo.step, moments);
        opt
    });
    Ok(Checkpoint {
        model,
        optimizer,
        epoch: manifest.epoch,
        manifest,
    })
}

/// Names of tensors whose values differ between two checkpoints (or that
/// exist in only one), with the largest absolute difference.
pub fn diff_checkpoints(a: &Path, b: &Path) -> Result<Vec<(String, f64)>> {
    let (_, ta) = read_checkpoint::<f64>(a)?;
    let (_, tb) = read_checkpoint::<f64>(b)?;
    let mut out = Vec::new();
    for (name, x) in &ta {
        match tb.get(name) {
            Some(y) if y.shape() == x.shape() => {
                let d = x
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(p, q)| (p - q).abs())
                    .fold(0.0, f64::max);
                if d > 0.0 {
                    out.push((name.clone(), d));
                }
            }
            _ => out.push((name.clone(), f64::INFINITY)),
        }
    }
    for name in tb.keys().filter(|n| !ta.contains_key(*n)) {
        out.push((name.clone(), f64::INFINITY));
    }
    Ok(out)
}
