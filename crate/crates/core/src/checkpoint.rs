//! Binary model checkpoints.
//!
//! Layout (little-endian): magic `BLKS`, `u16` version, `u32` metadata length,
//! UTF-8 `key = value` metadata, then every parameter tensor as raw `f64` in
//! declaration order. The file length is fully determined by the metadata.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"BLKS";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainMeta {
    pub seed: u64,
    pub epochs: usize,
    /// Final validation accuracy in `[0, 1]`; NaN when never measured.
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub meta: TrainMeta,
}

pub fn to_bytes(model: &Model, meta: &TrainMeta) -> Vec<u8> {
    let mut text = String::new();
    for (k, v) in model.spec.to_kv() {
        text.push_str(&format!("{k} = {v}\n"));
    }
    text.push_str(&format!("seed = {}\n", meta.seed));
    text.push_str(&format!("epochs = {}\n", meta.epochs));
    text.push_str(&format!("val_accuracy = {:?}\n", meta.val_accuracy));
    let n: usize = model.params.iter().map(Tensor::len).sum();
    let mut out = Vec::with_capacity(10 + text.len() + 8 * n);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    for p in &model.params {
        for v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 10 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let body = bytes
        .get(10..10 + len)
        .ok_or_else(|| Error::Format("truncated checkpoint metadata".into()))?;
    let text = std::str::from_utf8(body).map_err(|_| Error::Format("metadata is not UTF-8".into()))?;
    let mut kv = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("bad metadata line `{line}`")))?;
        kv.push((k.trim().to_string(), v.trim().to_string()));
    }
    let field = |k: &str| {
        kv.iter()
            .find(|(key, _)| key == k)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Format(format!("checkpoint metadata is missing `{k}`")))
    };
    let bad = |k: &str| Error::Format(format!("bad `{k}` in checkpoint metadata"));
    let meta = TrainMeta {
        seed: field("seed")?.parse().map_err(|_| bad("seed"))?,
        epochs: field("epochs")?.parse().map_err(|_| bad("epochs"))?,
        val_accuracy: field("val_accuracy")?.parse().map_err(|_| bad("val_accuracy"))?,
    };
    let spec = ModelSpec::from_kv(&kv).map_err(|e| Error::Format(e.to_string()))?;
    let shapes = spec.param_shapes().map_err(|e| Error::Format(e.to_string()))?;
    let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    let raw = &bytes[10 + len..];
    if raw.len() != 8 * total {
        return Err(Error::Format(format!(
            "checkpoint holds {} weight bytes, spec needs {}",
            raw.len(),
            8 * total
        )));
    }
    let mut values = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut params = Vec::with_capacity(shapes.len());
    for shape in shapes {
        let n = shape.iter().product();
        let data: Vec<f64> = values.by_ref().take(n).collect();
        params.push(Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))?);
    }
    Ok(Checkpoint {
        model: Model::from_params(spec, params)?,
        meta,
    })
}

pub fn save_checkpoint(model: &Model, meta: &TrainMeta, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model, meta)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Target and evaluator must agree on input geometry and class count.
pub fn check_compatible(target: &ModelSpec, evaluator: &ModelSpec) -> Result<()> {
    let same = target.height == evaluator.height
        && target.width == evaluator.width
        && target.classes == evaluator.classes
        && (target.kind.is_spiking() == evaluator.kind.is_spiking())
        && (!target.kind.is_spiking() || target.steps == evaluator.steps);
    if same {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "evaluator ({} {}x{}, {} classes, T={}) does not match target ({} {}x{}, {} classes, T={})",
            evaluator.kind,
            evaluator.height,
            evaluator.width,
            evaluator.classes,
            evaluator.steps,
            target.kind,
            target.height,
            target.width,
            target.classes,
            target.steps
        )))
    }
}
