//! On-disk model snapshots.
//!
//! A checkpoint is a directory:
//!
//! ```text
//! manifest.txt            key=value lines
//! params/<path>.f32       little-endian f32 per trainable parameter
//! buffers/<path>.f32      batch-norm running statistics
//! ```
//!
//! Values round-trip bit-exactly for 32-bit models.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Float;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub epoch: usize,
    /// Metric snapshot as a JSON value.
    pub metrics: serde_json::Value,
    /// Additional single-line entries.
    pub extra: BTreeMap<String, String>,
}

impl CheckpointMeta {
    pub fn new(config: ModelConfig, epoch: usize) -> Self {
        Self {
            config,
            epoch,
            metrics: serde_json::Value::Null,
            extra: BTreeMap::new(),
        }
    }
}

fn encode<T: Float>(values: &[T]) -> Vec<u8> {
    values.iter().flat_map(|v| (v.as_f64() as f32).to_le_bytes()).collect()
}

fn decode<T: Float>(bytes: &[u8], expected: usize, what: &str) -> Result<Vec<T>> {
    if bytes.len() != expected * 4 {
        return Err(Error::InvalidCheckpoint(format!(
            "{what} holds {} bytes, expected {}",
            bytes.len(),
            expected * 4
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| T::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect())
}

fn check_line(key: &str, value: &str) -> Result<()> {
    if key.contains('=') || key.contains('\n') || value.contains('\n') {
        return Err(Error::InvalidCheckpoint(format!(
            "manifest entry {key:?} is not a single line"
        )));
    }
    Ok(())
}

/// Writes `model` to `dir`, replacing an existing checkpoint there.
pub fn save_checkpoint<T: Float>(model: &Model<T>, meta: &CheckpointMeta, dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::create_dir_all(dir.join("params"))?;
    fs::create_dir_all(dir.join("buffers"))?;
    let mut manifest = format!(
        "format_version={FORMAT_VERSION}\nconfig={}\nepoch={}\nmetrics={}\n",
        serde_json::to_string(&meta.config)?,
        meta.epoch,
        serde_json::to_string(&meta.metrics)?
    );
    for (k, v) in &meta.extra {
        check_line(k, v)?;
        manifest.push_str(&format!("{k}={v}\n"));
    }
    for (name, p) in model.params() {
        fs::write(dir.join("params").join(format!("{name}.f32")), encode(p.value.data()))?;
    }
    for (name, b) in model.buffers() {
        fs::write(dir.join("buffers").join(format!("{name}.f32")), encode(b))?;
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointMeta> {
    let path = dir.join(MANIFEST);
    if !path.is_file() {
        return Err(Error::MissingFile(path));
    }
    let text = fs::read_to_string(&path)?;
    let mut entries: BTreeMap<String, String> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::InvalidCheckpoint(format!("manifest line {l:?}")))
        })
        .collect::<Result<_>>()?;
    let mut take = |k: &str| {
        entries
            .remove(k)
            .ok_or_else(|| Error::InvalidCheckpoint(format!("manifest lacks {k}")))
    };
    let version: u32 = take("format_version")?
        .parse()
        .map_err(|_| Error::InvalidCheckpoint("unreadable format_version".into()))?;
    if version != FORMAT_VERSION {
        return Err(Error::InvalidCheckpoint(format!("format version {version}")));
    }
    let config: ModelConfig = serde_json::from_str(&take("config")?)?;
    let epoch = take("epoch")?
        .parse()
        .map_err(|_| Error::InvalidCheckpoint("unreadable epoch".into()))?;
    let metrics = serde_json::from_str(&take("metrics")?)?;
    Ok(CheckpointMeta {
        config,
        epoch,
        metrics,
        extra: entries,
    })
}

/// Rebuilds the model recorded in `dir`.
pub fn load_checkpoint<T: Float>(dir: &Path) -> Result<(Model<T>, CheckpointMeta)> {
    let meta = read_manifest(dir)?;
    let mut model = Model::<T>::new(meta.config.clone(), 0)?;
    for (name, p) in model.params_mut() {
        let path = dir.join("params").join(format!("{name}.f32"));
        let bytes = fs::read(&path).map_err(|_| Error::InvalidCheckpoint(format!("missing parameter {name}")))?;
        let data = decode(&bytes, p.numel(), &name)?;
        p.value.data_mut().copy_from_slice(&data);
        p.grad = None;
    }
    for (name, b) in model.buffers_mut() {
        let path = dir.join("buffers").join(format!("{name}.f32"));
        let bytes = fs::read(&path).map_err(|_| Error::InvalidCheckpoint(format!("missing buffer {name}")))?;
        let data = decode(&bytes, b.len(), &name)?;
        b.copy_from_slice(&data);
    }
    Ok((model, meta))
}

/// Total scalars stored under `params/`.
pub fn stored_param_count(dir: &Path) -> Result<usize> {
    let mut n = 0;
    for entry in fs::read_dir(dir.join("params"))? {
        n += entry?.metadata()?.len() as usize / 4;
    }
    Ok(n)
}
