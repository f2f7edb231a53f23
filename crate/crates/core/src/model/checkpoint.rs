//! Binary checkpoint container.
//!
//! Layout: `GRAINCKP`, u32 LE format version, u64 LE header length, JSON
//! header, then every array as little-endian f64 in header order.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{GrainModel, ModelConfig, ModelError};
use crate::scalar::Scalar;
use crate::tensor::Mat;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"GRAINCKP";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("checkpoint format version {found}, this build reads {expected}")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint was built with tokenizer {found}, expected {expected}")]
    Tokenizer { found: String, expected: String },
    #[error("malformed checkpoint header: {0}")]
    Header(String),
    #[error("checkpoint data truncated")]
    Truncated,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// AdamW moments, one pair per parameter in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub m: Vec<Mat<T>>,
    pub v: Vec<Mat<T>>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T: Scalar> {
    pub model: GrainModel<T>,
    pub tokenizer_id: String,
    pub step: u64,
    pub optimizer: Option<OptimizerState<T>>,
    /// Free-form training metadata (config, epoch position).
    pub extra: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: [usize; 2],
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tokenizer: String,
    dtype: String,
    step: u64,
    logit_scale: f64,
    params: Vec<ArrayEntry>,
    optimizer_step: Option<u64>,
    optimizer: Vec<ArrayEntry>,
    extra: serde_json::Value,
}

fn push_array<T: Scalar>(entries: &mut Vec<ArrayEntry>, data: &mut Vec<u8>, name: String, m: &Mat<T>) {
    entries.push(ArrayEntry { name, shape: [m.rows(), m.cols()], offset: data.len() / 8 });
    for x in m.data() {
        data.extend_from_slice(&x.f64().to_le_bytes());
    }
}

pub fn save_checkpoint<T: Scalar>(path: &Path, ckpt: &Checkpoint<T>) -> Result<(), CheckpointError> {
    let mut data = Vec::new();
    let mut params = Vec::new();
    for (_, name, m) in ckpt.model.params().iter() {
        push_array(&mut params, &mut data, name.to_string(), m);
    }
    let mut optimizer = Vec::new();
    if let Some(opt) = &ckpt.optimizer {
        let names: Vec<&str> = ckpt.model.params().iter().map(|(_, n, _)| n).collect();
        for (i, name) in names.iter().enumerate() {
            push_array(&mut optimizer, &mut data, format!("m.{name}"), &opt.m[i]);
            push_array(&mut optimizer, &mut data, format!("v.{name}"), &opt.v[i]);
        }
    }
    let header = Header {
        config: ckpt.model.config().clone(),
        tokenizer: ckpt.tokenizer_id.clone(),
        dtype: T::DTYPE.to_string(),
        step: ckpt.step,
        logit_scale: ckpt.model.logit_scale_value(),
        params,
        optimizer_step: ckpt.optimizer.as_ref().map(|o| o.step),
        optimizer,
        extra: ckpt.extra.clone(),
    };
    let header = serde_json::to_vec(&header).map_err(|e| CheckpointError::Header(e.to_string()))?;

    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(MAGIC)?;
        f.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        f.write_all(&(header.len() as u64).to_le_bytes())?;
        f.write_all(&header)?;
        f.write_all(&data)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn read_array<T: Scalar>(data: &[u8], e: &ArrayEntry) -> Result<Mat<T>, CheckpointError> {
    let n = e.shape[0] * e.shape[1];
    let start = e.offset * 8;
    let bytes = data.get(start..start + n * 8).ok_or(CheckpointError::Truncated)?;
    let values = bytes
        .chunks_exact(8)
        .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
        .collect();
    Ok(Mat::from_vec(e.shape[0], e.shape[1], values))
}

/// Loads a checkpoint; `expected_tokenizer` of `None` skips the tokenizer check.
pub fn load_checkpoint<T: Scalar>(path: &Path, expected_tokenizer: Option<&str>) -> Result<Checkpoint<T>, CheckpointError> {
    let raw = fs::read(path)?;
    if raw.len() < 20 || &raw[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(raw[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version { found: version, expected: CHECKPOINT_VERSION });
    }
    let hlen = u64::from_le_bytes(raw[12..20].try_into().expect("8 bytes")) as usize;
    let hbytes = raw.get(20..20 + hlen).ok_or(CheckpointError::Truncated)?;
    let header: Header = serde_json::from_slice(hbytes).map_err(|e| CheckpointError::Header(e.to_string()))?;
    if let Some(want) = expected_tokenizer {
        if header.tokenizer != want {
            return Err(CheckpointError::Tokenizer { found: header.tokenizer, expected: want.to_string() });
        }
    }
    let data = &raw[20 + hlen..];
    let mut values = HashMap::new();
    for e in &header.params {
        values.insert(e.name.clone(), read_array::<T>(data, e)?);
    }
    let model = GrainModel::from_named(header.config, values)?;
    let optimizer = match header.optimizer_step {
        None => None,
        Some(step) => {
            let by_name: HashMap<&str, &ArrayEntry> = header.optimizer.iter().map(|e| (e.name.as_str(), e)).collect();
            let mut m = Vec::new();
            let mut v = Vec::new();
            for (_, name, _) in model.params().iter() {
                for (prefix, out) in [("m", &mut m), ("v", &mut v)] {
                    let key = format!("{prefix}.{name}");
                    let e = by_name.get(key.as_str()).ok_or_else(|| CheckpointError::Header(format!("missing {key}")))?;
                    out.push(read_array::<T>(data, e)?);
                }
            }
            Some(OptimizerState { step, m, v })
        }
    };
    Ok(Checkpoint { model, tokenizer_id: header.tokenizer, step: header.step, optimizer, extra: header.extra })
}
