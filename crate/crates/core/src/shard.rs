//! JSON Lines annotation shards and their metadata sidecar.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::NormBox;

#[derive(Debug, Error)]
pub enum ShardError {
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Schema { path: PathBuf, line: usize, message: String },
    #[error("metadata {path}: {message}")]
    Meta { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ShardError + '_ {
    move |source| ShardError::Io { path: path.to_path_buf(), source }
}

/// One localized description: serialized as `[index, cx, cy, w, h, confidence]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "BoxTuple", try_from = "BoxTuple")]
pub struct GroundedBox {
    pub description_index: usize,
    pub bbox: NormBox<f64>,
    pub confidence: f64,
}

type BoxTuple = (usize, f64, f64, f64, f64, f64);

impl From<GroundedBox> for BoxTuple {
    fn from(b: GroundedBox) -> Self {
        (b.description_index, b.bbox.cx, b.bbox.cy, b.bbox.w, b.bbox.h, b.confidence)
    }
}

impl TryFrom<BoxTuple> for GroundedBox {
    type Error = String;

    fn try_from((i, cx, cy, w, h, c): BoxTuple) -> Result<Self, String> {
        let bbox = NormBox::new(cx, cy, w, h).map_err(|e| e.to_string())?;
        if !(0.0..=1.0).contains(&c) {
            return Err(format!("confidence {c} outside [0, 1]"));
        }
        Ok(Self { description_index: i, bbox, confidence: c })
    }
}

/// One image's supervision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub image_id: String,
    pub original_caption: String,
    pub mllm_caption: String,
    pub primary_subject: String,
    pub descriptions: Vec<String>,
    pub boxes: Vec<GroundedBox>,
}

impl AnnotationRecord {
    /// Structural problems with this record, empty when valid.
    pub fn problems(&self, conf_threshold: Option<f64>) -> Vec<String> {
        let mut out = Vec::new();
        if self.image_id.is_empty() {
            out.push("empty image_id".to_string());
        }
        let mut seen = BTreeSet::new();
        for b in &self.boxes {
            if b.description_index >= self.descriptions.len() {
                out.push(format!("box refers to missing description {}", b.description_index));
            }
            if !seen.insert(b.description_index) {
                out.push(format!("more than one box for description {}", b.description_index));
            }
            if let Some(t) = conf_threshold {
                if b.confidence < t {
                    out.push(format!("confidence {} below threshold {t}", b.confidence));
                }
            }
        }
        if self.descriptions.iter().any(|d| d.trim().is_empty()) {
            out.push("empty description".to_string());
        }
        out
    }
}

pub const PIPELINE_VERSION: &str = "1";

/// Sidecar written next to every shard as `<shard>.meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShardMeta {
    pub pipeline_version: String,
    pub conf_threshold: f64,
    pub nms_iou: f64,
    pub generation_client: String,
    pub detection_client: String,
    /// image_id -> image path, relative paths resolved against the shard's directory.
    pub images: BTreeMap<String, String>,
    /// Records whose MLLM caption fell back to the original caption.
    pub caption_fallbacks: Vec<String>,
    /// Samples dropped because a client failed.
    pub skipped: Vec<String>,
}

pub fn meta_path(shard: &Path) -> PathBuf {
    let mut s = shard.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

/// Writes records (sorted by image_id) and the sidecar.
pub fn write_shard(path: &Path, records: &[AnnotationRecord], meta: &ShardMeta) -> Result<(), ShardError> {
    let mut sorted: Vec<&AnnotationRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
    }
    let mut buf = Vec::new();
    for r in sorted {
        serde_json::to_writer(&mut buf, r).expect("records serialize");
        buf.push(b'\n');
    }
    fs::write(path, &buf).map_err(io_err(path))?;
    let mp = meta_path(path);
    let mut f = fs::File::create(&mp).map_err(io_err(&mp))?;
    serde_json::to_writer_pretty(&mut f, meta).expect("meta serializes");
    f.write_all(b"\n").map_err(io_err(&mp))?;
    Ok(())
}

/// Reads records, failing on the first malformed line.
pub fn read_records(path: &Path) -> Result<Vec<AnnotationRecord>, ShardError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| ShardError::Schema {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_meta(shard: &Path) -> Result<ShardMeta, ShardError> {
    let mp = meta_path(shard);
    let text = fs::read_to_string(&mp).map_err(io_err(&mp))?;
    serde_json::from_str(&text).map_err(|e| ShardError::Meta { path: mp, message: e.to_string() })
}

/// Resolves the image file of `image_id` for a shard.
pub fn image_path(shard: &Path, meta: &ShardMeta, image_id: &str) -> Option<PathBuf> {
    let p = Path::new(meta.images.get(image_id)?);
    Some(if p.is_absolute() {
        p.to_path_buf()
    } else {
        shard.parent().unwrap_or(Path::new("")).join(p)
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LengthStats {
    pub min: usize,
    pub max: usize,
    pub mean: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ShardSummary {
    pub records: usize,
    pub descriptions: usize,
    pub boxes: usize,
    /// boxes per image -> number of images
    pub boxes_per_image: BTreeMap<usize, usize>,
    /// words per description
    pub description_words: LengthStats,
    pub caption_fallbacks: usize,
    pub problems: Vec<String>,
}

/// Counts and validation report for a shard. A missing sidecar is reported,
/// not fatal.
pub fn inspect_shard(path: &Path) -> Result<ShardSummary, ShardError> {
    let records = read_records(path)?;
    let meta = read_meta(path).ok();
    let mut s = ShardSummary::default();
    if meta.is_none() && !records.is_empty() {
        s.problems.push("metadata sidecar missing or unreadable".into());
    }
    let threshold = meta.as_ref().map(|m| m.conf_threshold);
    let mut ids = BTreeSet::new();
    let mut words = Vec::new();
    for (i, r) in records.iter().enumerate() {
        s.records += 1;
        s.descriptions += r.descriptions.len();
        s.boxes += r.boxes.len();
        *s.boxes_per_image.entry(r.boxes.len()).or_default() += 1;
        words.extend(r.descriptions.iter().map(|d| d.split_whitespace().count()));
        if !ids.insert(r.image_id.as_str()) {
            s.problems.push(format!("line {}: duplicate image_id {}", i + 1, r.image_id));
        }
        for p in r.problems(threshold) {
            s.problems.push(format!("line {}: {p}", i + 1));
        }
        if let Some(m) = &meta {
            if !m.images.is_empty() && !m.images.contains_key(&r.image_id) {
                s.problems.push(format!("line {}: no image path for {}", i + 1, r.image_id));
            }
        }
    }
    s.caption_fallbacks = meta.map_or(0, |m| m.caption_fallbacks.len());
    if !words.is_empty() {
        s.description_words = LengthStats {
            min: *words.iter().min().unwrap(),
            max: *words.iter().max().unwrap(),
            mean: words.iter().sum::<usize>() as f64 / words.len() as f64,
        };
    }
    Ok(s)
}
