//! Two-stage annotation: ask a generation model for the primary subject and
//! its distinguishing features, then localize each feature with an
//! open-vocabulary detector.

use std::collections::{BTreeMap, HashMap};
use std::io::Cursor;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, OnceLock};
use std::thread;
use std::time::Duration;

use base64::Engine;
use image::RgbImage;
use log::{info, warn};
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{iou, Corners, GeometryError, NormBox};
use crate::shard::{write_shard, AnnotationRecord, GroundedBox, ShardError, ShardMeta, PIPELINE_VERSION};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClientError {
    #[error("client unreachable: {0}")]
    Unreachable(String),
    #[error("no fixture for {image_id} / {kind:?}")]
    NoFixture { image_id: String, kind: PromptKind },
    #[error("bad response: {0}")]
    BadResponse(String),
}

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("client failed after {attempts} attempts: {last}")]
    ClientFailure { attempts: u32, last: ClientError },
    #[error("invalid annotation config: {0}")]
    Config(String),
    #[error("duplicate image_id {0}")]
    DuplicateId(String),
    #[error(transparent)]
    Shard(#[from] ShardError),
}

/// An image with its alt-text.
#[derive(Debug, Clone)]
pub struct ImageSample {
    pub image_id: String,
    pub image: RgbImage,
    pub original_caption: String,
    /// Where the image came from, recorded in the shard sidecar.
    pub source: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Subject,
    Descriptions,
    Caption,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Prompt {
    Subject,
    Descriptions { subject: String },
    Caption,
}

impl Prompt {
    pub fn kind(&self) -> PromptKind {
        match self {
            Prompt::Subject => PromptKind::Subject,
            Prompt::Descriptions { .. } => PromptKind::Descriptions,
            Prompt::Caption => PromptKind::Caption,
        }
    }

    pub fn text(&self) -> String {
        match self {
            Prompt::Subject => "What is the primary visual subject in this image? Answer in 2-3 words at most.".into(),
            Prompt::Descriptions { subject } => format!(
                "What are some distinguishing visual features of this {subject}? Answer as a concise list of features"
            ),
            Prompt::Caption => "Describe this image in one line".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorProposal {
    pub bbox: NormBox<f64>,
    pub score: f64,
}

pub trait GenerationClient: Send + Sync {
    fn identifier(&self) -> String;
    fn generate(&self, image: &ImageSample, prompt: &Prompt) -> Result<String, ClientError>;
}

pub trait DetectionClient: Send + Sync {
    fn identifier(&self) -> String;
    fn detect(&self, image: &ImageSample, query: &str) -> Result<Vec<DetectorProposal>, ClientError>;
}

/// Fixture replies keyed by image id and prompt kind.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MockGenerationClient {
    pub replies: BTreeMap<String, BTreeMap<PromptKind, String>>,
}

impl MockGenerationClient {
    pub fn with(mut self, image_id: &str, kind: PromptKind, reply: &str) -> Self {
        self.replies.entry(image_id.into()).or_default().insert(kind, reply.into());
        self
    }
}

impl GenerationClient for MockGenerationClient {
    fn identifier(&self) -> String {
        "mock-generation".into()
    }

    fn generate(&self, image: &ImageSample, prompt: &Prompt) -> Result<String, ClientError> {
        self.replies
            .get(&image.image_id)
            .and_then(|m| m.get(&prompt.kind()))
            .cloned()
            .ok_or_else(|| ClientError::NoFixture { image_id: image.image_id.clone(), kind: prompt.kind() })
    }
}

/// Fixture proposals keyed by image id and query; unknown pairs detect nothing.
/// Each proposal is `[cx, cy, w, h, score]`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MockDetectionClient {
    pub proposals: BTreeMap<String, BTreeMap<String, Vec<[f64; 5]>>>,
}

impl MockDetectionClient {
    pub fn with(mut self, image_id: &str, query: &str, proposals: &[[f64; 5]]) -> Self {
        self.proposals.entry(image_id.into()).or_default().insert(query.into(), proposals.to_vec());
        self
    }
}

impl DetectionClient for MockDetectionClient {
    fn identifier(&self) -> String {
        "mock-detection".into()
    }

    fn detect(&self, image: &ImageSample, query: &str) -> Result<Vec<DetectorProposal>, ClientError> {
        let Some(list) = self.proposals.get(&image.image_id).and_then(|m| m.get(query)) else {
            return Ok(Vec::new());
        };
        list.iter()
            .map(|p| {
                let bbox = NormBox::new(p[0], p[1], p[2], p[3]).map_err(|e| ClientError::BadResponse(e.to_string()))?;
                Ok(DetectorProposal { bbox, score: p[4] })
            })
            .collect()
    }
}

/// Both mock fixture tables, as stored in a fixture file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockFixtures {
    #[serde(default)]
    pub generation: MockGenerationClient,
    #[serde(default)]
    pub detection: MockDetectionClient,
}

/// A client that always fails, for exercising retry and fallback paths.
#[derive(Debug, Default)]
pub struct UnreachableClient {
    pub calls: AtomicUsize,
}

impl GenerationClient for UnreachableClient {
    fn identifier(&self) -> String {
        "unreachable".into()
    }

    fn generate(&self, _: &ImageSample, _: &Prompt) -> Result<String, ClientError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Err(ClientError::Unreachable("no endpoint".into()))
    }
}

impl DetectionClient for UnreachableClient {
    fn identifier(&self) -> String {
        "unreachable".into()
    }

    fn detect(&self, _: &ImageSample, _: &str) -> Result<Vec<DetectorProposal>, ClientError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Err(ClientError::Unreachable("no endpoint".into()))
    }
}

/// JSON-over-HTTP client for a remote generation/detection service.
///
/// `POST {base}/generate` with `{image_id, prompt, image_png_b64}` answers `{text}`;
/// `POST {base}/detect` with `{image_id, query, image_png_b64}` answers
/// `{proposals: [[cx, cy, w, h, score], ...]}`.
#[derive(Debug, Clone)]
pub struct HttpClient {
    pub base_url: String,
    pub timeout: Duration,
}

impl HttpClient {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self { base_url: base_url.into(), timeout: Duration::from_secs(60) }
    }

    fn post(&self, route: &str, body: serde_json::Value) -> Result<serde_json::Value, ClientError> {
        let url = format!("{}/{route}", self.base_url.trim_end_matches('/'));
        let resp = ureq::post(&url)
            .timeout(self.timeout)
            .send_json(body)
            .map_err(|e| ClientError::Unreachable(e.to_string()))?;
        resp.into_json().map_err(|e| ClientError::BadResponse(e.to_string()))
    }

    fn png_b64(image: &RgbImage) -> Result<String, ClientError> {
        let mut buf = Cursor::new(Vec::new());
        image
            .write_to(&mut buf, image::ImageFormat::Png)
            .map_err(|e| ClientError::BadResponse(e.to_string()))?;
        Ok(base64::engine::general_purpose::STANDARD.encode(buf.into_inner()))
    }
}

impl GenerationClient for HttpClient {
    fn identifier(&self) -> String {
        format!("http:{}", self.base_url)
    }

    fn generate(&self, image: &ImageSample, prompt: &Prompt) -> Result<String, ClientError> {
        let v = self.post(
            "generate",
            serde_json::json!({"image_id": image.image_id, "prompt": prompt.text(), "image_png_b64": Self::png_b64(&image.image)?}),
        )?;
        v.get("text")
            .and_then(|t| t.as_str())
            .map(str::to_string)
            .ok_or_else(|| ClientError::BadResponse("missing text".into()))
    }
}

impl DetectionClient for HttpClient {
    fn identifier(&self) -> String {
        format!("http:{}", self.base_url)
    }

    fn detect(&self, image: &ImageSample, query: &str) -> Result<Vec<DetectorProposal>, ClientError> {
        let v = self.post(
            "detect",
            serde_json::json!({"image_id": image.image_id, "query": query, "image_png_b64": Self::png_b64(&image.image)?}),
        )?;
        let raw: Vec<[f64; 5]> = serde_json::from_value(v.get("proposals").cloned().unwrap_or_default())
            .map_err(|e| ClientError::BadResponse(e.to_string()))?;
        raw.iter()
            .map(|p| {
                let bbox = NormBox::new(p[0], p[1], p[2], p[3]).map_err(|e| ClientError::BadResponse(e.to_string()))?;
                Ok(DetectorProposal { bbox, score: p[4].clamp(0.0, 1.0) })
            })
            .collect()
    }
}

/// Bounded retries with exponential backoff.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetryPolicy {
    pub retries: u32,
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { retries: 2, base_delay_ms: 250 }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self { retries: 0, base_delay_ms: 0 }
    }

    pub fn run<R>(&self, mut f: impl FnMut() -> Result<R, ClientError>) -> Result<R, AnnotationError> {
        let mut attempt = 0;
        loop {
            match f() {
                Ok(r) => return Ok(r),
                Err(e) if attempt >= self.retries => {
                    return Err(AnnotationError::ClientFailure { attempts: attempt + 1, last: e })
                }
                Err(_) => {
                    let delay = self.base_delay_ms.saturating_mul(1 << attempt.min(16));
                    if delay > 0 {
                        thread::sleep(Duration::from_millis(delay));
                    }
                    attempt += 1;
                }
            }
        }
    }
}

pub fn elicit_subject(
    client: &dyn GenerationClient,
    image: &ImageSample,
    retry: &RetryPolicy,
) -> Result<String, AnnotationError> {
    let reply = retry.run(|| client.generate(image, &Prompt::Subject))?;
    Ok(reply.trim().to_string())
}

fn bullet() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*(?:[-*+•]|\d+[.)])\s*").expect("static regex"))
}

/// Splits a list-style reply into items: one per line, bullets and numbering
/// removed, blank items dropped.
pub fn parse_feature_list(reply: &str) -> Vec<String> {
    reply
        .lines()
        .map(|l| bullet().replace(l, "").trim().to_string())
        .filter(|l| !l.is_empty())
        .collect()
}

pub fn elicit_descriptions(
    client: &dyn GenerationClient,
    image: &ImageSample,
    subject: &str,
    retry: &RetryPolicy,
) -> Result<Vec<String>, AnnotationError> {
    if subject.trim().is_empty() {
        return Err(AnnotationError::Config("subject must be nonempty".into()));
    }
    let prompt = Prompt::Descriptions { subject: subject.to_string() };
    let reply = retry.run(|| client.generate(image, &prompt))?;
    Ok(parse_feature_list(&reply))
}

/// Outcome of caption elicitation; `fallback` marks use of the original caption.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionOutcome {
    pub text: String,
    pub fallback: bool,
}

pub fn elicit_mllm_caption(client: &dyn GenerationClient, image: &ImageSample, retry: &RetryPolicy) -> CaptionOutcome {
    match retry.run(|| client.generate(image, &Prompt::Caption)) {
        Ok(reply) => CaptionOutcome {
            text: reply.lines().map(str::trim).filter(|l| !l.is_empty()).collect::<Vec<_>>().join(" "),
            fallback: false,
        },
        Err(e) => {
            warn!("{}: caption request failed ({e}); using original caption", image.image_id);
            CaptionOutcome { text: image.original_caption.clone(), fallback: true }
        }
    }
}

/// Detector query for a description: text before the first comma or
/// semicolon, lowercased, leading articles removed.
pub fn extract_attribute(description: &str) -> String {
    let head = description.split([',', ';']).next().unwrap_or("");
    let mut words: Vec<String> = head.split_whitespace().map(str::to_lowercase).collect();
    while words.len() > 1 && matches!(words[0].as_str(), "a" | "an" | "the") {
        words.remove(0);
    }
    words.join(" ")
}

fn sort_by_score(p: &mut [DetectorProposal]) {
    p.sort_by(|a, b| b.score.total_cmp(&a.score));
}

/// Proposals scoring at least `threshold`, best first.
pub fn localize(
    client: &dyn DetectionClient,
    image: &ImageSample,
    query: &str,
    threshold: f64,
    retry: &RetryPolicy,
) -> Vec<DetectorProposal> {
    assert!((0.0..=1.0).contains(&threshold), "threshold {threshold} outside [0, 1]");
    match retry.run(|| client.detect(image, query)) {
        Ok(mut found) => {
            found.retain(|p| p.score >= threshold);
            sort_by_score(&mut found);
            found
        }
        Err(e) => {
            warn!("{}: detection of {query:?} failed ({e})", image.image_id);
            Vec::new()
        }
    }
}

/// Greedy non-maximum suppression; drops proposals whose IoU with a kept one
/// exceeds `iou_threshold`.
pub fn nms_dedupe(proposals: &[DetectorProposal], iou_threshold: f64) -> Vec<DetectorProposal> {
    let mut sorted = proposals.to_vec();
    sort_by_score(&mut sorted);
    let mut kept: Vec<DetectorProposal> = Vec::new();
    for p in sorted {
        if kept.iter().all(|k| iou(&k.bbox, &p.bbox) <= iou_threshold) {
            kept.push(p);
        }
    }
    kept
}

/// Pixel corners in a `source_w x source_h` image to a normalized box.
pub fn rescale_to_normalized(
    corners: (f64, f64, f64, f64),
    source_w: u32,
    source_h: u32,
) -> Result<NormBox<f64>, GeometryError> {
    let (x0, y0, x1, y1) = corners;
    if x1 <= x0 || y1 <= y0 {
        return Err(GeometryError::DegenerateBox);
    }
    let (w, h) = (f64::from(source_w), f64::from(source_h));
    if x0 < 0.0 || y0 < 0.0 || x1 > w || y1 > h {
        return Err(GeometryError::OutOfRange("corners", format!("{corners:?} in {source_w}x{source_h}")));
    }
    NormBox::from_corners(Corners { x0: x0 / w, y0: y0 / h, x1: x1 / w, y1: y1 / h })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnotateConfig {
    pub conf_threshold: f64,
    pub nms_iou: f64,
    pub retry: RetryPolicy,
    pub workers: usize,
}

impl Default for AnnotateConfig {
    fn default() -> Self {
        Self { conf_threshold: 0.3, nms_iou: 0.5, retry: RetryPolicy::default(), workers: 1 }
    }
}

impl AnnotateConfig {
    pub fn validate(&self) -> Result<(), AnnotationError> {
        for (name, v) in [("conf_threshold", self.conf_threshold), ("nms_iou", self.nms_iou)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(AnnotationError::Config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if self.workers == 0 {
            return Err(AnnotationError::Config("workers must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SampleOutcome {
    Annotated { record: AnnotationRecord, caption_fallback: bool },
    Skipped { image_id: String, reason: String },
}

/// Runs both prompting stages and localization for one sample.
pub fn annotate_sample(
    sample: &ImageSample,
    gen: &dyn GenerationClient,
    det: &dyn DetectionClient,
    config: &AnnotateConfig,
) -> SampleOutcome {
    let skip = |e: AnnotationError| {
        warn!("{}: skipped ({e})", sample.image_id);
        SampleOutcome::Skipped { image_id: sample.image_id.clone(), reason: e.to_string() }
    };
    let subject = match elicit_subject(gen, sample, &config.retry) {
        Ok(s) => s,
        Err(e) => return skip(e),
    };
    let descriptions = if subject.is_empty() {
        Vec::new()
    } else {
        match elicit_descriptions(gen, sample, &subject, &config.retry) {
            Ok(d) => d,
            Err(e) => return skip(e),
        }
    };
    let caption = elicit_mllm_caption(gen, sample, &config.retry);
    let mut boxes = Vec::new();
    for (i, d) in descriptions.iter().enumerate() {
        let query = extract_attribute(d);
        if query.is_empty() {
            continue;
        }
        let found = localize(det, sample, &query, config.conf_threshold, &config.retry);
        if let Some(best) = nms_dedupe(&found, config.nms_iou).first() {
            boxes.push(GroundedBox { description_index: i, bbox: best.bbox, confidence: best.score });
        }
    }
    SampleOutcome::Annotated {
        record: AnnotationRecord {
            image_id: sample.image_id.clone(),
            original_caption: sample.original_caption.clone(),
            mllm_caption: caption.text,
            primary_subject: subject,
            descriptions,
            boxes,
        },
        caption_fallback: caption.fallback,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusReport {
    pub records: Vec<AnnotationRecord>,
    pub meta: ShardMeta,
}

/// Annotates every sample (on `config.workers` threads) and writes a shard
/// sorted by image id plus its sidecar.
pub fn annotate_corpus(
    samples: &[ImageSample],
    gen: &dyn GenerationClient,
    det: &dyn DetectionClient,
    config: &AnnotateConfig,
    out: &Path,
) -> Result<CorpusReport, AnnotationError> {
    config.validate()?;
    let mut seen = HashMap::new();
    for s in samples {
        if s.image_id.is_empty() {
            return Err(AnnotationError::Config("empty image_id".into()));
        }
        if seen.insert(s.image_id.as_str(), ()).is_some() {
            return Err(AnnotationError::DuplicateId(s.image_id.clone()));
        }
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, SampleOutcome)>> = Mutex::new(Vec::with_capacity(samples.len()));
    thread::scope(|scope| {
        for _ in 0..config.workers.min(samples.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(sample) = samples.get(i) else { break };
                let outcome = annotate_sample(sample, gen, det, config);
                results.lock().expect("worker panicked").push((i, outcome));
            });
        }
    });
    let mut records = Vec::new();
    let mut caption_fallbacks = Vec::new();
    let mut skipped = Vec::new();
    for (_, outcome) in results.into_inner().expect("worker panicked") {
        match outcome {
            SampleOutcome::Annotated { record, caption_fallback } => {
                if caption_fallback {
                    caption_fallbacks.push(record.image_id.clone());
                }
                records.push(record);
            }
            SampleOutcome::Skipped { image_id, .. } => skipped.push(image_id),
        }
    }
    records.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    caption_fallbacks.sort();
    skipped.sort();
    let meta = ShardMeta {
        pipeline_version: PIPELINE_VERSION.into(),
        conf_threshold: config.conf_threshold,
        nms_iou: config.nms_iou,
        generation_client: gen.identifier(),
        detection_client: det.identifier(),
        images: samples
            .iter()
            .filter_map(|s| s.source.clone().map(|p| (s.image_id.clone(), p)))
            .collect(),
        caption_fallbacks,
        skipped,
    };
    write_shard(out, &records, &meta)?;
    info!("annotated {} samples into {} ({} skipped)", records.len(), out.display(), meta.skipped.len());
    Ok(CorpusReport { records, meta })
}

/// Line of an annotation input manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image_id: String,
    pub image: String,
    pub caption: String,
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("{path}:{line}: {message}")]
    Entry { path: String, line: usize, message: String },
    #[error("io error on {0}: {1}")]
    Io(String, std::io::Error),
}

/// Reads a JSON Lines manifest and decodes the referenced images (paths
/// relative to the manifest's directory).
pub fn load_manifest(path: &Path) -> Result<Vec<ImageSample>, ManifestError> {
    let text = std::fs::read_to_string(path).map_err(|e| ManifestError::Io(path.display().to_string(), e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| ManifestError::Entry { path: path.display().to_string(), line: i + 1, message };
        let e: ManifestEntry = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        let img_path = base.join(&e.image);
        let image = crate::image::load_rgb(&img_path).map_err(|x| err(format!("{}: {x}", img_path.display())))?;
        if image.width() == 0 || image.height() == 0 {
            return Err(err("empty image".into()));
        }
        out.push(ImageSample { image_id: e.image_id, image, original_caption: e.caption, source: Some(e.image) });
    }
    Ok(out)
}
