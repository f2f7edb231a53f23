//! Synthetic grounded scenes: a small colored shape in one cell of a 3x3 grid
//! over a tinted background. The shape's color and form are the class; its
//! box and descriptions are exact by construction.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::NormBox;
use crate::shard::{write_shard, AnnotationRecord, GroundedBox, ShardError, ShardMeta, PIPELINE_VERSION};

pub const COLORS: [(&str, [u8; 3]); 8] = [
    ("red", [220, 40, 40]),
    ("green", [40, 180, 60]),
    ("blue", [40, 80, 220]),
    ("yellow", [230, 210, 40]),
    ("magenta", [200, 50, 200]),
    ("cyan", [40, 200, 210]),
    ("orange", [240, 140, 30]),
    ("white", [245, 245, 245]),
];

pub const SHAPES: [&str; 4] = ["square", "circle", "triangle", "diamond"];

pub const BACKGROUNDS: [(&str, [u8; 3]); 8] = [
    ("gray", [128, 128, 128]),
    ("charcoal", [50, 50, 55]),
    ("sand", [194, 178, 128]),
    ("slate", [112, 128, 144]),
    ("olive", [110, 110, 40]),
    ("navy", [25, 35, 90]),
    ("maroon", [110, 30, 40]),
    ("teal", [30, 110, 110]),
];

pub const CELLS: [&str; 9] = [
    "top left",
    "top center",
    "top right",
    "middle left",
    "center",
    "middle right",
    "bottom left",
    "bottom center",
    "bottom right",
];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("need at least as many images as classes ({n_images} < {n_classes})")]
    TooFewImages { n_images: usize, n_classes: usize },
    #[error("n_classes must be between 1 and 32, got {0}")]
    Classes(usize),
    #[error("io error on {0}: {1}")]
    Io(PathBuf, std::io::Error),
    #[error("image encode: {0}")]
    Encode(#[from] image::ImageError),
    #[error(transparent)]
    Shard(#[from] ShardError),
}

/// Color and shape of class `k`.
pub fn class_parts(k: usize) -> (&'static str, &'static str) {
    (COLORS[k % 8].0, SHAPES[(k + k / 8) % 4])
}

pub fn class_name(k: usize) -> String {
    let (c, s) = class_parts(k);
    format!("{c} {s}")
}

/// Scene layout of image `index`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Scene {
    pub class: usize,
    pub background: usize,
    pub cell: usize,
}

pub fn scene(index: usize, n_classes: usize) -> Scene {
    let round = index / n_classes;
    Scene { class: index % n_classes, background: round % 8, cell: round % 9 }
}

/// Region description of the shape, as used in the shard.
pub fn region_description(class: usize, cell: usize) -> String {
    format!("{} at the {}", class_name(class), CELLS[cell])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthOptions {
    pub image_size: u32,
    /// Index of the first image; disjoint ranges give disjoint scene sets.
    pub start_index: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self { image_size: 64, start_index: 0 }
    }
}

fn inside(shape: usize, dx: f64, dy: f64, r: f64) -> bool {
    match SHAPES[shape] {
        "square" => dx.abs() <= r && dy.abs() <= r,
        "circle" => dx * dx + dy * dy <= r * r,
        // apex up, base at dy = r
        "triangle" => dy <= r && dy >= -r && dx.abs() <= (dy + r) / 2.0,
        _ => dx.abs() + dy.abs() <= r,
    }
}

/// Renders one scene; returns the image and the exact pixel box of the shape.
pub fn render(index: usize, n_classes: usize, seed: u64, size: u32) -> (RgbImage, Scene, NormBox<f64>) {
    let sc = scene(index, n_classes);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let s = f64::from(size);
    let cell = s / 3.0;
    let r = cell * rng.gen_range(0.26..0.34);
    let (col, row) = ((sc.cell % 3) as f64, (sc.cell / 3) as f64);
    let slack = cell / 2.0 - r - 1.0;
    let cx = (col + 0.5) * cell + rng.gen_range(-slack..=slack);
    let cy = (row + 0.5) * cell + rng.gen_range(-slack..=slack);
    let bg = BACKGROUNDS[sc.background].1;
    let fg = COLORS[sc.class % 8].1;
    let shape = SHAPES.iter().position(|&n| n == class_parts(sc.class).1).expect("known shape");

    let mut img = RgbImage::new(size, size);
    let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
    for y in 0..size {
        for x in 0..size {
            let noise: i16 = rng.gen_range(-6..=6);
            let on = inside(shape, f64::from(x) + 0.5 - cx, f64::from(y) + 0.5 - cy, r);
            let base = if on { fg } else { bg };
            let px = base.map(|v| (i16::from(v) + noise).clamp(0, 255) as u8);
            img.put_pixel(x, y, Rgb(px));
            if on {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    let bbox = NormBox::new(
        f64::from(x0 + x1) / 2.0 / s,
        f64::from(y0 + y1) / 2.0 / s,
        f64::from(x1 - x0) / s,
        f64::from(y1 - y0) / s,
    )
    .expect("shape lies inside the image");
    (img, sc, bbox)
}

/// Evaluation manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalEntry {
    pub image_id: String,
    pub image: String,
    pub label: String,
    pub captions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthReport {
    pub shard: PathBuf,
    pub eval_manifest: PathBuf,
    pub descriptions: PathBuf,
    pub records: Vec<AnnotationRecord>,
    pub scenes: Vec<Scene>,
}

/// Writes `images/`, `shard.jsonl` (+ sidecar), `eval.jsonl` and
/// `descriptions.json` under `out_dir`.
pub fn synth_grounded_dataset(
    n_images: usize,
    n_classes: usize,
    seed: u64,
    out_dir: &Path,
    opts: SynthOptions,
) -> Result<SynthReport, SynthError> {
    if n_classes == 0 || n_classes > 32 {
        return Err(SynthError::Classes(n_classes));
    }
    if n_images < n_classes {
        return Err(SynthError::TooFewImages { n_images, n_classes });
    }
    let img_dir = out_dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| SynthError::Io(img_dir.clone(), e))?;
    let mut records = Vec::new();
    let mut scenes = Vec::new();
    let mut images = BTreeMap::new();
    let mut eval = String::new();
    for index in opts.start_index..opts.start_index + n_images {
        let (img, sc, bbox) = render(index, n_classes, seed, opts.image_size);
        let id = format!("syn{index:05}");
        let rel = format!("images/{id}.png");
        img.save(out_dir.join(&rel))?;
        let (color, shape) = class_parts(sc.class);
        let bg = BACKGROUNDS[sc.background].0;
        let cell = CELLS[sc.cell];
        let caption = format!("a {color} {shape} at the {cell} of a {bg} background");
        records.push(AnnotationRecord {
            image_id: id.clone(),
            original_caption: caption.clone(),
            mllm_caption: format!("{bg} image showing a small {color} {shape} at the {cell}"),
            primary_subject: format!("{color} {shape}"),
            descriptions: vec![region_description(sc.class, sc.cell), format!("{bg} background")],
            boxes: vec![GroundedBox { description_index: 0, bbox, confidence: 1.0 }],
        });
        let entry = EvalEntry { image_id: id.clone(), image: rel.clone(), label: class_name(sc.class), captions: vec![caption] };
        eval.push_str(&serde_json::to_string(&entry).expect("serializes"));
        eval.push('\n');
        images.insert(id, rel);
        scenes.push(sc);
    }
    let meta = ShardMeta {
        pipeline_version: PIPELINE_VERSION.into(),
        conf_threshold: 0.3,
        nms_iou: 0.5,
        generation_client: format!("synth-seed-{seed}"),
        detection_client: format!("synth-seed-{seed}"),
        images,
        caption_fallbacks: vec![],
        skipped: vec![],
    };
    let shard = out_dir.join("shard.jsonl");
    write_shard(&shard, &records, &meta)?;
    let eval_manifest = out_dir.join("eval.jsonl");
    fs::write(&eval_manifest, eval).map_err(|e| SynthError::Io(eval_manifest.clone(), e))?;
    let desc: BTreeMap<String, Vec<String>> = (0..n_classes)
        .map(|k| {
            let (c, s) = class_parts(k);
            (class_name(k), vec![format!("{c} colored"), format!("{s} shaped")])
        })
        .collect();
    let descriptions = out_dir.join("descriptions.json");
    fs::write(&descriptions, serde_json::to_string_pretty(&desc).expect("serializes"))
        .map_err(|e| SynthError::Io(descriptions.clone(), e))?;
    Ok(SynthReport { shard, eval_manifest, descriptions, records, scenes })
}
