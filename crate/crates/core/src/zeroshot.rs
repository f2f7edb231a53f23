//! Zero-shot evaluation: description-enriched classification, attribute-only
//! classification, retrieval recall, free-text-to-vocabulary mapping and
//! grounding dumps.
//!
//! Everything is written against small encoder traits so that hand-built
//! embedding fixtures can stand in for a trained model.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::NormBox;
use crate::image::{load_rgb, ImageTensor};
use crate::model::{GrainModel, ModelError, Mode, Session, TextSource};
use crate::scalar::Scalar;
use crate::synth::EvalEntry;
use crate::tokenizer::{Overflow, Tokenizer};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("config: {0}")]
    Config(String),
    #[error("shape: {0}")]
    Shape(String),
    #[error("cannot normalize a zero embedding for {0}")]
    ZeroEmbedding(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("data: {0}")]
    Data(String),
    #[error("io error on {0}: {1}")]
    Io(PathBuf, std::io::Error),
}

pub trait TextEncoder {
    fn embed_text(&self, text: &str) -> Result<Vec<f64>, EvalError>;
}

pub trait ImageEncoder<I: ?Sized> {
    fn embed_image(&self, image: &I) -> Result<Vec<f64>, EvalError>;
}

/// Predicted boxes and region embeddings of one image.
pub trait RegionEncoder<I: ?Sized> {
    fn embed_regions(&self, image: &I) -> Result<(Vec<NormBox<f64>>, Vec<Vec<f64>>), EvalError>;
}

impl<T: Scalar> TextEncoder for GrainModel<T> {
    fn embed_text(&self, text: &str) -> Result<Vec<f64>, EvalError> {
        let ids = Tokenizer::bundled().encode(text, Overflow::Truncate).map_err(ModelError::from)?;
        Ok(GrainModel::embed_text(self, &ids, TextSource::ClassPrompt)?.vector.iter().map(|x| x.f64()).collect())
    }
}

impl<T: Scalar> ImageEncoder<ImageTensor<T>> for GrainModel<T> {
    fn embed_image(&self, image: &ImageTensor<T>) -> Result<Vec<f64>, EvalError> {
        let mut s = Session::eval(self.params());
        let tokens = self.encode_image_tokens(&mut s, image)?;
        let dec = self.decode_queries(&mut s, tokens);
        let e = self.project_image(&mut s, dec.image)?;
        Ok(s.graph.value(e).data().iter().map(|x| x.f64()).collect())
    }
}

impl<T: Scalar> RegionEncoder<ImageTensor<T>> for GrainModel<T> {
    fn embed_regions(&self, image: &ImageTensor<T>) -> Result<(Vec<NormBox<f64>>, Vec<Vec<f64>>), EvalError> {
        let out = GrainModel::embed_image(self, image, Mode::Train)?;
        let boxes = out.pred_boxes.unwrap_or_default().iter().map(|b| b.map(|v| v.f64())).collect();
        let regions = out.region_embeds.iter().map(|r| r.iter().map(|x| x.f64()).collect()).collect();
        Ok((boxes, regions))
    }
}

pub const DEFAULT_TEMPLATE: &str = "{classname}, which {description}";

/// A class name with its descriptions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPromptSet {
    pub classname: String,
    pub descriptions: Vec<String>,
    /// Pattern with `{classname}` and `{description}` slots.
    pub template: String,
}

impl ClassPromptSet {
    pub fn new(classname: impl Into<String>, descriptions: Vec<String>) -> Self {
        Self { classname: classname.into(), descriptions, template: DEFAULT_TEMPLATE.into() }
    }

    /// Distinct prompts in sorted order: the bare class name plus one
    /// templated prompt per description.
    pub fn prompts(&self) -> Vec<String> {
        let mut set = BTreeSet::new();
        set.insert(self.classname.clone());
        for d in &self.descriptions {
            set.insert(self.template.replace("{classname}", &self.classname).replace("{description}", d));
        }
        set.into_iter().collect()
    }
}

/// Reads a `classname -> [description, ...]` JSON object (sorted by class name).
pub fn load_prompt_sets(path: &Path, template: Option<&str>) -> Result<Vec<ClassPromptSet>, EvalError> {
    let text = fs::read_to_string(path).map_err(|e| EvalError::Io(path.to_path_buf(), e))?;
    let map: BTreeMap<String, Vec<String>> =
        serde_json::from_str(&text).map_err(|e| EvalError::Data(format!("{}: {e}", path.display())))?;
    Ok(map
        .into_iter()
        .map(|(c, d)| {
            let mut s = ClassPromptSet::new(c, d);
            if let Some(t) = template {
                s.template = t.to_string();
            }
            s
        })
        .collect())
}

fn normalize(mut v: Vec<f64>, what: &str) -> Result<Vec<f64>, EvalError> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return Err(EvalError::ZeroEmbedding(what.to_string()));
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(v)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn mean_embedding(enc: &dyn TextEncoder, texts: &[String], what: &str) -> Result<Vec<f64>, EvalError> {
    let mut acc: Option<Vec<f64>> = None;
    for t in texts {
        let e = normalize(enc.embed_text(t)?, t)?;
        match &mut acc {
            None => acc = Some(e),
            Some(a) => {
                if a.len() != e.len() {
                    return Err(EvalError::Shape(format!("embedding width changed at {t:?}")));
                }
                a.iter_mut().zip(&e).for_each(|(x, y)| *x += y);
            }
        }
    }
    normalize(acc.ok_or_else(|| EvalError::Config(format!("no prompts for {what}")))?, what)
}

/// One unit vector per class: the renormalized mean of its prompt embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub classnames: Vec<String>,
    pub weights: Vec<Vec<f64>>,
}

pub fn build_classifier(prompt_sets: &[ClassPromptSet], enc: &dyn TextEncoder) -> Result<Classifier, EvalError> {
    if prompt_sets.is_empty() {
        return Err(EvalError::Config("no classes".into()));
    }
    let weights = prompt_sets
        .iter()
        .map(|p| mean_embedding(enc, &p.prompts(), &p.classname))
        .collect::<Result<_, _>>()?;
    Ok(Classifier { classnames: prompt_sets.iter().map(|p| p.classname.clone()).collect(), weights })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dataset: String,
    pub top1: f64,
    /// Recall@k (top-k accuracy for classification).
    pub recall_at: BTreeMap<usize, f64>,
    pub per_class: BTreeMap<String, f64>,
    pub num_samples: usize,
}

pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

/// Ranks of `scores` best first, ties by lower index.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Scores (`n_images x n_classes`) to predictions and a report.
pub fn report_from_scores(
    dataset: &str,
    scores: &[Vec<f64>],
    labels: &[usize],
    classnames: &[String],
) -> Result<(Vec<usize>, MetricReport), EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::Shape(format!("{} score rows for {} labels", scores.len(), labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classnames.len()) {
        return Err(EvalError::Shape(format!("label {bad} out of range")));
    }
    let preds: Vec<usize> = scores.iter().map(|s| argmax(s)).collect();
    let n = labels.len();
    let frac = |hits: usize, total: usize| if total == 0 { 0.0 } else { hits as f64 / total as f64 };
    let mut recall_at = BTreeMap::new();
    for k in DEFAULT_KS {
        let hits = scores.iter().zip(labels).filter(|(s, &l)| ranking(s).iter().take(k).any(|&c| c == l)).count();
        recall_at.insert(k, frac(hits, n));
    }
    let mut per_class = BTreeMap::new();
    for (c, name) in classnames.iter().enumerate() {
        let total = labels.iter().filter(|&&l| l == c).count();
        if total > 0 {
            let hits = labels.iter().zip(&preds).filter(|(&l, &p)| l == c && p == c).count();
            per_class.insert(name.clone(), frac(hits, total));
        }
    }
    let top1 = frac(labels.iter().zip(&preds).filter(|(l, p)| l == p).count(), n);
    Ok((preds, MetricReport { dataset: dataset.into(), top1, recall_at, per_class, num_samples: n }))
}

/// Argmax of cosine similarity between image embeddings and classifier rows.
pub fn classify<I>(
    dataset: &str,
    images: &[I],
    labels: &[usize],
    classifier: &Classifier,
    enc: &dyn ImageEncoder<I>,
) -> Result<(Vec<usize>, MetricReport), EvalError> {
    let scores = images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let e = normalize(enc.embed_image(img)?, &format!("image {i}"))?;
            Ok(classifier.weights.iter().map(|w| dot(&e, w)).collect())
        })
        .collect::<Result<Vec<Vec<f64>>, EvalError>>()?;
    report_from_scores(dataset, &scores, labels, &classifier.classnames)
}

/// Per-class description embeddings for attribute-only classification; the
/// class name never enters a prompt.
pub fn attribute_prompts(prompt_sets: &[ClassPromptSet]) -> Result<Vec<Vec<String>>, EvalError> {
    prompt_sets
        .iter()
        .map(|p| {
            if p.descriptions.is_empty() {
                Err(EvalError::Config(format!("class {} has no descriptions", p.classname)))
            } else {
                Ok(p.descriptions.clone())
            }
        })
        .collect()
}

/// Class score is the mean similarity to the class's description embeddings.
pub fn classify_by_attributes<I>(
    dataset: &str,
    images: &[I],
    labels: &[usize],
    prompt_sets: &[ClassPromptSet],
    text: &dyn TextEncoder,
    image: &dyn ImageEncoder<I>,
) -> Result<(Vec<usize>, MetricReport), EvalError> {
    let prompts = attribute_prompts(prompt_sets)?;
    let embeds: Vec<Vec<Vec<f64>>> = prompts
        .iter()
        .map(|ds| ds.iter().map(|d| normalize(text.embed_text(d)?, d)).collect())
        .collect::<Result<_, _>>()?;
    let scores = images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let e = normalize(image.embed_image(img)?, &format!("image {i}"))?;
            Ok(embeds.iter().map(|ds| ds.iter().map(|d| dot(&e, d)).sum::<f64>() / ds.len() as f64).collect())
        })
        .collect::<Result<Vec<Vec<f64>>, EvalError>>()?;
    let names: Vec<String> = prompt_sets.iter().map(|p| p.classname.clone()).collect();
    report_from_scores(dataset, &scores, labels, &names)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub image_to_text: MetricReport,
    pub text_to_image: MetricReport,
}

/// Recall@k both ways. `text_owner[t]` is the image index that text `t` describes.
pub fn retrieve(
    dataset: &str,
    image_embeds: &[Vec<f64>],
    text_embeds: &[Vec<f64>],
    text_owner: &[usize],
    ks: &[usize],
) -> Result<RetrievalReport, EvalError> {
    if text_embeds.len() != text_owner.len() {
        return Err(EvalError::Shape("text_owner must have one entry per text".into()));
    }
    if let Some(&bad) = text_owner.iter().find(|&&o| o >= image_embeds.len()) {
        return Err(EvalError::Shape(format!("text owner {bad} out of range")));
    }
    let d = image_embeds.first().map_or(0, Vec::len);
    if image_embeds.iter().chain(text_embeds).any(|v| v.len() != d) {
        return Err(EvalError::Shape("embedding widths differ".into()));
    }
    let imgs: Vec<Vec<f64>> = image_embeds.iter().enumerate().map(|(i, v)| normalize(v.clone(), &format!("image {i}"))).collect::<Result<_, _>>()?;
    let txts: Vec<Vec<f64>> = text_embeds.iter().enumerate().map(|(i, v)| normalize(v.clone(), &format!("text {i}"))).collect::<Result<_, _>>()?;
    let report = |n: usize, hit_at: &dyn Fn(usize, usize) -> bool| {
        let recall_at: BTreeMap<usize, f64> =
            ks.iter().map(|&k| (k, if n == 0 { 0.0 } else { (0..n).filter(|&q| hit_at(q, k)).count() as f64 / n as f64 })).collect();
        MetricReport {
            dataset: dataset.into(),
            top1: if n == 0 { 0.0 } else { (0..n).filter(|&q| hit_at(q, 1)).count() as f64 / n as f64 },
            recall_at,
            per_class: BTreeMap::new(),
            num_samples: n,
        }
    };
    let i2t_rank: Vec<Vec<usize>> = imgs.iter().map(|im| ranking(&txts.iter().map(|t| dot(im, t)).collect::<Vec<_>>())).collect();
    let t2i_rank: Vec<Vec<usize>> = txts.iter().map(|t| ranking(&imgs.iter().map(|im| dot(im, t)).collect::<Vec<_>>())).collect();
    let i2t = report(imgs.len(), &|q, k| i2t_rank[q].iter().take(k).any(|&t| text_owner[t] == q));
    let t2i = report(txts.len(), &|q, k| t2i_rank[q].iter().take(k).any(|&i| i == text_owner[q]));
    Ok(RetrievalReport { image_to_text: i2t, text_to_image: t2i })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MappedAnswer {
    pub classname: String,
    pub index: usize,
    pub similarity: f64,
    /// The answer was empty and matched as an empty prompt.
    pub empty_answer: bool,
}

/// Closest vocabulary entry to a free-text answer by cosine similarity.
pub fn map_free_text_to_vocab(answer: &str, vocabulary: &[String], enc: &dyn TextEncoder) -> Result<MappedAnswer, EvalError> {
    if vocabulary.is_empty() {
        return Err(EvalError::Config("empty vocabulary".into()));
    }
    let a = normalize(enc.embed_text(answer)?, answer)?;
    let sims: Vec<f64> = vocabulary
        .iter()
        .map(|v| Ok(dot(&a, &normalize(enc.embed_text(v)?, v)?)))
        .collect::<Result<_, EvalError>>()?;
    let index = argmax(&sims);
    Ok(MappedAnswer {
        classname: vocabulary[index].clone(),
        index,
        similarity: sims[index],
        empty_answer: answer.trim().is_empty(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptionMatch {
    pub description: String,
    pub region: usize,
    pub similarity: f64,
}

/// Grounding output for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grounding {
    pub image_id: String,
    /// `[cx, cy, w, h]` per region query.
    pub boxes: Vec<[f64; 4]>,
    pub matches: Vec<DescriptionMatch>,
}

/// Best-matching region for every description in every image.
pub fn ground<I>(
    image_ids: &[String],
    images: &[I],
    descriptions: &[String],
    regions: &dyn RegionEncoder<I>,
    text: &dyn TextEncoder,
) -> Result<Vec<Grounding>, EvalError> {
    let descs: Vec<Vec<f64>> = descriptions.iter().map(|d| normalize(text.embed_text(d)?, d)).collect::<Result<_, _>>()?;
    image_ids
        .iter()
        .zip(images)
        .map(|(id, img)| {
            let (boxes, embeds) = regions.embed_regions(img)?;
            let embeds: Vec<Vec<f64>> = embeds.into_iter().map(|e| normalize(e, id)).collect::<Result<_, _>>()?;
            let matches = descriptions
                .iter()
                .zip(&descs)
                .map(|(d, de)| {
                    let sims: Vec<f64> = embeds.iter().map(|r| dot(r, de)).collect();
                    let region = argmax(&sims);
                    DescriptionMatch { description: d.clone(), region, similarity: sims.get(region).copied().unwrap_or(f64::NAN) }
                })
                .collect();
            Ok(Grounding { image_id: id.clone(), boxes: boxes.iter().map(NormBox::as_array).collect(), matches })
        })
        .collect()
}

/// [`ground`] written as JSON Lines, one object per image.
pub fn dump_groundings<I>(
    image_ids: &[String],
    images: &[I],
    descriptions: &[String],
    regions: &dyn RegionEncoder<I>,
    text: &dyn TextEncoder,
    out_path: &Path,
) -> Result<Vec<Grounding>, EvalError> {
    let g = ground(image_ids, images, descriptions, regions, text)?;
    let mut buf = String::new();
    for item in &g {
        buf.push_str(&serde_json::to_string(item).expect("serializes"));
        buf.push('\n');
    }
    fs::write(out_path, buf).map_err(|e| EvalError::Io(out_path.to_path_buf(), e))?;
    Ok(g)
}

/// Evaluation manifest with decoded images.
pub struct EvalSet<T> {
    pub entries: Vec<EvalEntry>,
    pub images: Vec<ImageTensor<T>>,
}

impl<T> EvalSet<T> {
    /// Label indices against `classnames`.
    pub fn labels(&self, classnames: &[String]) -> Result<Vec<usize>, EvalError> {
        self.entries
            .iter()
            .map(|e| {
                classnames
                    .iter()
                    .position(|c| c == &e.label)
                    .ok_or_else(|| EvalError::Data(format!("{}: label {} not among the classes", e.image_id, e.label)))
            })
            .collect()
    }
}

/// Reads an `eval.jsonl` manifest (image paths relative to the manifest).
pub fn load_eval_set<T: Scalar>(manifest: &Path, image_size: usize) -> Result<EvalSet<T>, EvalError> {
    let text = fs::read_to_string(manifest).map_err(|e| EvalError::Io(manifest.to_path_buf(), e))?;
    let base = manifest.parent().unwrap_or(Path::new(""));
    let mut entries = Vec::new();
    let mut images = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let e: EvalEntry = serde_json::from_str(line).map_err(|x| EvalError::Data(format!("{}:{}: {x}", manifest.display(), i + 1)))?;
        let p = base.join(&e.image);
        let img = load_rgb(&p).map_err(|x| EvalError::Data(format!("{}: {x}", p.display())))?;
        images.push(ImageTensor::from_rgb(&img, image_size));
        entries.push(e);
    }
    Ok(EvalSet { entries, images })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    /// Texts and images map to fixed vectors.
    struct Fixture {
        texts: HashMap<String, Vec<f64>>,
        images: Vec<Vec<f64>>,
    }

    impl TextEncoder for Fixture {
        fn embed_text(&self, text: &str) -> Result<Vec<f64>, EvalError> {
            self.texts.get(text).cloned().ok_or_else(|| EvalError::Data(format!("no fixture for {text:?}")))
        }
    }

    impl ImageEncoder<usize> for Fixture {
        fn embed_image(&self, i: &usize) -> Result<Vec<f64>, EvalError> {
            Ok(self.images[*i].clone())
        }
    }

    fn unit(d: usize, k: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[k] = 1.0;
        v
    }

    #[test]
    fn prompts_dedupe_and_sort() {
        let a = ClassPromptSet::new("dog", vec!["barks".into(), "barks".into(), "has fur".into()]);
        assert_eq!(a.prompts(), ["dog", "dog, which barks", "dog, which has fur"]);
        let b = ClassPromptSet::new("dog", vec!["has fur".into(), "barks".into()]);
        assert_eq!(a.prompts(), b.prompts());
        assert_eq!(ClassPromptSet::new("cat", vec![]).prompts(), ["cat"]);
    }

    #[test]
    fn classifier_rows_orthogonal() {
        let f = Fixture {
            texts: [("a", unit(4, 0)), ("a, which x", unit(4, 1)), ("b", unit(4, 2)), ("b, which y", unit(4, 3))]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            images: vec![],
        };
        let c = build_classifier(
            &[ClassPromptSet::new("a", vec!["x".into()]), ClassPromptSet::new("b", vec!["y".into()])],
            &f,
        )
        .unwrap();
        assert_eq!(dot(&c.weights[0], &c.weights[1]), 0.0);
        let h = 0.5f64.sqrt();
        for (a, b) in c.weights[0].iter().zip([h, h, 0.0, 0.0]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn seven_of_ten() {
        let classes: Vec<String> = (0..3).map(|k| format!("c{k}")).collect();
        let texts = classes.iter().enumerate().map(|(k, c)| (c.clone(), unit(3, k))).collect();
        let labels = vec![0, 1, 2, 0, 1, 2, 0, 1, 2, 0];
        // images 7, 8, 9 point at the wrong class
        let images = labels.iter().enumerate().map(|(i, &l)| unit(3, if i >= 7 { (l + 1) % 3 } else { l })).collect();
        let f = Fixture { texts, images };
        let sets: Vec<_> = classes.iter().map(|c| ClassPromptSet::new(c.clone(), vec![])).collect();
        let clf = build_classifier(&sets, &f).unwrap();
        let idx: Vec<usize> = (0..10).collect();
        let (_, r) = classify("fx", &idx, &labels, &clf, &f).unwrap();
        assert_eq!(r.top1, 0.7);
        assert_eq!(r.num_samples, 10);
    }

    #[test]
    fn attributes_shared_description_ties_to_first() {
        let f = Fixture {
            texts: [("same".to_string(), unit(2, 0))].into_iter().collect(),
            images: vec![unit(2, 0), unit(2, 1), vec![0.6, 0.8], vec![0.8, 0.6]],
        };
        let sets: Vec<_> = (0..4).map(|k| ClassPromptSet::new(format!("k{k}"), vec!["same".into()])).collect();
        let (p, r) = classify_by_attributes("fx", &[0, 1, 2, 3], &[0, 1, 2, 3], &sets, &f, &f).unwrap();
        assert_eq!(p, [0, 0, 0, 0]);
        assert_eq!(r.top1, 0.25);
        let empty = vec![ClassPromptSet::new("z", vec![])];
        assert!(matches!(classify_by_attributes("fx", &[0], &[0], &empty, &f, &f), Err(EvalError::Config(_))));
    }

    #[test]
    fn retrieval_identity() {
        let e: Vec<Vec<f64>> = (0..12).map(|k| unit(12, k)).collect();
        let owner: Vec<usize> = (0..12).collect();
        let r = retrieve("id", &e, &e, &owner, &DEFAULT_KS).unwrap();
        for k in DEFAULT_KS {
            assert_eq!(r.image_to_text.recall_at[&k], 1.0);
            assert_eq!(r.text_to_image.recall_at[&k], 1.0);
        }
        assert!(retrieve("id", &e, &e, &owner[..3], &DEFAULT_KS).is_err());
    }

    #[test]
    fn multi_caption_groups() {
        let imgs = vec![unit(3, 0), unit(3, 1)];
        let txts = vec![unit(3, 2), unit(3, 0), unit(3, 1), vec![0.0, 0.6, 0.8]];
        let owner = vec![0, 0, 1, 1];
        let r = retrieve("g", &imgs, &txts, &owner, &[1]).unwrap();
        assert_eq!(r.image_to_text.recall_at[&1], 1.0);
        // text 0 is orthogonal to both images; ties rank image 0 first, which owns it
        assert_eq!(r.text_to_image.recall_at[&1], 1.0);
    }

    #[test]
    fn vocab_mapping() {
        let f = Fixture {
            texts: [("golden retriever", vec![1.0, 0.2]), ("tabby cat", vec![0.1, 1.0]), ("a dog", vec![0.9, 0.3]), ("", vec![0.5, 0.5])]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            images: vec![],
        };
        let vocab = vec!["golden retriever".to_string(), "tabby cat".to_string()];
        let m = map_free_text_to_vocab("a dog", &vocab, &f).unwrap();
        assert_eq!((m.index, m.empty_answer), (0, false));
        let m = map_free_text_to_vocab("tabby cat", &vocab, &f).unwrap();
        assert_eq!(m.classname, "tabby cat");
        assert!(map_free_text_to_vocab("", &vocab, &f).unwrap().empty_answer);
        assert!(map_free_text_to_vocab("a dog", &[], &f).is_err());
    }
}
