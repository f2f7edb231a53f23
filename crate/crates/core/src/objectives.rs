//! Training objectives: global image-caption contrast, matched box regression
//! and region-description contrast, summed with equal weight.
//!
//! Each loss exists twice: a value form over plain vectors (used for
//! reporting and checked against closed forms) and a graph form used for
//! backpropagation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assignment::Assignment;
use crate::geometry::{generalized_iou, iou, l1_distance, NormBox};
use crate::scalar::{Coord, Scalar};
use crate::tensor::{Graph, Mat, Var};

#[derive(Debug, Error, PartialEq)]
pub enum ObjectiveError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("assignment pair ({gt}, {query}) out of range for image {image}")]
    Assignment { image: usize, gt: usize, query: usize },
}

/// Overlap term of the box loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxLossKind {
    /// `1 - GIoU`
    #[default]
    Giou,
    /// `1 - IoU`
    Iou,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossFlags {
    pub use_box_loss: bool,
    pub use_rd_loss: bool,
    pub box_kind: BoxLossKind,
}

impl Default for LossFlags {
    fn default() -> Self {
        Self { use_box_loss: true, use_rd_loss: true, box_kind: BoxLossKind::Giou }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ic: f64,
    pub l_box: f64,
    pub l_rd: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.l_ic, self.l_box, self.l_rd, self.l_total].iter().all(|x| x.is_finite())
    }
}

/// Unweighted sum; disabled parts are reported as 0.
pub fn total_loss(l_ic: f64, l_box: f64, l_rd: f64, flags: LossFlags) -> LossBreakdown {
    let l_box = if flags.use_box_loss { l_box } else { 0.0 };
    let l_rd = if flags.use_rd_loss { l_rd } else { 0.0 };
    LossBreakdown { l_ic, l_box, l_rd, l_total: l_ic + l_box + l_rd }
}

fn check_rows<T>(a: &[Vec<T>], b: &[Vec<T>]) -> Result<(), ObjectiveError> {
    if a.len() != b.len() {
        return Err(ObjectiveError::Shape(format!("{} vs {} rows", a.len(), b.len())));
    }
    let d = a.first().map_or(0, Vec::len);
    if a.iter().chain(b).any(|r| r.len() != d) {
        return Err(ObjectiveError::Shape("embedding widths differ".into()));
    }
    Ok(())
}

/// Mean of row-wise and column-wise cross-entropy over `scale * a b^T` with
/// diagonal targets.
fn symmetric_info_nce<T: Scalar>(a: &[Vec<T>], b: &[Vec<T>], scale: T) -> T {
    let n = a.len();
    if n == 0 {
        return T::zero();
    }
    let logits: Vec<Vec<T>> = a
        .iter()
        .map(|x| b.iter().map(|y| scale * x.iter().zip(y).map(|(&p, &q)| p * q).sum::<T>()).collect())
        .collect();
    let ce = |row: &mut dyn Iterator<Item = T>, target: T| {
        let vals: Vec<T> = row.collect();
        let m = vals.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + vals.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        lse - target
    };
    let mut total = T::zero();
    for i in 0..n {
        total += ce(&mut logits[i].iter().copied(), logits[i][i]);
        total += ce(&mut (0..n).map(|r| logits[r][i]), logits[i][i]);
    }
    total / T::of(2.0 * n as f64)
}

/// Symmetric cross-entropy over the batch similarity matrix.
pub fn image_caption_loss<T: Scalar>(image_embeds: &[Vec<T>], caption_embeds: &[Vec<T>], logit_scale: T) -> Result<T, ObjectiveError> {
    check_rows(image_embeds, caption_embeds)?;
    if image_embeds.is_empty() {
        return Err(ObjectiveError::Shape("empty batch".into()));
    }
    Ok(symmetric_info_nce(image_embeds, caption_embeds, logit_scale))
}

/// Sum of `(1 - overlap) + L1` over matched pairs, and the pair count.
pub fn box_loss_sum<T: Coord>(
    gt: &[Vec<NormBox<T>>],
    pred: &[Vec<NormBox<T>>],
    assignments: &[Assignment<T>],
    kind: BoxLossKind,
) -> Result<(T, usize), ObjectiveError> {
    if gt.len() != pred.len() || gt.len() != assignments.len() {
        return Err(ObjectiveError::Shape("gt, predictions and assignments differ in length".into()));
    }
    let mut sum = T::zero();
    let mut pairs = 0;
    for (i, a) in assignments.iter().enumerate() {
        for &(g, q) in &a.pairs {
            let (Some(b), Some(p)) = (gt[i].get(g), pred[i].get(q)) else {
                return Err(ObjectiveError::Assignment { image: i, gt: g, query: q });
            };
            let overlap = match kind {
                BoxLossKind::Giou => generalized_iou(b, p),
                BoxLossKind::Iou => iou(b, p),
            };
            sum = sum + (T::one() - overlap) + l1_distance(b, p);
            pairs += 1;
        }
    }
    Ok((sum, pairs))
}

/// Per-pair mean of the box loss; 0 when no image has ground truth.
pub fn box_loss<T: Coord>(
    gt: &[Vec<NormBox<T>>],
    pred: &[Vec<NormBox<T>>],
    assignments: &[Assignment<T>],
    kind: BoxLossKind,
) -> Result<T, ObjectiveError> {
    let (sum, pairs) = box_loss_sum(gt, pred, assignments, kind)?;
    if pairs == 0 {
        return Ok(T::zero());
    }
    let n = (0..pairs).fold(T::zero(), |acc, _| acc + T::one());
    Ok(sum / n)
}

/// Batch-wide symmetric InfoNCE between matched regions and their descriptions.
///
/// `description_embeds[i][g]` belongs to ground-truth box `g` of image `i`;
/// the region paired with it is `region_embeds[i][σ(g)]`.
pub fn region_description_loss<T: Scalar, A: Coord>(
    region_embeds: &[Vec<Vec<T>>],
    description_embeds: &[Vec<Vec<T>>],
    assignments: &[Assignment<A>],
    logit_scale: T,
) -> Result<T, ObjectiveError> {
    let (regions, descs) = matched_pairs(region_embeds, description_embeds, assignments)?;
    check_rows(&regions, &descs)?;
    Ok(symmetric_info_nce(&regions, &descs, logit_scale))
}

/// Flattens matched (region, description) pairs in image order, then ground-truth order.
pub fn matched_pairs<T: Clone, A: Coord>(
    region_embeds: &[Vec<Vec<T>>],
    description_embeds: &[Vec<Vec<T>>],
    assignments: &[Assignment<A>],
) -> Result<(Vec<Vec<T>>, Vec<Vec<T>>), ObjectiveError> {
    if region_embeds.len() != description_embeds.len() || region_embeds.len() != assignments.len() {
        return Err(ObjectiveError::Shape("regions, descriptions and assignments differ in length".into()));
    }
    let mut regions = Vec::new();
    let mut descs = Vec::new();
    for (i, a) in assignments.iter().enumerate() {
        for &(g, q) in &a.pairs {
            let (Some(d), Some(r)) = (description_embeds[i].get(g), region_embeds[i].get(q)) else {
                return Err(ObjectiveError::Assignment { image: i, gt: g, query: q });
            };
            regions.push(r.clone());
            descs.push(d.clone());
        }
    }
    Ok((regions, descs))
}

/// Graph form of the symmetric contrastive loss over rows of `a` and `b` (`n x d` each).
pub fn info_nce_graph<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var, scale: Var) -> Var {
    let n = g.shape(a).0;
    let targets: Vec<usize> = (0..n).collect();
    let sims = g.matmul_t(a, b);
    let logits = g.scale_by(sims, scale);
    let forward = g.cross_entropy(logits, &targets);
    let lt = g.transpose(logits);
    let backward = g.cross_entropy(lt, &targets);
    let both = g.add(forward, backward);
    g.scale(both, T::of(0.5))
}

/// Graph form of the box loss for matched rows: `pred` and `gt` are `P x 4` in
/// `cx, cy, w, h` order. Returns the per-pair mean.
pub fn box_loss_graph<T: Scalar>(g: &mut Graph<T>, pred: Var, gt: &Mat<T>, kind: BoxLossKind) -> Var {
    let p = g.shape(pred).0;
    assert_eq!(gt.shape(), (p, 4), "ground truth must be P x 4");
    let gt_var = g.constant(gt.clone());

    let corners = |g: &mut Graph<T>, b: Var| {
        let c = |g: &mut Graph<T>, k| g.slice_cols(b, k, 1);
        let (cx, cy, w, h) = (c(g, 0), c(g, 1), c(g, 2), c(g, 3));
        let hw = g.scale(w, T::of(0.5));
        let hh = g.scale(h, T::of(0.5));
        let x0 = g.sub(cx, hw);
        let x1 = g.add(cx, hw);
        let y0 = g.sub(cy, hh);
        let y1 = g.add(cy, hh);
        [x0, y0, x1, y1].map(|v| g.clamp(v, T::zero(), T::one()))
    };
    let [ax0, ay0, ax1, ay1] = corners(g, pred);
    let [bx0, by0, bx1, by1] = corners(g, gt_var);

    let area = |g: &mut Graph<T>, x0, y0, x1, y1| {
        let w = g.sub(x1, x0);
        let h = g.sub(y1, y0);
        let w = g.relu(w);
        let h = g.relu(h);
        g.mul(w, h)
    };
    let area_a = area(g, ax0, ay0, ax1, ay1);
    let area_b = area(g, bx0, by0, bx1, by1);
    let ix0 = g.maximum(ax0, bx0);
    let iy0 = g.maximum(ay0, by0);
    let ix1 = g.minimum(ax1, bx1);
    let iy1 = g.minimum(ay1, by1);
    let inter = area(g, ix0, iy0, ix1, iy1);
    let sum_ab = g.add(area_a, area_b);
    let union = g.sub(sum_ab, inter);
    let overlap = g.div(inter, union);
    let overlap = match kind {
        BoxLossKind::Iou => overlap,
        BoxLossKind::Giou => {
            let ex0 = g.minimum(ax0, bx0);
            let ey0 = g.minimum(ay0, by0);
            let ex1 = g.maximum(ax1, bx1);
            let ey1 = g.maximum(ay1, by1);
            let enclosing = area(g, ex0, ey0, ex1, ey1);
            let dead = g.sub(enclosing, union);
            let frac = g.div(dead, enclosing);
            g.sub(overlap, frac)
        }
    };
    let diff = g.sub(pred, gt_var);
    let l1 = g.abs(diff);
    let l1 = g.sum(l1);
    let ov = g.sum(overlap);
    let ov_loss = g.scale(ov, T::of(-1.0));
    let ov_loss = g.add_const(ov_loss, T::of(p as f64));
    let total = g.add(ov_loss, l1);
    g.scale(total, T::of(1.0 / p as f64))
}
