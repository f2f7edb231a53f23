//! Minimum-cost bipartite matching of ground-truth regions to predicted queries.

use thiserror::Error;

use crate::geometry::{generalized_iou, l1_distance, NormBox};
use crate::scalar::Coord;

#[derive(Debug, Error, PartialEq)]
pub enum AssignmentError {
    #[error("cost matrix has {rows} rows but only {cols} columns")]
    Shape { rows: usize, cols: usize },
    #[error("cost matrix row {0} has the wrong length")]
    Ragged(usize),
    #[error("non-finite cost at ({0}, {1})")]
    NonFinite(usize, usize),
    #[error("negative cost at ({0}, {1})")]
    Negative(usize, usize),
}

/// `rows x cols` matrix of finite costs with `rows <= cols`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix<T> {
    rows: usize,
    cols: usize,
    values: Vec<T>,
}

impl<T: Coord> CostMatrix<T> {
    pub fn new(rows: usize, cols: usize, values: Vec<T>) -> Result<Self, AssignmentError> {
        if rows > cols {
            return Err(AssignmentError::Shape { rows, cols });
        }
        assert_eq!(values.len(), rows * cols, "cost buffer length");
        for (k, v) in values.iter().enumerate() {
            if !v.is_finite_value() {
                return Err(AssignmentError::NonFinite(k / cols.max(1), k % cols.max(1)));
            }
        }
        Ok(Self { rows, cols, values })
    }

    pub fn from_rows(rows: &[Vec<T>], cols: usize) -> Result<Self, AssignmentError> {
        let mut values = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(AssignmentError::Ragged(i));
            }
            values.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, values)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.values[i * self.cols + j]
    }
}

/// Weights of the two box terms in the matching cost.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchWeights<T> {
    pub l1: T,
    pub giou: T,
}

impl<T: Coord> Default for MatchWeights<T> {
    fn default() -> Self {
        Self { l1: T::one(), giou: T::one() }
    }
}

/// `cost[i][j] = w_l1 * l1(gt_i, pred_j) + w_giou * (1 - giou(gt_i, pred_j))`.
pub fn build_cost_matrix<T: Coord>(
    gt: &[NormBox<T>],
    pred: &[NormBox<T>],
    weights: MatchWeights<T>,
) -> Result<CostMatrix<T>, AssignmentError> {
    if gt.len() > pred.len() {
        return Err(AssignmentError::Shape { rows: gt.len(), cols: pred.len() });
    }
    let mut values = Vec::with_capacity(gt.len() * pred.len());
    for g in gt {
        for p in pred {
            values.push(
                weights.l1 * l1_distance(g, p)
                    + weights.giou * (T::one() - generalized_iou(g, p)),
            );
        }
    }
    for (k, v) in values.iter().enumerate() {
        if *v < T::zero() {
            return Err(AssignmentError::Negative(k / pred.len(), k % pred.len()));
        }
    }
    CostMatrix::new(gt.len(), pred.len(), values)
}

/// Row-to-column matching; `pairs` is sorted by row.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment<T> {
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: T,
}

impl<T> Assignment<T> {
    /// Column matched to `row`.
    pub fn query_for(&self, row: usize) -> Option<usize> {
        self.pairs.iter().find(|(r, _)| *r == row).map(|&(_, c)| c)
    }
}

/// Exact minimum-cost injective assignment of every row to a distinct column.
///
/// Shortest augmenting paths with row/column potentials, `O(rows^2 * cols)`.
/// Columns are scanned in ascending order with strict comparisons, so ties
/// resolve toward the lowest column index and results are reproducible.
pub fn hungarian<T: Coord>(cost: &CostMatrix<T>) -> Assignment<T> {
    let (m, n) = (cost.rows, cost.cols);
    if m == 0 {
        return Assignment { pairs: Vec::new(), total_cost: T::zero() };
    }
    // 1-based; index 0 is a virtual column.
    let mut u = vec![T::zero(); m + 1];
    let mut v = vec![T::zero(); n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for i in 1..=m {
        owner[0] = i;
        let mut j0 = 0usize;
        let mut minv: Vec<Option<T>> = vec![None; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta: Option<T> = None;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
                if minv[j].map_or(true, |mv| cur < mv) {
                    minv[j] = Some(cur);
                    way[j] = j0;
                }
                let mj = minv[j].expect("set above");
                if delta.map_or(true, |d| mj < d) {
                    delta = Some(mj);
                    j1 = j;
                }
            }
            let delta = delta.expect("rows <= cols leaves a free column");
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] = u[owner[j]] + delta;
                    v[j] = v[j] - delta;
                } else if let Some(mv) = minv[j] {
                    minv[j] = Some(mv - delta);
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs: Vec<(usize, usize)> = (1..=n)
        .filter(|&j| owner[j] != 0)
        .map(|j| (owner[j] - 1, j - 1))
        .collect();
    pairs.sort_unstable();
    let total_cost = pairs
        .iter()
        .fold(T::zero(), |acc, &(i, j)| acc + cost.get(i, j));
    Assignment { pairs, total_cost }
}
