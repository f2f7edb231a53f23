use grain::assignment::{build_cost_matrix, hungarian, CostMatrix, MatchWeights};
use grain::geometry::{generalized_iou, l1_distance, NormBox};
use num_rational::Rational64;
use proptest::prelude::*;

fn brute_force(rows: &[Vec<i64>], n: usize) -> i64 {
    fn go(rows: &[Vec<i64>], r: usize, used: u32, acc: i64, n: usize) -> i64 {
        if r == rows.len() {
            return acc;
        }
        (0..n).filter(|j| used & (1 << j) == 0).map(|j| go(rows, r + 1, used | (1 << j), acc + rows[r][j], n)).min().unwrap_or(i64::MAX)
    }
    go(rows, 0, 0, 0, n)
}

fn matrices() -> impl Strategy<Value = (Vec<Vec<i64>>, usize)> {
    (1usize..=5, 0usize..=2).prop_flat_map(|(m, extra)| {
        let n = (m + extra).min(7);
        (prop::collection::vec(prop::collection::vec(-20i64..20, n), m), Just(n))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(3_000))]

    #[test]
    fn matches_brute_force((rows, n) in matrices()) {
        let a = hungarian(&CostMatrix::from_rows(&rows, n).unwrap());
        prop_assert_eq!(a.total_cost, brute_force(&rows, n));
        prop_assert_eq!(a.pairs.len(), rows.len());
        let mut cols: Vec<usize> = a.pairs.iter().map(|p| p.1).collect();
        cols.sort();
        cols.dedup();
        prop_assert_eq!(cols.len(), rows.len());
    }

    #[test]
    fn column_permutation_equivariance((rows, n) in matrices(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        // column j of the permuted matrix is column perm[j] of the original
        let permuted: Vec<Vec<i64>> = rows.iter().map(|r| perm.iter().map(|&j| r[j]).collect()).collect();
        let a = hungarian(&CostMatrix::from_rows(&rows, n).unwrap());
        let b = hungarian(&CostMatrix::from_rows(&permuted, n).unwrap());
        prop_assert_eq!(a.total_cost, b.total_cost);
        let mapped: i64 = b.pairs.iter().map(|&(i, j)| rows[i][perm[j]]).sum();
        prop_assert_eq!(mapped, a.total_cost);
    }

    #[test]
    fn constant_shift((rows, n) in matrices(), c in -50i64..50) {
        let shifted: Vec<Vec<i64>> = rows.iter().map(|r| r.iter().map(|v| v + c).collect()).collect();
        let a = hungarian(&CostMatrix::from_rows(&rows, n).unwrap());
        let b = hungarian(&CostMatrix::from_rows(&shifted, n).unwrap());
        prop_assert_eq!(b.total_cost, a.total_cost + c * rows.len() as i64);
    }
}

#[test]
fn exact_cost_of_half_overlapping_boxes() {
    let r = |n, d| Rational64::new(n, d);
    let gt = [NormBox::new(r(1, 4), r(1, 4), r(1, 2), r(1, 2)).unwrap()];
    let pred = [NormBox::new(r(1, 2), r(1, 4), r(1, 2), r(1, 2)).unwrap()];
    let w = MatchWeights { l1: r(1, 1), giou: r(1, 1) };
    let cost = build_cost_matrix(&gt, &pred, w).unwrap();
    assert_eq!(cost.get(0, 0), r(11, 12));
    assert_eq!(l1_distance(&gt[0], &pred[0]) + (r(1, 1) - generalized_iou(&gt[0], &pred[0])), r(11, 12));
}
