use grain::assignment::{build_cost_matrix, hungarian, Assignment, MatchWeights};
use grain::objectives::{box_loss, image_caption_loss, region_description_loss, BoxLossKind};
use grain::NormBox;
use proptest::prelude::*;

fn embeds(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-1.0f64..1.0, d), n)
}

fn paired(max: usize) -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    (1..=max, 1usize..6).prop_flat_map(|(n, d)| (embeds(n, d), embeds(n, d)))
}

fn permutation(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<_>>()).prop_shuffle()
}

/// Direct softmax cross-entropy in both directions, no max-shift.
fn naive(a: &[Vec<f64>], b: &[Vec<f64>], s: f64) -> f64 {
    let n = a.len();
    let dot = |x: &Vec<f64>, y: &Vec<f64>| s * x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
    let mut total = 0.0;
    for i in 0..n {
        let row: f64 = (0..n).map(|j| dot(&a[i], &b[j]).exp()).sum();
        let col: f64 = (0..n).map(|j| dot(&a[j], &b[i]).exp()).sum();
        total += -(dot(&a[i], &b[i]).exp() / row).ln() - (dot(&a[i], &b[i]).exp() / col).ln();
    }
    total / (2.0 * n as f64)
}

fn boxes(n: usize) -> impl Strategy<Value = Vec<NormBox<f64>>> {
    prop::collection::vec(
        (0.1f64..0.9, 0.1f64..0.9, 0.05f64..0.5, 0.05f64..0.5).prop_map(|(cx, cy, w, h)| NormBox::new(cx, cy, w, h).unwrap()),
        n,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1_000))]

    #[test]
    fn contrastive_loss_matches_the_naive_form((a, b) in paired(8), s in 0.1f64..8.0) {
        let l = image_caption_loss(&a, &b, s).unwrap();
        prop_assert!(l >= 0.0);
        prop_assert!((l - naive(&a, &b, s)).abs() < 1e-9 * (1.0 + l));
    }

    #[test]
    fn contrastive_loss_ignores_batch_order((a, b) in paired(8), s in 0.1f64..8.0, seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut perm: Vec<usize> = (0..a.len()).collect();
        perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let pa: Vec<Vec<f64>> = perm.iter().map(|&i| a[i].clone()).collect();
        let pb: Vec<Vec<f64>> = perm.iter().map(|&i| b[i].clone()).collect();
        let (l, lp) = (image_caption_loss(&a, &b, s).unwrap(), image_caption_loss(&pa, &pb, s).unwrap());
        prop_assert!((l - lp).abs() < 1e-12 * (1.0 + l));
    }

    #[test]
    fn growing_a_matched_similarity_lowers_the_loss(n in 2usize..8, i in 0usize..8, s in 0.5f64..5.0, bump in 0.05f64..2.0) {
        let i = i % n;
        let a: Vec<Vec<f64>> = (0..n).map(|r| (0..n).map(|c| f64::from(u8::from(r == c))).collect()).collect();
        let mut b = a.clone();
        let before = image_caption_loss(&a, &b, s).unwrap();
        b[i][i] += bump;
        prop_assert!(image_caption_loss(&a, &b, s).unwrap() < before);
    }

    #[test]
    fn box_loss_ignores_joint_permutation(
        (gt, pred, pg, pp) in (1usize..5).prop_flat_map(|m| (m..=m + 3).prop_flat_map(move |q| (boxes(m), boxes(q), permutation(m), permutation(q)))),
    ) {
        let w = MatchWeights::default();
        let a = hungarian(&build_cost_matrix(&gt, &pred, w).unwrap());
        let l = box_loss(&[gt.clone()], &[pred.clone()], &[a.clone()], BoxLossKind::Giou).unwrap();

        let gt2: Vec<NormBox<f64>> = pg.iter().map(|&i| gt[i]).collect();
        let pred2: Vec<NormBox<f64>> = pp.iter().map(|&j| pred[j]).collect();
        // the same matching expressed in permuted indices
        let mut pairs: Vec<(usize, usize)> = a
            .pairs
            .iter()
            .map(|&(g, q)| (pg.iter().position(|&x| x == g).unwrap(), pp.iter().position(|&x| x == q).unwrap()))
            .collect();
        pairs.sort();
        let a2 = Assignment { pairs, total_cost: a.total_cost };
        let l2 = box_loss(&[gt2.clone()], &[pred2.clone()], &[a2], BoxLossKind::Giou).unwrap();
        prop_assert!((l - l2).abs() < 1e-12);

        // re-solving the permuted problem finds a matching of the same cost
        let b = hungarian(&build_cost_matrix(&gt2, &pred2, w).unwrap());
        prop_assert!((b.total_cost - a.total_cost).abs() < 1e-9);
    }

    #[test]
    fn region_loss_ignores_image_order(
        per_image in prop::collection::vec(paired(3), 1..4),
        s in 0.5f64..5.0,
    ) {
        let d = per_image[0].0[0].len();
        let per_image: Vec<_> = per_image.into_iter().filter(|(a, _)| a[0].len() == d).collect();
        let regions: Vec<Vec<Vec<f64>>> = per_image.iter().map(|p| p.0.clone()).collect();
        let descs: Vec<Vec<Vec<f64>>> = per_image.iter().map(|p| p.1.clone()).collect();
        let ident: Vec<Assignment<f64>> =
            regions.iter().map(|r| Assignment { pairs: (0..r.len()).map(|k| (k, k)).collect(), total_cost: 0.0 }).collect();
        let l = region_description_loss(&regions, &descs, &ident, s).unwrap();
        let rev = |v: &Vec<Vec<Vec<f64>>>| v.iter().rev().cloned().collect::<Vec<_>>();
        let ident_rev: Vec<Assignment<f64>> = ident.iter().rev().cloned().collect();
        let lr = region_description_loss(&rev(&regions), &rev(&descs), &ident_rev, s).unwrap();
        prop_assert!((l - lr).abs() < 1e-12 * (1.0 + l));
    }
}

#[test]
fn aligned_batches_get_cheaper_as_the_scale_grows() {
    let a: Vec<Vec<f64>> = (0..4).map(|r| (0..4).map(|c| if r == c { 1.0 } else { 0.0 }).collect()).collect();
    let losses: Vec<f64> = [1.0, 10.0, 100.0].iter().map(|&s| image_caption_loss(&a, &a, s).unwrap()).collect();
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    assert!((losses[0] - naive(&a, &a, 1.0)).abs() < 1e-12);
    assert!(losses[2] < 1e-40);
}
