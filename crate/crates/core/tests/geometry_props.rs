use grain::geometry::{generalized_iou, iou, l1_distance, Corners, NormBox};
use num_rational::Rational64;
use proptest::prelude::*;

fn boxes() -> impl Strategy<Value = NormBox<f64>> {
    (0.0f64..0.95, 0.0f64..0.95, 0.01f64..1.0, 0.01f64..1.0).prop_map(|(x0, y0, fw, fh)| {
        let x1 = x0 + (1.0 - x0) * fw;
        let y1 = y0 + (1.0 - y0) * fh;
        NormBox::from_corners(Corners { x0, y0, x1, y1 }).expect("inside the unit square")
    })
}

/// Boxes with corners on a 1/1000 lattice, in exact arithmetic.
fn exact_boxes() -> impl Strategy<Value = NormBox<Rational64>> {
    (0i64..990, 0i64..990, 1i64..1000, 1i64..1000).prop_map(|(x0, y0, w, h)| {
        let r = |v: i64| Rational64::new(v, 1000);
        let (x1, y1) = ((x0 + w).min(1000), (y0 + h).min(1000));
        NormBox::from_corners(Corners { x0: r(x0), y0: r(y0), x1: r(x1.max(x0 + 1)), y1: r(y1.max(y0 + 1)) }).expect("valid")
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100_000))]

    #[test]
    fn overlap_ranges_and_symmetry(a in boxes(), b in boxes()) {
        let (i, g) = (iou(&a, &b), generalized_iou(&a, &b));
        prop_assert!((0.0..=1.0).contains(&i));
        prop_assert!(g > -1.0 && g <= 1.0);
        prop_assert!(g <= i + 1e-15);
        prop_assert_eq!(i, iou(&b, &a));
        prop_assert_eq!(g, generalized_iou(&b, &a));
        prop_assert_eq!(l1_distance(&a, &b), l1_distance(&b, &a));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2_000))]

    #[test]
    fn uniform_scaling(a in boxes(), b in boxes(), k in 0.05f64..1.0) {
        let s = |x: &NormBox<f64>| NormBox::new(x.cx * k, x.cy * k, x.w * k, x.h * k).unwrap();
        let (sa, sb) = (s(&a), s(&b));
        prop_assert!((iou(&sa, &sb) - iou(&a, &b)).abs() < 1e-9);
        prop_assert!((generalized_iou(&sa, &sb) - generalized_iou(&a, &b)).abs() < 1e-9);
    }

    #[test]
    fn exact_scaling(a in exact_boxes(), b in exact_boxes(), num in 1i64..=20) {
        let k = Rational64::new(num, 20);
        let s = |x: &NormBox<Rational64>| NormBox::new(x.cx * k, x.cy * k, x.w * k, x.h * k).unwrap();
        let (sa, sb) = (s(&a), s(&b));
        prop_assert_eq!(iou(&sa, &sb), iou(&a, &b));
        prop_assert_eq!(generalized_iou(&sa, &sb), generalized_iou(&a, &b));
        prop_assert_eq!(l1_distance(&sa, &sb), l1_distance(&a, &b) * k);
    }

    #[test]
    fn corner_round_trip(a in exact_boxes()) {
        prop_assert_eq!(NormBox::from_corners(a.to_corners()).unwrap(), a);
    }

    #[test]
    fn exact_self_overlap_is_one(a in exact_boxes()) {
        prop_assert_eq!(iou(&a, &a), Rational64::from_integer(1));
        prop_assert_eq!(generalized_iou(&a, &a), Rational64::from_integer(1));
    }
}
