use proptest::prelude::*;

use compseg_core::math::{log_sum_exp, softmax_in_place, weighted_log_sum_exp};
use compseg_core::segmentation::{read_pgm, tri_state, write_pgm};
use compseg_core::tensor::{read_feature_map, write_feature_map};
use compseg_core::{BBox, FeatureMap, Frame, Label, LabelGrid};

fn label() -> impl Strategy<Value = Label> {
    prop_oneof![Just(Label::Foreground), Just(Label::Context), Just(Label::Occluded)]
}

fn grid() -> impl Strategy<Value = LabelGrid> {
    (1usize..8, 1usize..8).prop_flat_map(|(h, w)| {
        prop::collection::vec(label(), h * w).prop_map(move |l| LabelGrid::from_labels(h, w, l).unwrap())
    })
}

proptest! {
    #[test]
    fn log_sum_exp_matches_direct_sum(v in prop::collection::vec(-30.0f64..30.0, 1..12)) {
        let direct = v.iter().map(|x| x.exp()).sum::<f64>().ln();
        prop_assert!((log_sum_exp(&v) - direct).abs() < 1e-12 * direct.abs().max(1.0));
    }

    #[test]
    fn log_sum_exp_is_shift_equivariant(v in prop::collection::vec(-50.0f64..50.0, 1..12), c in -500.0f64..500.0) {
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        prop_assert!((log_sum_exp(&shifted) - log_sum_exp(&v) - c).abs() < 1e-9);
    }

    #[test]
    fn weighted_lse_with_equal_weights_is_mean_in_probability(v in prop::collection::vec(-20.0f64..20.0, 1..10)) {
        let w = vec![1.0 / v.len() as f64; v.len()];
        let expected = log_sum_exp(&v) - (v.len() as f64).ln();
        prop_assert!((weighted_log_sum_exp(&w, &v) - expected).abs() < 1e-10);
    }

    #[test]
    fn softmax_sums_to_one_and_returns_normalizer(v in prop::collection::vec(-40.0f64..40.0, 1..16)) {
        let mut p = v.clone();
        let z = softmax_in_place(&mut p);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!((z - log_sum_exp(&v)).abs() < 1e-10);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn tri_state_assigns_only_strict_winners(f in -5i32..5, c in -5i32..5, o in -5i32..5) {
        let (f, c, o) = (f as f64, c as f64, o as f64);
        let (l, post) = tri_state(f, c, o);
        let expected = if f > c && f > o {
            Label::Foreground
        } else if c > f && c > o {
            Label::Context
        } else {
            Label::Occluded
        };
        prop_assert_eq!(l, expected);
        prop_assert!((0.0..=1.0).contains(&post));
    }

    #[test]
    fn label_text_round_trips(g in grid()) {
        prop_assert_eq!(LabelGrid::from_text(&g.to_text()).unwrap(), g);
    }

    #[test]
    fn pgm_round_trips(g in grid()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        write_pgm(&g, &path).unwrap();
        prop_assert_eq!(read_pgm(&path).unwrap(), g);
    }

    #[test]
    fn feature_maps_round_trip_as_unit_vectors(h in 1usize..6, w in 1usize..6, d in 2usize..6, seed in any::<u64>()) {
        use rand::Rng;
        let mut r = compseg_core::math::rng(seed);
        let raw: Vec<f64> = (0..h * w * d).map(|_| r.random_range(0.1..1.0)).collect();
        let map = FeatureMap::new(h, w, d, raw).unwrap();
        let unit: Vec<f64> = map.iter_cells().flat_map(|v| compseg_core::tensor::normalize(v).unwrap()).collect();
        let mut bytes = Vec::new();
        write_feature_map(&map, &mut bytes).unwrap();
        let (back, _) = read_feature_map(bytes.as_slice()).unwrap();
        prop_assert_eq!(back.data().len(), map.data().len());
        for (a, b) in back.data().iter().zip(&unit) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn box_edges_round_trip(top in -10.0f64..10.0, left in -10.0f64..10.0, h in 0.5f64..10.0, w in 0.5f64..10.0) {
        let b = BBox::from_edges(top, top + h, left, left + w, Frame::Image).unwrap();
        prop_assert!((b.top() - top).abs() < 1e-12 && (b.bottom() - top - h).abs() < 1e-12);
        prop_assert!((b.left() - left).abs() < 1e-12 && (b.right() - left - w).abs() < 1e-12);
        prop_assert!((b.area() - h * w).abs() < 1e-9);
        let t = b.translated(1.5, -2.0);
        prop_assert!((t.top() - top - 1.5).abs() < 1e-12 && (t.left() - left + 2.0).abs() < 1e-12);
    }
}
