use proptest::prelude::*;
use semsplat::losses::{color_mse, regional_smoothness, sem_ce};
use semsplat::metrics::{segmentation_metrics, LabelMap, IGNORE};
use semsplat::tensor::FeatureMap;
use semsplat::verify;

const K: usize = 4;

prop_compose! {
    fn labels(h: usize, w: usize)(raw in prop::collection::vec(0u8..(K as u8 + 1), h * w)) -> LabelMap {
        let l = raw.into_iter().map(|v| if v == K as u8 { IGNORE } else { v }).collect();
        LabelMap::new(w, h, l).unwrap()
    }
}

prop_compose! {
    fn probs(h: usize, w: usize)(raw in prop::collection::vec(0.01f64..1.0, K * h * w)) -> FeatureMap<f64> {
        let hw = h * w;
        let mut data = raw;
        for p in 0..hw {
            let s: f64 = (0..K).map(|c| data[c * hw + p]).sum();
            for c in 0..K {
                data[c * hw + p] /= s;
            }
        }
        FeatureMap::from_vec(K, h, w, data)
    }
}

fn transpose_labels(l: &LabelMap) -> LabelMap {
    let mut out = vec![0; l.labels.len()];
    for y in 0..l.height {
        for x in 0..l.width {
            out[x * l.height + y] = l.at(y, x);
        }
    }
    LabelMap::new(l.height, l.width, out).unwrap()
}

fn transpose_map(m: &FeatureMap<f64>) -> FeatureMap<f64> {
    let mut out = FeatureMap::zeros(m.channels, m.width, m.height);
    for c in 0..m.channels {
        for y in 0..m.height {
            for x in 0..m.width {
                let i = out.idx(c, x, y);
                out.data[i] = m.at(c, y, x);
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn losses_are_nonnegative(gt in labels(5, 6), pred in probs(5, 6), img in prop::collection::vec(0.0f64..1.0, 90)) {
        if gt.valid_count() > 0 {
            prop_assert!(sem_ce(&gt, &pred, 1e-8).unwrap().value >= 0.0);
        }
        prop_assert!(regional_smoothness(&gt, &pred).unwrap().value >= 0.0);
        let a = FeatureMap::from_vec(3, 5, 6, img.clone());
        let b = FeatureMap::from_vec(3, 5, 6, img.iter().rev().cloned().collect());
        prop_assert!(color_mse(&a, &b).unwrap().value >= 0.0);
        prop_assert_eq!(color_mse(&a, &a).unwrap().value, 0.0);
    }

    #[test]
    fn fixed_points_have_zero_loss(gt in labels(4, 7)) {
        let truth = LabelMap::new(gt.width, gt.height, gt.labels.iter().map(|&l| if l == IGNORE { 0 } else { l }).collect()).unwrap();
        let one_hot = truth.one_hot(K);
        prop_assert_eq!(sem_ce(&truth, &one_hot, 1e-8).unwrap().value, 0.0);
        prop_assert_eq!(regional_smoothness(&truth, &one_hot).unwrap().value, 0.0);
        let constant = FeatureMap::from_vec(K, 4, 7, vec![0.25; K * 28]);
        prop_assert_eq!(regional_smoothness(&gt, &constant).unwrap().value, 0.0);
    }

    #[test]
    fn smoothness_survives_transposition(gt in labels(5, 7), pred in probs(5, 7)) {
        let a = regional_smoothness(&gt, &pred).unwrap().value;
        let b = regional_smoothness(&transpose_labels(&gt), &transpose_map(&pred)).unwrap().value;
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
    }

    #[test]
    fn metrics_survive_relabeling(gt in labels(6, 6), pred in labels(6, 6), perm in Just((0..K as u8).collect::<Vec<_>>()).prop_shuffle()) {
        prop_assume!(gt.valid_count() > 0);
        let relabel = |l: &LabelMap| LabelMap::new(l.width, l.height, l.labels.iter().map(|&v| if v == IGNORE { v } else { perm[v as usize] }).collect()).unwrap();
        let a = segmentation_metrics(&gt, &pred, K).unwrap();
        let b = segmentation_metrics(&relabel(&gt), &relabel(&pred), K).unwrap();
        prop_assert_eq!(a.miou, b.miou);
        prop_assert_eq!(a.acc, b.acc);
        prop_assert_eq!(a.class_acc, b.class_acc);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn loss_gradients_match_finite_differences(seed in 0u64..10_000) {
        prop_assert!(verify::check_ce_gradient(seed).unwrap().passed());
        prop_assert!(verify::check_mse_gradient(seed).unwrap().passed());
        prop_assert!(verify::check_smoothness_gradient(seed).unwrap().passed());
    }

    #[test]
    fn render_gradients_match_finite_differences(seed in 0u64..10_000) {
        let s = verify::check_semantic_backprop(seed).unwrap();
        prop_assert!(s.passed(), "{}", s.line());
        let c = verify::check_color_backprop(seed).unwrap();
        prop_assert!(c.passed(), "{}", c.line());
    }
}
