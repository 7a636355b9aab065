mod common;

use common::*;
use probeforge_core::metrics::{
    accuracy, average_precision, f1_binary, macro_f1, pr_auc, report, roc_auc, roc_auc_scores, stratify,
    ScoredPredictions,
};
use probeforge_core::ProbeError;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

/// Binary predictions from positive-class probabilities.
fn binary(p1: &[f64], labels: &[usize]) -> ScoredPredictions {
    let scores = p1.iter().flat_map(|&p| [1.0 - p, p]).collect();
    ScoredPredictions::new(2, scores, labels.to_vec(), 1).unwrap()
}

/// Random instance with both classes present; scores come from a coarse grid
/// so ties are common.
fn random_instance(r: &mut rand_chacha::ChaCha8Rng) -> (Vec<f64>, Vec<bool>) {
    loop {
        let n = r.random_range(2..=32);
        let levels = r.random_range(2..=12);
        let scores: Vec<f64> = (0..n).map(|_| r.random_range(0..levels) as f64 / levels as f64).collect();
        let pos: Vec<bool> = (0..n).map(|_| r.random_bool(0.4)).collect();
        if pos.iter().any(|&p| p) && pos.iter().any(|&p| !p) {
            return (scores, pos);
        }
    }
}

#[test]
fn f1_examples() {
    assert_eq!(f1_binary(&binary(&[0.9, 0.1, 0.8, 0.2], &[1, 0, 1, 0])), 1.0);
    assert_eq!(f1_binary(&binary(&[0.1, 0.1, 0.2, 0.2], &[1, 0, 1, 0])), 0.0);
    // TP=2, FP=1, FN=1
    let p = binary(&[0.9, 0.9, 0.9, 0.1, 0.1], &[1, 1, 0, 1, 0]);
    assert!((f1_binary(&p) - 2.0 / 3.0).abs() < 1e-15);
    // no positives predicted and none present: P+R = 0
    assert_eq!(f1_binary(&binary(&[0.1, 0.2], &[0, 0])), 0.0);
}

#[test]
fn accuracy_examples() {
    assert_eq!(accuracy(&binary(&[0.9, 0.1], &[1, 0])), 1.0);
    assert_eq!(accuracy(&binary(&[0.1, 0.9], &[1, 0])), 0.0);
    assert_eq!(accuracy(&binary(&[0.9, 0.1, 0.8, 0.7], &[1, 0, 1, 0])), 0.75);
}

#[test]
fn ap_examples() {
    assert_eq!(average_precision(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap(), 1.0);
    assert_eq!(average_precision(&[0.9, 0.8, 0.7, 0.1], &[false, false, false, true]).unwrap(), 0.25);
    assert!(matches!(
        average_precision(&[0.9, 0.1], &[false, false]),
        Err(ProbeError::UndefinedMetric(_))
    ));
}

#[test]
fn roc_examples() {
    assert_eq!(roc_auc_scores(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap(), 1.0);
    assert_eq!(roc_auc_scores(&[0.1, 0.2, 0.8, 0.9], &[true, true, false, false]).unwrap(), 0.0);
    assert_eq!(roc_auc_scores(&[0.5, 0.5], &[true, false]).unwrap(), 0.5);
    assert!(matches!(roc_auc_scores(&[0.5], &[true]), Err(ProbeError::UndefinedMetric(_))));
}

#[test]
fn twenty_point_roc_equals_trapezoid() {
    let mut r = rng(20);
    for _ in 0..50 {
        let scores: Vec<f64> = (0..20).map(|_| r.random::<f64>()).collect();
        let mut pos: Vec<bool> = (0..20).map(|i| i < 9).collect();
        pos.shuffle(&mut r);
        let got = roc_auc_scores(&scores, &pos).unwrap();
        assert!((got - trapezoid_auc(&scores, &pos)).abs() <= 1e-12);
    }
}

#[test]
fn thousand_instances_against_brute_force() {
    let mut r = rng(1000);
    for k in 0..1000 {
        let (scores, pos) = random_instance(&mut r);
        let ap = average_precision(&scores, &pos).unwrap();
        assert_eq!(ap, brute_force_ap(&scores, &pos), "instance {k}");
        let auc = roc_auc_scores(&scores, &pos).unwrap();
        assert!((auc - trapezoid_auc(&scores, &pos)).abs() <= 1e-12, "instance {k}");
    }
}

#[test]
fn shuffled_label_scores_match_enumeration() {
    let mut r = rng(5);
    for _ in 0..100 {
        let mut labels: Vec<bool> = (0..8).map(|i| i % 3 == 0).collect();
        let scores: Vec<f64> = labels.iter().map(|&b| f64::from(u8::from(b))).collect();
        labels.shuffle(&mut r);
        assert_eq!(average_precision(&scores, &labels).unwrap(), brute_force_ap(&scores, &labels));
    }
}

#[test]
fn flip_symmetry_without_ties() {
    let mut r = rng(6);
    for _ in 0..200 {
        let n = r.random_range(2..30);
        let scores: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
        let mut pos: Vec<bool> = (0..n).map(|_| r.random_bool(0.5)).collect();
        pos[0] = true;
        pos[1] = false;
        let auc = roc_auc_scores(&scores, &pos).unwrap();
        let flipped_s: Vec<f64> = scores.iter().map(|s| -s).collect();
        let flipped_p: Vec<bool> = pos.iter().map(|p| !p).collect();
        let flipped = roc_auc_scores(&flipped_s, &flipped_p).unwrap();
        assert!((flipped - auc).abs() <= 1e-12);
        let inverted = roc_auc_scores(&flipped_s, &pos).unwrap();
        assert!((inverted - (1.0 - auc)).abs() <= 1e-12);
    }
}

#[test]
fn stratify_examples() {
    let all_right = binary(&[0.9, 0.1, 0.8], &[1, 0, 1]);
    let g = stratify(&all_right);
    assert!(g.iter().filter(|g| !g.correct).all(|g| g.indices.is_empty()));

    let one_error_each = binary(&[0.9, 0.1, 0.2, 0.8], &[1, 0, 1, 0]);
    let g = stratify(&one_error_each);
    assert_eq!(g.iter().filter(|g| !g.indices.is_empty()).count(), 4);

    let mut r = rng(9);
    for _ in 0..50 {
        let n = r.random_range(1..40);
        let c = r.random_range(2..5);
        let mut scores = Vec::new();
        for _ in 0..n {
            let raw: Vec<f64> = (0..c).map(|_| r.random::<f64>() + 1e-3).collect();
            let z: f64 = raw.iter().sum();
            scores.extend(raw.iter().map(|v| v / z));
        }
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
        let p = ScoredPredictions::new(c, scores, labels, 1).unwrap();
        let groups = stratify(&p);
        assert_eq!(groups.len(), 2 * c);
        let mut seen: Vec<usize> = groups.iter().flat_map(|g| g.indices.clone()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..n).collect::<Vec<_>>());
        for g in &groups {
            for &i in &g.indices {
                assert_eq!(p.labels[i], g.label);
                assert_eq!(p.predicted(i) == g.label, g.correct);
            }
        }
    }
}

#[test]
fn invalid_predictions_are_rejected() {
    assert!(ScoredPredictions::new(2, vec![0.5, 0.6], vec![0], 1).is_err());
    assert!(ScoredPredictions::new(2, vec![], vec![], 1).is_err());
    assert!(ScoredPredictions::new(2, vec![0.5, 0.5], vec![2], 1).is_err());
}

#[test]
fn positive_class_selects_scores() {
    // label 0 is the positive class here
    let scores = vec![0.9, 0.1, 0.2, 0.8, 0.7, 0.3];
    let p = ScoredPredictions::new(2, scores, vec![0, 1, 0], 0).unwrap();
    assert_eq!(roc_auc(&p).unwrap(), 1.0);
    assert_eq!(pr_auc(&p).unwrap(), 1.0);
    assert_eq!(f1_binary(&p), 1.0);
}

#[test]
fn multiclass_macro_metrics() {
    // three classes, one mistake: example 2 (label 2) predicted 1
    let scores = vec![0.8, 0.1, 0.1, 0.1, 0.8, 0.1, 0.1, 0.5, 0.4, 0.2, 0.2, 0.6];
    let p = ScoredPredictions::new(3, scores, vec![0, 1, 2, 2], 1).unwrap();
    // per class F1: 1, 2/3, 2/3
    assert!((macro_f1(&p) - (1.0 + 2.0 / 3.0 + 2.0 / 3.0) / 3.0).abs() < 1e-15);
    let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
    let rep = report(&p, &names);
    assert_eq!(rep.n, 4);
    assert_eq!(rep.accuracy, 0.75);
    assert_eq!(rep.f1, macro_f1(&p));
    assert!(rep.per_class.contains_key("c"));
    let json = serde_json::to_value(&rep).unwrap();
    for key in ["f1", "accuracy", "roc_auc", "pr_auc", "n", "per_class"] {
        assert!(json.get(key).is_some());
    }
}

#[test]
fn undefined_aucs_are_absent_from_report() {
    let p = binary(&[0.9, 0.8], &[0, 0]);
    let rep = report(&p, &[]);
    assert_eq!(rep.roc_auc, None);
    assert_eq!(rep.pr_auc, None);
    assert!(matches!(roc_auc(&p), Err(ProbeError::UndefinedMetric(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn metrics_are_bounded_and_permutation_invariant(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (scores, pos) = random_instance(&mut r);
        let labels: Vec<usize> = pos.iter().map(|&p| usize::from(p)).collect();
        let p = binary(&scores, &labels);
        let (a, f, roc, ap) = (accuracy(&p), f1_binary(&p), roc_auc(&p).unwrap(), pr_auc(&p).unwrap());
        for m in [a, f, roc, ap] {
            prop_assert!((0.0..=1.0).contains(&m));
        }
        let mut perm: Vec<usize> = (0..scores.len()).collect();
        perm.shuffle(&mut r);
        let ps: Vec<f64> = perm.iter().map(|&i| scores[i]).collect();
        let pl: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let q = binary(&ps, &pl);
        prop_assert_eq!(accuracy(&q), a);
        prop_assert_eq!(f1_binary(&q), f);
        prop_assert_eq!(roc_auc(&q).unwrap(), roc);
        prop_assert_eq!(pr_auc(&q).unwrap(), ap);
    }

    #[test]
    fn ranking_metrics_ignore_monotone_transforms(seed in any::<u64>(), scale in 0.1f64..10.0, shift in -5.0f64..5.0) {
        let mut r = rng(seed);
        let (scores, pos) = random_instance(&mut r);
        let t: Vec<f64> = scores.iter().map(|s| (scale * s + shift).exp()).collect();
        prop_assert_eq!(average_precision(&t, &pos).unwrap(), average_precision(&scores, &pos).unwrap());
        prop_assert_eq!(roc_auc_scores(&t, &pos).unwrap(), roc_auc_scores(&scores, &pos).unwrap());
    }
}
