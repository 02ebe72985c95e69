use fusionhead::eval::{
    auc, basic_metrics, cohen_kappa, confusion, mcc, roc_curve, stratified_kfold, summarize,
    Averaging, ConfusionMatrix,
};
use proptest::prelude::*;

/// Probability that a random positive outscores a random negative, ties ½.
fn pair_statistic(truth: &[bool], scores: &[f64]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &ti) in truth.iter().enumerate() {
        for (j, &tj) in truth.iter().enumerate() {
            if ti && !tj {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

fn scored_set() -> impl Strategy<Value = (Vec<bool>, Vec<f64>)> {
    prop::collection::vec((any::<bool>(), 0u8..8), 2..30)
        .prop_filter("both classes", |v| v.iter().any(|p| p.0) && v.iter().any(|p| !p.0))
        .prop_map(|v| {
            // Few distinct score values, so ties are common.
            v.into_iter().map(|(t, s)| (t, s as f64 / 7.0)).unzip()
        })
}

fn labelled_pairs() -> impl Strategy<Value = (usize, Vec<usize>, Vec<usize>)> {
    (2usize..6).prop_flat_map(|c| {
        (
            Just(c),
            prop::collection::vec((0..c, 0..c), 4..60),
        )
            .prop_map(|(c, v)| {
                let (t, p) = v.into_iter().unzip();
                (c, t, p)
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn trapezoid_equals_pair_statistic((truth, scores) in scored_set()) {
        let a = auc(&roc_curve(&truth, &scores).unwrap());
        prop_assert!((a - pair_statistic(&truth, &scores)).abs() < 1e-12);
    }

    #[test]
    fn auc_ignores_monotone_transforms((truth, scores) in scored_set()) {
        let a = auc(&roc_curve(&truth, &scores).unwrap());
        let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
        prop_assert_eq!(a, auc(&roc_curve(&truth, &warped).unwrap()));
    }

    #[test]
    fn kappa_never_exceeds_accuracy((c, t, p) in labelled_pairs()) {
        let m = confusion(&t, &p, c).unwrap();
        if let Ok(k) = cohen_kappa(&m) {
            let acc = basic_metrics(&m, Averaging::Weighted).unwrap().accuracy;
            prop_assert!(k <= acc + 1e-12);
        }
    }

    #[test]
    fn metrics_survive_relabelling((c, t, p) in labelled_pairs(), rot in 1usize..5) {
        let perm: Vec<usize> = (0..c).map(|i| (i + rot) % c).collect();
        let m = confusion(&t, &p, c).unwrap();
        let pm = confusion(
            &t.iter().map(|&x| perm[x]).collect::<Vec<_>>(),
            &p.iter().map(|&x| perm[x]).collect::<Vec<_>>(),
            c,
        ).unwrap();
        prop_assert_eq!(&m.permuted(&perm), &pm);
        prop_assert!((mcc(&m) - mcc(&pm)).abs() < 1e-12);
        for avg in [Averaging::Macro, Averaging::Micro, Averaging::Weighted] {
            let (a, b) = (basic_metrics(&m, avg).unwrap(), basic_metrics(&pm, avg).unwrap());
            prop_assert!((a.f1 - b.f1).abs() < 1e-12);
            prop_assert!((a.precision - b.precision).abs() < 1e-12);
        }
    }

    #[test]
    fn two_class_mcc_matches_the_binary_formula(tp in 0u64..50, fnn in 0u64..50, fp in 0u64..50, tn in 0u64..50) {
        let m = ConfusionMatrix::from_counts(&[vec![tp, fnn], vec![fp, tn]]).unwrap();
        let (tp, fnn, fp, tn) = (tp as f64, fnn as f64, fp as f64, tn as f64);
        let den = ((tp + fp) * (tp + fnn) * (tn + fp) * (tn + fnn)).sqrt();
        let expect = if den == 0.0 { 0.0 } else { (tp * tn - fp * fnn) / den };
        prop_assert!((mcc(&m) - expect).abs() < 1e-12);
    }

    #[test]
    fn kfold_partitions_and_stratifies(counts in prop::collection::vec(5usize..30, 2..5), k in 2usize..6, seed in any::<u64>()) {
        let labels: Vec<usize> = counts.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(c, n)).collect();
        let plan = stratified_kfold(&labels, k, seed).unwrap();
        let mut seen = vec![0; labels.len()];
        for fold in &plan.folds {
            for &i in &fold.validation {
                seen[i] += 1;
            }
            prop_assert_eq!(fold.train.len() + fold.validation.len(), labels.len());
            for (c, &n) in counts.iter().enumerate() {
                let in_fold = fold.validation.iter().filter(|&&i| labels[i] == c).count();
                prop_assert!(in_fold == n / k || in_fold == n / k + 1);
            }
        }
        prop_assert!(seen.iter().all(|&s| s == 1));
    }
}

#[test]
fn worked_binary_example() {
    let m = ConfusionMatrix::from_counts(&[vec![4, 1], vec![2, 3]]).unwrap();
    let b = basic_metrics(&m, Averaging::Macro).unwrap();
    assert!((b.accuracy - 0.7).abs() < 1e-12);
    assert!((cohen_kappa(&m).unwrap() - 0.4).abs() < 1e-12);
    assert!((mcc(&m) - 2.0 / 24f64.sqrt()).abs() < 1e-12);
}

#[test]
fn cv_mean_of_reported_fold_accuracies() {
    let s = summarize(&[99.01, 99.51, 99.75, 99.51, 99.51]);
    assert_eq!((s.mean * 100.0).round() / 100.0, 99.46);
}
