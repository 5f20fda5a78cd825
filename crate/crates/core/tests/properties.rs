use pathprobe::cohort::{cap_patches, make_folds, Case, CohortManifest, FineLabel};
use pathprobe::encoder::softmax;
use pathprobe::evaluator::{collapse_coarse, compute_metrics, ensemble_predict, vote, ConfusionMatrix};
use pathprobe::experiments::cumulative_difference;
use pathprobe::saliency::gradcam_from_tap;
use pathprobe::encoder::{Tap, TapLayout};
use proptest::prelude::*;
use std::collections::BTreeMap;

fn prob_vec() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.001f64..1.0, 6).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(z in prop::collection::vec(-50.0f64..50.0, 1..10)) {
        let p = softmax(&z);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn metrics_are_bounded(counts in prop::collection::vec(prop::collection::vec(0u64..30, 4), 4)) {
        prop_assume!(counts.iter().flatten().sum::<u64>() > 0);
        let cm = ConfusionMatrix::from_counts(&["a", "b", "c", "d"], counts.clone()).unwrap();
        let r = compute_metrics(&cm).unwrap();
        for v in [r.macro_recall, r.macro_precision, r.macro_f1, r.overall_accuracy] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert_eq!(r.correct, (0..4).map(|i| counts[i][i]).sum::<u64>());
    }

    #[test]
    fn coarse_collapse_preserves_mass(p in prob_vec()) {
        let c = collapse_coarse(&p);
        prop_assert!((c.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ensemble_then_collapse_commutes(ps in prop::collection::vec(prob_vec(), 1..6)) {
        let a = collapse_coarse(&ensemble_predict(&ps).unwrap());
        let cs: Vec<Vec<f64>> = ps.iter().map(|p| collapse_coarse(p).to_vec()).collect();
        let b = ensemble_predict(&cs).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn vote_picks_an_allowed_class(ps in prop::collection::vec(prob_vec(), 1..20)) {
        let refs: Vec<&[f64]> = ps.iter().map(|p| p.as_slice()).collect();
        let allowed = [0, 1, 2, 3, 4];
        let v = vote(&refs, &allowed).unwrap();
        prop_assert!(allowed.contains(&v));
    }

    #[test]
    fn cap_has_requested_length(n in 1usize..200, limit in 1usize..300, seed: u64) {
        let case = Case::new("c", FineLabel::O, (0..n).map(|i| format!("p{i}")).collect());
        let out = cap_patches(&case, limit, seed).unwrap();
        prop_assert_eq!(out.len(), limit);
        prop_assert!(out.iter().all(|p| case.patch_refs.contains(p)));
    }

    #[test]
    fn folds_partition_and_balance(per_class in prop::collection::vec(0usize..15, 6), k in 2usize..6, seed: u64) {
        let mut cases = Vec::new();
        for (label, n) in FineLabel::ALL.iter().zip(&per_class) {
            for i in 0..*n {
                cases.push(Case::new(format!("{label}-{i}"), *label, vec!["p".into()]));
            }
        }
        prop_assume!(!cases.is_empty());
        let m = CohortManifest::new(cases).unwrap();
        let plan = make_folds(&m, k, seed).unwrap();
        prop_assert_eq!(plan.assignment.len(), m.cases.len());
        let sizes = plan.fold_sizes();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn gradcam_is_normalized(values in prop::collection::vec(-3.0f64..3.0, 18), grads in prop::collection::vec(-1.0f64..1.0, 18)) {
        let tap = Tap { layout: TapLayout::SpatialMap { height: 3, width: 3 }, channels: 2, values };
        let m = gradcam_from_tap(&tap, &grads, FineLabel::G).unwrap();
        prop_assert!(m.values.iter().all(|v| (0.0..=1.0).contains(v)));
        let max = m.values.iter().cloned().fold(0.0, f64::max);
        prop_assert!(m.is_zero() || (max - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cumulative_difference_telescopes(vals in prop::collection::vec(0.0f64..1.0, 4)) {
        let series: BTreeMap<usize, f64> = [10, 25, 100, 500].into_iter().zip(vals.iter().cloned()).collect();
        let cum = cumulative_difference(&series, 10).unwrap();
        prop_assert!((cum[&500] - (vals[3] - vals[0])).abs() < 1e-12);
        prop_assert_eq!(cum[&10], 0.0);
    }
}
