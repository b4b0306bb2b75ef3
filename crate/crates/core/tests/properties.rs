//! Property tests of the invariants that hold for every input.

mod common;

use std::collections::BTreeMap;

use alc::losses::{lambda_ramp, total_loss, ActiveTerms, LossComponents, LossSpec};
use alc::metrics::{asd, dice, hd95, jaccard};
use alc::refinement::{fused_probs, refine_label, stack_mean, voxel_kl, KlForm, ProbStack};
use alc::rng::rng_from_seed;
use alc::selection::{sample_uncertainty, select_top_k};
use alc::synthgen::{morph, MorphMode};
use alc::Mask;
use proptest::prelude::*;

use common::{oracle_hd95_asd, oracle_select, random_mask, random_simplex};

fn mask_strategy(h: usize, w: usize) -> impl Strategy<Value = Mask> {
    (any::<u64>(), any::<bool>()).prop_map(move |(seed, noisy)| random_mask(&mut rng_from_seed(seed), h, w, noisy))
}

fn scores_strategy() -> impl Strategy<Value = BTreeMap<String, f64>> {
    prop::collection::btree_map("[a-e][0-9]{1,2}", (0u8..5).prop_map(|v| v as f64 * 0.5), 1..20)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn boundary_metrics_match_brute_force(a in mask_strategy(12, 10), b in mask_strategy(12, 10)) {
        let (h, s) = oracle_hd95_asd(&a, &b).unwrap();
        prop_assert!((hd95(&a, &b).unwrap() - h).abs() < 1e-9);
        prop_assert!((asd(&a, &b).unwrap() - s).abs() < 1e-9);
    }

    #[test]
    fn overlap_metrics_are_symmetric_and_ordered(a in mask_strategy(9, 9), b in mask_strategy(9, 9)) {
        let (d, j) = (dice(&a, &b).unwrap(), jaccard(&a, &b).unwrap());
        prop_assert_eq!(d, dice(&b, &a).unwrap());
        prop_assert_eq!(j, jaccard(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&d) && j <= d + 1e-15);
        prop_assert_eq!(hd95(&a, &b).unwrap(), hd95(&b, &a).unwrap());
    }

    #[test]
    fn adding_a_true_positive_never_hurts(a in mask_strategy(8, 8), b in mask_strategy(8, 8)) {
        let (d0, j0) = (dice(&a, &b).unwrap(), jaccard(&a, &b).unwrap());
        if let Some((y, x)) = b.points().into_iter().find(|&(y, x)| !a.get(y, x)) {
            let mut grown = a.clone();
            grown.set(y, x, true);
            prop_assert!(dice(&grown, &b).unwrap() >= d0);
            prop_assert!(jaccard(&grown, &b).unwrap() >= j0);
        }
    }

    #[test]
    fn selection_matches_sorting_oracle(scores in scores_strategy(), k in 0u8..=10) {
        let k = k as f64 / 10.0;
        let got = select_top_k(&scores, k);
        let (sel, res) = oracle_select(&scores, k);
        prop_assert_eq!(&got.selected, &sel);
        prop_assert_eq!(&got.residual, &res);
    }

    #[test]
    fn selection_partitions_by_score(scores in scores_strategy(), k in 0u8..=10) {
        let got = select_top_k(&scores, k as f64 / 10.0);
        prop_assert_eq!(got.selected.len() + got.residual.len(), scores.len());
        let worst_selected = got.selected.iter().map(|id| scores[id]).fold(f64::NEG_INFINITY, f64::max);
        let best_residual = got.residual.iter().map(|id| scores[id]).fold(f64::INFINITY, f64::min);
        prop_assert!(worst_selected <= best_residual);
    }

    #[test]
    fn raising_a_score_never_promotes(scores in scores_strategy(), k in 0u8..=10, bump in 0.1f64..3.0) {
        let k = k as f64 / 10.0;
        let before = select_top_k(&scores, k);
        for id in &before.residual {
            let mut raised = scores.clone();
            *raised.get_mut(id).unwrap() += bump;
            prop_assert!(select_top_k(&raised, k).residual.contains(id));
        }
    }

    #[test]
    fn dilation_and_erosion_bracket_the_mask(m in mask_strategy(14, 14), r in 0usize..4) {
        let grown = morph(&m, r, MorphMode::Dilate);
        let shrunk = morph(&m, r, MorphMode::Erode);
        let bigger = morph(&m, r + 1, MorphMode::Dilate);
        for (y, x) in m.points() {
            prop_assert!(grown.get(y, x));
        }
        for (y, x) in shrunk.points() {
            prop_assert!(m.get(y, x));
        }
        for (y, x) in grown.points() {
            prop_assert!(bigger.get(y, x));
        }
    }

    #[test]
    fn kl_nonnegative_and_zero_on_self(seed in any::<u64>(), c in 2usize..6) {
        let mut rng = rng_from_seed(seed);
        let p = random_simplex(&mut rng, c, 4, 4);
        let q = random_simplex(&mut rng, c, 4, 4);
        prop_assert!(voxel_kl(&p, &q).unwrap().data().iter().all(|v| *v >= 0.0));
        prop_assert!(voxel_kl(&p, &p).unwrap().data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn refined_label_is_fused_argmax(seed in any::<u64>(), m in 2usize..9, c in 2usize..5) {
        let mut rng = rng_from_seed(seed);
        let probs = (0..m).map(|_| random_simplex(&mut rng, c, 5, 5)).collect();
        let stack = ProbStack::new("p", probs).unwrap();
        for form in [KlForm::Summed, KlForm::Printed] {
            let fused = fused_probs(&stack, form).unwrap();
            prop_assert!(fused.data().iter().all(|v| v.is_finite() && *v >= 0.0));
            prop_assert_eq!(refine_label(&stack, form).unwrap(), fused.argmax_classes());
        }
        prop_assert!(sample_uncertainty(&stack) >= 0.0);
    }

    #[test]
    fn identical_passes_refine_to_mean_argmax(seed in any::<u64>(), m in 2usize..9) {
        let p = random_simplex(&mut rng_from_seed(seed), 3, 5, 5);
        let stack = ProbStack::new("p", vec![p; m]).unwrap();
        prop_assert_eq!(refine_label(&stack, KlForm::Summed).unwrap(), stack_mean(&stack).argmax_classes());
        prop_assert_eq!(sample_uncertainty(&stack), 0.0);
    }

    #[test]
    fn ramp_is_monotone_within_unit_interval(t in 0usize..500, horizon in 1usize..400) {
        let (a, b) = (lambda_ramp(t, horizon), lambda_ramp(t + 1, horizon));
        prop_assert!((0.0..=1.0).contains(&a) && a <= b);
    }

    #[test]
    fn total_is_the_weighted_recombination(
        hs in 0.0f64..3.0, ls in 0.0f64..3.0, n in 0.0f64..3.0, c in 0.0f64..1.0,
        alpha in 0.0f64..5.0, beta in 0.0f64..5.0, step in 0usize..100,
    ) {
        let spec = LossSpec::at_step(alpha, beta, step, 50, ActiveTerms::default());
        let total = total_loss(&LossComponents { hs, ls, n, c }, &spec).unwrap();
        let lam = spec.lambda_now;
        prop_assert!((total - (hs + lam * (alpha * ls + beta * n + c))).abs() < 1e-12);
    }
}
