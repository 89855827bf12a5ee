use forge_core::reward::competitive_set;
use forge_core::{apply_complexity_penalty, group_advantages, outcome_reward, stepwise_reward, CriterionScores};
use proptest::prelude::*;

fn group() -> impl Strategy<Value = Vec<(f64, u32)>> {
    proptest::collection::vec((0.0..1.0f64, 1..=9u32), 1..=8)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn penalty_leaves_non_competitive_untouched(g in group(), eps in 0.0..0.3f64) {
        let finals = apply_complexity_penalty(&g, eps).unwrap();
        let totals: Vec<f64> = g.iter().map(|x| x.0).collect();
        let comp = competitive_set(&totals, eps).unwrap();
        let max = totals.iter().copied().fold(f64::MIN, f64::max);
        for (i, (&(t, n), &f)) in g.iter().zip(&finals).enumerate() {
            if comp[i] {
                prop_assert!(f > t);
                prop_assert!(f - t <= 1.0 + 1e-12);
                let _ = n;
            } else {
                prop_assert_eq!(f.to_bits(), t.to_bits());
            }
            if t == max {
                prop_assert!(comp[i]);
            }
        }
        // The minimal-image competitive member gets the full +1.
        let best = g.iter().zip(&comp).filter(|(_, &c)| c).map(|(x, _)| x.1).min().unwrap();
        prop_assert!(g.iter().zip(&finals).zip(&comp).any(|((x, f), &c)| c && x.1 == best && (f - x.0 - 1.0).abs() < 1e-12));
    }

    #[test]
    fn fewer_images_win_among_equal_totals(t in 0.0..1.0f64, images in proptest::collection::vec(1..=9u32, 2..=8)) {
        let g: Vec<(f64, u32)> = images.iter().map(|&n| (t, n)).collect();
        let f = apply_complexity_penalty(&g, 0.05).unwrap();
        for i in 0..g.len() {
            for j in 0..g.len() {
                if g[i].1 < g[j].1 {
                    prop_assert!(f[i] > f[j]);
                }
            }
        }
    }

    #[test]
    fn advantages_are_centred_and_shift_invariant(finals in proptest::collection::vec(0.0..2.0f64, 1..=8), shift in -5.0..5.0f64) {
        let a = group_advantages(&finals);
        prop_assert_eq!(a.len(), finals.len());
        let mean: f64 = a.iter().sum::<f64>() / a.len() as f64;
        prop_assert!(mean.abs() < 1e-9);
        let shifted: Vec<f64> = finals.iter().map(|r| r + shift).collect();
        let b = group_advantages(&shifted);
        if finals.iter().all(|&r| r == finals[0]) {
            prop_assert!(a.iter().all(|&x| x == 0.0));
        } else {
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-9, "{} vs {}", x, y);
            }
        }
    }

    #[test]
    fn stepwise_stays_in_unit_interval(v in proptest::collection::vec(0.0..=1.0f64, 0..12)) {
        let r = stepwise_reward(&v).unwrap();
        prop_assert!((0.0..=1.0).contains(&r));
    }

    #[test]
    fn outcome_stays_in_range(a in 1..=5i64, b in 1..=5i64, c in 1..=5i64, d in 1..=5i64) {
        let r = outcome_reward(&CriterionScores::new(a, b, c, d).unwrap());
        prop_assert!((0.2 - 1e-12..=1.0 + 1e-12).contains(&r));
    }
}

#[test]
fn out_of_range_scores_are_unrepresentable() {
    assert!(CriterionScores::new(0, 3, 3, 3).is_err());
    assert!(CriterionScores::new(3, 3, 6, 3).is_err());
}
