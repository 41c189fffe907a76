use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sv_core::compute_eer;

/// Exhaustive sweep: FRR and FAR counted afresh at every candidate
/// threshold, crossing interpolated on the error-rate difference.
fn brute_force(targets: &[f64], nontargets: &[f64]) -> f64 {
    let mut cands: Vec<f64> = targets.iter().chain(nontargets).copied().collect();
    cands.sort_by(|a, b| a.partial_cmp(b).unwrap());
    cands.dedup();
    cands.push(f64::INFINITY);
    let rates = |t: f64| {
        let frr = targets.iter().filter(|&&s| s < t).count() as f64 / targets.len() as f64;
        let far = nontargets.iter().filter(|&&s| s >= t).count() as f64 / nontargets.len() as f64;
        (frr, far)
    };
    let mut prev = rates(cands[0]);
    for &t in &cands {
        let cur = rates(t);
        if cur.0 >= cur.1 {
            let dp = prev.0 - prev.1;
            let dc = cur.0 - cur.1;
            if dc == dp {
                return cur.0;
            }
            let alpha = dp / (dp - dc);
            return prev.0 + alpha * (cur.0 - prev.0);
        }
        prev = cur;
    }
    unreachable!()
}

fn gaussian(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = Normal::new(1.0, 1.0).unwrap();
    let nt = Normal::new(-1.0, 1.0).unwrap();
    (
        (0..n).map(|_| t.sample(&mut rng)).collect(),
        (0..n).map(|_| nt.sample(&mut rng)).collect(),
    )
}

#[test]
fn gaussian_scores_match_oracle_and_closed_form() {
    let (t, n) = gaussian(1000, 20);
    let eer = compute_eer(&t, &n).unwrap().eer;
    assert!((eer - brute_force(&t, &n)).abs() < 1e-12);
    // Phi(-1)
    assert!((eer - 0.158_655_253_931_457).abs() < 0.03, "{eer}");
}

#[test]
fn identical_multisets_give_one_half() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for n in [1, 2, 7, 100, 1000] {
        let s: Vec<f64> = (0..n)
            .map(|_| (rand::Rng::gen_range(&mut rng, 0..20) as f64) / 4.0)
            .collect();
        let mut shuffled = s.clone();
        shuffled.reverse();
        assert_eq!(compute_eer(&s, &shuffled).unwrap().eer, 0.5);
    }
}

fn scores() -> impl Strategy<Value = Vec<f64>> {
    // coarse grid to exercise ties
    prop::collection::vec(
        prop_oneof![(-50i32..50).prop_map(|v| v as f64 / 10.0), -5.0f64..5.0],
        1..500,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn matches_exhaustive_sweep(t in scores(), n in scores()) {
        let eer = compute_eer(&t, &n).unwrap().eer;
        prop_assert!((0.0..=1.0).contains(&eer));
        prop_assert!((eer - brute_force(&t, &n)).abs() < 1e-12);
    }

    #[test]
    fn invariant_under_increasing_transform(t in scores(), n in scores()) {
        let f = |v: &f64| (v * 0.7).exp() * 3.0 + 1.0;
        let a = compute_eer(&t, &n).unwrap().eer;
        let b = compute_eer(&t.iter().map(f).collect::<Vec<_>>(), &n.iter().map(f).collect::<Vec<_>>()).unwrap().eer;
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn invariant_under_role_swap(
        t in prop::collection::vec(-5.0f64..5.0, 1..300),
        n in prop::collection::vec(-5.0f64..5.0, 1..300),
    ) {
        let neg = |v: &Vec<f64>| v.iter().map(|x| -x).collect::<Vec<_>>();
        let a = compute_eer(&t, &n).unwrap().eer;
        let b = compute_eer(&neg(&n), &neg(&t)).unwrap().eer;
        prop_assert!((a - b).abs() < 1e-12, "{} vs {}", a, b);
    }

    #[test]
    fn separable_sets_give_zero(
        t in prop::collection::vec(0.0f64..5.0, 1..100),
        n in prop::collection::vec(-5.0f64..-0.001, 1..100),
    ) {
        prop_assert_eq!(compute_eer(&t, &n).unwrap().eer, 0.0);
    }
}
