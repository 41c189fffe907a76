use proptest::prelude::*;
use sv_core::training::select_pairs;

/// Direct restatement of the filter rule.
fn reference(genuine: &[f64], impostor: &[f64], th0: f64) -> Vec<usize> {
    let max = genuine.iter().cloned().fold(f64::MIN, f64::max);
    let min = genuine.iter().cloned().fold(f64::MAX, f64::min);
    let th = th0 * (max / min.max(1e-9)).abs();
    (0..impostor.len()).filter(|&i| impostor[i] <= max + th).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn matches_reference(
        genuine in prop::collection::vec(0.0f64..5.0, 1..40),
        impostor in prop::collection::vec(0.0f64..20.0, 0..60),
        th0 in 0.0f64..3.0,
    ) {
        let s = select_pairs(&genuine, &impostor, th0).unwrap();
        prop_assert_eq!(&s.kept_impostors, &reference(&genuine, &impostor, th0));
        let mut all = s.kept_impostors.clone();
        all.extend(&s.discarded_impostors);
        all.sort();
        prop_assert_eq!(all, (0..impostor.len()).collect::<Vec<_>>());
        // every impostor no farther than the largest genuine distance survives
        for (i, &d) in impostor.iter().enumerate() {
            if d <= s.max_gen {
                prop_assert!(s.kept_impostors.contains(&i));
            }
        }
    }
}
