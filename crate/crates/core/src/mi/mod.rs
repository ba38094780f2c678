//! Pairwise mutual information between masked positions.

mod matrix;
mod mock;
mod oracle;

pub use matrix::{read_dense_csv, MiMatrix};
pub use mock::{enumerate_mi_exact, MockJointModel, MAX_OUTCOMES};
pub use oracle::{
    conditional_entropy_reduction, forward_chunked, ground_truth_mi, ground_truth_with_base, mi_from_probes,
    probe_conditionals, ProbedConditionals, PROBE_CHUNK,
};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdm::{entropy, DenoisingModel, NfeCounter, SequenceState, Token};
    use proptest::prelude::*;
    use std::f64::consts::LN_2;

    fn masked(vocab: usize, tokens: &[Option<Token>]) -> SequenceState {
        SequenceState::new(vocab, tokens).unwrap()
    }

    #[test]
    fn copy_channel_is_ln2() {
        let m = MockJointModel::copy_channel();
        let s = SequenceState::fully_masked(2, 2);
        let mi = ground_truth_mi(&m, &s).unwrap();
        assert!((mi.get(0, 1) - LN_2).abs() < 1e-12);
        assert!((mi.get(1, 0) - LN_2).abs() < 1e-12);
        assert_eq!(mi.get(0, 0), 0.0);
    }

    #[test]
    fn product_joint_has_zero_mi() {
        let m = MockJointModel::product(&[vec![0.2, 0.8], vec![0.6, 0.4], vec![0.5, 0.5]]).unwrap();
        let mi = ground_truth_mi(&m, &SequenceState::fully_masked(2, 3)).unwrap();
        assert!(mi.values().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn xor_pairs_are_independent_until_conditioned() {
        let m = MockJointModel::xor3();
        let free = ground_truth_mi(&m, &SequenceState::fully_masked(2, 3)).unwrap();
        assert!(free.values().iter().all(|v| v.abs() < 1e-12));
        let cond = ground_truth_mi(&m, &masked(2, &[None, None, Some(1)])).unwrap();
        assert!((cond.get(0, 1) - LN_2).abs() < 1e-12);
        assert_eq!(cond.get(0, 2), 0.0);
    }

    #[test]
    fn nfe_is_one_plus_m_times_vocab() {
        let m = NfeCounter::new(MockJointModel::random(3, 3, 4).unwrap());
        ground_truth_mi(&m, &SequenceState::fully_masked(3, 3)).unwrap();
        assert_eq!(m.nfe(), 1 + 3 * 3);
        m.reset();
        ground_truth_mi(&m, &masked(3, &[Some(0), None, Some(2)])).unwrap();
        assert_eq!(m.nfe(), 1);
    }

    #[test]
    fn probing_does_not_touch_the_state() {
        let m = MockJointModel::random(3, 2, 1).unwrap();
        let s = masked(2, &[None, Some(1), None]);
        let before = s.clone();
        ground_truth_mi(&m, &s).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn zero_probability_context_is_reported() {
        let m = MockJointModel::copy_channel();
        let s = masked(2, &[Some(0), None]);
        // Context with mass: fine.
        enumerate_mi_exact(&m, &s).unwrap();
        let x = MockJointModel::new(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let bad = masked(2, &[Some(1), None]);
        assert!(matches!(
            enumerate_mi_exact(&x, &bad),
            Err(crate::Error::ZeroProbabilityContext)
        ));
    }

    #[test]
    fn mi_is_bounded_by_marginal_entropies() {
        for seed in 0..20 {
            let m = MockJointModel::random(3, 3, seed).unwrap();
            let s = SequenceState::fully_masked(3, 3);
            let base = m.forward_marginals(&s).unwrap();
            let mi = ground_truth_mi(&m, &s).unwrap();
            for (i, j) in mi.masked_pairs() {
                let bound = entropy(base.row(i)).min(entropy(base.row(j)));
                assert!(mi.get(i, j) <= bound + 1e-12);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn probing_matches_enumeration(seed in any::<u64>(), n in 2usize..=3, vocab in 2usize..=3, pin in 0usize..4) {
            let m = MockJointModel::random(n, vocab, seed).unwrap();
            let mut tokens = vec![None; n];
            if pin < n {
                tokens[pin] = Some((seed % vocab as u64) as Token);
            }
            let s = masked(vocab, &tokens);
            let a = ground_truth_mi(&m, &s).unwrap();
            let b = enumerate_mi_exact(&m, &s).unwrap();
            prop_assert!(a.max_abs_diff(&b) <= 1e-9);
            a.validate().unwrap();
        }
    }
}
