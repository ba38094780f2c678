//! Unmasking-set selection rules and the decode loop.

use std::fmt;
use std::str::FromStr;

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{usage_err, Error, Result};
use crate::estimator::MiPredictor;
use crate::mdm::{argmax, entropy_per_position, DenoisingModel, SequenceState, Token};
use crate::mi::MiMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Sequential,
    NaiveK,
    EntropyBudget,
    MiGuided,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Sequential,
        Strategy::NaiveK,
        Strategy::EntropyBudget,
        Strategy::MiGuided,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Sequential => "sequential",
            Strategy::NaiveK => "naive_k",
            Strategy::EntropyBudget => "entropy_budget",
            Strategy::MiGuided => "mi_guided",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown strategy {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommitRule {
    #[default]
    Argmax,
    Sample,
}

impl FromStr for CommitRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "argmax" => Ok(CommitRule::Argmax),
            "sample" => Ok(CommitRule::Sample),
            _ => Err(Error::Usage(format!("unknown commit rule {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub strategy: Strategy,
    #[serde(default = "one")]
    pub k: usize,
    /// Per-pass budget in nats.
    #[serde(default)]
    pub gamma: f64,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default)]
    pub commit: CommitRule,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

impl SamplerConfig {
    pub fn sequential() -> Self {
        Self {
            strategy: Strategy::Sequential,
            k: 1,
            gamma: 0.0,
            lambda: 0.0,
            commit: CommitRule::Argmax,
            seed: 0,
        }
    }

    pub fn naive(k: usize) -> Self {
        Self {
            strategy: Strategy::NaiveK,
            k,
            ..Self::sequential()
        }
    }

    pub fn entropy_budget(gamma: f64) -> Self {
        Self {
            strategy: Strategy::EntropyBudget,
            gamma,
            ..Self::sequential()
        }
    }

    pub fn mi_guided(gamma: f64, lambda: f64) -> Self {
        Self {
            strategy: Strategy::MiGuided,
            gamma,
            lambda,
            ..Self::sequential()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return usage_err("k must be at least 1");
        }
        if self.gamma.is_nan() || self.gamma < 0.0 {
            return usage_err(format!("budget gamma must be >= 0, got {}", self.gamma));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return usage_err(format!("penalty lambda must be finite and >= 0, got {}", self.lambda));
        }
        Ok(())
    }

    /// Short human-readable label, e.g. `mi_guided(gamma=0.3,lambda=1)`.
    pub fn label(&self) -> String {
        match self.strategy {
            Strategy::Sequential => "sequential".into(),
            Strategy::NaiveK => format!("naive_k(k={})", self.k),
            Strategy::EntropyBudget => format!("entropy_budget(gamma={})", self.gamma),
            Strategy::MiGuided => format!("mi_guided(gamma={},lambda={})", self.gamma, self.lambda),
        }
    }
}

/// Positions chosen in one pass, in acceptance order, with the cost charged
/// for each and the total budget consumed.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub indices: Vec<usize>,
    pub costs: Vec<f64>,
    pub spent: f64,
}

impl Selection {
    pub fn sorted(&self) -> Vec<usize> {
        let mut v = self.indices.clone();
        v.sort_unstable();
        v
    }
}

/// Masked positions by increasing entropy, lowest index first on ties.
fn by_entropy(entropies: &[f64], masked: &[usize]) -> Vec<usize> {
    let mut order = masked.to_vec();
    order.sort_by(|&a, &b| entropies[a].total_cmp(&entropies[b]).then(a.cmp(&b)));
    order
}

fn check_masked(entropies: &[f64], masked: &[usize]) -> Result<()> {
    if masked.is_empty() {
        return usage_err("no masked positions to select from");
    }
    if let Some(&i) = masked.iter().find(|&&i| i >= entropies.len()) {
        return usage_err(format!("masked index {i} out of range"));
    }
    Ok(())
}

fn entropy_selection(entropies: &[f64], picked: Vec<usize>) -> Selection {
    let costs: Vec<f64> = picked.iter().map(|&i| entropies[i]).collect();
    Selection {
        spent: costs.iter().sum(),
        indices: picked,
        costs,
    }
}

pub fn select_sequential(entropies: &[f64], masked: &[usize]) -> Result<Selection> {
    select_naive_topk(entropies, masked, 1)
}

pub fn select_naive_topk(entropies: &[f64], masked: &[usize], k: usize) -> Result<Selection> {
    check_masked(entropies, masked)?;
    if k == 0 {
        return usage_err("k must be at least 1");
    }
    let mut order = by_entropy(entropies, masked);
    order.truncate(k);
    Ok(entropy_selection(entropies, order))
}

/// Lowest-entropy prefix whose summed entropy stays within `gamma`; the
/// first candidate is always taken.
pub fn select_entropy_budget(entropies: &[f64], masked: &[usize], gamma: f64) -> Result<Selection> {
    check_masked(entropies, masked)?;
    let order = by_entropy(entropies, masked);
    let mut picked = vec![order[0]];
    let mut total = entropies[order[0]];
    for &i in &order[1..] {
        if total + entropies[i] > gamma {
            break;
        }
        total += entropies[i];
        picked.push(i);
    }
    Ok(entropy_selection(entropies, picked))
}

/// Budgeted greedy selection penalized by estimated dependence on the
/// positions already chosen this pass. Rejected candidates do not end the
/// scan; a non-positive remaining budget does. If nothing fits, the
/// lowest-entropy position is taken alone.
pub fn select_mi_guided(
    entropies: &[f64],
    mi: &MiMatrix,
    masked: &[usize],
    gamma: f64,
    lambda: f64,
) -> Result<Selection> {
    check_masked(entropies, masked)?;
    if mi.n() != entropies.len() {
        return usage_err("MI matrix size does not match the entropies");
    }
    let order = by_entropy(entropies, masked);
    let mut picked: Vec<usize> = Vec::new();
    let mut costs = Vec::new();
    let mut budget = gamma;
    for &i in &order {
        let dependence: f64 = picked.iter().map(|&j| mi.get(i, j)).sum();
        let cost = entropies[i] + lambda * dependence;
        if cost <= budget {
            picked.push(i);
            costs.push(cost);
            budget -= cost;
        }
        if budget <= 0.0 {
            break;
        }
    }
    if picked.is_empty() {
        return Ok(entropy_selection(entropies, vec![order[0]]));
    }
    Ok(Selection {
        indices: picked,
        spent: costs.iter().sum(),
        costs,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PassRecord {
    /// Positions unmasked this pass, in acceptance order.
    pub selected: Vec<usize>,
    pub tokens: Vec<Token>,
    /// Marginal entropy of each selected position.
    pub entropies: Vec<f64>,
    /// Cost charged for each selected position.
    pub costs: Vec<f64>,
    pub budget_spent: f64,
    pub masked_before: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub config: SamplerConfig,
    pub initial_masked: Vec<usize>,
    pub passes: Vec<PassRecord>,
    pub backbone_nfe: u64,
    pub head_nfe: u64,
    pub final_state: SequenceState,
}

impl DecodeTrace {
    pub fn num_passes(&self) -> usize {
        self.passes.len()
    }

    /// Checks that the per-pass sets are disjoint and cover exactly the
    /// initially masked positions, and that the NFE totals agree with the
    /// pass count.
    pub fn validate(&self) -> Result<()> {
        let n = self.final_state.len();
        let mut seen = vec![false; n];
        for p in &self.passes {
            if p.selected.is_empty() {
                return Err(Error::Format("pass with an empty selection".into()));
            }
            for &i in &p.selected {
                if i >= n || seen[i] {
                    return Err(Error::Format(format!("position {i} selected twice or out of range")));
                }
                seen[i] = true;
            }
        }
        let covered: Vec<usize> = (0..n).filter(|&i| seen[i]).collect();
        if covered != self.initial_masked {
            return Err(Error::Format("selected sets do not cover the initial mask".into()));
        }
        let passes = self.passes.len() as u64;
        let head = if self.config.strategy == Strategy::MiGuided {
            passes
        } else {
            0
        };
        if self.backbone_nfe != passes || self.head_nfe != head {
            return Err(Error::Format("NFE totals disagree with the pass count".into()));
        }
        Ok(())
    }
}

/// Decodes `initial` until nothing is masked. Each pass costs one backbone
/// evaluation, plus one estimator evaluation under [`Strategy::MiGuided`];
/// the budget is reset every pass.
pub fn decode<M: DenoisingModel>(
    model: &M,
    estimator: Option<&dyn MiPredictor>,
    initial: &SequenceState,
    cfg: &SamplerConfig,
) -> Result<DecodeTrace> {
    cfg.validate()?;
    if cfg.strategy == Strategy::MiGuided && estimator.is_none() {
        return usage_err("mi_guided decoding needs an estimator");
    }
    let mut state = initial.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let initial_masked = state.masked_positions();
    let mut passes = Vec::new();
    let (mut backbone_nfe, mut head_nfe) = (0u64, 0u64);
    loop {
        let masked = state.masked_positions();
        if masked.is_empty() {
            break;
        }
        let marginals = model.forward_marginals(&state)?;
        backbone_nfe += 1;
        let h = entropy_per_position(&marginals);
        let selection = match cfg.strategy {
            Strategy::Sequential => select_sequential(&h, &masked)?,
            Strategy::NaiveK => select_naive_topk(&h, &masked, cfg.k)?,
            Strategy::EntropyBudget => select_entropy_budget(&h, &masked, cfg.gamma)?,
            Strategy::MiGuided => {
                let est = estimator.expect("checked above");
                let mi = est.predict_mi(&marginals.hidden, &masked)?;
                head_nfe += 1;
                select_mi_guided(&h, &mi, &masked, cfg.gamma, cfg.lambda)?
            }
        };
        if selection.indices.is_empty() {
            return Err(Error::Numeric("selection made no progress".into()));
        }
        let mut tokens = Vec::with_capacity(selection.indices.len());
        for &i in &selection.indices {
            let row = marginals.row(i);
            let tok = match cfg.commit {
                CommitRule::Argmax => argmax(row),
                CommitRule::Sample => WeightedIndex::new(row)
                    .map_err(|e| Error::Numeric(format!("cannot sample position {i}: {e}")))?
                    .sample(&mut rng),
            } as Token;
            tokens.push(tok);
        }
        for (&i, &tok) in selection.indices.iter().zip(&tokens) {
            state.unmask(i, tok)?;
        }
        passes.push(PassRecord {
            entropies: selection.indices.iter().map(|&i| h[i]).collect(),
            selected: selection.indices,
            tokens,
            costs: selection.costs,
            budget_spent: selection.spent,
            masked_before: masked.len(),
        });
    }
    Ok(DecodeTrace {
        config: cfg.clone(),
        initial_masked,
        passes,
        backbone_nfe,
        head_nfe,
        final_state: state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::{EstimatorConfig, MiEstimator};
    use crate::mdm::{Mdm, ModelConfig, NfeCounter};
    use crate::mi::MockJointModel;
    use crate::sudoku::{generate_puzzles, PuzzleRecord};
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};
    use std::collections::HashSet;

    fn all(n: usize) -> Vec<usize> {
        (0..n).collect()
    }

    #[test]
    fn sequential_examples() {
        assert_eq!(select_sequential(&[0.5, 0.1, 0.9], &all(3)).unwrap().indices, vec![1]);
        assert_eq!(select_sequential(&[0.3, 0.3], &all(2)).unwrap().indices, vec![0]);
        assert_eq!(select_sequential(&[0.3, 0.1, 0.2], &[2]).unwrap().indices, vec![2]);
        assert!(matches!(select_sequential(&[0.1], &[]), Err(Error::Usage(_))));
    }

    #[test]
    fn naive_examples() {
        let h = [0.5, 0.1, 0.9, 0.2];
        assert_eq!(select_naive_topk(&h, &all(4), 2).unwrap().sorted(), vec![1, 3]);
        assert_eq!(select_naive_topk(&h, &all(4), 9).unwrap().sorted(), all(4));
        assert_eq!(
            select_naive_topk(&h, &all(4), 1).unwrap(),
            select_sequential(&h, &all(4)).unwrap()
        );
    }

    #[test]
    fn entropy_budget_examples() {
        let h = [0.1, 0.15, 2.0];
        assert_eq!(select_entropy_budget(&h, &all(3), 0.3).unwrap().indices, vec![0, 1]);
        assert_eq!(select_entropy_budget(&h, &all(3), 0.0).unwrap().indices, vec![0]);
        assert_eq!(
            select_entropy_budget(&h, &all(3), f64::INFINITY).unwrap().sorted(),
            all(3)
        );
        // The first candidate is taken even when it alone exceeds the budget.
        assert_eq!(
            select_entropy_budget(&[1.5, 2.0], &all(2), 0.5).unwrap().indices,
            vec![0]
        );
    }

    #[test]
    fn mi_guided_hand_trace() {
        let mut raw = vec![0.0; 9];
        raw[1] = 0.5;
        raw[3] = 0.5;
        let mi = MiMatrix::from_raw(3, &raw, &all(3)).unwrap();
        let s = select_mi_guided(&[0.1, 0.2, 0.9], &mi, &all(3), 1.0, 1.0).unwrap();
        assert_eq!(s.indices, vec![0, 1]);
        assert!((s.costs[0] - 0.1).abs() < 1e-15 && (s.costs[1] - 0.7).abs() < 1e-15);
        assert!((s.spent - 0.8).abs() < 1e-12);
    }

    #[test]
    fn mi_guided_huge_dependence_takes_one() {
        let raw = vec![100.0; 16];
        let mi = MiMatrix::from_raw(4, &raw, &all(4)).unwrap();
        let s = select_mi_guided(&[0.01, 0.02, 0.03, 0.04], &mi, &all(4), 1.0, 1.0).unwrap();
        assert_eq!(s.indices, vec![0]);
    }

    #[test]
    fn mi_guided_forces_progress_below_min_entropy() {
        let mi = MiMatrix::zeros(3, &all(3));
        let s = select_mi_guided(&[0.7, 0.5, 0.9], &mi, &all(3), 0.1, 1.0).unwrap();
        assert_eq!(s.indices, vec![1]);
    }

    #[test]
    fn mi_guided_skips_rejected_candidates_and_continues() {
        // 1 depends strongly on 0, 2 does not: 1 is skipped, 2 is taken.
        let mut raw = vec![0.0; 9];
        raw[1] = 5.0;
        raw[3] = 5.0;
        let mi = MiMatrix::from_raw(3, &raw, &all(3)).unwrap();
        let s = select_mi_guided(&[0.1, 0.2, 0.3], &mi, &all(3), 1.0, 1.0).unwrap();
        assert_eq!(s.indices, vec![0, 2]);
    }

    fn arb_entropies() -> impl proptest::strategy::Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.001f64..2.0, 1..12)
    }

    proptest! {
        #[test]
        fn singleton_rules_agree(h in arb_entropies()) {
            let m = all(h.len());
            let a = select_sequential(&h, &m).unwrap().indices;
            prop_assert_eq!(&a, &select_naive_topk(&h, &m, 1).unwrap().indices);
            prop_assert_eq!(&a, &select_entropy_budget(&h, &m, 0.0).unwrap().indices);
        }

        #[test]
        fn entropy_budget_grows_with_gamma(h in arb_entropies(), g1 in 0.0f64..5.0, g2 in 0.0f64..5.0) {
            let m = all(h.len());
            let (lo, hi) = if g1 <= g2 { (g1, g2) } else { (g2, g1) };
            let a = select_entropy_budget(&h, &m, lo).unwrap().indices.len();
            let b = select_entropy_budget(&h, &m, hi).unwrap().indices.len();
            prop_assert!(a <= b);
        }

        #[test]
        fn mi_guided_without_penalty_is_entropy_budget(h in arb_entropies(), g in 0.0f64..5.0) {
            let m = all(h.len());
            let raw: Vec<f64> = (0..h.len() * h.len()).map(|k| (k % 7) as f64 * 0.1).collect();
            let mi = MiMatrix::from_raw(h.len(), &raw, &m).unwrap();
            let a = select_mi_guided(&h, &mi, &m, g, 0.0).unwrap().indices;
            let b = select_entropy_budget(&h, &m, g).unwrap().indices;
            prop_assert_eq!(a, b);
        }

        #[test]
        fn selections_are_subsets_of_masked(h in arb_entropies(), k in 1usize..5, g in 0.0f64..3.0, mask_bits in any::<u16>()) {
            let mut m: Vec<usize> = (0..h.len()).filter(|&i| mask_bits & (1 << i) != 0).collect();
            if m.is_empty() {
                m.push(0);
            }
            let mi = MiMatrix::from_raw(h.len(), &vec![0.2; h.len() * h.len()], &m).unwrap();
            for s in [
                select_naive_topk(&h, &m, k).unwrap(),
                select_entropy_budget(&h, &m, g).unwrap(),
                select_mi_guided(&h, &mi, &m, g, 1.0).unwrap(),
            ] {
                prop_assert!(!s.indices.is_empty());
                let set: HashSet<usize> = s.indices.iter().copied().collect();
                prop_assert_eq!(set.len(), s.indices.len());
                prop_assert!(s.indices.iter().all(|i| m.contains(i)));
            }
        }
    }

    fn tiny_mdm() -> Mdm {
        Mdm::new(ModelConfig {
            vocab: 4,
            seq_len: 16,
            dim: 8,
            layers: 1,
            heads: 2,
            ff_dim: 16,
            seed: 2,
        })
        .unwrap()
    }

    fn puzzles() -> Vec<PuzzleRecord> {
        generate_puzzles(2, 6, 8..=12, 3, &HashSet::new()).unwrap()
    }

    #[test]
    fn decode_pass_counts_and_trace_invariants() {
        let mdm = NfeCounter::new(tiny_mdm());
        let est = MiEstimator::new(EstimatorConfig {
            input_dim: 8,
            proj_dim: 4,
            hidden: 8,
            seed: 0,
        })
        .unwrap();
        let head = NfeCounter::new(est);
        for p in puzzles() {
            let s = SequenceState::from_puzzle(&p);
            let m = s.masked_count();
            for cfg in [
                SamplerConfig::sequential(),
                SamplerConfig::naive(4),
                SamplerConfig::entropy_budget(0.5),
                SamplerConfig::mi_guided(1.0, 1.0),
                SamplerConfig {
                    commit: CommitRule::Sample,
                    seed: 5,
                    ..SamplerConfig::mi_guided(0.3, 2.0)
                },
            ] {
                mdm.reset();
                head.reset();
                let t = decode(&mdm, Some(&head), &s, &cfg).unwrap();
                t.validate().unwrap();
                assert_eq!(mdm.nfe(), t.backbone_nfe);
                assert_eq!(head.nfe(), t.head_nfe);
                assert!(t.num_passes() <= m);
                assert_eq!(t.final_state.masked_count(), 0);
                for i in 0..16 {
                    if s.is_pinned(i) {
                        assert_eq!(t.final_state.token(i), s.token(i));
                    }
                }
                match cfg.strategy {
                    Strategy::Sequential => assert_eq!(t.num_passes(), m),
                    Strategy::NaiveK => assert_eq!(t.num_passes(), m.div_ceil(4)),
                    _ => {}
                }
            }
        }
    }

    #[test]
    fn decode_trace_json_round_trip() {
        let p = &puzzles()[0];
        let t = decode(
            &tiny_mdm(),
            None,
            &SequenceState::from_puzzle(p),
            &SamplerConfig::naive(3),
        )
        .unwrap();
        let json = serde_json::to_string(&t).unwrap();
        let back: DecodeTrace = serde_json::from_str(&json).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn mi_guided_needs_an_estimator() {
        let p = &puzzles()[0];
        let r = decode(
            &tiny_mdm(),
            None,
            &SequenceState::from_puzzle(p),
            &SamplerConfig::mi_guided(1.0, 1.0),
        );
        assert!(matches!(r, Err(Error::Usage(_))));
    }

    #[test]
    fn sampled_commits_follow_the_joint() {
        // Copy channel: decoding one token at a time must keep X0 = X1.
        let m = MockJointModel::copy_channel();
        for seed in 0..20 {
            let cfg = SamplerConfig {
                commit: CommitRule::Sample,
                seed,
                ..SamplerConfig::sequential()
            };
            let t = decode(&m, None, &SequenceState::fully_masked(2, 2), &cfg).unwrap();
            assert_eq!(t.final_state.token(0), t.final_state.token(1));
        }
    }
}
