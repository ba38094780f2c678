//! Ground-truth pairwise MI by conditional probing: one base pass, then one
//! pass per (masked position, token) with that position pinned to the token.

use super::matrix::MiMatrix;
use crate::error::{usage_err, Result};
use crate::mdm::{entropy, DenoisingModel, Marginals, SequenceState, Token};

/// Sequences evaluated per backbone call while probing.
pub const PROBE_CHUNK: usize = 64;

/// Base marginals and, for every masked `i` and token `v`, the marginals
/// with `X_i = v` fixed.
#[derive(Clone, Debug)]
pub struct ProbedConditionals {
    masked: Vec<usize>,
    vocab: usize,
    base: Marginals,
    /// Indexed by `slot(i) * vocab + v`.
    conditionals: Vec<Marginals>,
}

impl ProbedConditionals {
    pub fn base(&self) -> &Marginals {
        &self.base
    }

    pub fn masked(&self) -> &[usize] {
        &self.masked
    }

    pub fn is_empty(&self) -> bool {
        self.conditionals.is_empty()
    }

    fn slot(&self, i: usize) -> Option<usize> {
        self.masked.binary_search(&i).ok()
    }

    /// `P(X_j | X_i = v, C)` for all `j`, if `i` was probed.
    pub fn conditional(&self, i: usize, v: usize) -> Option<&Marginals> {
        let s = self.slot(i)?;
        self.conditionals.get(s * self.vocab + v)
    }
}

/// Evaluates `states` in chunks so the tape never holds more than
/// [`PROBE_CHUNK`] sequences at once. Output order matches input order.
pub fn forward_chunked<M: DenoisingModel>(model: &M, states: &[SequenceState]) -> Result<Vec<Marginals>> {
    let mut out = Vec::with_capacity(states.len());
    for chunk in states.chunks(PROBE_CHUNK) {
        out.extend(model.forward_batch(chunk)?);
    }
    Ok(out)
}

/// Runs the base pass and `m * |V|` conditional passes over the `m` masked
/// positions of `state`. With fewer than two masked positions only the base
/// pass runs and the probe set is empty. `state` itself is never modified.
pub fn probe_conditionals<M: DenoisingModel>(model: &M, state: &SequenceState) -> Result<ProbedConditionals> {
    let vocab = model.vocab_size();
    if state.vocab() != vocab {
        return usage_err("state vocabulary does not match the model");
    }
    let masked = state.masked_positions();
    let base = model.forward_marginals(state)?;
    if masked.len() < 2 {
        return Ok(ProbedConditionals {
            masked,
            vocab,
            base,
            conditionals: Vec::new(),
        });
    }
    let probes: Vec<SequenceState> = masked
        .iter()
        .flat_map(|&i| (0..vocab).map(move |v| state.with_fixed(i, v as Token)))
        .collect();
    let conditionals = forward_chunked(model, &probes)?;
    Ok(ProbedConditionals {
        masked,
        vocab,
        base,
        conditionals,
    })
}

/// `H(X_j | C) - sum_v P(X_i = v | C) H(X_j | X_i = v, C)`. May be slightly
/// negative when the model's conditionals are not those of a single joint.
/// Returns 0 when `i` or `j` was not probed.
pub fn conditional_entropy_reduction(probes: &ProbedConditionals, i: usize, j: usize) -> f64 {
    if i == j || probes.slot(i).is_none() || probes.slot(j).is_none() || probes.is_empty() {
        return 0.0;
    }
    let h_j = entropy(probes.base.row(j));
    let p_i = probes.base.row(i);
    let h_j_given_i: f64 = (0..probes.vocab)
        .filter(|&v| p_i[v] > 0.0)
        .map(|v| {
            let cond = probes.conditional(i, v).expect("probed");
            p_i[v] * entropy(cond.row(j))
        })
        .sum();
    h_j - h_j_given_i
}

/// Full MI matrix from probes: raw entropy reductions for every ordered
/// masked pair, then symmetrized and clamped.
pub fn mi_from_probes(probes: &ProbedConditionals) -> Result<MiMatrix> {
    let n = probes.base.len();
    let mut raw = vec![0.0; n * n];
    for &i in &probes.masked {
        for &j in &probes.masked {
            if i != j {
                raw[i * n + j] = conditional_entropy_reduction(probes, i, j);
            }
        }
    }
    MiMatrix::from_raw(n, &raw, &probes.masked)
}

/// Ground-truth MI matrix of `model` at `state`; costs `1 + m * |V|`
/// model evaluations for `m >= 2` masked positions, 1 otherwise.
pub fn ground_truth_mi<M: DenoisingModel>(model: &M, state: &SequenceState) -> Result<MiMatrix> {
    let probes = probe_conditionals(model, state)?;
    mi_from_probes(&probes)
}

/// Ground truth plus the base-pass marginals (whose hidden states feed the
/// estimator).
pub fn ground_truth_with_base<M: DenoisingModel>(model: &M, state: &SequenceState) -> Result<(MiMatrix, Marginals)> {
    let probes = probe_conditionals(model, state)?;
    let mi = mi_from_probes(&probes)?;
    Ok((mi, probes.base))
}
