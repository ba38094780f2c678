//! A model defined by an explicit joint table, used to verify the probing
//! oracle against direct enumeration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::matrix::MiMatrix;
use crate::error::{usage_err, Error, Result};
use crate::mdm::{DenoisingModel, Marginals, SequenceState};
use crate::nn::Tensor;

pub const MAX_OUTCOMES: usize = 4096;

/// Explicit joint distribution over `vocab^n` outcomes. Outcome index is
/// the base-`vocab` number with position 0 as the most significant digit.
#[derive(Clone, Debug, PartialEq)]
pub struct MockJointModel {
    n: usize,
    vocab: usize,
    table: Vec<f64>,
}

impl MockJointModel {
    pub fn new(n: usize, vocab: usize, table: Vec<f64>) -> Result<Self> {
        if n == 0 || vocab == 0 {
            return usage_err("mock joint needs positive length and vocabulary");
        }
        let outcomes = vocab.checked_pow(n as u32).filter(|&o| o <= MAX_OUTCOMES);
        let Some(outcomes) = outcomes else {
            return usage_err(format!("{vocab}^{n} outcomes exceed the enumeration limit"));
        };
        if table.len() != outcomes {
            return usage_err(format!("table needs {outcomes} entries, got {}", table.len()));
        }
        if table.iter().any(|&p| !p.is_finite() || p < 0.0) {
            return usage_err("table entries must be finite and non-negative");
        }
        let total: f64 = table.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return usage_err(format!("table sums to {total}, expected 1"));
        }
        Ok(Self { n, vocab, table })
    }

    /// Seeded random joint with strictly positive, unevenly spread mass.
    pub fn random(n: usize, vocab: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let outcomes = vocab.pow(n as u32);
        // Exponentiated uniforms give a wide dynamic range of weights.
        let raw: Vec<f64> = (0..outcomes).map(|_| (rng.gen_range(-3.0..3.0f64)).exp()).collect();
        let z: f64 = raw.iter().sum();
        let mut table: Vec<f64> = raw.iter().map(|w| w / z).collect();
        // Renormalize once more so the sum is as close to 1 as rounding allows.
        let z2: f64 = table.iter().sum();
        table.iter_mut().for_each(|p| *p /= z2);
        Self::new(n, vocab, table)
    }

    /// `X_0 = X_1`, uniform over two symbols.
    pub fn copy_channel() -> Self {
        Self::new(2, 2, vec![0.5, 0.0, 0.0, 0.5]).expect("valid")
    }

    /// `X_2 = X_0 xor X_1` with `X_0, X_1` independent fair bits.
    pub fn xor3() -> Self {
        let mut table = vec![0.0; 8];
        for a in 0..2 {
            for b in 0..2 {
                table[Self::index_of(&[a, b, a ^ b], 2)] = 0.25;
            }
        }
        Self::new(3, 2, table).expect("valid")
    }

    /// Independent positions with the given per-position marginals.
    pub fn product(marginals: &[Vec<f64>]) -> Result<Self> {
        let n = marginals.len();
        let vocab = marginals.first().map_or(0, Vec::len);
        let outcomes = vocab.pow(n as u32);
        let mut table = vec![0.0; outcomes];
        for (o, p) in table.iter_mut().enumerate() {
            let digits = Self::digits_of(o, n, vocab);
            *p = digits.iter().enumerate().map(|(i, &d)| marginals[i][d]).product();
        }
        let z: f64 = table.iter().sum();
        table.iter_mut().for_each(|p| *p /= z);
        Self::new(n, vocab, table)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    fn index_of(digits: &[usize], vocab: usize) -> usize {
        digits.iter().fold(0, |acc, &d| acc * vocab + d)
    }

    fn digits_of(mut o: usize, n: usize, vocab: usize) -> Vec<usize> {
        let mut d = vec![0; n];
        for k in (0..n).rev() {
            d[k] = o % vocab;
            o /= vocab;
        }
        d
    }

    /// Outcomes consistent with the unmasked positions of `state`, with
    /// their probabilities, plus the total mass of the context.
    fn consistent(&self, state: &SequenceState) -> (Vec<(Vec<usize>, f64)>, f64) {
        let mut out = Vec::new();
        let mut z = 0.0;
        for (o, &p) in self.table.iter().enumerate() {
            let d = Self::digits_of(o, self.n, self.vocab);
            let ok = (0..self.n).all(|i| state.token(i).is_none_or(|t| t as usize == d[i]));
            if ok {
                z += p;
                out.push((d, p));
            }
        }
        (out, z)
    }

    fn check_state(&self, state: &SequenceState) -> Result<()> {
        if state.len() != self.n || state.vocab() != self.vocab {
            return usage_err("state does not match the mock joint's shape");
        }
        Ok(())
    }

    /// `P(X_i, X_j | C)` as a `vocab x vocab` row-major table, by direct
    /// summation over consistent outcomes.
    pub fn pair_joint(&self, state: &SequenceState, i: usize, j: usize) -> Result<Vec<f64>> {
        self.check_state(state)?;
        let (outs, z) = self.consistent(state);
        if z <= 0.0 {
            return Err(Error::ZeroProbabilityContext);
        }
        let mut joint = vec![0.0; self.vocab * self.vocab];
        for (d, p) in outs {
            joint[d[i] * self.vocab + d[j]] += p / z;
        }
        Ok(joint)
    }

    /// `P(X_i | C)`.
    pub fn marginal(&self, state: &SequenceState, i: usize) -> Result<Vec<f64>> {
        self.check_state(state)?;
        let (outs, z) = self.consistent(state);
        if z <= 0.0 {
            return Err(Error::ZeroProbabilityContext);
        }
        let mut m = vec![0.0; self.vocab];
        for (d, p) in outs {
            m[d[i]] += p / z;
        }
        Ok(m)
    }
}

impl DenoisingModel for MockJointModel {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn seq_len(&self) -> usize {
        self.n
    }

    /// Exact conditionals. A context of probability zero yields uniform rows
    /// at masked positions; callers weight such passes by zero anyway.
    fn forward_batch(&self, states: &[SequenceState]) -> Result<Vec<Marginals>> {
        states
            .iter()
            .map(|state| {
                self.check_state(state)?;
                let (outs, z) = self.consistent(state);
                let v = self.vocab;
                let mut probs = vec![0.0; self.n * v];
                for i in 0..self.n {
                    let row = &mut probs[i * v..(i + 1) * v];
                    if let Some(t) = state.token(i) {
                        row[t as usize] = 1.0;
                    } else if z > 0.0 {
                        for (d, p) in &outs {
                            row[d[i]] += p / z;
                        }
                    } else {
                        row.iter_mut().for_each(|x| *x = 1.0 / v as f64);
                    }
                }
                Ok(Marginals {
                    probs: Tensor::new(vec![self.n, v], probs)?,
                    hidden: Tensor::zeros(vec![self.n, 0]),
                })
            })
            .collect()
    }
}

/// Pairwise MI by the direct double sum over `P(x_i, x_j | C)` obtained by
/// brute-force marginalization. Independent of the probing code path.
pub fn enumerate_mi_exact(joint: &MockJointModel, state: &SequenceState) -> Result<MiMatrix> {
    joint.check_state(state)?;
    let n = joint.n;
    let v = joint.vocab;
    let masked = state.masked_positions();
    let mut raw = vec![0.0; n * n];
    let (_, z) = joint.consistent(state);
    if z <= 0.0 {
        return Err(Error::ZeroProbabilityContext);
    }
    for &i in &masked {
        for &j in &masked {
            if i >= j {
                continue;
            }
            let pij = joint.pair_joint(state, i, j)?;
            let pi: Vec<f64> = (0..v).map(|a| (0..v).map(|b| pij[a * v + b]).sum()).collect();
            let pj: Vec<f64> = (0..v).map(|b| (0..v).map(|a| pij[a * v + b]).sum()).collect();
            let mut mi = 0.0;
            for a in 0..v {
                for b in 0..v {
                    let p = pij[a * v + b];
                    if p > 0.0 {
                        mi += p * (p / (pi[a] * pj[b])).ln();
                    }
                }
            }
            raw[i * n + j] = mi;
            raw[j * n + i] = mi;
        }
    }
    MiMatrix::from_raw(n, &raw, &masked)
}
