use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::state::SequenceState;
use crate::error::{shape_err, usage_err, Result};
use crate::nn::{softmax_into, HeadLayout, ParamId, ParamStore, Tape, Tensor, Var, LAYER_NORM_EPS};

/// Per-position predictive distributions plus the final hidden states they
/// were read from.
#[derive(Clone, Debug, PartialEq)]
pub struct Marginals {
    /// `N x |V|`; rows at unmasked positions are one-hot on the observed token.
    pub probs: Tensor,
    /// `N x D` final-layer states (`D` may be 0 for models without any).
    pub hidden: Tensor,
}

impl Marginals {
    pub fn len(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn vocab(&self) -> usize {
        self.probs.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.probs.row(i)
    }
}

/// Shannon entropy in nats, with `0 log 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

pub fn entropy_per_position(m: &Marginals) -> Vec<f64> {
    (0..m.len()).map(|i| entropy(m.row(i))).collect()
}

/// Anything that maps a partially masked sequence to per-position
/// marginals. One evaluated sequence is one function evaluation (NFE).
pub trait DenoisingModel {
    fn vocab_size(&self) -> usize;
    fn seq_len(&self) -> usize;

    /// Evaluates several independent sequences.
    fn forward_batch(&self, states: &[SequenceState]) -> Result<Vec<Marginals>>;

    fn forward_marginals(&self, state: &SequenceState) -> Result<Marginals> {
        Ok(self
            .forward_batch(std::slice::from_ref(state))?
            .pop()
            .expect("one output per input"))
    }
}

impl<M: DenoisingModel + ?Sized> DenoisingModel for &M {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }
    fn seq_len(&self) -> usize {
        (**self).seq_len()
    }
    fn forward_batch(&self, states: &[SequenceState]) -> Result<Vec<Marginals>> {
        (**self).forward_batch(states)
    }
}

/// Wraps a model and counts how many sequences it evaluated.
#[derive(Debug)]
pub struct NfeCounter<M> {
    inner: M,
    calls: AtomicU64,
}

impl<M> NfeCounter<M> {
    pub fn new(inner: M) -> Self {
        Self {
            inner,
            calls: AtomicU64::new(0),
        }
    }

    pub fn nfe(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::Relaxed);
    }

    pub fn inner(&self) -> &M {
        &self.inner
    }

    /// Adds `k` evaluations to the count.
    pub fn record(&self, k: u64) {
        self.calls.fetch_add(k, Ordering::Relaxed);
    }
}

impl<M: DenoisingModel> DenoisingModel for NfeCounter<M> {
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }
    fn seq_len(&self) -> usize {
        self.inner.seq_len()
    }
    fn forward_batch(&self, states: &[SequenceState]) -> Result<Vec<Marginals>> {
        self.record(states.len() as u64);
        self.inner.forward_batch(states)
    }
}

/// Transformer hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab: usize,
    pub seq_len: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::sudoku4()
    }
}

impl ModelConfig {
    /// Default 4x4 Sudoku backbone.
    pub fn sudoku4() -> Self {
        Self {
            vocab: 4,
            seq_len: 16,
            dim: 64,
            layers: 4,
            heads: 4,
            ff_dim: 256,
            seed: 0,
        }
    }

    /// Default 9x9 Sudoku backbone.
    pub fn sudoku9() -> Self {
        Self {
            vocab: 9,
            seq_len: 81,
            dim: 128,
            layers: 6,
            heads: 8,
            ff_dim: 512,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.seq_len == 0 || self.dim == 0 || self.heads == 0 {
            return usage_err("model dimensions must be positive");
        }
        if !self.dim.is_multiple_of(self.heads) {
            return usage_err(format!("dim {} not divisible by {} heads", self.dim, self.heads));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct LayerParams {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Pre-norm bidirectional transformer encoder with learned absolute
/// position embeddings and a linear readout over the real vocabulary.
#[derive(Clone, Debug)]
pub struct Mdm {
    config: ModelConfig,
    store: ParamStore,
    tok_emb: ParamId,
    pos_emb: ParamId,
    layers: Vec<LayerParams>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    w_out: ParamId,
    b_out: ParamId,
}

/// Tape outputs of a batched forward pass.
pub struct ForwardVars {
    pub logits: Var,
    pub hidden: Var,
}

impl Mdm {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut s = ParamStore::new();
        let d = config.dim;
        let f = config.ff_dim;
        let std_d = (1.0 / d as f64).sqrt();
        let std_f = (1.0 / f as f64).sqrt();
        // Residual branch outputs start smaller so depth does not blow up
        // the residual stream at init.
        let resid = 1.0 / (2.0 * config.layers.max(1) as f64).sqrt();

        let tok_emb = s.add_normal("tok_emb", vec![config.vocab + 1, d], 1.0, &mut rng);
        let pos_emb = s.add_normal("pos_emb", vec![config.seq_len, d], 0.5, &mut rng);
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = |n: &str| format!("layer{l}.{n}");
            layers.push(LayerParams {
                ln1_g: s.add_constant(p("ln1.gain"), vec![d], 1.0),
                ln1_b: s.add_constant(p("ln1.bias"), vec![d], 0.0),
                wq: s.add_normal(p("attn.wq"), vec![d, d], std_d, &mut rng),
                wk: s.add_normal(p("attn.wk"), vec![d, d], std_d, &mut rng),
                wv: s.add_normal(p("attn.wv"), vec![d, d], std_d, &mut rng),
                wo: s.add_normal(p("attn.wo"), vec![d, d], std_d * resid, &mut rng),
                ln2_g: s.add_constant(p("ln2.gain"), vec![d], 1.0),
                ln2_b: s.add_constant(p("ln2.bias"), vec![d], 0.0),
                w1: s.add_normal(p("ff.w1"), vec![d, f], std_d, &mut rng),
                b1: s.add_constant(p("ff.b1"), vec![f], 0.0),
                w2: s.add_normal(p("ff.w2"), vec![f, d], std_f * resid, &mut rng),
                b2: s.add_constant(p("ff.b2"), vec![d], 0.0),
            });
        }
        let lnf_g = s.add_constant("ln_f.gain", vec![d], 1.0);
        let lnf_b = s.add_constant("ln_f.bias", vec![d], 0.0);
        let w_out = s.add_normal("out.w", vec![d, config.vocab], std_d, &mut rng);
        let b_out = s.add_constant("out.b", vec![config.vocab], 0.0);
        Ok(Self {
            config,
            store: s,
            tok_emb,
            pos_emb,
            layers,
            lnf_g,
            lnf_b,
            w_out,
            b_out,
        })
    }

    /// Rebuilds a model with the given config and replaces all parameter
    /// values from `store`, which must have matching names and shapes.
    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Self> {
        let mut m = Self::new(config)?;
        if store.len() != m.store.len() {
            return shape_err("parameter count does not match the model config");
        }
        for id in m.store.ids() {
            let other = store
                .find(m.store.name(id))
                .ok_or_else(|| crate::Error::Shape(format!("missing parameter {}", m.store.name(id))))?;
            if store.value(other).shape() != m.store.value(id).shape() {
                return shape_err(format!("shape mismatch for {}", m.store.name(id)));
            }
        }
        m.store = store;
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.dim
    }

    fn check_states(&self, states: &[SequenceState]) -> Result<()> {
        for s in states {
            if s.len() != self.config.seq_len || s.vocab() != self.config.vocab {
                return shape_err(format!(
                    "state of length {} / vocab {} for a model of length {} / vocab {}",
                    s.len(),
                    s.vocab(),
                    self.config.seq_len,
                    self.config.vocab
                ));
            }
        }
        Ok(())
    }

    /// Records a forward pass over `states` (stacked row-wise) on `tape`.
    pub fn forward_tape(&self, tape: &mut Tape, states: &[SequenceState]) -> Result<ForwardVars> {
        self.check_states(states)?;
        let n = self.config.seq_len;
        let d = self.config.dim;
        let b = states.len();
        let ids: Vec<usize> = states
            .iter()
            .flat_map(|s| s.tokens().iter().map(|&t| t as usize))
            .collect();
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..n).collect();

        let p = |tape: &mut Tape, id| tape.param(&self.store, id);
        let tok = p(tape, self.tok_emb);
        let pos = p(tape, self.pos_emb);
        let te = tape.embedding(tok, &ids)?;
        let pe = tape.embedding(pos, &positions)?;
        let mut x = tape.add(te, pe)?;

        let layout = HeadLayout {
            groups: b,
            seq: n,
            heads: self.config.heads,
        };
        let scale = 1.0 / ((d / self.config.heads) as f64).sqrt();
        for l in &self.layers {
            let (g, bb) = (p(tape, l.ln1_g), p(tape, l.ln1_b));
            let h = tape.layer_norm(x, g, bb, LAYER_NORM_EPS)?;
            let (wq, wk, wv, wo) = (p(tape, l.wq), p(tape, l.wk), p(tape, l.wv), p(tape, l.wo));
            let q = tape.matmul(h, wq)?;
            let k = tape.matmul(h, wk)?;
            let v = tape.matmul(h, wv)?;
            let scores = tape.attn_scores(q, k, layout, scale)?;
            let attn = tape.softmax_rows(scores)?;
            let mixed = tape.attn_mix(attn, v, layout)?;
            let proj = tape.matmul(mixed, wo)?;
            x = tape.add(x, proj)?;

            let (g, bb) = (p(tape, l.ln2_g), p(tape, l.ln2_b));
            let h = tape.layer_norm(x, g, bb, LAYER_NORM_EPS)?;
            let (w1, b1, w2, b2) = (p(tape, l.w1), p(tape, l.b1), p(tape, l.w2), p(tape, l.b2));
            let f = tape.matmul(h, w1)?;
            let f = tape.add_bias(f, b1)?;
            let f = tape.gelu(f);
            let f = tape.matmul(f, w2)?;
            let f = tape.add_bias(f, b2)?;
            x = tape.add(x, f)?;
        }
        let (g, bb) = (p(tape, self.lnf_g), p(tape, self.lnf_b));
        let hidden = tape.layer_norm(x, g, bb, LAYER_NORM_EPS)?;
        let (w, bo) = (p(tape, self.w_out), p(tape, self.b_out));
        let logits = tape.matmul(hidden, w)?;
        let logits = tape.add_bias(logits, bo)?;
        Ok(ForwardVars { logits, hidden })
    }
}

impl DenoisingModel for Mdm {
    fn vocab_size(&self) -> usize {
        self.config.vocab
    }

    fn seq_len(&self) -> usize {
        self.config.seq_len
    }

    fn forward_batch(&self, states: &[SequenceState]) -> Result<Vec<Marginals>> {
        if states.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let out = self.forward_tape(&mut tape, states)?;
        let logits = tape.value(out.logits);
        let hidden = tape.value(out.hidden);
        let n = self.config.seq_len;
        let v = self.config.vocab;
        let d = self.config.dim;
        if logits.data().iter().any(|x| !x.is_finite()) {
            return Err(crate::Error::Numeric("non-finite logits".into()));
        }
        let mut result = Vec::with_capacity(states.len());
        for (b, state) in states.iter().enumerate() {
            let mut probs = vec![0.0; n * v];
            for i in 0..n {
                let row = &mut probs[i * v..(i + 1) * v];
                match state.token(i) {
                    Some(t) => row[t as usize] = 1.0,
                    None => softmax_into(logits.row(b * n + i), row),
                }
            }
            let h = hidden.data()[b * n * d..(b + 1) * n * d].to_vec();
            result.push(Marginals {
                probs: Tensor::new(vec![n, v], probs)?,
                hidden: Tensor::new(vec![n, d], h)?,
            });
        }
        Ok(result)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdm::state::{apply_forward_mask, NoiseSchedule};
    use crate::sudoku::{generate_complete_grid, punch_holes};

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab: 4,
            seq_len: 16,
            dim: 16,
            layers: 2,
            heads: 2,
            ff_dim: 32,
            seed: 3,
        }
    }

    fn sample_state(seed: u64) -> SequenceState {
        let g = generate_complete_grid(2, seed).unwrap();
        let p = punch_holes(&g, 10, seed).unwrap();
        SequenceState::from_puzzle(&p)
    }

    #[test]
    fn entropy_examples() {
        let u = vec![1.0 / 9.0; 9];
        assert!((entropy(&u) - 9f64.ln()).abs() < 1e-12);
        let mut one_hot = vec![0.0; 9];
        one_hot[3] = 1.0;
        assert_eq!(entropy(&one_hot), 0.0);
        let mut half = vec![0.0; 9];
        half[0] = 0.5;
        half[1] = 0.5;
        assert!((entropy(&half) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn marginal_rows_are_distributions_and_one_hot_when_observed() {
        let m = Mdm::new(tiny()).unwrap();
        let s = sample_state(1);
        let out = m.forward_marginals(&s).unwrap();
        for i in 0..16 {
            let row = out.row(i);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            if let Some(t) = s.token(i) {
                assert_eq!(row[t as usize], 1.0);
            }
        }
        assert_eq!(out.hidden.shape(), &[16, 16]);
        let ent = entropy_per_position(&out);
        for i in 0..16 {
            if !s.is_masked(i) {
                assert_eq!(ent[i], 0.0);
            }
        }
    }

    #[test]
    fn forward_is_pure_and_batch_consistent() {
        let m = Mdm::new(tiny()).unwrap();
        let a = sample_state(2);
        let b = sample_state(3);
        let single_a = m.forward_marginals(&a).unwrap();
        assert_eq!(single_a, m.forward_marginals(&a).unwrap());
        let both = m.forward_batch(&[a, b.clone()]).unwrap();
        let single_b = m.forward_marginals(&b).unwrap();
        for (x, y) in both[1].probs.data().iter().zip(single_b.probs.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in both[0].probs.data().iter().zip(single_a.probs.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn untrained_model_is_near_uniform() {
        let m = Mdm::new(ModelConfig::sudoku4()).unwrap();
        let s = SequenceState::fully_masked(4, 16);
        let ent = entropy_per_position(&m.forward_marginals(&s).unwrap());
        let mean = ent.iter().sum::<f64>() / 16.0;
        assert!((mean - 4f64.ln()).abs() < 0.5, "{mean}");
    }

    #[test]
    fn nfe_counter_counts_sequences() {
        let m = NfeCounter::new(Mdm::new(tiny()).unwrap());
        m.forward_marginals(&sample_state(1)).unwrap();
        assert_eq!(m.nfe(), 1);
        m.forward_batch(&[sample_state(1), sample_state(2), sample_state(3)])
            .unwrap();
        assert_eq!(m.nfe(), 4);
    }

    #[test]
    fn rejects_wrong_length_and_bad_heads() {
        let m = Mdm::new(tiny()).unwrap();
        let s = SequenceState::fully_masked(4, 15);
        assert!(m.forward_marginals(&s).is_err());
        let mut bad = tiny();
        bad.heads = 3;
        assert!(Mdm::new(bad).is_err());
    }

    #[test]
    fn logits_at_unmasked_positions_do_not_reach_the_output() {
        // Observed rows are one-hot by construction, whatever the network says.
        let m = Mdm::new(tiny()).unwrap();
        let g = generate_complete_grid(2, 9).unwrap();
        let p = punch_holes(&g, 4, 1).unwrap();
        let x0 = SequenceState::clean_from_puzzle(&p);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let xt = apply_forward_mask(&x0, NoiseSchedule::Linear, 0.0, &mut rng).unwrap();
        let out = m.forward_marginals(&xt).unwrap();
        assert!(entropy_per_position(&out).iter().all(|&h| h == 0.0));
    }
}
