use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, usage_err, Result};
use crate::mdm::NfeCounter;
use crate::mi::MiMatrix;
use crate::nn::{HeadLayout, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    /// Backbone hidden width `D`.
    pub input_dim: usize,
    /// Projection width `d_p` of the pair embedding.
    pub proj_dim: usize,
    pub hidden: usize,
    pub seed: u64,
}

impl EstimatorConfig {
    /// About 100K parameters on a 128-wide backbone.
    pub fn for_input_dim(input_dim: usize) -> Self {
        Self {
            input_dim,
            proj_dim: 64,
            hidden: 512,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.proj_dim == 0 || self.hidden == 0 {
            return usage_err("estimator dimensions must be positive");
        }
        Ok(())
    }
}

/// Initial pair bias: softplus(-3) is about 0.05 nats, near typical targets.
const INIT_BIAS: f64 = -3.0;

/// Pairwise MI head. Each position's hidden state goes through a two-layer
/// MLP to `u_i`; the pair score is `softplus(<u_i, u_j> / sqrt(d_p) + c)`.
#[derive(Clone, Debug)]
pub struct MiEstimator {
    config: EstimatorConfig,
    store: ParamStore,
    ids: HeadIds,
}

#[derive(Clone, Copy, Debug)]
struct HeadIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    c: ParamId,
}

const PARAM_NAMES: [&str; 5] = ["w1", "b1", "w2", "b2", "c"];

impl MiEstimator {
    pub fn new(config: EstimatorConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, h, p) = (config.input_dim, config.hidden, config.proj_dim);
        let mut store = ParamStore::new();
        store.add_normal("w1", vec![d, h], (1.0 / d as f64).sqrt(), &mut rng);
        store.add_constant("b1", vec![h], 0.0);
        store.add_normal("w2", vec![h, p], (1.0 / h as f64).sqrt(), &mut rng);
        store.add_constant("b2", vec![p], 0.0);
        store.add_constant("c", vec![1], INIT_BIAS);
        Self::from_store(config, store)
    }

    /// Wraps a loaded parameter store, checking names and shapes.
    pub fn from_store(config: EstimatorConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let (d, h, p) = (config.input_dim, config.hidden, config.proj_dim);
        let expected: [Vec<usize>; 5] = [vec![d, h], vec![h], vec![h, p], vec![p], vec![1]];
        let mut ids = Vec::with_capacity(5);
        for (name, shape) in PARAM_NAMES.iter().zip(&expected) {
            let Some(id) = store.find(name) else {
                return shape_err(format!("estimator parameter {name} missing"));
            };
            if store.value(id).shape() != shape.as_slice() {
                return shape_err(format!(
                    "estimator parameter {name} has shape {:?}",
                    store.value(id).shape()
                ));
            }
            ids.push(id);
        }
        if store.len() != 5 {
            return shape_err("unexpected extra estimator parameters");
        }
        let ids = HeadIds {
            w1: ids[0],
            b1: ids[1],
            w2: ids[2],
            b2: ids[3],
            c: ids[4],
        };
        Ok(Self { config, store, ids })
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Records the head on `groups` stacked `seq x D` hidden matrices;
    /// returns the `(groups*seq) x seq` matrix of raw pair scores.
    pub fn forward_tape(&self, tape: &mut Tape, hidden: Var, groups: usize, seq: usize) -> Result<Var> {
        let (rows, d) = tape.value(hidden).dims2()?;
        if rows != groups * seq || d != self.config.input_dim {
            return shape_err(format!(
                "estimator expects {} x {}, got {rows} x {d}",
                groups * seq,
                self.config.input_dim
            ));
        }
        let p = |tape: &mut Tape, id| tape.param(&self.store, id);
        let (w1, b1, w2, b2, c) = (
            p(tape, self.ids.w1),
            p(tape, self.ids.b1),
            p(tape, self.ids.w2),
            p(tape, self.ids.b2),
            p(tape, self.ids.c),
        );
        let a = tape.matmul(hidden, w1)?;
        let a = tape.add_bias(a, b1)?;
        let a = tape.gelu(a);
        let u = tape.matmul(a, w2)?;
        let u = tape.add_bias(u, b2)?;
        let layout = HeadLayout { groups, seq, heads: 1 };
        let scores = tape.attn_scores(u, u, layout, 1.0 / (self.config.proj_dim as f64).sqrt())?;
        let scores = tape.add_scalar(scores, c)?;
        Ok(tape.softplus(scores))
    }

    /// One head evaluation on an `N x D` hidden matrix, restricted to the
    /// masked set.
    pub fn predict_mi(&self, hidden: &Tensor, masked: &[usize]) -> Result<MiMatrix> {
        let (n, _) = hidden.dims2()?;
        if masked.iter().any(|&i| i >= n) {
            return shape_err("masked index out of range");
        }
        let mut tape = Tape::new();
        let h = tape.leaf(hidden.clone());
        let out = self.forward_tape(&mut tape, h, 1, n)?;
        MiMatrix::from_raw(n, tape.value(out).data(), masked)
    }
}

/// Anything that maps one pass's hidden states to an MI matrix in a single
/// evaluation.
pub trait MiPredictor {
    fn input_dim(&self) -> usize;
    fn predict_mi(&self, hidden: &Tensor, masked: &[usize]) -> Result<MiMatrix>;
}

impl MiPredictor for MiEstimator {
    fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    fn predict_mi(&self, hidden: &Tensor, masked: &[usize]) -> Result<MiMatrix> {
        MiEstimator::predict_mi(self, hidden, masked)
    }
}

impl<H: MiPredictor + ?Sized> MiPredictor for &H {
    fn input_dim(&self) -> usize {
        (**self).input_dim()
    }

    fn predict_mi(&self, hidden: &Tensor, masked: &[usize]) -> Result<MiMatrix> {
        (**self).predict_mi(hidden, masked)
    }
}

impl<H: MiPredictor> MiPredictor for NfeCounter<H> {
    fn input_dim(&self) -> usize {
        self.inner().input_dim()
    }

    fn predict_mi(&self, hidden: &Tensor, masked: &[usize]) -> Result<MiMatrix> {
        self.record(1);
        self.inner().predict_mi(hidden, masked)
    }
}

/// Mean squared error over unordered masked pairs `i < j`; 0 without pairs.
pub fn estimator_loss(pred: &MiMatrix, target: &MiMatrix, masked: &[usize]) -> Result<f64> {
    if pred.n() != target.n() {
        return shape_err(format!("prediction is {0}x{0}, target {1}x{1}", pred.n(), target.n()));
    }
    let n = pred.n();
    let mut set: Vec<usize> = masked.to_vec();
    set.sort_unstable();
    set.dedup();
    if set.iter().any(|&i| i >= n) {
        return shape_err("masked index out of range");
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (a, &i) in set.iter().enumerate() {
        for &j in &set[a + 1..] {
            let e = pred.get(i, j) - target.get(i, j);
            sum += e * e;
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}
