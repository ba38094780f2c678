use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::MiExample;
use super::head::MiEstimator;
use crate::error::{shape_err, usage_err, Error, Result};
use crate::nn::{AdamConfig, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of puzzles whose examples are held out for evaluation.
    pub heldout_frac: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for EstimatorTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            lr: 1e-3,
            heldout_frac: 0.1,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub heldout_mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorReport {
    pub epochs: Vec<EpochStats>,
    /// MSE of predicting the held-out mean target for every held-out pair.
    pub baseline_mse: f64,
    pub final_mse: f64,
    pub heldout_pairs: usize,
}

/// Splits examples into train / held-out at the granularity of consecutive
/// groups of `group_size` (the samples drawn from one puzzle), so no puzzle
/// contributes to both sides.
pub fn split_by_group(
    examples: Vec<MiExample>,
    group_size: usize,
    heldout_frac: f64,
    seed: u64,
) -> Result<(Vec<MiExample>, Vec<MiExample>)> {
    if group_size == 0 || !(0.0..1.0).contains(&heldout_frac) {
        return usage_err("group size must be positive and held-out fraction in [0, 1)");
    }
    let groups = examples.len().div_ceil(group_size);
    let mut order: Vec<usize> = (0..groups).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_held = ((groups as f64) * heldout_frac).round() as usize;
    let mut held = vec![false; groups];
    for &g in &order[..n_held] {
        held[g] = true;
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (k, ex) in examples.into_iter().enumerate() {
        if held[k / group_size] {
            test.push(ex);
        } else {
            train.push(ex);
        }
    }
    Ok((train, test))
}

fn pair_count(ex: &MiExample) -> usize {
    let m = ex.masked().len();
    m * m.saturating_sub(1) / 2
}

/// Stacks hidden states and builds per-entry targets and weights so that
/// `weighted_sse` yields the pooled pair MSE over the batch.
fn batch_inputs(batch: &[&MiExample]) -> Result<(Tensor, usize, Vec<f64>, Vec<f64>)> {
    let (n, d) = batch[0].hidden.dims2()?;
    let total_pairs: usize = batch.iter().map(|e| pair_count(e)).sum();
    let w = if total_pairs == 0 {
        0.0
    } else {
        1.0 / total_pairs as f64
    };
    let mut hidden = Vec::with_capacity(batch.len() * n * d);
    let mut target = vec![0.0; batch.len() * n * n];
    let mut weight = vec![0.0; batch.len() * n * n];
    for (g, ex) in batch.iter().enumerate() {
        if ex.hidden.shape() != [n, d] {
            return shape_err("examples in a batch must share hidden shape");
        }
        hidden.extend_from_slice(ex.hidden.data());
        for (i, j) in ex.target.masked_pairs() {
            let k = g * n * n + i * n + j;
            target[k] = ex.target.get(i, j);
            weight[k] = w;
        }
    }
    Ok((Tensor::new(vec![batch.len() * n, d], hidden)?, n, target, weight))
}

fn batch_loss(head: &MiEstimator, tape: &mut Tape, batch: &[&MiExample]) -> Result<Var> {
    let (hidden, n, target, weight) = batch_inputs(batch)?;
    let h = tape.leaf(hidden);
    let pred = head.forward_tape(tape, h, batch.len(), n)?;
    tape.weighted_sse(pred, &target, &weight)
}

/// Pooled squared error over every masked pair in `examples`, and the
/// number of pairs.
pub fn pooled_mse(head: &MiEstimator, examples: &[MiExample]) -> Result<(f64, usize)> {
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for chunk in examples.chunks(64) {
        let refs: Vec<&MiExample> = chunk.iter().collect();
        let p: usize = refs.iter().map(|e| pair_count(e)).sum();
        if p == 0 {
            continue;
        }
        let mut tape = Tape::new();
        let loss = batch_loss(head, &mut tape, &refs)?;
        sum += tape.value(loss).item()? * p as f64;
        pairs += p;
    }
    Ok((if pairs == 0 { 0.0 } else { sum / pairs as f64 }, pairs))
}

/// MSE of the best constant predictor on `examples`: the variance of the
/// pooled pair targets.
pub fn constant_baseline_mse(examples: &[MiExample]) -> f64 {
    let values: Vec<f64> = examples
        .iter()
        .flat_map(|e| e.target.masked_pairs().into_iter().map(|(i, j)| e.target.get(i, j)))
        .collect();
    if values.is_empty() {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64
}

/// Fits the head with Adam on pooled pair MSE. The backbone is not involved:
/// examples carry precomputed hidden states. `on_epoch` sees each epoch's
/// statistics as they are produced.
pub fn train_estimator<F>(
    head: &mut MiEstimator,
    train: &[MiExample],
    heldout: &[MiExample],
    cfg: &EstimatorTrainConfig,
    mut on_epoch: F,
) -> Result<EstimatorReport>
where
    F: FnMut(&EpochStats),
{
    if train.is_empty() {
        return usage_err("estimator training set is empty");
    }
    if cfg.batch_size == 0 {
        return usage_err("batch size must be positive");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut loss_pairs) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&MiExample> = chunk.iter().map(|&i| &train[i]).collect();
            let p: usize = batch.iter().map(|e| pair_count(e)).sum();
            if p == 0 {
                continue;
            }
            let mut tape = Tape::new();
            let loss = batch_loss(head, &mut tape, &batch)?;
            let value = tape.value(loss).item()?;
            if !value.is_finite() {
                return Err(Error::Numeric(format!("estimator loss became {value}")));
            }
            tape.backward(loss, head.params_mut())?;
            if cfg.grad_clip > 0.0 {
                head.params_mut().clip_grad_norm(cfg.grad_clip);
            }
            head.params_mut().adam_step(&adam);
            loss_sum += value * p as f64;
            loss_pairs += p;
        }
        let (heldout_mse, _) = pooled_mse(head, heldout)?;
        let stats = EpochStats {
            epoch: epoch + 1,
            train_loss: if loss_pairs == 0 {
                0.0
            } else {
                loss_sum / loss_pairs as f64
            },
            heldout_mse,
        };
        on_epoch(&stats);
        epochs.push(stats);
    }
    let (final_mse, heldout_pairs) = pooled_mse(head, heldout)?;
    Ok(EstimatorReport {
        epochs,
        baseline_mse: constant_baseline_mse(heldout),
        final_mse,
        heldout_pairs,
    })
}
