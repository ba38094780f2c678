use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{DenoisingModel, Mdm};
use super::state::{apply_forward_mask, NoiseSchedule, SequenceState};
use crate::error::{usage_err, Error, Result};
use crate::nn::{AdamConfig, Tape, Var};
use crate::sudoku::PuzzleRecord;

/// Records the masked-position cross-entropy, averaged over the batch, on
/// `tape`. Each pair is `(x0, xt)`.
pub fn mdm_loss_tape(model: &Mdm, tape: &mut Tape, batch: &[(SequenceState, SequenceState)]) -> Result<Var> {
    let noisy: Vec<SequenceState> = batch.iter().map(|(_, xt)| xt.clone()).collect();
    let out = model.forward_tape(tape, &noisy)?;
    let mut targets = Vec::new();
    let mut mask = Vec::new();
    for (x0, xt) in batch {
        if x0.masked_count() != 0 {
            return usage_err("clean sequence must be fully unmasked");
        }
        targets.extend(x0.tokens().iter().map(|&t| t as usize));
        mask.extend(xt.mask_flags());
    }
    let ce = tape.cross_entropy_masked(out.logits, &targets, &mask)?;
    Ok(tape.scale(ce, 1.0 / batch.len().max(1) as f64))
}

/// Mean over the batch of the sum of `-log p(x0_i | xt)` over masked `i`.
pub fn mdm_loss(model: &Mdm, batch: &[(SequenceState, SequenceState)]) -> Result<f64> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let mut tape = Tape::new();
    let loss = mdm_loss_tape(model, &mut tape, batch)?;
    tape.value(loss).item()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Linear warmup length in steps.
    pub warmup_steps: u64,
    /// Cosine decay floor as a fraction of `lr`; 1.0 keeps `lr` constant.
    pub min_lr_frac: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            lr: 1e-3,
            warmup_steps: 100,
            min_lr_frac: 0.1,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn lr_at(&self, step_in_run: u64, total: u64) -> f64 {
        let warm = if self.warmup_steps > 0 {
            ((step_in_run + 1) as f64 / self.warmup_steps as f64).min(1.0)
        } else {
            1.0
        };
        let progress = step_in_run as f64 / total.max(1) as f64;
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.lr * warm * (self.min_lr_frac + (1.0 - self.min_lr_frac) * cosine)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: u64,
    pub loss: f64,
}

/// Samples `t ~ U(0, 1)` for each puzzle and corrupts its clean sequence.
pub fn corrupt_batch<R: Rng>(puzzles: &[&PuzzleRecord], rng: &mut R) -> Result<Vec<(SequenceState, SequenceState)>> {
    puzzles
        .iter()
        .map(|p| {
            let x0 = SequenceState::clean_from_puzzle(p);
            let t: f64 = rng.gen();
            let xt = apply_forward_mask(&x0, NoiseSchedule::Linear, t, rng)?;
            Ok((x0, xt))
        })
        .collect()
}

/// Trains `model` in place for `cfg.epochs` passes over `data`. The
/// optimizer step counter continues from whatever the store already holds,
/// so a loaded checkpoint resumes where it stopped. `on_step` sees every
/// step's training loss.
pub fn train_mdm<F>(model: &mut Mdm, data: &[PuzzleRecord], cfg: &TrainConfig, mut on_step: F) -> Result<Vec<LossPoint>>
where
    F: FnMut(LossPoint),
{
    if data.is_empty() {
        return usage_err("training set is empty");
    }
    if cfg.batch_size == 0 {
        return usage_err("batch size must be positive");
    }
    let start = model.params().step();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ start.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size) as u64;
    let total = steps_per_epoch * cfg.epochs as u64;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = Vec::with_capacity(total as usize);
    let mut step_in_run = 0u64;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let puzzles: Vec<&PuzzleRecord> = chunk.iter().map(|&i| &data[i]).collect();
            let batch = corrupt_batch(&puzzles, &mut rng)?;
            let mut tape = Tape::new();
            let loss = mdm_loss_tape(model, &mut tape, &batch)?;
            let value = tape.value(loss).item()?;
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss became {value} at step {}",
                    model.params().step()
                )));
            }
            tape.backward(loss, model.params_mut())?;
            if cfg.grad_clip > 0.0 {
                model.params_mut().clip_grad_norm(cfg.grad_clip);
            }
            let adam = AdamConfig {
                lr: cfg.lr_at(step_in_run, total),
                ..AdamConfig::default()
            };
            model.params_mut().adam_step(&adam);
            step_in_run += 1;
            let point = LossPoint {
                step: model.params().step(),
                loss: value,
            };
            on_step(point);
            curve.push(point);
        }
    }
    Ok(curve)
}

/// Mean loss on `data` under seeded corruption; independent of training.
pub fn evaluate_loss(model: &Mdm, data: &[PuzzleRecord], seed: u64) -> Result<f64> {
    if data.is_empty() {
        return usage_err("evaluation set is empty");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for chunk in data.chunks(64) {
        let refs: Vec<&PuzzleRecord> = chunk.iter().collect();
        let batch = corrupt_batch(&refs, &mut rng)?;
        total += mdm_loss(model, &batch)? * chunk.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Fraction of masked tokens whose argmax equals the clean token, with
/// `t ~ U(0, t_max)`.
pub fn masked_token_accuracy<M: DenoisingModel>(
    model: &M,
    data: &[PuzzleRecord],
    t_max: f64,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut hit, mut total) = (0usize, 0usize);
    for chunk in data.chunks(64) {
        let mut x0s = Vec::with_capacity(chunk.len());
        let mut xts = Vec::with_capacity(chunk.len());
        for p in chunk {
            let x0 = SequenceState::clean_from_puzzle(p);
            let t = rng.gen::<f64>() * t_max;
            xts.push(apply_forward_mask(&x0, NoiseSchedule::Linear, t, &mut rng)?);
            x0s.push(x0);
        }
        let outs = model.forward_batch(&xts)?;
        for ((x0, xt), m) in x0s.iter().zip(&xts).zip(&outs) {
            for i in xt.masked_positions() {
                let row = m.row(i);
                let best = argmax(row);
                hit += usize::from(best == x0.tokens()[i] as usize);
                total += 1;
            }
        }
    }
    Ok(if total == 0 { 1.0 } else { hit as f64 / total as f64 })
}

/// Index of the largest entry; lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &p) in row.iter().enumerate() {
        if p > row[best] {
            best = j;
        }
    }
    best
}
