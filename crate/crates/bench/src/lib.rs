//! Shared fixtures for the criterion benches.

use std::collections::HashSet;

use mimask_core::estimator::EstimatorConfig;
use mimask_core::sudoku::generate_puzzles;
use mimask_core::{Mdm, MiEstimator, ModelConfig, PuzzleRecord, Result};

/// Untrained backbone of the default 4x4 size plus a matching head. Timing
/// does not depend on the weights.
pub fn sudoku4_models() -> Result<(Mdm, MiEstimator)> {
    let mdm = Mdm::new(ModelConfig::sudoku4())?;
    let head = MiEstimator::new(EstimatorConfig::for_input_dim(mdm.hidden_dim()))?;
    Ok((mdm, head))
}

pub fn puzzles(box_size: usize, count: usize, holes: usize) -> Result<Vec<PuzzleRecord>> {
    generate_puzzles(box_size, count, holes..=holes, 11, &HashSet::new())
}
