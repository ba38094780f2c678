//! Masked discrete diffusion on Sudoku with mutual-information-aware
//! parallel decoding.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod estimator;
pub mod eval;
pub mod mdm;
pub mod mi;
pub mod nn;
pub mod sampler;
pub mod sudoku;

pub use error::{Error, Result};
pub use estimator::{EstimatorConfig, MiEstimator};
pub use mdm::{DenoisingModel, Marginals, Mdm, ModelConfig, SequenceState, Token};
pub use mi::MiMatrix;
pub use sampler::{decode, DecodeTrace, SamplerConfig, Strategy};
pub use sudoku::{Board, PuzzleRecord};
