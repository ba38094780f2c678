//! The masked diffusion model: forward corruption, the transformer
//! denoiser, and its training loop.

mod model;
mod state;
mod train;

pub use model::{entropy, entropy_per_position, DenoisingModel, ForwardVars, Marginals, Mdm, ModelConfig, NfeCounter};
pub use state::{apply_forward_mask, NoiseSchedule, SequenceState, Token};
pub use train::{
    argmax, corrupt_batch, evaluate_loss, masked_token_accuracy, mdm_loss, mdm_loss_tape, train_mdm, LossPoint,
    TrainConfig,
};
