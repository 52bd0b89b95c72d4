//! Progressive block-wise post-training quantization.
//!
//! Each block is reconstructed against cached full-precision outputs, first
//! at a higher bit-width `tau` until a transition policy fires, then at the
//! final bit-width `kappa` with ranges re-fitted from the adjusted shadow
//! weights. Activation ranges are calibrated afterwards.

mod detector;
mod log;
mod reconstruct;

pub use detector::{DetectorConfig, TransitionDetector};
pub use log::{BlockLog, PerturbationLog, Stage};
pub use reconstruct::{
    block_data, block_loss, calibrate_activations, evaluate_block, fisher_diagonals,
    progressive_quantize, reconstruct_block, BlockData, HessianWeighting, PqConfig, StageOutcome,
    TransitionPolicy, WeightUpdate,
};
