//! Noise schedule, denoiser, DDIM sampling and training.

mod model;
mod process;
mod schedule;
mod train;

pub use model::{Activation, Architecture, Block, Denoiser, DenoiserModel, ModelVars};
pub use process::{
    ddim_step, ddim_update, dm_loss, dm_loss_graph, forward_noise, implied_clean, initial_noise,
    run_trajectories, sample, DiffusionBatch, TrajectoryStep, DEGENERATE_DENOMINATOR,
};
pub use schedule::{LossWeighting, NoiseSchedule, ENDPOINT_CLIP};
pub(crate) use train::sgd_update;
pub use train::{draw_batch, train_dm, LossTrace, TrainConfig};
