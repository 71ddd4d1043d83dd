//! Forward noising, the conditional MLP denoiser, two-phase training, and
//! the deterministic guided DDIM sampler.

pub mod denoiser;
pub mod sampler;
pub mod schedule;
pub mod train;

pub use denoiser::DenoiserParams;
pub use sampler::{
    ddim_timesteps, initial_noise, sample, sample_batch, SamplerConfig, TrajectoryRecord,
    TrajectoryStep,
};
pub use schedule::{ddim_step, forward_noise, recover_clean, NoiseSchedule};
pub use train::{train, EpochLog, TrainConfig, TrainReport};
