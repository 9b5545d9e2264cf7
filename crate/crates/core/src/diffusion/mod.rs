//! Action-chunk diffusion: noise schedule, denoiser training, DDIM sampling.

mod denoiser;
mod sampler;
mod schedule;

pub use denoiser::{chunk_windows, timestep_embedding, train_denoiser, ChunkWindow, DenoiserParams, GoalMode, TrainConfig, TIME_EMBED_DIM};
pub use sampler::{ddim_chain, sample_chunk, sample_model_chunk, EpsHook, SampleConfig};
pub use schedule::{ddim_step, forward_noise, predict_clean, renoise, NoiseSchedule, ScheduleConfig};
