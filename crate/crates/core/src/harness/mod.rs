//! Rollouts, experiments and reports.

mod episode;
mod experiment;
mod report;

pub use episode::{check_method, next_chunk, run_episode, run_with, ChunkDiagnostics, EpisodeResult, Method, MethodSettings, Models};
pub use experiment::*;
pub use report::*;
