//! Dense tensors, reverse-mode autodiff, small MLPs, Adam and a seeded RNG.

mod adam;
pub mod checkpoint;
mod mlp;
mod rng;
mod tape;
mod tensor;

pub use adam::{cosine_lr, AdamState};
pub use checkpoint::Checkpoint;
pub use mlp::{Layer, MlpParams, MlpVars};
pub use rng::{Rng, SplitMix64};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// `log(sum(exp(values)))` in max-subtracted form.
pub fn logsumexp(values: &[f64]) -> Result<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if values.is_empty() {
        return Err(Error::InvalidArgument("logsumexp of an empty sequence".into()));
    }
    if values.len() == 1 {
        return Ok(values[0]);
    }
    if max == f64::NEG_INFINITY {
        return Ok(max);
    }
    let s: f64 = values.iter().map(|&v| (v - max).exp()).sum();
    Ok(max + s.ln())
}
