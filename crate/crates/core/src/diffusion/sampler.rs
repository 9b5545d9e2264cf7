use serde::{Deserialize, Serialize};

use super::denoiser::DenoiserParams;
use super::schedule::{ddim_step, NoiseSchedule};
use crate::blockworld::{ActionChunk, Observation};
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleConfig {
    #[serde(rename = "L")]
    pub chunk_len: usize,
    pub execute_len: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            chunk_len: 16,
            execute_len: 14,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.execute_len == 0 || self.execute_len > self.chunk_len {
            return Err(Error::InvalidArgument(format!(
                "execute length {} must be in 1..={}",
                self.execute_len, self.chunk_len
            )));
        }
        Ok(())
    }
}

/// Replaces the policy's noise prediction at each step: `(a^k, k, eps) -> eps_hat`.
pub type EpsHook<'h> = &'h mut dyn FnMut(&Tensor, usize, &Tensor) -> Result<Tensor>;

/// Runs the DDIM step list from `a_start` with noise predictions from `eps_at`.
pub fn ddim_chain(
    a_start: Tensor,
    sched: &NoiseSchedule,
    mut eps_at: impl FnMut(&Tensor, usize) -> Result<Tensor>,
) -> Result<Tensor> {
    let mut a = a_start;
    for (k, k_next) in sched.ddim_pairs() {
        let eps = eps_at(&a, k)?;
        if eps.shape() != a.shape() {
            return Err(Error::shape("noise prediction", format!("{:?}", a.shape()), format!("{:?}", eps.shape())));
        }
        a = ddim_step(&a, &eps, k, k_next, sched)?;
    }
    Ok(a)
}

/// Samples a chunk in model space (`[2L]`, normalized by the action scale).
pub fn sample_model_chunk(
    policy: &DenoiserParams,
    obs: &Observation,
    goal: Option<&Observation>,
    rng: &mut Rng,
    sched: &NoiseSchedule,
    mut hook: Option<EpsHook<'_>>,
) -> Result<Tensor> {
    let a_k = rng.gaussian(&[2 * policy.chunk_len]);
    ddim_chain(a_k, sched, |a, k| {
        let eps = policy.predict_eps(obs, goal, a, k)?;
        match hook.as_mut() {
            Some(h) => h(a, k, &eps),
            None => Ok(eps),
        }
    })
}

/// Unguided (or hook-modified) DDIM sample, in world units.
pub fn sample_chunk(
    policy: &DenoiserParams,
    obs: &Observation,
    rng: &mut Rng,
    sched: &NoiseSchedule,
    hook: Option<EpsHook<'_>>,
) -> Result<ActionChunk> {
    let a = sample_model_chunk(policy, obs, None, rng, sched, hook)?;
    Ok(ActionChunk::from_model(&a, policy.action_scale))
}
