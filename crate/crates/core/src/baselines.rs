//! Comparison methods: sample-and-rank, goal conditioning, classifier-free
//! guidance.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::blockworld::{ActionChunk, Observation};
use crate::diffusion::{ddim_chain, sample_model_chunk, DenoiserParams, NoiseSchedule};
use crate::dynamics::DynamicsParams;
use crate::error::{Error, Result};
use crate::guidance::{score, GuidanceConfig, GuidanceSet};
use crate::numerics::{Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RankConfig {
    pub n_samples: usize,
}

impl Default for RankConfig {
    fn default() -> Self {
        Self { n_samples: 5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedChunk {
    pub chunk: ActionChunk,
    pub index: usize,
    pub scores: Vec<f64>,
}

/// Draws `n_samples` unguided chunks and keeps the one whose clean chunk
/// scores highest under the metric of `metric` (`s` is ignored). Ties go to
/// the lowest index.
#[allow(clippy::too_many_arguments)]
pub fn sample_and_rank(
    policy: &DenoiserParams,
    dynamics: Option<&DynamicsParams>,
    obs: &Observation,
    gset: &GuidanceSet,
    rank: &RankConfig,
    metric: &GuidanceConfig,
    rng: &mut Rng,
    sched: &NoiseSchedule,
) -> Result<RankedChunk> {
    if rank.n_samples == 0 {
        return Err(Error::InvalidArgument("sample-and-rank needs at least one sample".into()));
    }
    gset.validate(metric.metric_mode)?;
    let mut samples = Vec::with_capacity(rank.n_samples);
    let mut scores = Vec::with_capacity(rank.n_samples);
    for _ in 0..rank.n_samples {
        let a = sample_model_chunk(policy, obs, None, rng, sched, None)?;
        scores.push(score(dynamics, obs, &a, gset, metric, policy.action_scale)?);
        samples.push(a);
    }
    let mut best: Option<usize> = None;
    for (i, s) in scores.iter().enumerate() {
        if s.is_finite() && best.is_none_or(|b| *s > scores[b]) {
            best = Some(i);
        }
    }
    let index = best.unwrap_or_else(|| {
        warn!("all {} ranked samples scored non-finite; keeping the first", scores.len());
        0
    });
    Ok(RankedChunk {
        chunk: ActionChunk::from_model(&samples[index], policy.action_scale),
        index,
        scores,
    })
}

fn require_goal_policy(policy: &DenoiserParams) -> Result<()> {
    if policy.goal_conditioned {
        Ok(())
    } else {
        Err(Error::InvalidArgument("goal conditioning needs a goal-conditioned policy".into()))
    }
}

/// Samples with the goal block set to one positive chosen uniformly. A single
/// positive is used without touching `rng`, so the draw matches `cfg_sample`.
pub fn goal_rollout(
    goal_policy: &DenoiserParams,
    obs: &Observation,
    positives: &[Observation],
    rng: &mut Rng,
    sched: &NoiseSchedule,
) -> Result<ActionChunk> {
    require_goal_policy(goal_policy)?;
    if positives.is_empty() {
        return Err(Error::InvalidArgument("goal conditioning needs at least one goal".into()));
    }
    let goal = if positives.len() == 1 { positives[0] } else { positives[rng.below(positives.len())] };
    let a = sample_model_chunk(goal_policy, obs, Some(&goal), rng, sched, None)?;
    Ok(ActionChunk::from_model(&a, goal_policy.action_scale))
}

/// `(1 + w) * mean_i(eps_cond_i) - w * eps_uncond`.
pub fn cfg_epsilon(eps_cond: &[Tensor], eps_uncond: &Tensor, w: f64) -> Result<Tensor> {
    let first = eps_cond.first().ok_or_else(|| Error::InvalidArgument("no conditional predictions".into()))?;
    if w == 0.0 && eps_cond.len() == 1 {
        return Ok(first.clone());
    }
    let mut mean = first.clone();
    for e in &eps_cond[1..] {
        mean.axpy(1.0, e)?;
    }
    let mean = mean.scale(1.0 / eps_cond.len() as f64);
    mean.zip_map(eps_uncond, |c, u| (1.0 + w) * c - w * u)
}

/// Classifier-free guidance towards every goal in `goals` with equal weight.
pub fn cfg_sample(
    goal_policy: &DenoiserParams,
    obs: &Observation,
    goals: &[Observation],
    w: f64,
    rng: &mut Rng,
    sched: &NoiseSchedule,
) -> Result<ActionChunk> {
    require_goal_policy(goal_policy)?;
    if goals.is_empty() {
        return Err(Error::InvalidArgument("classifier-free guidance needs at least one goal".into()));
    }
    if !(w >= 0.0) {
        return Err(Error::InvalidArgument(format!("CFG weight {w} must be >= 0")));
    }
    let a_start = rng.gaussian(&[2 * goal_policy.chunk_len]);
    let a = ddim_chain(a_start, sched, |a, k| {
        let conds = goals
            .iter()
            .map(|g| goal_policy.predict_eps(obs, Some(g), a, k))
            .collect::<Result<Vec<_>>>()?;
        let uncond = if w == 0.0 { Tensor::zeros(a.shape()) } else { goal_policy.predict_eps(obs, None, a, k)? };
        cfg_epsilon(&conds, &uncond, w)
    })?;
    Ok(ActionChunk::from_model(&a, goal_policy.action_scale))
}
