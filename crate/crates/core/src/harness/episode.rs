use serde::{Deserialize, Serialize};

use crate::baselines::{cfg_sample, goal_rollout, sample_and_rank, RankConfig};
use crate::blockworld::{ActionChunk, EnvState, WorldConfig};
use crate::diffusion::{sample_chunk, DenoiserParams, NoiseSchedule, SampleConfig};
use crate::dynamics::DynamicsParams;
use crate::error::{Error, Result};
use crate::guidance::{guided_sample, GuidanceConfig, GuidanceSet, MetricMode};
use crate::numerics::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Base,
    DynaGuide,
    Gpc,
    Goal,
    Cfg,
    Itps,
}

impl Method {
    pub const ALL: [Method; 6] = [Method::Base, Method::DynaGuide, Method::Gpc, Method::Goal, Method::Cfg, Method::Itps];

    pub fn name(self) -> &'static str {
        match self {
            Method::Base => "base",
            Method::DynaGuide => "dynaguide",
            Method::Gpc => "gpc",
            Method::Goal => "goal",
            Method::Cfg => "cfg",
            Method::Itps => "itps",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}; expected one of base, dynaguide, gpc, goal, cfg, itps")))
    }
}

/// Models available to a rollout. Each method checks for what it needs.
#[derive(Debug, Clone, Copy)]
pub struct Models<'a> {
    pub policy: Option<&'a DenoiserParams>,
    pub goal_policy: Option<&'a DenoiserParams>,
    pub dynamics: Option<&'a DynamicsParams>,
    pub schedule: &'a NoiseSchedule,
}

/// Per-method knobs shared by every episode of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MethodSettings {
    pub guidance: GuidanceConfig,
    pub rank: RankConfig,
    pub cfg_w: f64,
    pub sample: SampleConfig,
    pub horizon: usize,
}

impl Default for MethodSettings {
    fn default() -> Self {
        Self {
            guidance: GuidanceConfig::default(),
            rank: RankConfig::default(),
            cfg_w: 1.0,
            sample: SampleConfig::default(),
            horizon: WorldConfig::default().horizon,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChunkDiagnostics {
    /// Metric at the first and last guided denoising level.
    pub d_first: f64,
    pub d_last: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub behavior: Option<usize>,
    pub steps: usize,
    pub chunks: Vec<ChunkDiagnostics>,
    pub seed: u64,
}

/// Rejects method/model/guidance combinations that cannot run.
pub fn check_method(method: Method, models: &Models<'_>, gset: &GuidanceSet, settings: &MethodSettings) -> Result<()> {
    settings.sample.validate()?;
    let need = |ok: bool, what: &str| {
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("method {:?} needs {what}", method.name())))
        }
    };
    match method {
        Method::Base => need(models.policy.is_some(), "a policy"),
        Method::DynaGuide | Method::Gpc => {
            need(models.policy.is_some(), "a policy")?;
            if settings.guidance.metric_mode != MetricMode::Position {
                need(models.dynamics.is_some(), "a dynamics model")?;
            }
            settings.guidance.validate()?;
            gset.validate(settings.guidance.metric_mode)
        }
        Method::Itps => {
            need(models.policy.is_some(), "a policy")?;
            gset.validate(MetricMode::Position)
        }
        Method::Goal | Method::Cfg => {
            need(models.goal_policy.is_some_and(|p| p.goal_conditioned), "a goal-conditioned policy")?;
            need(!gset.positives.is_empty(), "positive goals")
        }
    }
}

/// Produces the next action chunk for `method` from state `obs`.
pub fn next_chunk(
    method: Method,
    models: &Models<'_>,
    state: &EnvState,
    gset: &GuidanceSet,
    settings: &MethodSettings,
    rng: &mut Rng,
) -> Result<(ActionChunk, Option<ChunkDiagnostics>)> {
    let obs = state.observe();
    let sched = models.schedule;
    let missing = || Error::InvalidArgument(format!("method {:?} is missing a model", method.name()));
    let policy = || models.policy.ok_or_else(missing);
    match method {
        Method::Base => Ok((sample_chunk(policy()?, &obs, rng, sched, None)?, None)),
        Method::DynaGuide | Method::Itps => {
            let mut cfg = settings.guidance;
            if method == Method::Itps {
                cfg.metric_mode = MetricMode::Position;
            }
            let out = guided_sample(policy()?, models.dynamics, &obs, gset, &cfg, rng, sched)?;
            let diag = match (out.trace.first(), out.trace.last()) {
                (Some(a), Some(b)) => Some(ChunkDiagnostics { d_first: a.d, d_last: b.d }),
                _ => None,
            };
            Ok((out.chunk, diag))
        }
        Method::Gpc => {
            let r = sample_and_rank(policy()?, models.dynamics, &obs, gset, &settings.rank, &settings.guidance, rng, sched)?;
            Ok((r.chunk, None))
        }
        Method::Goal => Ok((goal_rollout(models.goal_policy.ok_or_else(missing)?, &obs, &gset.positives, rng, sched)?, None)),
        Method::Cfg => Ok((cfg_sample(models.goal_policy.ok_or_else(missing)?, &obs, &gset.positives, settings.cfg_w, rng, sched)?, None)),
    }
}

/// Rolls out from `start`: query a chunk, execute its first `execute_len`
/// steps open-loop, stop at the first touch or at the horizon.
pub fn run_episode(
    method: Method,
    models: &Models<'_>,
    start: &EnvState,
    gset: &GuidanceSet,
    settings: &MethodSettings,
    world: &WorldConfig,
    rng: &mut Rng,
    seed: u64,
) -> Result<EpisodeResult> {
    check_method(method, models, gset, settings)?;
    run_with(start, settings, world, seed, |state, rng| next_chunk(method, models, state, gset, settings, rng), rng)
}

/// Episode loop around an arbitrary chunk source.
pub fn run_with(
    start: &EnvState,
    settings: &MethodSettings,
    world: &WorldConfig,
    seed: u64,
    mut source: impl FnMut(&EnvState, &mut Rng) -> Result<(ActionChunk, Option<ChunkDiagnostics>)>,
    rng: &mut Rng,
) -> Result<EpisodeResult> {
    let mut state = *start;
    let mut chunks = Vec::new();
    let mut steps = 0;
    while steps < settings.horizon {
        let (chunk, diag) = source(&state, rng)?;
        chunks.extend(diag);
        for delta in chunk.deltas.iter().take(settings.sample.execute_len) {
            let (next, touched) = state.step(*delta, world);
            state = next;
            steps += 1;
            if touched.is_some() {
                return Ok(EpisodeResult { behavior: touched, steps, chunks, seed });
            }
            if steps >= settings.horizon {
                break;
            }
        }
    }
    Ok(EpisodeResult { behavior: None, steps, chunks, seed })
}
