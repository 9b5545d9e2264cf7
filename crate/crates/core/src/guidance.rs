//! Guidance metric, its gradient through the dynamics model, and the guided
//! sampler.

use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::blockworld::{ActionChunk, Dataset, Observation, N_COLORS, OBS_DIM};
use crate::diffusion::{ddim_step, renoise, DenoiserParams, NoiseSchedule};
use crate::dynamics::DynamicsParams;
use crate::error::{Error, Result};
use crate::numerics::{logsumexp, Rng, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMode {
    #[default]
    Euclidean,
    Squared,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricMode {
    #[default]
    Latent,
    Classifier,
    /// Negative squared distance of the chunk's endpoint to a target point.
    Position,
}

/// How the first `M - 1` repeats at a denoising level update `a^k`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepeatMode {
    /// Clean estimate from the guided noise, re-noised to level `k` with the
    /// unguided noise: `a^k + s (1 - abar_k) grad`. A no-op when `s = 0`.
    #[default]
    InPlace,
    /// Guided DDIM step to the next level, then forward noise back to `k`
    /// with a fresh Gaussian draw.
    Renoise,
}

/// Outcome conditions for steering.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceSet {
    pub positives: Vec<Observation>,
    pub negatives: Vec<Observation>,
    pub target_colors: Vec<usize>,
    pub avoid_colors: Vec<usize>,
    pub target_point: Option<[f64; 2]>,
}

impl GuidanceSet {
    pub fn latent(positives: Vec<Observation>, negatives: Vec<Observation>) -> Self {
        Self {
            positives,
            negatives,
            ..Self::default()
        }
    }

    pub fn validate(&self, mode: MetricMode) -> Result<()> {
        match mode {
            MetricMode::Latent if self.positives.is_empty() && self.negatives.is_empty() => {
                Err(Error::InvalidArgument("guidance set has no positive or negative conditions".into()))
            }
            MetricMode::Classifier => {
                if self.target_colors.is_empty() && self.avoid_colors.is_empty() {
                    return Err(Error::InvalidArgument("classifier guidance needs a target or avoid color".into()));
                }
                if let Some(c) = self.target_colors.iter().chain(&self.avoid_colors).find(|&&c| c >= N_COLORS) {
                    return Err(Error::InvalidArgument(format!("color {c} out of range")));
                }
                if self.target_colors.iter().any(|c| self.avoid_colors.contains(c)) {
                    return Err(Error::InvalidArgument("a color cannot be both target and avoided".into()));
                }
                Ok(())
            }
            MetricMode::Position => match self.target_point {
                Some(p) if p.iter().all(|x| (0.0..=1.0).contains(x)) => Ok(()),
                Some(p) => Err(Error::InvalidArgument(format!("target point {p:?} outside the arena"))),
                None => Err(Error::InvalidArgument("position guidance needs a target point".into())),
            },
            _ => Ok(()),
        }
    }

    /// Colors whose summed probability the classifier metric maximizes:
    /// the targets, or every non-avoided color when only avoidance is given.
    pub fn classifier_support(&self) -> Vec<usize> {
        if self.target_colors.is_empty() {
            (0..N_COLORS).filter(|c| !self.avoid_colors.contains(c)).collect()
        } else {
            self.target_colors.clone()
        }
    }

    /// Terminal observations of up to `n` demos labelled `color`, chosen
    /// without replacement.
    pub fn terminal_observations(dataset: &Dataset, color: usize, n: usize, rng: &mut Rng) -> Vec<Observation> {
        let mut pool: Vec<&Observation> = dataset
            .trajectories
            .iter()
            .filter(|t| t.label == Some(color))
            .map(|t| &t.terminal_observation)
            .collect();
        rng.shuffle(&mut pool);
        pool.into_iter().take(n).copied().collect()
    }

    /// Loads a guidance file. Conditions are inline 26-vectors or
    /// `"data_dir:line"` references (1-based) into a dataset's JSON Lines file,
    /// resolved relative to the guidance file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: GuidanceFile = serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |items: &[ConditionRef]| items.iter().map(|c| c.resolve(base)).collect::<Result<Vec<_>>>();
        Ok(Self {
            positives: resolve(&file.positives)?,
            negatives: resolve(&file.negatives)?,
            target_colors: file.target_color.into_iter().chain(file.target_colors).collect(),
            avoid_colors: file.avoid_color.into_iter().chain(file.avoid_colors).collect(),
            target_point: file.target_point,
        })
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ConditionRef {
    Inline(Vec<f64>),
    Reference(String),
}

impl ConditionRef {
    fn resolve(&self, base: &Path) -> Result<Observation> {
        match self {
            ConditionRef::Inline(v) => Observation::from_slice(v),
            ConditionRef::Reference(r) => {
                let (file, line) = r
                    .rsplit_once(':')
                    .and_then(|(f, l)| Some((f, l.parse::<usize>().ok()?)))
                    .filter(|&(_, l)| l >= 1)
                    .ok_or_else(|| Error::InvalidArgument(format!("bad condition reference {r:?}")))?;
                let mut p = base.join(file);
                if p.is_dir() {
                    p = p.join(crate::blockworld::DATA_FILE);
                }
                terminal_obs_at(&p, line)
            }
        }
    }
}

fn terminal_obs_at(path: &PathBuf, line: usize) -> Result<Observation> {
    #[derive(Deserialize)]
    struct Terminal {
        terminal_obs: Vec<f64>,
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw = text
        .lines()
        .nth(line - 1)
        .ok_or_else(|| Error::InvalidArgument(format!("{} has no line {line}", path.display())))?;
    let t: Terminal = serde_json::from_str(raw).map_err(|e| Error::json(format!("{}:{line}", path.display()), e))?;
    Observation::from_slice(&t.terminal_obs)
}

#[derive(Deserialize, Default)]
#[serde(default)]
struct GuidanceFile {
    positives: Vec<ConditionRef>,
    negatives: Vec<ConditionRef>,
    target_color: Option<usize>,
    target_colors: Vec<usize>,
    avoid_color: Option<usize>,
    avoid_colors: Vec<usize>,
    target_point: Option<[f64; 2]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    pub s: f64,
    pub sigma: f64,
    #[serde(rename = "M")]
    pub m: usize,
    pub distance_mode: DistanceMode,
    pub metric_mode: MetricMode,
    pub repeat_mode: RepeatMode,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            s: 1.5,
            sigma: 30.0,
            m: 4,
            distance_mode: DistanceMode::Euclidean,
            metric_mode: MetricMode::Latent,
            repeat_mode: RepeatMode::InPlace,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.s >= 0.0 && self.s.is_finite()) {
            return Err(Error::InvalidArgument(format!("guidance strength s = {} must be >= 0", self.s)));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("sigma = {} must be > 0", self.sigma)));
        }
        if self.m == 0 {
            return Err(Error::InvalidArgument("M must be at least 1".into()));
        }
        Ok(())
    }
}

fn distance(diff_sq: f64, mode: DistanceMode) -> f64 {
    match mode {
        DistanceMode::Squared => diff_sq,
        DistanceMode::Euclidean => diff_sq.sqrt(),
    }
}

fn side_term(conds: &[Observation], z: &[f64], sigma: f64, mode: DistanceMode) -> Result<f64> {
    if conds.is_empty() {
        return Ok(0.0);
    }
    let scores: Vec<f64> = conds
        .iter()
        .map(|c| {
            let sq: f64 = c.0.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
            -distance(sq, mode) / sigma
        })
        .collect();
    logsumexp(&scores)
}

/// `lse_i(-D(z+_i, z)/sigma) - lse_j(-D(z-_j, z)/sigma)`; an empty side adds 0.
pub fn metric_d(gset: &GuidanceSet, z_pred: &[f64], sigma: f64, mode: DistanceMode) -> Result<f64> {
    gset.validate(MetricMode::Latent)?;
    if z_pred.len() != OBS_DIM {
        return Err(Error::shape("metric_d latent", OBS_DIM, z_pred.len()));
    }
    Ok(side_term(&gset.positives, z_pred, sigma, mode)? - side_term(&gset.negatives, z_pred, sigma, mode)?)
}

/// Negative cross-entropy of `logits` against a one-hot target.
pub fn metric_xent(logits: &[f64], target_onehot: &[f64]) -> Result<f64> {
    if logits.len() != target_onehot.len() {
        return Err(Error::shape("metric_xent", logits.len(), target_onehot.len()));
    }
    let ones = target_onehot.iter().filter(|&&x| x == 1.0).count();
    if ones != 1 || target_onehot.iter().any(|&x| x != 0.0 && x != 1.0) {
        return Err(Error::InvalidArgument(format!("{target_onehot:?} is not a one-hot vector")));
    }
    let lse = logsumexp(logits)?;
    Ok(logits.iter().zip(target_onehot).map(|(l, t)| t * (l - lse)).sum())
}

/// `-|agent + sum(deltas) - target|^2` for a flat world-unit chunk `[2L]`.
pub fn position_metric(chunk: &[f64], agent: [f64; 2], target: [f64; 2]) -> f64 {
    let mut end = agent;
    for d in chunk.chunks(2) {
        end[0] += d[0];
        end[1] += d[1];
    }
    -((end[0] - target[0]).powi(2) + (end[1] - target[1]).powi(2))
}

fn side_var<'a>(tape: &mut Tape<'a>, conds: &[Observation], z: Var, sigma: f64, mode: DistanceMode) -> Result<Option<Var>> {
    if conds.is_empty() {
        return Ok(None);
    }
    let rows: Vec<&[f64]> = conds.iter().map(|c| c.as_slice()).collect();
    let c = tape.constant(Tensor::from_rows(&rows)?);
    let diff = tape.sub_row(c, z)?;
    let sq = tape.square(diff);
    let mut dist = tape.sum_rows(sq);
    if mode == DistanceMode::Euclidean {
        dist = tape.sqrt(dist);
    }
    let scaled = tape.scale(dist, -1.0 / sigma);
    Ok(Some(tape.logsumexp(scaled)?))
}

/// Records the configured metric for model-space chunk `a` on `tape`.
/// `dynamics` may be `None` only in position mode.
pub fn metric_var<'a>(
    dynamics: Option<&'a DynamicsParams>,
    obs: &Observation,
    a: Var,
    gset: &GuidanceSet,
    cfg: &GuidanceConfig,
    action_scale: f64,
    tape: &mut Tape<'a>,
) -> Result<Var> {
    gset.validate(cfg.metric_mode)?;
    let need_dyn = || dynamics.ok_or_else(|| Error::InvalidArgument(format!("{:?} guidance needs a dynamics model", cfg.metric_mode)));
    match cfg.metric_mode {
        MetricMode::Latent => {
            let z = need_dyn()?.predict_outcome(obs, a, tape)?;
            let pos = side_var(tape, &gset.positives, z, cfg.sigma, cfg.distance_mode)?;
            let neg = side_var(tape, &gset.negatives, z, cfg.sigma, cfg.distance_mode)?;
            match (pos, neg) {
                (Some(p), Some(n)) => tape.sub(p, n),
                (Some(p), None) => Ok(p),
                (None, Some(n)) => Ok(tape.scale(n, -1.0)),
                (None, None) => unreachable!("validated above"),
            }
        }
        MetricMode::Classifier => {
            let logits = need_dyn()?.predict_logits(obs, a, tape)?;
            let row = tape.reshape(logits, &[1, N_COLORS])?;
            let lp = tape.log_softmax_rows(row);
            let support = gset.classifier_support();
            let mut mask = Tensor::full(&[1, N_COLORS], -1e300);
            for &c in &support {
                mask.data_mut()[c] = 0.0;
            }
            // Masked log-sum-exp: log of the summed probability over `support`.
            let m = tape.constant(mask);
            let masked = tape.add(lp, m)?;
            tape.logsumexp(masked)
        }
        MetricMode::Position => {
            let target = gset.target_point.expect("validated above");
            let l = tape.value(a).len() / 2;
            let chunk = tape.reshape(a, &[l, 2])?;
            let ones = tape.constant(Tensor::full(&[1, l], action_scale));
            let disp = tape.matmul(ones, chunk)?;
            let offset = tape.constant(Tensor::new(vec![1, 2], vec![obs.agent()[0] - target[0], obs.agent()[1] - target[1]])?);
            let diff = tape.add(disp, offset)?;
            let sq = tape.square(diff);
            let s = tape.sum(sq);
            Ok(tape.scale(s, -1.0))
        }
    }
}

/// Metric value and its gradient with respect to the model-space chunk.
pub fn metric_and_grad(
    dynamics: Option<&DynamicsParams>,
    obs: &Observation,
    a_k: &Tensor,
    gset: &GuidanceSet,
    cfg: &GuidanceConfig,
    action_scale: f64,
) -> Result<(f64, Tensor)> {
    if !a_k.is_finite() {
        return Err(Error::NonFinite("guidance input chunk".into()));
    }
    let mut tape = Tape::new();
    let a = tape.leaf(a_k, true);
    let d = metric_var(dynamics, obs, a, gset, cfg, action_scale, &mut tape)?;
    let value = tape.value(d).item();
    let mut g = tape.backward_scalar(d)?;
    let grad = g.take(a).unwrap_or_else(|| Tensor::zeros(a_k.shape()));
    Ok((value, grad))
}

/// `dd/da^k` for the configured metric.
pub fn grad_metric(
    dynamics: Option<&DynamicsParams>,
    obs: &Observation,
    a_k: &Tensor,
    gset: &GuidanceSet,
    cfg: &GuidanceConfig,
    action_scale: f64,
) -> Result<Tensor> {
    metric_and_grad(dynamics, obs, a_k, gset, cfg, action_scale).map(|(_, g)| g)
}

/// Metric value without gradients.
pub fn score(
    dynamics: Option<&DynamicsParams>,
    obs: &Observation,
    a: &Tensor,
    gset: &GuidanceSet,
    cfg: &GuidanceConfig,
    action_scale: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.leaf(a, false);
    let d = metric_var(dynamics, obs, v, gset, cfg, action_scale, &mut tape)?;
    Ok(tape.value(d).item())
}

/// `eps - s * sqrt(1 - abar_k) * grad`.
pub fn guided_epsilon(eps: &Tensor, grad: &Tensor, s: f64, alpha_bar: f64) -> Result<Tensor> {
    if s == 0.0 {
        if eps.shape() != grad.shape() {
            return Err(Error::shape("guided_epsilon", format!("{:?}", eps.shape()), format!("{:?}", grad.shape())));
        }
        return Ok(eps.clone());
    }
    let c = s * (1.0 - alpha_bar).sqrt();
    eps.zip_map(grad, |e, g| e - c * g)
}

/// Metric value at one denoising level (taken before the final repeat's update).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub k: usize,
    pub d: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidedChunk {
    pub chunk: ActionChunk,
    /// Model-space clean chunk.
    pub model_chunk: Tensor,
    pub trace: Vec<TracePoint>,
    /// Denoising steps where the gradient was non-finite and guidance was skipped.
    pub skipped: usize,
}

/// Guided sampling with `M` repeats per DDIM level. The first `M - 1`
/// repeats update `a^k` according to `cfg.repeat_mode`; the last one takes
/// the guided DDIM step to the next level.
#[allow(clippy::too_many_arguments)]
pub fn guided_sample(
    policy: &DenoiserParams,
    dynamics: Option<&DynamicsParams>,
    obs: &Observation,
    gset: &GuidanceSet,
    cfg: &GuidanceConfig,
    rng: &mut Rng,
    sched: &NoiseSchedule,
) -> Result<GuidedChunk> {
    cfg.validate()?;
    if cfg.s > 0.0 {
        gset.validate(cfg.metric_mode)?;
    }
    let scale = policy.action_scale;
    let mut a = rng.gaussian(&[2 * policy.chunk_len]);
    let mut trace = Vec::new();
    let mut skipped = 0;
    for (k, k_next) in sched.ddim_pairs() {
        for i in 1..=cfg.m {
            let eps = policy.predict_eps(obs, None, &a, k)?;
            let eps_hat = if cfg.s == 0.0 {
                eps.clone()
            } else {
                match metric_and_grad(dynamics, obs, &a, gset, cfg, scale) {
                    Ok((d, g)) if d.is_finite() && g.is_finite() => {
                        if i == cfg.m {
                            trace.push(TracePoint { k, d });
                        }
                        guided_epsilon(&eps, &g, cfg.s, sched.alpha_bar(k))?
                    }
                    Ok(_) => {
                        warn!("non-finite guidance gradient at level {k}; using the unguided prediction");
                        skipped += 1;
                        eps.clone()
                    }
                    Err(e) => return Err(e),
                }
            };
            a = if i == cfg.m {
                ddim_step(&a, &eps_hat, k, k_next, sched)?
            } else {
                match cfg.repeat_mode {
                    RepeatMode::InPlace => {
                        let c = (1.0 - sched.alpha_bar(k)).sqrt();
                        a.zip_map(&eps_hat.zip_map(&eps, |h, e| h - e)?, |x, d| x - c * d)?
                    }
                    RepeatMode::Renoise => {
                        let next = ddim_step(&a, &eps_hat, k, k_next, sched)?;
                        renoise(&next, k_next, k, &rng.gaussian(next.shape()), sched)?
                    }
                }
            };
            if !a.is_finite() {
                return Err(Error::NonFinite(format!("guided chunk at level {k}")));
            }
        }
    }
    Ok(GuidedChunk {
        chunk: ActionChunk::from_model(&a, scale),
        model_chunk: a,
        trace,
        skipped,
    })
}
