use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::schedule::{forward_noise, NoiseSchedule};
use crate::blockworld::{Dataset, Observation, Trajectory, ENC_DIM, OBS_DIM};
use crate::error::{Error, Result};
use crate::numerics::{cosine_lr, AdamState, Checkpoint, MlpParams, Rng, Tape, Tensor};

pub const TIME_EMBED_DIM: usize = 16;
const FEAT_DIM: usize = OBS_DIM + ENC_DIM;

/// Sinusoidal embedding of a noise level.
pub fn timestep_embedding(k: usize) -> [f64; TIME_EMBED_DIM] {
    let half = TIME_EMBED_DIM / 2;
    let mut out = [0.0; TIME_EMBED_DIM];
    for i in 0..half {
        let freq = (-(1000f64.ln()) * i as f64 / half as f64).exp();
        let x = k as f64 * freq;
        out[i] = x.sin();
        out[half + i] = x.cos();
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GoalMode {
    None,
    /// Condition on the trajectory's terminal observation, zeroed with
    /// probability `p_drop` during training.
    TerminalGoal { p_drop: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Final learning rate as a fraction of `lr` under cosine decay; 1 keeps it constant.
    pub min_lr_frac: f64,
    pub hidden: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 1e-3,
            min_lr_frac: 0.05,
            hidden: vec![256, 256, 256],
        }
    }
}

/// Noise-prediction network over `[feat(obs) ++ feat(goal) ++ a^k ++ embed(k)]`,
/// where `feat(o)` is the raw observation followed by its color-indexed
/// encoding (relative to the current agent for the goal).
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub net: MlpParams,
    pub goal_conditioned: bool,
    pub chunk_len: usize,
    /// World units per model unit of action.
    pub action_scale: f64,
    pub final_loss: f64,
}

/// One training example: an observation and the action chunk that followed it.
#[derive(Debug, Clone)]
pub struct ChunkWindow<'a> {
    pub traj: &'a Trajectory,
    pub obs: &'a Observation,
    /// Normalized chunk, flattened to `[2L]`, zero-padded past the episode end.
    pub chunk: Vec<f64>,
}

/// Every sliding window of `chunk_len` actions in the dataset.
pub fn chunk_windows(dataset: &Dataset, chunk_len: usize, action_scale: f64) -> Vec<ChunkWindow<'_>> {
    let mut out = Vec::new();
    for traj in &dataset.trajectories {
        for t in 0..traj.actions.len() {
            let mut chunk = vec![0.0; 2 * chunk_len];
            for (i, a) in traj.actions[t..].iter().take(chunk_len).enumerate() {
                chunk[2 * i] = a[0] / action_scale;
                chunk[2 * i + 1] = a[1] / action_scale;
            }
            out.push(ChunkWindow {
                traj,
                obs: &traj.observations[t],
                chunk,
            });
        }
    }
    out
}

impl DenoiserParams {
    pub fn input_width(chunk_len: usize) -> usize {
        2 * FEAT_DIM + 2 * chunk_len + TIME_EMBED_DIM
    }

    pub fn init(chunk_len: usize, hidden: &[usize], goal_conditioned: bool, action_scale: f64, rng: &mut Rng) -> Self {
        let mut widths = vec![Self::input_width(chunk_len)];
        widths.extend_from_slice(hidden);
        widths.push(2 * chunk_len);
        Self {
            net: MlpParams::init(&widths, rng),
            goal_conditioned,
            chunk_len,
            action_scale,
            final_loss: f64::NAN,
        }
    }

    /// Writes one input row. Unconditional policies always see a zero goal.
    fn fill_row(&self, row: &mut [f64], obs: &Observation, goal: Option<&Observation>, a_k: &[f64], k: usize) {
        row[..OBS_DIM].copy_from_slice(&obs.0);
        row[OBS_DIM..FEAT_DIM].copy_from_slice(&obs.encode());
        let g_row = &mut row[FEAT_DIM..2 * FEAT_DIM];
        match goal {
            Some(g) if self.goal_conditioned => {
                g_row[..OBS_DIM].copy_from_slice(&g.0);
                g_row[OBS_DIM..].copy_from_slice(&g.encode_from(obs.agent()));
            }
            _ => g_row.fill(0.0),
        }
        let a_end = 2 * FEAT_DIM + 2 * self.chunk_len;
        row[2 * FEAT_DIM..a_end].copy_from_slice(a_k);
        row[a_end..].copy_from_slice(&timestep_embedding(k));
    }

    /// Noise prediction for one noisy chunk `a_k` (`[2L]`) at level `k`.
    pub fn predict_eps(&self, obs: &Observation, goal: Option<&Observation>, a_k: &Tensor, k: usize) -> Result<Tensor> {
        if a_k.len() != 2 * self.chunk_len {
            return Err(Error::shape("predict_eps chunk", 2 * self.chunk_len, a_k.len()));
        }
        let mut row = vec![0.0; Self::input_width(self.chunk_len)];
        self.fill_row(&mut row, obs, goal, a_k.data(), k);
        let out = self.net.eval(&Tensor::vector(row))?;
        Ok(out)
    }

    pub fn to_checkpoint(&self, role: &str) -> Checkpoint {
        let mut meta = Map::new();
        meta.insert("role".into(), Value::from(role));
        meta.insert("goal_conditioned".into(), Value::from(self.goal_conditioned));
        meta.insert("L".into(), Value::from(self.chunk_len));
        meta.insert("action_scale".into(), Value::from(self.action_scale));
        meta.insert("final_loss".into(), Value::from(self.final_loss));
        Checkpoint::from_params(meta, &self.net)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let role = ck.meta_str("role").unwrap_or_default();
        if role != "policy" && role != "goal_policy" {
            return Err(Error::Checkpoint(format!("expected a policy checkpoint, found role {role:?}")));
        }
        let chunk_len = ck.meta.get("L").and_then(Value::as_u64).ok_or_else(|| Error::Checkpoint("missing L".into()))? as usize;
        let net = ck.split(&[ck.layers.len()])?.remove(0);
        if net.input_width() != Self::input_width(chunk_len) || net.output_width() != 2 * chunk_len {
            return Err(Error::Checkpoint("policy network widths do not match L".into()));
        }
        Ok(Self {
            net,
            goal_conditioned: ck.meta.get("goal_conditioned").and_then(Value::as_bool).unwrap_or(false),
            chunk_len,
            action_scale: ck.meta.get("action_scale").and_then(Value::as_f64).unwrap_or(0.05),
            final_loss: ck.meta.get("final_loss").and_then(Value::as_f64).unwrap_or(f64::NAN),
        })
    }
}

/// Trains a noise-prediction network with the DDPM objective, uniform `k`.
/// Returns the params and the mean loss of every epoch.
pub fn train_denoiser(
    dataset: &Dataset,
    sched: &NoiseSchedule,
    rng: &mut Rng,
    cfg: &TrainConfig,
    chunk_len: usize,
    goal_mode: GoalMode,
) -> Result<(DenoiserParams, Vec<f64>)> {
    let action_scale = dataset.manifest.world.delta_max;
    let windows = chunk_windows(dataset, chunk_len, action_scale);
    if windows.is_empty() {
        return Err(Error::InvalidArgument("dataset has no action chunks".into()));
    }
    let (goal_conditioned, p_drop) = match goal_mode {
        GoalMode::None => (false, 1.0),
        GoalMode::TerminalGoal { p_drop } => (true, p_drop),
    };
    let mut params = DenoiserParams::init(chunk_len, &cfg.hidden, goal_conditioned, action_scale, rng);
    let mut adam = AdamState::new(&params.net);
    let width = DenoiserParams::input_width(chunk_len);
    let out_w = 2 * chunk_len;
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let bs = cfg.batch_size.max(1);
    let total_steps = cfg.epochs * windows.len().div_ceil(bs);
    let mut step = 0;

    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(bs) {
            let n = batch.len();
            let mut input = vec![0.0; n * width];
            let mut target = vec![0.0; n * out_w];
            for (r, &wi) in batch.iter().enumerate() {
                let w = &windows[wi];
                let k = 1 + rng.below(sched.train_steps());
                let eps = rng.gaussian(&[out_w]);
                let a0 = Tensor::vector(w.chunk.clone());
                let ak = forward_noise(&a0, k, &eps, sched)?;
                let goal = (goal_conditioned && !rng.bernoulli(p_drop)).then_some(&w.traj.terminal_observation);
                params.fill_row(&mut input[r * width..(r + 1) * width], w.obs, goal, ak.data(), k);
                target[r * out_w..(r + 1) * out_w].copy_from_slice(eps.data());
            }
            let x = Tensor::new(vec![n, width], input)?;
            let y = Tensor::new(vec![n, out_w], target)?;
            let (loss, grads) = {
                let net = &params.net;
                let mut tape = Tape::new();
                let xv = tape.leaf(&x, false);
                let yv = tape.leaf(&y, false);
                let (pred, vars) = net.forward(&mut tape, xv, true)?;
                let diff = tape.sub(pred, yv)?;
                let sq = tape.square(diff);
                let loss = tape.mean(sq);
                let mut g = tape.backward_scalar(loss)?;
                (tape.value(loss).item(), net.collect_grads(&vars, &mut g))
            };
            adam.step(&mut params.net, &grads, cosine_lr(cfg.lr, cfg.min_lr_frac, step, total_steps))?;
            step += 1;
            epoch_loss += loss;
            batches += 1;
        }
        curve.push(epoch_loss / batches as f64);
    }
    params.final_loss = curve.last().copied().unwrap_or(f64::NAN);
    Ok((params, curve))
}
