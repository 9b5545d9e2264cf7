//! Outcome model: predicts the terminal observation (latent head) and the
//! touched color (classifier head) from an observation and an action chunk.
//!
//! Training sees noised chunks part of the time so that gradients taken at
//! intermediate denoising levels stay meaningful.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::blockworld::{Dataset, Observation, N_COLORS, OBS_DIM};
use crate::diffusion::{chunk_windows, forward_noise, ChunkWindow, NoiseSchedule};
use crate::error::{Error, Result};
use crate::numerics::{cosine_lr, AdamState, Checkpoint, MlpParams, MlpVars, Rng, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// Regresses the terminal observation.
    Latent,
    /// Four-way logits over the touched color.
    Classifier,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseAugmentConfig {
    pub p_clean: f64,
    /// Expected value of the geometric noise-level distribution.
    pub mean_step: f64,
}

impl Default for NoiseAugmentConfig {
    fn default() -> Self {
        Self {
            p_clean: 0.5,
            mean_step: 20.0,
        }
    }
}

impl NoiseAugmentConfig {
    pub fn disabled() -> Self {
        Self {
            p_clean: 1.0,
            ..Self::default()
        }
    }
}

/// Geometric draw on `{1, 2, ...}` with success probability `p` (mean `1/p`).
pub fn sample_geometric(rng: &mut Rng, p: f64) -> usize {
    if p >= 1.0 {
        return 1;
    }
    let u = 1.0 - rng.uniform(); // (0, 1]
    ((u.ln() / (1.0 - p).ln()).floor() as usize).saturating_add(1)
}

/// Noise level for one augmented sample: clean with probability `p_clean`,
/// otherwise geometric with the configured mean, clamped to `[1, K]`.
pub fn sample_aug_level(rng: &mut Rng, aug: &NoiseAugmentConfig, k_max: usize) -> usize {
    if rng.bernoulli(aug.p_clean) {
        return 0;
    }
    sample_geometric(rng, 1.0 / aug.mean_step).clamp(1, k_max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DynamicsTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Final learning rate as a fraction of `lr` under cosine decay.
    pub min_lr_frac: f64,
    pub trunk: Vec<usize>,
    pub head_hidden: usize,
    pub heads: Vec<Head>,
    pub aug: NoiseAugmentConfig,
}

impl Default for DynamicsTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 1e-3,
            min_lr_frac: 0.05,
            trunk: vec![128, 128, 128],
            head_hidden: 64,
            heads: vec![Head::Latent, Head::Classifier],
            aug: NoiseAugmentConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsParams {
    /// `[obs ++ chunk] -> features`; a tanh is applied to its output.
    pub trunk: MlpParams,
    pub latent_head: Option<MlpParams>,
    pub class_head: Option<MlpParams>,
    pub chunk_len: usize,
    pub action_scale: f64,
    pub aug: NoiseAugmentConfig,
}

struct ForwardVars {
    trunk: MlpVars,
    latent: Option<(Var, MlpVars)>,
    class: Option<(Var, MlpVars)>,
}

impl DynamicsParams {
    pub fn init(chunk_len: usize, cfg: &DynamicsTrainConfig, action_scale: f64, rng: &mut Rng) -> Self {
        let mut widths = vec![OBS_DIM + 2 * chunk_len];
        widths.extend_from_slice(&cfg.trunk);
        let feat = *widths.last().unwrap();
        let trunk = MlpParams::init(&widths, rng);
        let latent_head = cfg.heads.contains(&Head::Latent).then(|| MlpParams::init(&[feat, cfg.head_hidden, OBS_DIM], rng));
        let class_head = cfg.heads.contains(&Head::Classifier).then(|| MlpParams::init(&[feat, cfg.head_hidden, N_COLORS], rng));
        Self {
            trunk,
            latent_head,
            class_head,
            chunk_len,
            action_scale,
            aug: cfg.aug,
        }
    }

    pub fn has_head(&self, head: Head) -> bool {
        match head {
            Head::Latent => self.latent_head.is_some(),
            Head::Classifier => self.class_head.is_some(),
        }
    }

    fn head(&self, head: Head) -> Result<&MlpParams> {
        match head {
            Head::Latent => self.latent_head.as_ref(),
            Head::Classifier => self.class_head.as_ref(),
        }
        .ok_or_else(|| Error::InvalidArgument(format!("dynamics model has no {head:?} head")))
    }

    fn features<'a>(&'a self, tape: &mut Tape<'a>, obs: Var, chunk: Var, trainable: bool) -> Result<(Var, MlpVars)> {
        let x = tape.concat_cols(&[obs, chunk])?;
        let (h, vars) = self.trunk.forward(tape, x, trainable)?;
        Ok((tape.tanh(h), vars))
    }

    fn check_inputs<'a>(&self, tape: &Tape<'a>, obs: &Observation, chunk: Var) -> Result<()> {
        let c = tape.value(chunk);
        if c.len() != 2 * self.chunk_len {
            return Err(Error::shape("dynamics chunk", 2 * self.chunk_len, c.len()));
        }
        if !c.is_finite() || !obs.0.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("dynamics input".into()));
        }
        Ok(())
    }

    fn predict_head<'a>(&'a self, head: Head, obs: &Observation, chunk: Var, tape: &mut Tape<'a>) -> Result<Var> {
        self.check_inputs(tape, obs, chunk)?;
        let head_net = self.head(head)?;
        let o = tape.constant(obs.to_tensor().reshape(&[1, OBS_DIM])?);
        let c = tape.reshape(chunk, &[1, 2 * self.chunk_len])?;
        let (f, _) = self.features(tape, o, c, false)?;
        let (out, _) = head_net.forward(tape, f, false)?;
        let width = tape.value(out).len();
        tape.reshape(out, &[width])
    }

    /// Predicted terminal observation for `chunk` (model-space `[2L]`),
    /// recorded on `tape` so callers can differentiate with respect to it.
    pub fn predict_outcome<'a>(&'a self, obs: &Observation, chunk: Var, tape: &mut Tape<'a>) -> Result<Var> {
        self.predict_head(Head::Latent, obs, chunk, tape)
    }

    /// Color logits for `chunk`, recorded on `tape`.
    pub fn predict_logits<'a>(&'a self, obs: &Observation, chunk: Var, tape: &mut Tape<'a>) -> Result<Var> {
        self.predict_head(Head::Classifier, obs, chunk, tape)
    }

    /// Untaped evaluation of one head.
    pub fn eval_head(&self, head: Head, obs: &Observation, chunk: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let c = tape.leaf(chunk, false);
        let out = self.predict_head(head, obs, c, &mut tape)?;
        Ok(tape.value(out).clone())
    }

    fn forward_batch<'a>(&'a self, tape: &mut Tape<'a>, obs: Var, chunk: Var, trainable: bool) -> Result<ForwardVars> {
        let (f, trunk) = self.features(tape, obs, chunk, trainable)?;
        let latent = match &self.latent_head {
            Some(h) => Some(h.forward(tape, f, trainable)?),
            None => None,
        };
        let class = match &self.class_head {
            Some(h) => Some(h.forward(tape, f, trainable)?),
            None => None,
        };
        Ok(ForwardVars { trunk, latent, class })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut meta = Map::new();
        meta.insert("role".into(), Value::from("dynamics"));
        meta.insert("L".into(), Value::from(self.chunk_len));
        meta.insert("action_scale".into(), Value::from(self.action_scale));
        meta.insert("p_clean".into(), Value::from(self.aug.p_clean));
        meta.insert("mean_step".into(), Value::from(self.aug.mean_step));
        let mut depths = vec![self.trunk.layers.len()];
        let mut heads = Vec::new();
        let mut layers = self.trunk.layers.clone();
        if let Some(h) = &self.latent_head {
            heads.push("latent");
            depths.push(h.layers.len());
            layers.extend(h.layers.iter().cloned());
        }
        if let Some(h) = &self.class_head {
            heads.push("classifier");
            depths.push(h.layers.len());
            layers.extend(h.layers.iter().cloned());
        }
        meta.insert("heads".into(), Value::from(heads));
        meta.insert("depths".into(), Value::from(depths));
        Checkpoint::new(meta, layers)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta_str("role") != Some("dynamics") {
            return Err(Error::Checkpoint(format!("expected role \"dynamics\", found {:?}", ck.meta.get("role"))));
        }
        let get_u = |k: &str| ck.meta.get(k).and_then(Value::as_u64).ok_or_else(|| Error::Checkpoint(format!("missing {k}")));
        let chunk_len = get_u("L")? as usize;
        let depths: Vec<usize> = ck
            .meta
            .get("depths")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Checkpoint("missing depths".into()))?
            .iter()
            .map(|v| v.as_u64().map(|x| x as usize).ok_or_else(|| Error::Checkpoint("bad depth".into())))
            .collect::<Result<_>>()?;
        let heads: Vec<String> = ck
            .meta
            .get("heads")
            .and_then(Value::as_array)
            .map(|a| a.iter().filter_map(|v| v.as_str().map(String::from)).collect())
            .unwrap_or_default();
        if heads.len() + 1 != depths.len() {
            return Err(Error::Checkpoint("heads and depths disagree".into()));
        }
        let mut nets = ck.split(&depths)?.into_iter();
        let trunk = nets.next().unwrap();
        let (mut latent_head, mut class_head) = (None, None);
        for (name, net) in heads.iter().zip(nets) {
            match name.as_str() {
                "latent" => latent_head = Some(net),
                "classifier" => class_head = Some(net),
                other => return Err(Error::Checkpoint(format!("unknown head {other:?}"))),
            }
        }
        if trunk.input_width() != OBS_DIM + 2 * chunk_len {
            return Err(Error::Checkpoint("dynamics trunk width does not match L".into()));
        }
        let f = |k: &str, d: f64| ck.meta.get(k).and_then(Value::as_f64).unwrap_or(d);
        Ok(Self {
            trunk,
            latent_head,
            class_head,
            chunk_len,
            action_scale: f("action_scale", 0.05),
            aug: NoiseAugmentConfig {
                p_clean: f("p_clean", 0.5),
                mean_step: f("mean_step", 20.0),
            },
        })
    }
}

struct Batch {
    obs: Tensor,
    chunks: Tensor,
    terminal: Tensor,
    labels: Tensor,
}

fn make_batch(windows: &[&ChunkWindow<'_>], chunks: Vec<f64>) -> Result<Batch> {
    let n = windows.len();
    let mut obs = Vec::with_capacity(n * OBS_DIM);
    let mut terminal = Vec::with_capacity(n * OBS_DIM);
    let mut labels = vec![0.0; n * N_COLORS];
    for (i, w) in windows.iter().enumerate() {
        obs.extend_from_slice(&w.obs.0);
        terminal.extend_from_slice(&w.traj.terminal_observation.0);
        if let Some(c) = w.traj.label {
            labels[i * N_COLORS + c] = 1.0;
        }
    }
    let cw = chunks.len() / n.max(1);
    Ok(Batch {
        obs: Tensor::new(vec![n, OBS_DIM], obs)?,
        chunks: Tensor::new(vec![n, cw], chunks)?,
        terminal: Tensor::new(vec![n, OBS_DIM], terminal)?,
        labels: Tensor::new(vec![n, N_COLORS], labels)?,
    })
}

/// Per-head batch losses: mean squared-L2 error of the latent, mean cross-entropy.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DynamicsLoss {
    pub latent: f64,
    pub classifier: f64,
}

fn batch_loss<'a>(params: &'a DynamicsParams, b: &'a Batch, tape: &mut Tape<'a>, trainable: bool) -> Result<(Var, ForwardVars, DynamicsLoss)> {
    let n = b.obs.shape()[0] as f64;
    let o = tape.leaf(&b.obs, false);
    let c = tape.leaf(&b.chunks, false);
    let fv = params.forward_batch(tape, o, c, trainable)?;
    let mut terms = Vec::new();
    let mut parts = DynamicsLoss::default();
    if let Some((pred, _)) = &fv.latent {
        let t = tape.leaf(&b.terminal, false);
        let d = tape.sub(*pred, t)?;
        let sq = tape.square(d);
        let s = tape.sum(sq);
        let l = tape.scale(s, 1.0 / n);
        parts.latent = tape.value(l).item();
        terms.push(l);
    }
    if let Some((logits, _)) = &fv.class {
        let y = tape.leaf(&b.labels, false);
        let lp = tape.log_softmax_rows(*logits);
        let picked = tape.mul(lp, y)?;
        let s = tape.sum(picked);
        let l = tape.scale(s, -1.0 / n);
        parts.classifier = tape.value(l).item();
        terms.push(l);
    }
    let mut total = *terms.first().ok_or_else(|| Error::InvalidArgument("no heads to train".into()))?;
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok((total, fv, parts))
}

/// Trains trunk and requested heads jointly. Returns params and the mean
/// per-epoch losses.
pub fn train_dynamics(
    dataset: &Dataset,
    sched: &NoiseSchedule,
    rng: &mut Rng,
    cfg: &DynamicsTrainConfig,
    chunk_len: usize,
) -> Result<(DynamicsParams, Vec<DynamicsLoss>)> {
    if cfg.heads.is_empty() {
        return Err(Error::InvalidArgument("no dynamics heads requested".into()));
    }
    if !(0.0..=1.0).contains(&cfg.aug.p_clean) || cfg.aug.mean_step < 1.0 {
        return Err(Error::InvalidArgument(format!("bad noise augmentation {:?}", cfg.aug)));
    }
    let action_scale = dataset.manifest.world.delta_max;
    let windows = chunk_windows(dataset, chunk_len, action_scale);
    if windows.is_empty() {
        return Err(Error::InvalidArgument("dataset has no action chunks".into()));
    }
    if cfg.heads.contains(&Head::Classifier) && windows.iter().any(|w| w.traj.label.is_none()) {
        return Err(Error::InvalidArgument("classifier head needs labelled trajectories".into()));
    }
    let mut params = DynamicsParams::init(chunk_len, cfg, action_scale, rng);
    let mut opt_trunk = AdamState::new(&params.trunk);
    let mut opt_latent = params.latent_head.as_ref().map(AdamState::new);
    let mut opt_class = params.class_head.as_ref().map(AdamState::new);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let cw = 2 * chunk_len;
    let bs = cfg.batch_size.max(1);
    let total_steps = cfg.epochs * windows.len().div_ceil(bs);
    let mut step = 0;

    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut acc = DynamicsLoss::default();
        let mut batches = 0;
        for idx in order.chunks(bs) {
            let lr = cosine_lr(cfg.lr, cfg.min_lr_frac, step, total_steps);
            step += 1;
            let ws: Vec<&ChunkWindow<'_>> = idx.iter().map(|&i| &windows[i]).collect();
            let mut chunks = Vec::with_capacity(ws.len() * cw);
            for w in &ws {
                let k = sample_aug_level(rng, &cfg.aug, sched.train_steps());
                if k == 0 {
                    chunks.extend_from_slice(&w.chunk);
                } else {
                    let eps = rng.gaussian(&[cw]);
                    chunks.extend(forward_noise(&Tensor::vector(w.chunk.clone()), k, &eps, sched)?.into_data());
                }
            }
            let batch = make_batch(&ws, chunks)?;
            let (g_trunk, g_latent, g_class, parts) = {
                let mut tape = Tape::new();
                let (total, fv, parts) = batch_loss(&params, &batch, &mut tape, true)?;
                let mut g = tape.backward_scalar(total)?;
                let gt = params.trunk.collect_grads(&fv.trunk, &mut g);
                let gl = match (&params.latent_head, &fv.latent) {
                    (Some(h), Some((_, v))) => Some(h.collect_grads(v, &mut g)),
                    _ => None,
                };
                let gc = match (&params.class_head, &fv.class) {
                    (Some(h), Some((_, v))) => Some(h.collect_grads(v, &mut g)),
                    _ => None,
                };
                (gt, gl, gc, parts)
            };
            opt_trunk.step(&mut params.trunk, &g_trunk, lr)?;
            if let (Some(o), Some(h), Some(g)) = (opt_latent.as_mut(), params.latent_head.as_mut(), g_latent) {
                o.step(h, &g, lr)?;
            }
            if let (Some(o), Some(h), Some(g)) = (opt_class.as_mut(), params.class_head.as_mut(), g_class) {
                o.step(h, &g, lr)?;
            }
            acc.latent += parts.latent;
            acc.classifier += parts.classifier;
            batches += 1;
        }
        curve.push(DynamicsLoss {
            latent: acc.latent / batches as f64,
            classifier: acc.classifier / batches as f64,
        });
    }
    Ok((params, curve))
}

/// Latent-head loss on clean chunks of `dataset`. With `shuffle_actions`,
/// chunks are permuted within each batch of `batch_size` windows, which
/// breaks the pairing between observation and action.
pub fn latent_validation_loss(params: &DynamicsParams, dataset: &Dataset, shuffle_actions: bool, rng: &mut Rng, batch_size: usize) -> Result<f64> {
    params.head(Head::Latent)?;
    let windows = chunk_windows(dataset, params.chunk_len, params.action_scale);
    let mut total = 0.0;
    let mut count = 0usize;
    for group in windows.chunks(batch_size.max(1)) {
        let ws: Vec<&ChunkWindow<'_>> = group.iter().collect();
        let mut perm: Vec<usize> = (0..ws.len()).collect();
        if shuffle_actions {
            rng.shuffle(&mut perm);
        }
        let chunks: Vec<f64> = perm.iter().flat_map(|&i| ws[i].chunk.iter().copied()).collect();
        let batch = make_batch(&ws, chunks)?;
        let mut tape = Tape::new();
        let o = tape.leaf(&batch.obs, false);
        let c = tape.leaf(&batch.chunks, false);
        let fv = params.forward_batch(&mut tape, o, c, false)?;
        let (pred, _) = fv.latent.expect("latent head checked above");
        let t = tape.leaf(&batch.terminal, false);
        let d = tape.sub(pred, t)?;
        let sq = tape.square(d);
        let s = tape.sum(sq);
        total += tape.value(s).item();
        count += ws.len();
    }
    Ok(total / count.max(1) as f64)
}

/// Argmax accuracy of the classifier head against trajectory labels, with
/// chunks noised to level `k` (`k = 0` for clean chunks).
pub fn classifier_accuracy(params: &DynamicsParams, dataset: &Dataset, k: usize, sched: &NoiseSchedule, rng: &mut Rng) -> Result<f64> {
    let head = params.head(Head::Classifier)?;
    let windows = chunk_windows(dataset, params.chunk_len, params.action_scale);
    let mut correct = 0usize;
    let mut total = 0usize;
    for group in windows.chunks(256) {
        let ws: Vec<&ChunkWindow<'_>> = group.iter().collect();
        let mut chunks = Vec::with_capacity(ws.len() * 2 * params.chunk_len);
        for w in &ws {
            let a0 = Tensor::vector(w.chunk.clone());
            let a = if k == 0 { a0 } else { forward_noise(&a0, k, &rng.gaussian(&[a0.len()]), sched)? };
            chunks.extend(a.into_data());
        }
        let batch = make_batch(&ws, chunks)?;
        let mut tape = Tape::new();
        let o = tape.leaf(&batch.obs, false);
        let c = tape.leaf(&batch.chunks, false);
        let (f, _) = params.features(&mut tape, o, c, false)?;
        let (logits, _) = head.forward(&mut tape, f, false)?;
        let lv = tape.value(logits);
        for (i, w) in ws.iter().enumerate() {
            let row = lv.row(i);
            let arg = (0..N_COLORS).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            if w.traj.label == Some(arg) {
                correct += 1;
            }
            total += 1;
        }
    }
    Ok(correct as f64 / total.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blockworld::{build_dataset, LayoutSpec, WorldConfig};

    fn small_cfg() -> DynamicsTrainConfig {
        DynamicsTrainConfig {
            epochs: 2,
            trunk: vec![16, 16],
            head_hidden: 8,
            ..Default::default()
        }
    }

    #[test]
    fn geometric_mean_matches() {
        let mut rng = Rng::new(100);
        let n = 100_000;
        let mean = (0..n).map(|_| sample_geometric(&mut rng, 1.0 / 20.0) as f64).sum::<f64>() / n as f64;
        assert!((mean - 20.0).abs() < 0.5, "{mean}");
    }

    #[test]
    fn aug_levels_stay_in_range() {
        let mut rng = Rng::new(1);
        let aug = NoiseAugmentConfig::default();
        let levels: Vec<usize> = (0..20_000).map(|_| sample_aug_level(&mut rng, &aug, 100)).collect();
        assert!(levels.iter().all(|&k| k <= 100));
        let clean = levels.iter().filter(|&&k| k == 0).count() as f64 / levels.len() as f64;
        assert!((clean - 0.5).abs() < 0.02);
        let disabled = NoiseAugmentConfig::disabled();
        assert!((0..1000).all(|_| sample_aug_level(&mut rng, &disabled, 100) == 0));
    }

    #[test]
    fn outputs_have_contract_shapes() {
        let p = DynamicsParams::init(16, &small_cfg(), 0.05, &mut Rng::new(0));
        let obs = Observation([0.5; OBS_DIM]);
        let chunk = Rng::new(1).gaussian(&[32]);
        assert_eq!(p.eval_head(Head::Latent, &obs, &chunk).unwrap().len(), OBS_DIM);
        let logits = p.eval_head(Head::Classifier, &obs, &chunk).unwrap();
        let probs: f64 = logits.data().iter().map(|l| (l - crate::numerics::logsumexp(logits.data()).unwrap()).exp()).sum();
        assert!((probs - 1.0).abs() < 1e-12);
    }

    #[test]
    fn non_finite_chunk_rejected() {
        let p = DynamicsParams::init(16, &small_cfg(), 0.05, &mut Rng::new(0));
        let obs = Observation([0.5; OBS_DIM]);
        let mut chunk = Tensor::zeros(&[32]);
        chunk.data_mut()[3] = f64::NAN;
        assert!(matches!(p.eval_head(Head::Latent, &obs, &chunk), Err(Error::NonFinite(_))));
    }

    #[test]
    fn missing_head_rejected() {
        let cfg = DynamicsTrainConfig {
            heads: vec![Head::Classifier],
            ..small_cfg()
        };
        let p = DynamicsParams::init(16, &cfg, 0.05, &mut Rng::new(0));
        let obs = Observation([0.5; OBS_DIM]);
        assert!(p.eval_head(Head::Latent, &obs, &Tensor::zeros(&[32])).is_err());
        let ds = build_dataset(0, 1, LayoutSpec::Random, [1.0; 4], &WorldConfig::default()).unwrap();
        let none = DynamicsTrainConfig { heads: vec![], ..small_cfg() };
        assert!(train_dynamics(&ds, &NoiseSchedule::default(), &mut Rng::new(0), &none, 16).is_err());
    }

    #[test]
    fn gradient_wrt_chunk_matches_finite_differences() {
        let p = DynamicsParams::init(16, &small_cfg(), 0.05, &mut Rng::new(2));
        let mut rng = Rng::new(3);
        let obs = Observation(std::array::from_fn(|_| rng.uniform()));
        let chunk = rng.gaussian(&[32]);
        for coord in [0, 7, 25] {
            let mut tape = Tape::new();
            let c = tape.leaf(&chunk, true);
            let out = p.predict_outcome(&obs, c, &mut tape).unwrap();
            let mut seed = Tensor::zeros(&[OBS_DIM]);
            seed.data_mut()[coord] = 1.0;
            let g = tape.backward(out, &seed).unwrap();
            let ad = g.get(c).unwrap().clone();
            let h = 1e-5;
            for i in 0..32 {
                let mut plus = chunk.clone();
                plus.data_mut()[i] += h;
                let mut minus = chunk.clone();
                minus.data_mut()[i] -= h;
                let fd = (p.eval_head(Head::Latent, &obs, &plus).unwrap().data()[coord]
                    - p.eval_head(Head::Latent, &obs, &minus).unwrap().data()[coord])
                    / (2.0 * h);
                let a = ad.data()[i];
                assert!((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6) < 1e-4, "{a} vs {fd}");
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = DynamicsParams::init(16, &small_cfg(), 0.05, &mut Rng::new(0));
        let back = DynamicsParams::from_checkpoint(&Checkpoint::from_json(&p.to_checkpoint().to_json()).unwrap()).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn short_training_reduces_both_losses() {
        let ds = build_dataset(5, 10, LayoutSpec::Random, [1.0; 4], &WorldConfig::default()).unwrap();
        let cfg = DynamicsTrainConfig {
            epochs: 8,
            ..small_cfg()
        };
        let (_, curve) = train_dynamics(&ds, &NoiseSchedule::default(), &mut Rng::new(0), &cfg, 16).unwrap();
        assert!(curve.last().unwrap().latent < curve[0].latent);
        assert!(curve.last().unwrap().classifier < curve[0].classifier);
    }
}
