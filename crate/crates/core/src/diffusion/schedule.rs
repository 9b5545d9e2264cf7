use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// `beta_start` and `beta_end` are given for a 1000-step reference chain and
/// scaled by `1000 / K`, so that `a^K` is close to pure noise for any `K`.
/// `clip_sample`, when set, bounds each coordinate of the clean-sample
/// estimate inside a DDIM step and re-derives the noise direction from it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    #[serde(rename = "K")]
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub ddim_steps: usize,
    pub clip_sample: Option<f64>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            train_steps: 100,
            beta_start: 1e-4,
            beta_end: 2e-2,
            ddim_steps: 10,
            clip_sample: None,
        }
    }
}

/// Linear-beta DDPM schedule with a strided DDIM step list.
///
/// Index 0 of the `alpha_bar` table is 1, so `k = 0` means "clean".
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    inference_steps: Vec<usize>,
}

impl NoiseSchedule {
    pub fn new(config: ScheduleConfig) -> Result<Self> {
        let k = config.train_steps;
        if k == 0 || config.ddim_steps == 0 || config.ddim_steps > k {
            return Err(Error::InvalidArgument(format!(
                "need 1 <= ddim_steps ({}) <= K ({k})",
                config.ddim_steps
            )));
        }
        if let Some(c) = config.clip_sample {
            if !(c > 0.0) {
                return Err(Error::InvalidArgument(format!("clip_sample must be positive, got {c}")));
            }
        }
        let scale = 1000.0 / k as f64;
        let (b0, b1) = (config.beta_start * scale, config.beta_end * scale);
        if !(0.0 < b0 && b0 <= b1 && b1 < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "beta range [{}, {}] scaled by 1000/K = {scale} must lie in (0, 1)",
                config.beta_start, config.beta_end
            )));
        }
        let mut betas = vec![0.0; k + 1];
        for (l, b) in betas.iter_mut().enumerate().skip(1) {
            let frac = if k == 1 { 0.0 } else { (l - 1) as f64 / (k - 1) as f64 };
            *b = b0 + frac * (b1 - b0);
        }
        let mut alpha_bars = vec![1.0; k + 1];
        for l in 1..=k {
            alpha_bars[l] = alpha_bars[l - 1] * (1.0 - betas[l]);
        }
        let n = config.ddim_steps;
        let inference_steps = (1..=n).rev().map(|i| i * k / n).collect();
        Ok(Self {
            config,
            betas,
            alpha_bars,
            inference_steps,
        })
    }

    pub fn config(&self) -> &ScheduleConfig {
        &self.config
    }

    pub fn train_steps(&self) -> usize {
        self.config.train_steps
    }

    pub fn beta(&self, k: usize) -> f64 {
        self.betas[k]
    }

    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bars[k]
    }

    /// Descending DDIM levels, e.g. `[100, 90, ..., 10]`.
    pub fn inference_steps(&self) -> &[usize] {
        &self.inference_steps
    }

    /// `(k, k_next)` pairs walked by the sampler, ending at `k_next = 0`.
    pub fn ddim_pairs(&self) -> Vec<(usize, usize)> {
        let s = &self.inference_steps;
        (0..s.len()).map(|i| (s[i], s.get(i + 1).copied().unwrap_or(0))).collect()
    }

    fn check_level(&self, k: usize) -> Result<()> {
        if k > self.config.train_steps {
            return Err(Error::InvalidArgument(format!("noise level {k} outside [0, {}]", self.config.train_steps)));
        }
        Ok(())
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::new(ScheduleConfig::default()).expect("default schedule is valid")
    }
}

/// `a^k = sqrt(abar_k) a0 + sqrt(1 - abar_k) eps`.
pub fn forward_noise(a0: &Tensor, k: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_level(k)?;
    if a0.shape() != eps.shape() {
        return Err(Error::shape("forward_noise", format!("{:?}", a0.shape()), format!("{:?}", eps.shape())));
    }
    let ab = sched.alpha_bar(k);
    let (c0, c1) = (ab.sqrt(), (1.0 - ab).sqrt());
    a0.zip_map(eps, |a, e| c0 * a + c1 * e)
}

/// Clean-sample estimate implied by a noise prediction at level `k`.
pub fn predict_clean(a_k: &Tensor, eps_hat: &Tensor, k: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    let ab = sched.alpha_bar(k);
    let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
    a_k.zip_map(eps_hat, |a, e| (a - n * e) / s)
}

/// Deterministic (eta = 0) DDIM update from level `k` to `k_next < k`.
pub fn ddim_step(a_k: &Tensor, eps_hat: &Tensor, k: usize, k_next: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_level(k)?;
    if k_next >= k {
        return Err(Error::InvalidArgument(format!("DDIM step must descend, got {k} -> {k_next}")));
    }
    if !eps_hat.is_finite() {
        return Err(Error::NonFinite(format!("noise prediction at level {k}")));
    }
    if a_k.shape() != eps_hat.shape() {
        return Err(Error::shape("ddim_step", format!("{:?}", a_k.shape()), format!("{:?}", eps_hat.shape())));
    }
    let mut a0 = predict_clean(a_k, eps_hat, k, sched)?;
    let mut eps = eps_hat.clone();
    if let Some(c) = sched.config.clip_sample {
        a0 = a0.map(|x| x.clamp(-c, c));
        let ab = sched.alpha_bar(k);
        let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
        eps = a_k.zip_map(&a0, |a, x| (a - s * x) / n)?;
    }
    let abn = sched.alpha_bar(k_next);
    let (c0, c1) = (abn.sqrt(), (1.0 - abn).sqrt());
    a0.zip_map(&eps, |a, e| c0 * a + c1 * e)
}

/// Stochastic re-noising from level `k_low` back up to `k_high`, the
/// forward marginal between the two: `sqrt(abar_h/abar_l) a + sqrt(1 - abar_h/abar_l) z`.
pub fn renoise(a_low: &Tensor, k_low: usize, k_high: usize, z: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_level(k_high)?;
    let ratio = sched.alpha_bar(k_high) / sched.alpha_bar(k_low);
    let (c0, c1) = (ratio.sqrt(), (1.0 - ratio).max(0.0).sqrt());
    a_low.zip_map(z, |a, e| c0 * a + c1 * e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn unclipped() -> NoiseSchedule {
        NoiseSchedule::default()
    }

    fn clipped() -> NoiseSchedule {
        NoiseSchedule::new(ScheduleConfig {
            clip_sample: Some(1.0),
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn alpha_bar_monotone_and_in_unit_interval() {
        for (k, n) in [(100, 10), (50, 5), (60, 60), (1000, 10)] {
            let s = NoiseSchedule::new(ScheduleConfig {
                train_steps: k,
                ddim_steps: n,
                ..Default::default()
            })
            .unwrap();
            assert_eq!(s.alpha_bar(0), 1.0);
            for l in 1..=k {
                assert!(s.alpha_bar(l) < s.alpha_bar(l - 1));
                assert!(s.alpha_bar(l) > 0.0 && s.alpha_bar(l) < 1.0);
            }
            assert!(s.inference_steps().iter().all(|&x| (1..=k).contains(&x)));
        }
    }

    #[test]
    fn reference_chain_is_unscaled() {
        let s = NoiseSchedule::new(ScheduleConfig {
            train_steps: 1000,
            ..Default::default()
        })
        .unwrap();
        assert!((s.beta(1) - 1e-4).abs() < 1e-18 && (s.beta(1000) - 2e-2).abs() < 1e-15);
        assert!(NoiseSchedule::new(ScheduleConfig {
            train_steps: 10,
            ddim_steps: 10,
            ..Default::default()
        })
        .is_err());
    }

    #[test]
    fn default_step_list() {
        let s = NoiseSchedule::default();
        assert_eq!(s.inference_steps(), &[100, 90, 80, 70, 60, 50, 40, 30, 20, 10]);
        assert_eq!(s.ddim_pairs().last(), Some(&(10, 0)));
        assert!((s.beta(1) - 1e-3).abs() < 1e-17 && (s.beta(100) - 0.2).abs() < 1e-15);
        // The chain ends in (nearly) pure noise.
        assert!(s.alpha_bar(100) < 1e-4);
    }

    #[test]
    fn forward_noise_endpoints() {
        let s = NoiseSchedule::default();
        let mut rng = Rng::new(0);
        let a0 = rng.gaussian(&[32]);
        let eps = rng.gaussian(&[32]);
        assert_eq!(forward_noise(&a0, 0, &eps, &s).unwrap(), a0);
        let z = Tensor::zeros(&[32]);
        let k = 37;
        let ak = forward_noise(&a0, k, &z, &s).unwrap();
        let c = s.alpha_bar(k).sqrt();
        assert!(ak.data().iter().zip(a0.data()).all(|(x, y)| *x == c * y));
        assert!(forward_noise(&a0, 101, &eps, &s).is_err());
    }

    #[test]
    fn forward_noise_variance() {
        let s = NoiseSchedule::default();
        let mut rng = Rng::new(21);
        let a0 = Tensor::zeros(&[32]);
        for k in [10, 50, 100] {
            let mean_sq: f64 = (0..10_000)
                .map(|_| forward_noise(&a0, k, &rng.gaussian(&[32]), &s).unwrap().norm_sq())
                .sum::<f64>()
                / 10_000.0;
            let expected = (1.0 - s.alpha_bar(k)) * 32.0;
            assert!((mean_sq - expected).abs() / expected < 0.03, "k={k}: {mean_sq} vs {expected}");
        }
    }

    #[test]
    fn ddim_inverts_forward_noise() {
        let s = unclipped();
        let mut rng = Rng::new(5);
        for k in 1..=100 {
            let a0 = rng.gaussian(&[32]);
            let eps = rng.gaussian(&[32]);
            let ak = forward_noise(&a0, k, &eps, &s).unwrap();
            let back = ddim_step(&ak, &eps, k, 0, &s).unwrap();
            for (x, y) in back.data().iter().zip(a0.data()) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn zero_eps_is_pure_rescale() {
        let s = unclipped();
        let a = Rng::new(6).gaussian(&[8]);
        let out = ddim_step(&a, &Tensor::zeros(&[8]), 60, 50, &s).unwrap();
        let r = (s.alpha_bar(50) / s.alpha_bar(60)).sqrt();
        for (x, y) in out.data().iter().zip(a.data()) {
            assert!((x - r * y).abs() < 1e-14);
        }
    }

    #[test]
    fn clean_estimate_is_clipped() {
        let s = clipped();
        let a = Tensor::vector(vec![3.0, -0.5, -2.0]);
        let out = ddim_step(&a, &Tensor::zeros(&[3]), 100, 90, &s).unwrap();
        let (sk, nk) = (s.alpha_bar(100).sqrt(), (1.0 - s.alpha_bar(100)).sqrt());
        let (sn, nn) = (s.alpha_bar(90).sqrt(), (1.0 - s.alpha_bar(90)).sqrt());
        assert!(-0.5 / sk < -1.0);
        for (o, (a, x)) in out.data().iter().zip([(3.0, 1.0), (-0.5, -1.0), (-2.0, -1.0)]) {
            let eps = (a - sk * x) / nk;
            assert!((o - (sn * x + nn * eps)).abs() < 1e-12);
        }
        let inside = Tensor::vector(vec![0.3 * s.alpha_bar(100).sqrt()]);
        let out = ddim_step(&inside, &Tensor::zeros(&[1]), 100, 0, &s).unwrap();
        assert!((out.data()[0] - 0.3).abs() < 1e-12);
        assert!(NoiseSchedule::new(ScheduleConfig {
            clip_sample: Some(0.0),
            ..Default::default()
        })
        .is_err());
    }

    #[test]
    fn ddim_rejects_bad_inputs() {
        let s = NoiseSchedule::default();
        let a = Tensor::zeros(&[4]);
        assert!(ddim_step(&a, &Tensor::full(&[4], f64::NAN), 10, 0, &s).is_err());
        assert!(ddim_step(&a, &a, 10, 10, &s).is_err());
    }
}
