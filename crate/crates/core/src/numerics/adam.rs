use super::MlpParams;
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub m: MlpParams,
    pub v: MlpParams,
}

impl AdamState {
    pub fn new(params: &MlpParams) -> Self {
        Self {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// One bias-corrected Adam update. A non-finite gradient rejects the
    /// whole step and leaves both params and state untouched.
    pub fn step(&mut self, params: &mut MlpParams, grads: &MlpParams, lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
        }
        if grads.layers.len() != params.layers.len()
            || grads.tensors().zip(params.tensors()).any(|(g, p)| g.shape() != p.shape())
        {
            return Err(Error::shape("adam_step", "gradients shaped like params", "mismatched layers"));
        }
        if grads.tensors().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("adam gradient".into()));
        }

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        let iter = params
            .tensors_mut()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut().zip(self.v.tensors_mut()));
        for ((p, g), (m, v)) in iter {
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mi = BETA1 * *mi + (1.0 - BETA1) * gi;
                *vi = BETA2 * *vi + (1.0 - BETA2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *pi -= lr * m_hat / (v_hat.sqrt() + EPS);
            }
        }
        Ok(())
    }
}

/// Cosine decay from `base` at step 0 to `base * min_frac` at `total`.
pub fn cosine_lr(base: f64, min_frac: f64, step: usize, total: usize) -> f64 {
    if total <= 1 || min_frac >= 1.0 {
        return base;
    }
    let t = (step.min(total - 1)) as f64 / (total - 1) as f64;
    base * (min_frac + (1.0 - min_frac) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}
