use serde::{Deserialize, Serialize};

use super::{Rng, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `[in, out]`
    pub w: Tensor,
    /// `[out]`
    pub b: Tensor,
}

/// Fully connected network: tanh between layers, identity after the last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

/// Tape handles for one forward pass's parameters, in layer order.
#[derive(Debug, Clone)]
pub struct MlpVars {
    pub layers: Vec<(Var, Var)>,
}

impl MlpParams {
    /// Xavier-style init for the widths `[in, h1, ..., out]`.
    pub fn init(widths: &[usize], rng: &mut Rng) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least input and output widths");
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
                Layer {
                    w: rng.gaussian(&[fan_in, fan_out]).scale(std),
                    b: Tensor::zeros(&[fan_out]),
                }
            })
            .collect();
        Self { layers }
    }

    /// Builds a network from explicit layers after checking they compose.
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("MLP with no layers".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            let (_, out) = l.w.as_matrix_dims();
            if l.w.shape().len() != 2 || l.b.len() != out {
                return Err(Error::shape("MlpParams layer", format!("w [in,out] and b [out] at layer {i}"), format!("{:?} / {:?}", l.w.shape(), l.b.shape())));
            }
        }
        for (i, pair) in layers.windows(2).enumerate() {
            let out = pair[0].w.shape()[1];
            let next_in = pair[1].w.shape()[0];
            if out != next_in {
                return Err(Error::shape("MlpParams", format!("layer {} input {out}", i + 1), next_in));
            }
        }
        Ok(Self { layers })
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].w.shape()[0]
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().unwrap().w.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    w: Tensor::zeros(l.w.shape()),
                    b: Tensor::zeros(l.b.shape()),
                })
                .collect(),
        }
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.w, &l.b])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.w, &mut l.b])
    }

    /// Records the forward pass for `input` (`[n, in]` or `[in]`).
    ///
    /// Parameters are borrowed into the tape; `trainable` marks them as
    /// gradient targets.
    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, input: Var, trainable: bool) -> Result<(Var, MlpVars)> {
        let (_, width) = tape.value(input).as_matrix_dims();
        if width != self.input_width() {
            return Err(Error::shape("mlp_forward input", self.input_width(), width));
        }
        let mut h = input;
        let mut vars = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = tape.leaf(&layer.w, trainable);
            let b = tape.leaf(&layer.b, trainable);
            vars.push((w, b));
            let z = tape.matmul(h, w)?;
            h = tape.add_row(z, b)?;
            if i < last {
                h = tape.tanh(h);
            }
        }
        Ok((h, MlpVars { layers: vars }))
    }

    /// Gradient of the tape's output with respect to each parameter.
    pub fn collect_grads(&self, vars: &MlpVars, grads: &mut super::Gradients) -> Self {
        Self {
            layers: vars
                .layers
                .iter()
                .zip(&self.layers)
                .map(|(&(w, b), l)| Layer {
                    w: grads.take(w).unwrap_or_else(|| Tensor::zeros(l.w.shape())),
                    b: grads.take(b).unwrap_or_else(|| Tensor::zeros(l.b.shape())),
                })
                .collect(),
        }
    }

    /// Plain evaluation without recording, for callers that need no gradient.
    pub fn eval(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.leaf(input, false);
        let (y, _) = self.forward(&mut tape, x, false)?;
        let (n, m) = tape.value(y).as_matrix_dims();
        let out = tape.value(y).clone();
        if input.shape().len() == 1 {
            return out.reshape(&[m]);
        }
        out.reshape(&[n, m])
    }
}
