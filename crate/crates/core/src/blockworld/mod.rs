//! BlockTouch: a point agent in the unit square and four colored squares.
//!
//! The agent moves by clamped position deltas and the episode ends on the
//! first square it touches. Observations are flat 26-vectors; square slots
//! are ordered by distance from the agent, so slot 0 of a terminal
//! observation is always the square that was touched.

mod dataset;
mod demo;
mod layout;

use serde::{Deserialize, Serialize};

pub use dataset::{build_dataset, replay_label, Dataset, DatasetManifest, DATA_FILE, DATA_FORMAT, MANIFEST_FILE};
pub use demo::{bezier_point, discretize_curve, generate_demo};
pub use layout::{reset, LayoutSpec};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const N_COLORS: usize = 4;
pub const OBS_DIM: usize = 2 + 2 * N_COLORS + N_COLORS * N_COLORS;
/// Width of [`Observation::encode`].
pub const ENC_DIM: usize = 2 + 2 * N_COLORS;
pub const COLOR_NAMES: [&str; N_COLORS] = ["red", "green", "blue", "yellow"];

pub fn color_index(name: &str) -> Option<usize> {
    COLOR_NAMES.iter().position(|&c| c == name)
}

/// Geometry and timing of the world. None of these values come from a
/// published BlockTouch description; they are chosen so straight paths
/// take on the order of ten to twenty steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub delta_max: f64,
    pub half_size: f64,
    pub horizon: usize,
    /// Minimum distance between the agent's start and every square.
    pub start_clearance: f64,
    /// Minimum gap between square edges.
    pub square_gap: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            delta_max: 0.05,
            half_size: 0.04,
            horizon: 120,
            start_clearance: 0.1,
            square_gap: 0.02,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Square {
    pub center: [f64; 2],
    pub half_size: f64,
    pub color: usize,
}

impl Square {
    /// Closed-box containment with a 1e-12 slack, so points landing on an
    /// edge computed as `a + b` still count as touching.
    pub fn contains(&self, p: [f64; 2]) -> bool {
        let h = self.half_size + TOUCH_SLACK;
        (p[0] - self.center[0]).abs() <= h && (p[1] - self.center[1]).abs() <= h
    }

    /// Euclidean distance from `p` to the square's box (zero inside).
    pub fn box_distance(&self, p: [f64; 2]) -> f64 {
        let dx = ((p[0] - self.center[0]).abs() - self.half_size).max(0.0);
        let dy = ((p[1] - self.center[1]).abs() - self.half_size).max(0.0);
        dx.hypot(dy)
    }

    fn overlaps(&self, other: &Square, gap: f64) -> bool {
        let reach = self.half_size + other.half_size + gap;
        (self.center[0] - other.center[0]).abs() < reach && (self.center[1] - other.center[1]).abs() < reach
    }
}

/// Four squares, stored so that `squares[c].color == c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub squares: [Square; N_COLORS],
}

impl Layout {
    pub fn from_centers(centers: [[f64; 2]; N_COLORS], half_size: f64) -> Self {
        let squares = std::array::from_fn(|c| Square {
            center: centers[c],
            half_size,
            color: c,
        });
        Self { squares }
    }

    /// First square (by color index) containing `p`.
    pub fn touched(&self, p: [f64; 2]) -> Option<usize> {
        self.squares.iter().find(|s| s.contains(p)).map(|s| s.color)
    }

    pub fn any_overlap(&self, gap: f64) -> bool {
        (0..N_COLORS).any(|i| (i + 1..N_COLORS).any(|j| self.squares[i].overlaps(&self.squares[j], gap)))
    }

    pub fn inside_arena(&self) -> bool {
        self.squares.iter().all(|s| {
            s.center.iter().all(|&c| c - s.half_size >= 0.0 && c + s.half_size <= 1.0)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub agent: [f64; 2],
    pub layout: Layout,
    pub t: usize,
}

const TOUCH_SLACK: f64 = 1e-12;

fn clamp_norm(delta: [f64; 2], max: f64) -> [f64; 2] {
    let n = delta[0].hypot(delta[1]);
    if n > max && n > 0.0 {
        [delta[0] * max / n, delta[1] * max / n]
    } else if n.is_finite() {
        delta
    } else {
        [0.0, 0.0]
    }
}

impl EnvState {
    pub fn new(agent: [f64; 2], layout: Layout) -> Self {
        Self { agent, layout, t: 0 }
    }

    /// Applies one clamped delta. Returns the next state and the color of
    /// the square touched, if any.
    pub fn step(&self, delta: [f64; 2], cfg: &WorldConfig) -> (EnvState, Option<usize>) {
        let d = clamp_norm(delta, cfg.delta_max);
        let agent = [
            (self.agent[0] + d[0]).clamp(0.0, 1.0),
            (self.agent[1] + d[1]).clamp(0.0, 1.0),
        ];
        let next = EnvState {
            agent,
            layout: self.layout,
            t: self.t + 1,
        };
        (next, self.layout.touched(agent))
    }

    /// Square indices ordered by (box distance, center distance, color).
    pub fn slot_order(&self) -> [usize; N_COLORS] {
        let mut order: [usize; N_COLORS] = std::array::from_fn(|i| i);
        let key = |c: usize| {
            let s = &self.layout.squares[c];
            let cd = (s.center[0] - self.agent[0]).hypot(s.center[1] - self.agent[1]);
            (s.box_distance(self.agent), cd)
        };
        order.sort_by(|&a, &b| {
            let (ka, kb) = (key(a), key(b));
            ka.0.total_cmp(&kb.0).then(ka.1.total_cmp(&kb.1)).then(a.cmp(&b))
        });
        order
    }

    pub fn observe(&self) -> Observation {
        let mut v = [0.0; OBS_DIM];
        v[0] = self.agent[0];
        v[1] = self.agent[1];
        for (slot, &c) in self.slot_order().iter().enumerate() {
            let s = &self.layout.squares[c];
            v[2 + 2 * slot] = s.center[0];
            v[3 + 2 * slot] = s.center[1];
            v[2 + 2 * N_COLORS + N_COLORS * slot + c] = 1.0;
        }
        Observation(v)
    }
}

/// Flat state observation: agent (2) ++ slot centers (8) ++ slot one-hot colors (16).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Observation(pub [f64; OBS_DIM]);

impl Observation {
    pub fn zeros() -> Self {
        Self([0.0; OBS_DIM])
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        let arr: [f64; OBS_DIM] = v.try_into().map_err(|_| Error::shape("Observation", OBS_DIM, v.len()))?;
        Ok(Self(arr))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn agent(&self) -> [f64; 2] {
        [self.0[0], self.0[1]]
    }

    pub fn slot_center(&self, slot: usize) -> [f64; 2] {
        [self.0[2 + 2 * slot], self.0[3 + 2 * slot]]
    }

    /// Color held by `slot`, if its one-hot block is well formed.
    pub fn slot_color(&self, slot: usize) -> Option<usize> {
        let block = &self.0[2 + 2 * N_COLORS + N_COLORS * slot..2 + 2 * N_COLORS + N_COLORS * (slot + 1)];
        let ones: Vec<usize> = block.iter().enumerate().filter(|(_, &x)| x == 1.0).map(|(i, _)| i).collect();
        let zeros = block.iter().filter(|&&x| x == 0.0).count();
        (ones.len() == 1 && zeros == N_COLORS - 1).then(|| ones[0])
    }

    /// Rebuilds the environment state this observation was taken from.
    pub fn to_state(&self, half_size: f64) -> Result<EnvState> {
        let mut centers = [[f64::NAN; 2]; N_COLORS];
        for slot in 0..N_COLORS {
            let c = self
                .slot_color(slot)
                .ok_or_else(|| Error::InvalidArgument(format!("slot {slot} has no valid color one-hot")))?;
            if !centers[c][0].is_nan() {
                return Err(Error::InvalidArgument(format!("color {c} appears twice")));
            }
            centers[c] = self.slot_center(slot);
        }
        Ok(EnvState::new(self.agent(), Layout::from_centers(centers, half_size)))
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::vector(self.0.to_vec())
    }

    /// Network input features: `agent - origin`, then for each color the
    /// offset of its square from `origin`. Each slot contributes through its
    /// one-hot weights, so a zero observation encodes to `-origin` and zeros.
    pub fn encode_from(&self, origin: [f64; 2]) -> [f64; ENC_DIM] {
        let mut out = [0.0; ENC_DIM];
        let a = self.agent();
        out[0] = a[0] - origin[0];
        out[1] = a[1] - origin[1];
        for slot in 0..N_COLORS {
            let c = self.slot_center(slot);
            let hot = &self.0[2 + 2 * N_COLORS + N_COLORS * slot..2 + 2 * N_COLORS + N_COLORS * (slot + 1)];
            for (color, &w) in hot.iter().enumerate() {
                out[2 + 2 * color] += w * (c[0] - origin[0]);
                out[3 + 2 * color] += w * (c[1] - origin[1]);
            }
        }
        out
    }

    /// Agent position followed by color-indexed square offsets from the agent.
    pub fn encode(&self) -> [f64; ENC_DIM] {
        let mut out = self.encode_from(self.agent());
        out[..2].copy_from_slice(&self.agent());
        out
    }
}

/// `L x 2` position deltas in world units.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionChunk {
    pub deltas: Vec<[f64; 2]>,
}

impl ActionChunk {
    pub fn zeros(len: usize) -> Self {
        Self {
            deltas: vec![[0.0; 2]; len],
        }
    }

    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }

    /// Normalized model-space view (`delta / delta_max`), flattened to `[2L]`.
    pub fn to_model(&self, delta_max: f64) -> Tensor {
        Tensor::vector(self.deltas.iter().flat_map(|d| [d[0] / delta_max, d[1] / delta_max]).collect())
    }

    pub fn from_model(t: &Tensor, delta_max: f64) -> Self {
        Self {
            deltas: t.data().chunks(2).map(|d| [d[0] * delta_max, d[1] * delta_max]).collect(),
        }
    }
}

/// One demonstration or rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Observation before each action.
    pub observations: Vec<Observation>,
    pub actions: Vec<[f64; 2]>,
    pub terminal_observation: Observation,
    pub label: Option<usize>,
    pub layout_seed: u64,
}
