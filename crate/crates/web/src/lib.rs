//! Browser bindings. Every exported method returns JSON text so the page
//! needs no generated type glue beyond `Demo`.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use steerkit::blockworld::{generate_demo, reset, EnvState, LayoutSpec, WorldConfig, COLOR_NAMES, N_COLORS};
use steerkit::diffusion::{DenoiserParams, NoiseSchedule};
use steerkit::dynamics::DynamicsParams;
use steerkit::guidance::{GuidanceConfig, GuidanceSet, MetricMode};
use steerkit::harness::{next_chunk, Method, MethodSettings, Models};
use steerkit::numerics::{Checkpoint, Rng};

#[derive(Debug, Serialize)]
pub struct SquareView {
    pub color: &'static str,
    pub center: [f64; 2],
    pub half_size: f64,
}

#[derive(Debug, Serialize)]
pub struct Scene {
    pub agent: [f64; 2],
    pub squares: Vec<SquareView>,
}

#[derive(Debug, Serialize)]
pub struct Path {
    pub points: Vec<[f64; 2]>,
    pub touched: Option<&'static str>,
    /// Guidance metric after each chunk, when guided.
    pub d: Vec<f64>,
}

/// Native core of the demo; the wasm wrapper below only converts errors.
pub struct Session {
    world: WorldConfig,
    schedule: NoiseSchedule,
    rng: Rng,
    state: EnvState,
    policy: Option<DenoiserParams>,
    dynamics: Option<DynamicsParams>,
}

impl Session {
    pub fn new(seed: u64) -> steerkit::Result<Self> {
        let world = WorldConfig::default();
        let mut rng = Rng::new(seed);
        let state = reset(&mut rng, LayoutSpec::Random, &world)?;
        Ok(Self {
            world,
            schedule: NoiseSchedule::default(),
            rng,
            state,
            policy: None,
            dynamics: None,
        })
    }

    pub fn scene(&self) -> Scene {
        Scene {
            agent: self.state.agent,
            squares: (0..N_COLORS)
                .map(|c| {
                    let s = &self.state.layout.squares[c];
                    SquareView {
                        color: COLOR_NAMES[c],
                        center: s.center,
                        half_size: s.half_size,
                    }
                })
                .collect(),
        }
    }

    pub fn new_layout(&mut self, spec: LayoutSpec) -> steerkit::Result<Scene> {
        self.state = reset(&mut self.rng, spec, &self.world)?;
        Ok(self.scene())
    }

    pub fn scripted_demo(&mut self, color: usize) -> steerkit::Result<Path> {
        let traj = generate_demo(&mut self.rng, &self.state, color, 0, &self.world)?;
        let mut points: Vec<[f64; 2]> = traj.observations.iter().map(|o| o.agent()).collect();
        points.push(traj.terminal_observation.agent());
        Ok(Path {
            points,
            touched: traj.label.map(|c| COLOR_NAMES[c]),
            d: Vec::new(),
        })
    }

    pub fn load_policy(&mut self, json: &str) -> steerkit::Result<()> {
        self.policy = Some(DenoiserParams::from_checkpoint(&Checkpoint::from_json(json)?)?);
        Ok(())
    }

    pub fn load_dynamics(&mut self, json: &str) -> steerkit::Result<()> {
        self.dynamics = Some(DynamicsParams::from_checkpoint(&Checkpoint::from_json(json)?)?);
        Ok(())
    }

    pub fn has_policy(&self) -> bool {
        self.policy.is_some()
    }

    pub fn has_dynamics(&self) -> bool {
        self.dynamics.is_some()
    }

    /// One episode from the current layout. `target = None` runs the base
    /// policy; otherwise DynaGuide with the classifier metric towards that color.
    pub fn rollout(&mut self, target: Option<usize>, s: f64) -> steerkit::Result<Path> {
        let (method, gset) = match target {
            None => (Method::Base, GuidanceSet::default()),
            Some(c) => (
                Method::DynaGuide,
                GuidanceSet {
                    target_colors: vec![c],
                    ..Default::default()
                },
            ),
        };
        let settings = MethodSettings {
            guidance: GuidanceConfig {
                s,
                metric_mode: MetricMode::Classifier,
                ..Default::default()
            },
            ..Default::default()
        };
        let models = Models {
            policy: self.policy.as_ref(),
            goal_policy: None,
            dynamics: self.dynamics.as_ref(),
            schedule: &self.schedule,
        };
        steerkit::harness::check_method(method, &models, &gset, &settings)?;
        let mut state = self.state;
        let mut points = vec![state.agent];
        let mut d = Vec::new();
        let mut touched = None;
        'episode: while state.t < settings.horizon {
            let (chunk, diag) = next_chunk(method, &models, &state, &gset, &settings, &mut self.rng)?;
            if let Some(diag) = diag {
                d.push(diag.d_last);
            }
            for delta in chunk.deltas.iter().take(settings.sample.execute_len) {
                let (next, hit) = state.step(*delta, &self.world);
                state = next;
                points.push(state.agent);
                if hit.is_some() || state.t >= settings.horizon {
                    touched = hit;
                    break 'episode;
                }
            }
        }
        Ok(Path {
            points,
            touched: touched.map(|c| COLOR_NAMES[c]),
            d,
        })
    }
}

fn js_err(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn to_json(v: &impl Serialize) -> Result<String, JsValue> {
    serde_json::to_string(v).map_err(js_err)
}

fn layout_spec(name: &str) -> Result<LayoutSpec, JsValue> {
    serde_json::from_value(serde_json::Value::String(name.to_string())).map_err(|_| js_err(format!("unknown layout {name:?}")))
}

#[wasm_bindgen]
pub struct Demo {
    inner: Session,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> Result<Demo, JsValue> {
        Ok(Demo {
            inner: Session::new(seed as u64).map_err(js_err)?,
        })
    }

    pub fn scene(&self) -> Result<String, JsValue> {
        to_json(&self.inner.scene())
    }

    #[wasm_bindgen(js_name = newLayout)]
    pub fn new_layout(&mut self, spec: &str) -> Result<String, JsValue> {
        let spec = layout_spec(spec)?;
        to_json(&self.inner.new_layout(spec).map_err(js_err)?)
    }

    #[wasm_bindgen(js_name = scriptedDemo)]
    pub fn scripted_demo(&mut self, color: usize) -> Result<String, JsValue> {
        to_json(&self.inner.scripted_demo(color).map_err(js_err)?)
    }

    #[wasm_bindgen(js_name = loadPolicy)]
    pub fn load_policy(&mut self, json: &str) -> Result<(), JsValue> {
        self.inner.load_policy(json).map_err(js_err)
    }

    #[wasm_bindgen(js_name = loadDynamics)]
    pub fn load_dynamics(&mut self, json: &str) -> Result<(), JsValue> {
        self.inner.load_dynamics(json).map_err(js_err)
    }

    #[wasm_bindgen(js_name = hasPolicy)]
    pub fn has_policy(&self) -> bool {
        self.inner.has_policy()
    }

    #[wasm_bindgen(js_name = hasDynamics)]
    pub fn has_dynamics(&self) -> bool {
        self.inner.has_dynamics()
    }

    /// `target < 0` runs the base policy.
    pub fn rollout(&mut self, target: i32, s: f64) -> Result<String, JsValue> {
        let target = usize::try_from(target).ok();
        to_json(&self.inner.rollout(target, s).map_err(js_err)?)
    }
}
