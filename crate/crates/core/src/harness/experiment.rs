use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::report::{BehaviorRow, BehaviorTable, SeedRates};
use super::{check_method, run_episode, EpisodeResult, Method, MethodSettings, Models};
use crate::baselines::RankConfig;
use crate::blockworld::{generate_demo, reset, Dataset, EnvState, LayoutSpec, Observation, WorldConfig, N_COLORS};
use crate::diffusion::{DenoiserParams, NoiseSchedule, SampleConfig, ScheduleConfig};
use crate::dynamics::DynamicsParams;
use crate::error::{Error, Result};
use crate::guidance::{GuidanceConfig, GuidanceSet};
use crate::numerics::{Checkpoint, Rng, SplitMix64};

pub const EXPERIMENT_FORMAT: &str = "steerkit-exp-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentId {
    Steer,
    MultiObjective,
    Avoidance,
    Underrepresented,
    NoiseAblation,
    GridSearch,
}

/// Where guidance conditions come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceSource {
    /// Dataset directory supplying terminal observations.
    pub data: Option<PathBuf>,
    pub positive_colors: Vec<usize>,
    pub negative_colors: Vec<usize>,
    /// Conditions drawn per listed color.
    pub n_conditions: usize,
    /// A guidance file; overrides the color-based construction.
    pub file: Option<PathBuf>,
    pub seed: u64,
}

impl Default for GuidanceSource {
    fn default() -> Self {
        Self {
            data: None,
            positive_colors: Vec::new(),
            negative_colors: Vec::new(),
            n_conditions: 20,
            file: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelPaths {
    pub policy: Option<PathBuf>,
    pub goal_policy: Option<PathBuf>,
    pub dynamics: Option<PathBuf>,
    /// Dynamics trained without noise exposure, for `noise_ablation`.
    pub dynamics_ablation: Option<PathBuf>,
    /// Policies keyed by a retention label, for `underrepresented`.
    pub retention_policies: BTreeMap<String, PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub s: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            s: vec![0.5, 1.0, 1.5, 2.0, 3.0],
            sigma: vec![10.0, 30.0, 40.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub experiment: ExperimentId,
    pub methods: Vec<Method>,
    pub layout_spec: LayoutSpec,
    pub n_episodes: usize,
    pub horizon: usize,
    pub seeds: Vec<u64>,
    pub guidance: GuidanceSource,
    pub guidance_config: GuidanceConfig,
    pub rank: RankConfig,
    pub cfg_w: f64,
    pub sample: SampleConfig,
    pub models: ModelPaths,
    pub grid: GridSpec,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            experiment: ExperimentId::Steer,
            methods: vec![Method::Base, Method::DynaGuide],
            layout_spec: LayoutSpec::Random,
            n_episodes: 40,
            horizon: WorldConfig::default().horizon,
            seeds: vec![0, 1, 2, 3, 4],
            guidance: GuidanceSource::default(),
            guidance_config: GuidanceConfig::default(),
            rank: RankConfig::default(),
            cfg_w: 1.0,
            sample: SampleConfig::default(),
            models: ModelPaths::default(),
            grid: GridSpec::default(),
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("experiment needs at least one seed".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(Error::Config("experiment seeds must be distinct".into()));
        }
        if self.methods.is_empty() && self.experiment != ExperimentId::GridSearch {
            return Err(Error::Config("experiment lists no methods".into()));
        }
        self.sample.validate()
    }

    pub fn settings(&self) -> MethodSettings {
        MethodSettings {
            guidance: self.guidance_config,
            rank: self.rank,
            cfg_w: self.cfg_w,
            sample: self.sample,
            horizon: self.horizon,
        }
    }

    /// Every path the spec references, for the existence check at run start.
    fn referenced_paths(&self) -> Vec<&Path> {
        let m = &self.models;
        let mut v: Vec<&Path> = [&m.policy, &m.goal_policy, &m.dynamics, &m.dynamics_ablation, &self.guidance.data, &self.guidance.file]
            .into_iter()
            .filter_map(|p| p.as_deref())
            .collect();
        v.extend(m.retention_policies.values().map(PathBuf::as_path));
        v
    }

    /// Rewrites relative paths against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(x) = p {
                if x.is_relative() {
                    *x = base.join(&*x);
                }
            }
        };
        fix(&mut self.models.policy);
        fix(&mut self.models.goal_policy);
        fix(&mut self.models.dynamics);
        fix(&mut self.models.dynamics_ablation);
        fix(&mut self.guidance.data);
        fix(&mut self.guidance.file);
        for p in self.models.retention_policies.values_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

/// Builds the guidance set described by `src`.
pub fn build_guidance(src: &GuidanceSource, dataset: Option<&Dataset>) -> Result<GuidanceSet> {
    if let Some(file) = &src.file {
        return GuidanceSet::load(file);
    }
    let mut rng = Rng::new(src.seed);
    let mut gset = GuidanceSet {
        target_colors: src.positive_colors.clone(),
        avoid_colors: src.negative_colors.clone(),
        ..Default::default()
    };
    if let Some(c) = src.positive_colors.iter().chain(&src.negative_colors).find(|&&c| c >= N_COLORS) {
        return Err(Error::Config(format!("guidance color {c} out of range")));
    }
    if let Some(ds) = dataset {
        for &c in &src.positive_colors {
            gset.positives.extend(GuidanceSet::terminal_observations(ds, c, src.n_conditions, &mut rng));
        }
        for &c in &src.negative_colors {
            gset.negatives.extend(GuidanceSet::terminal_observations(ds, c, src.n_conditions, &mut rng));
        }
    }
    gset.target_point = mean_agent(&gset.positives);
    Ok(gset)
}

/// Average final agent position over the positives (the position-guidance target).
pub fn mean_agent(obs: &[Observation]) -> Option<[f64; 2]> {
    if obs.is_empty() {
        return None;
    }
    let n = obs.len() as f64;
    let s = obs.iter().fold([0.0, 0.0], |acc, o| [acc[0] + o.agent()[0], acc[1] + o.agent()[1]]);
    Some([s[0] / n, s[1] / n])
}

/// Terminal observation of a scripted demo to `target` from `state`: a goal
/// that is reachable in the current layout.
pub fn demo_goal(rng: &mut Rng, state: &EnvState, target: usize, world: &WorldConfig) -> Result<Observation> {
    Ok(generate_demo(rng, state, target, 0, world)?.terminal_observation)
}

/// A goal that pins only the target square: the other squares and the agent
/// are re-drawn from a fresh random layout.
pub fn underspecified_goal(rng: &mut Rng, state: &EnvState, target: usize, world: &WorldConfig) -> Result<Observation> {
    if target >= N_COLORS {
        return Err(Error::InvalidArgument(format!("target color {target} out of range")));
    }
    for _ in 0..1000 {
        let mut s = reset(rng, LayoutSpec::Random, world)?;
        s.layout.squares[target] = state.layout.squares[target];
        if s.layout.inside_arena() && !s.layout.any_overlap(world.square_gap) && s.layout.touched(s.agent).is_none() {
            return Ok(s.observe());
        }
    }
    Err(Error::InvalidArgument("could not place an underspecified goal".into()))
}

/// Seed for episode `episode` under experiment seed `seed`.
pub fn episode_seed(seed: u64, episode: usize) -> u64 {
    let mut sm = SplitMix64::new(seed ^ (episode as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    sm.next_u64()
}

/// One row of an experiment: a labelled method with its models and settings.
#[derive(Debug, Clone, Copy)]
pub struct Run<'a> {
    pub method: Method,
    pub models: Models<'a>,
    pub settings: MethodSettings,
}

/// Runs `n_episodes` for every seed. Episodes with equal (seed, index) start
/// from the same layout for every method.
pub fn run_seeds(
    run: &Run<'_>,
    gset: &GuidanceSet,
    layout_spec: LayoutSpec,
    world: &WorldConfig,
    seeds: &[u64],
    n_episodes: usize,
) -> Result<Vec<(u64, Vec<EpisodeResult>)>> {
    check_method(run.method, &run.models, gset, &run.settings)?;
    seeds
        .iter()
        .map(|&seed| {
            let eps = (0..n_episodes)
                .map(|e| {
                    let es = episode_seed(seed, e);
                    let mut rng = Rng::new(es);
                    let start = reset(&mut rng, layout_spec, world)?;
                    run_episode(run.method, &run.models, &start, gset, &run.settings, world, &mut rng, es)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((seed, eps))
        })
        .collect()
}

pub fn row_from(label: &str, results: &[(u64, Vec<EpisodeResult>)]) -> BehaviorRow {
    BehaviorRow::new(label, results.iter().map(|(s, e)| SeedRates::from_episodes(*s, e)).collect())
}

/// Loaded checkpoints for an experiment.
#[derive(Debug, Default)]
pub struct LoadedModels {
    pub policy: Option<DenoiserParams>,
    pub goal_policy: Option<DenoiserParams>,
    pub dynamics: Option<DynamicsParams>,
    pub dynamics_ablation: Option<DynamicsParams>,
    pub retention_policies: Vec<(String, DenoiserParams)>,
}

fn load_policy(p: &Option<PathBuf>) -> Result<Option<DenoiserParams>> {
    p.as_deref().map(|p| DenoiserParams::from_checkpoint(&Checkpoint::load(p)?)).transpose()
}

fn load_dynamics(p: &Option<PathBuf>) -> Result<Option<DynamicsParams>> {
    p.as_deref().map(|p| DynamicsParams::from_checkpoint(&Checkpoint::load(p)?)).transpose()
}

impl LoadedModels {
    pub fn load(paths: &ModelPaths) -> Result<Self> {
        Ok(Self {
            policy: load_policy(&paths.policy)?,
            goal_policy: load_policy(&paths.goal_policy)?,
            dynamics: load_dynamics(&paths.dynamics)?,
            dynamics_ablation: load_dynamics(&paths.dynamics_ablation)?,
            retention_policies: paths
                .retention_policies
                .iter()
                .map(|(k, p)| Ok((k.clone(), DenoiserParams::from_checkpoint(&Checkpoint::load(p)?)?)))
                .collect::<Result<_>>()?,
        })
    }

    pub fn models<'a>(&'a self, schedule: &'a NoiseSchedule) -> Models<'a> {
        Models {
            policy: self.policy.as_ref(),
            goal_policy: self.goal_policy.as_ref(),
            dynamics: self.dynamics.as_ref(),
            schedule,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutcome {
    pub table: BehaviorTable,
    /// Sub-runs that failed; the remaining rows are still reported.
    pub failures: Vec<String>,
    pub notes: Vec<String>,
}

/// Labelled runs implied by the experiment id.
pub fn expand_runs<'a>(spec: &ExperimentSpec, loaded: &'a LoadedModels, schedule: &'a NoiseSchedule) -> Vec<(String, Run<'a>)> {
    let base_models = loaded.models(schedule);
    let settings = spec.settings();
    let plain = |m: Method, models: Models<'a>, label: String| (label, Run { method: m, models, settings });
    match spec.experiment {
        ExperimentId::Steer | ExperimentId::MultiObjective | ExperimentId::Avoidance => {
            spec.methods.iter().map(|&m| plain(m, base_models, m.name().to_string())).collect()
        }
        ExperimentId::Underrepresented => {
            if loaded.retention_policies.is_empty() {
                return spec.methods.iter().map(|&m| plain(m, base_models, m.name().to_string())).collect();
            }
            let mut runs = Vec::new();
            for (label, policy) in &loaded.retention_policies {
                let models = Models {
                    policy: Some(policy),
                    ..base_models
                };
                for &m in &spec.methods {
                    runs.push(plain(m, models, format!("{}@{label}", m.name())));
                }
            }
            runs
        }
        ExperimentId::NoiseAblation => {
            let mut runs = Vec::new();
            for &m in &spec.methods {
                if m == Method::DynaGuide {
                    runs.push(plain(m, base_models, "dynaguide[aug]".into()));
                    let ablated = Models {
                        dynamics: loaded.dynamics_ablation.as_ref(),
                        ..base_models
                    };
                    runs.push(plain(m, ablated, "dynaguide[no_aug]".into()));
                } else {
                    runs.push(plain(m, base_models, m.name().to_string()));
                }
            }
            runs
        }
        ExperimentId::GridSearch => {
            let mut runs: Vec<_> = spec
                .methods
                .iter()
                .filter(|&&m| m != Method::DynaGuide)
                .map(|&m| plain(m, base_models, m.name().to_string()))
                .collect();
            for &s in &spec.grid.s {
                for &sigma in &spec.grid.sigma {
                    let mut st = settings;
                    st.guidance.s = s;
                    st.guidance.sigma = sigma;
                    runs.push((
                        format!("dynaguide s={s} sigma={sigma}"),
                        Run {
                            method: Method::DynaGuide,
                            models: base_models,
                            settings: st,
                        },
                    ));
                }
            }
            runs
        }
    }
}

/// Runs every row of `spec`. A failing row is recorded and skipped.
pub fn run_experiment(spec: &ExperimentSpec, world: &WorldConfig, schedule: &NoiseSchedule) -> Result<ExperimentOutcome> {
    spec.validate()?;
    for p in spec.referenced_paths() {
        if !p.exists() {
            return Err(Error::Config(format!("referenced file {} does not exist", p.display())));
        }
    }
    let loaded = LoadedModels::load(&spec.models)?;
    let dataset = spec.guidance.data.as_deref().map(Dataset::read).transpose()?;
    let gset = build_guidance(&spec.guidance, dataset.as_ref())?;
    let mut table = BehaviorTable::default();
    let mut failures = Vec::new();
    for (label, run) in expand_runs(spec, &loaded, schedule) {
        info!("running {label}");
        match run_seeds(&run, &gset, spec.layout_spec, world, &spec.seeds, spec.n_episodes) {
            Ok(results) => table.rows.push(row_from(&label, &results)),
            Err(e) => {
                warn!("{label} failed: {e}");
                failures.push(format!("{label}: {e}"));
            }
        }
    }
    let mut notes = Vec::new();
    if spec.experiment == ExperimentId::GridSearch {
        if let Some((label, score)) = best_grid_cell(&table, &gset) {
            notes.push(format!("best cell: {label} (target frequency {score:.3})"));
        }
    }
    Ok(ExperimentOutcome { table, failures, notes })
}

/// Grid row with the highest pooled frequency of the target colors (or the
/// lowest avoided-color frequency when only avoidance is given).
pub fn best_grid_cell(table: &BehaviorTable, gset: &GuidanceSet) -> Option<(String, f64)> {
    table
        .rows
        .iter()
        .filter(|r| r.method.starts_with("dynaguide s="))
        .map(|r| {
            let score = if gset.target_colors.is_empty() {
                1.0 - gset.avoid_colors.iter().map(|&c| r.pooled(c)).sum::<f64>()
            } else {
                gset.target_colors.iter().map(|&c| r.pooled(c)).sum::<f64>()
            };
            (r.method.clone(), score)
        })
        .fold(None, |best: Option<(String, f64)>, cur| match best {
            Some(b) if b.1 >= cur.1 => Some(b),
            _ => Some(cur),
        })
}

/// Top-level config document shared by every CLI subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConfigFile {
    pub format: String,
    pub world: WorldConfig,
    pub schedule: ScheduleConfig,
    pub data: DataGenConfig,
    pub policy_train: PolicyTrainSection,
    pub dynamics_train: DynamicsTrainSection,
    #[serde(flatten)]
    pub experiment: ExperimentSpec,
}

impl Default for ConfigFile {
    fn default() -> Self {
        Self {
            format: EXPERIMENT_FORMAT.into(),
            world: WorldConfig::default(),
            schedule: ScheduleConfig::default(),
            data: DataGenConfig::default(),
            policy_train: PolicyTrainSection::default(),
            dynamics_train: DynamicsTrainSection::default(),
            experiment: ExperimentSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataGenConfig {
    pub n_per_color: usize,
    pub layout_spec: LayoutSpec,
    /// Fraction kept per color name; missing colors keep everything.
    pub retention: BTreeMap<String, f64>,
}

impl Default for DataGenConfig {
    fn default() -> Self {
        Self {
            n_per_color: 100,
            layout_spec: LayoutSpec::Random,
            retention: BTreeMap::new(),
        }
    }
}

impl DataGenConfig {
    pub fn retention_array(&self) -> Result<[f64; N_COLORS]> {
        let mut r = [1.0; N_COLORS];
        for (name, &v) in &self.retention {
            let c = crate::blockworld::color_index(name).ok_or_else(|| Error::Config(format!("unknown color {name:?} in retention")))?;
            r[c] = v;
        }
        Ok(r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyTrainSection {
    /// Training data directory, relative to the config file.
    pub data: Option<PathBuf>,
    #[serde(flatten)]
    pub train: crate::diffusion::TrainConfig,
    pub goal_mode: crate::diffusion::GoalMode,
}

impl Default for PolicyTrainSection {
    fn default() -> Self {
        Self {
            data: None,
            train: Default::default(),
            goal_mode: crate::diffusion::GoalMode::None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DynamicsTrainSection {
    pub data: Option<PathBuf>,
    #[serde(flatten)]
    pub train: crate::dynamics::DynamicsTrainConfig,
}

impl ConfigFile {
    /// Parses a config and resolves its relative paths against the file's
    /// directory. Returns the raw JSON too, for the report's spec echo.
    pub fn load(path: &Path) -> Result<(Self, Value)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: Value = serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        let mut cfg: ConfigFile = serde_json::from_value(raw.clone()).map_err(|e| Error::json(path.display().to_string(), e))?;
        if cfg.format != EXPERIMENT_FORMAT {
            return Err(Error::Config(format!("{}: format must be {EXPERIMENT_FORMAT:?}, found {:?}", path.display(), cfg.format)));
        }
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.experiment.resolve_paths(base);
        for p in [&mut cfg.policy_train.data, &mut cfg.dynamics_train.data] {
            if let Some(x) = p {
                if x.is_relative() {
                    *x = base.join(&*x);
                }
            }
        }
        Ok((cfg, raw))
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.schedule)
    }
}
