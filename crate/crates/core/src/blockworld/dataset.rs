use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{generate_demo, reset, LayoutSpec, Observation, Trajectory, WorldConfig, N_COLORS};
use crate::error::{Error, Result};
use crate::numerics::Rng;

pub const DATA_FORMAT: &str = "steerkit-data-v1";
pub const DATA_FILE: &str = "data.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub seed: u64,
    pub layout_spec: LayoutSpec,
    pub n_per_color: usize,
    pub retention: [f64; N_COLORS],
    pub counts: [usize; N_COLORS],
    pub world: WorldConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub trajectories: Vec<Trajectory>,
}

#[derive(Serialize, Deserialize)]
struct TrajectoryLine {
    obs: Vec<Vec<f64>>,
    act: Vec<[f64; 2]>,
    terminal_obs: Vec<f64>,
    label: Option<usize>,
    layout_seed: u64,
}

impl From<&Trajectory> for TrajectoryLine {
    fn from(t: &Trajectory) -> Self {
        Self {
            obs: t.observations.iter().map(|o| o.0.to_vec()).collect(),
            act: t.actions.clone(),
            terminal_obs: t.terminal_observation.0.to_vec(),
            label: t.label,
            layout_seed: t.layout_seed,
        }
    }
}

impl TryFrom<TrajectoryLine> for Trajectory {
    type Error = Error;

    fn try_from(l: TrajectoryLine) -> Result<Self> {
        if l.obs.len() != l.act.len() {
            return Err(Error::InvalidArgument(format!("{} observations for {} actions", l.obs.len(), l.act.len())));
        }
        if l.label.is_some_and(|c| c >= N_COLORS) {
            return Err(Error::InvalidArgument(format!("label {:?} out of range", l.label)));
        }
        Ok(Trajectory {
            observations: l.obs.iter().map(|o| Observation::from_slice(o)).collect::<Result<_>>()?,
            actions: l.act,
            terminal_observation: Observation::from_slice(&l.terminal_obs)?,
            label: l.label,
            layout_seed: l.layout_seed,
        })
    }
}

/// Generates `round(n_per_color * retention[c])` demos for each color `c`,
/// each on a freshly sampled layout.
pub fn build_dataset(
    seed: u64,
    n_per_color: usize,
    layout_spec: LayoutSpec,
    retention: [f64; N_COLORS],
    world: &WorldConfig,
) -> Result<Dataset> {
    if let Some(r) = retention.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(Error::InvalidArgument(format!("retention fraction {r} outside [0, 1]")));
    }
    let counts: [usize; N_COLORS] = std::array::from_fn(|c| (n_per_color as f64 * retention[c]).round() as usize);
    let mut rng = Rng::new(seed);
    let mut trajectories = Vec::with_capacity(counts.iter().sum());
    for (color, &count) in counts.iter().enumerate() {
        for _ in 0..count {
            let layout_seed = rng.next_u64();
            let mut episode_rng = Rng::new(layout_seed);
            let state = reset(&mut episode_rng, layout_spec, world)?;
            trajectories.push(generate_demo(&mut episode_rng, &state, color, layout_seed, world)?);
        }
    }
    Ok(Dataset {
        manifest: DatasetManifest {
            format: DATA_FORMAT.into(),
            seed,
            layout_spec,
            n_per_color,
            retention,
            counts,
            world: *world,
        },
        trajectories,
    })
}

impl Dataset {
    pub fn label_counts(&self) -> [usize; N_COLORS] {
        let mut c = [0; N_COLORS];
        for t in &self.trajectories {
            if let Some(l) = t.label {
                c[l] += 1;
            }
        }
        c
    }

    /// Writes `data.jsonl` and `manifest.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let data_path = dir.join(DATA_FILE);
        let file = File::create(&data_path).map_err(|e| Error::io(&data_path, e))?;
        let mut w = BufWriter::new(file);
        for t in &self.trajectories {
            let line = serde_json::to_string(&TrajectoryLine::from(t)).map_err(|e| Error::json("trajectory", e))?;
            writeln!(w, "{line}").map_err(|e| Error::io(&data_path, e))?;
        }
        w.flush().map_err(|e| Error::io(&data_path, e))?;
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self.manifest).map_err(|e| Error::json("manifest", e))?;
        std::fs::write(&manifest_path, text + "\n").map_err(|e| Error::io(&manifest_path, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::json(manifest_path.display().to_string(), e))?;
        if manifest.format != DATA_FORMAT {
            return Err(Error::InvalidArgument(format!("unknown dataset format {:?}", manifest.format)));
        }
        let data_path = dir.join(DATA_FILE);
        let file = File::open(&data_path).map_err(|e| Error::io(&data_path, e))?;
        let mut trajectories = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&data_path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: TrajectoryLine =
                serde_json::from_str(&line).map_err(|e| Error::json(format!("{}:{}", data_path.display(), i + 1), e))?;
            trajectories.push(parsed.try_into()?);
        }
        Ok(Self { manifest, trajectories })
    }
}

/// Replays a trajectory's actions from its first observation and returns
/// the color touched first, if any.
pub fn replay_label(t: &Trajectory, world: &WorldConfig) -> Result<Option<usize>> {
    let first = t.observations.first().unwrap_or(&t.terminal_observation);
    let mut s = first.to_state(world.half_size)?;
    for a in &t.actions {
        let (n, touched) = s.step(*a, world);
        if touched.is_some() {
            return Ok(touched);
        }
        s = n;
    }
    Ok(None)
}
