use serde::{Deserialize, Serialize};

use super::{EnvState, Layout, WorldConfig, N_COLORS};
use crate::error::{Error, Result};
use crate::numerics::Rng;

const MAX_ATTEMPTS: usize = 10_000;
const CLUSTER_RADIUS: f64 = 0.15;
pub(crate) const BLUE: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutSpec {
    /// Squares anywhere, non-overlapping.
    Random,
    /// One square per quadrant, agent near the middle.
    EarlyDecision,
    /// All square centers inside one small disc.
    LateDecision,
    /// Blue across the arena from the agent, the others in between.
    FurthestCube,
}

impl LayoutSpec {
    pub fn name(self) -> &'static str {
        match self {
            LayoutSpec::Random => "random",
            LayoutSpec::EarlyDecision => "early_decision",
            LayoutSpec::LateDecision => "late_decision",
            LayoutSpec::FurthestCube => "furthest_cube",
        }
    }

    /// Whether `state` satisfies this spec's placement rule.
    pub fn holds(self, state: &EnvState) -> bool {
        let l = &state.layout;
        let base = l.inside_arena()
            && !l.any_overlap(0.0)
            && l.touched(state.agent).is_none();
        if !base {
            return false;
        }
        match self {
            LayoutSpec::Random => true,
            LayoutSpec::EarlyDecision => {
                let mut seen = [0usize; 4];
                for s in &l.squares {
                    let q = usize::from(s.center[0] >= 0.5) + 2 * usize::from(s.center[1] >= 0.5);
                    seen[q] += 1;
                }
                seen == [1; 4]
            }
            LayoutSpec::LateDecision => l.squares.iter().all(|a| {
                l.squares
                    .iter()
                    .all(|b| (a.center[0] - b.center[0]).hypot(a.center[1] - b.center[1]) <= 2.0 * CLUSTER_RADIUS)
            }),
            LayoutSpec::FurthestCube => {
                let d = |c: usize| {
                    let s = &l.squares[c];
                    (s.center[0] - state.agent[0]).hypot(s.center[1] - state.agent[1])
                };
                let blue = d(BLUE);
                let to_blue = [l.squares[BLUE].center[0] - state.agent[0], l.squares[BLUE].center[1] - state.agent[1]];
                (0..N_COLORS).filter(|&c| c != BLUE).all(|c| {
                    let s = &l.squares[c];
                    let proj = ((s.center[0] - state.agent[0]) * to_blue[0] + (s.center[1] - state.agent[1]) * to_blue[1]) / blue;
                    d(c) < blue && proj > 0.0 && proj < blue
                }) && blue >= 0.6
            }
        }
    }
}

fn agent_clear(layout: &Layout, agent: [f64; 2], clearance: f64) -> bool {
    layout.squares.iter().all(|s| s.box_distance(agent) >= clearance)
}

fn sample_random(rng: &mut Rng, cfg: &WorldConfig) -> Option<EnvState> {
    let h = cfg.half_size;
    let centers = std::array::from_fn(|_| [rng.uniform_range(h, 1.0 - h), rng.uniform_range(h, 1.0 - h)]);
    let layout = Layout::from_centers(centers, h);
    if layout.any_overlap(cfg.square_gap) {
        return None;
    }
    let agent = [rng.uniform(), rng.uniform()];
    agent_clear(&layout, agent, cfg.start_clearance).then(|| EnvState::new(agent, layout))
}

fn sample_early(rng: &mut Rng, cfg: &WorldConfig) -> Option<EnvState> {
    let h = cfg.half_size;
    let mut quadrants = [0usize, 1, 2, 3];
    rng.shuffle(&mut quadrants);
    // Offsets are measured from the arena edge so squares stay clear of the middle.
    let centers = std::array::from_fn(|c| {
        let q = quadrants[c];
        let mut inset = || rng.uniform_range(h + 0.02, 0.5 - h - 0.1);
        let (ux, uy) = (inset(), inset());
        [if q % 2 == 0 { ux } else { 1.0 - ux }, if q / 2 == 0 { uy } else { 1.0 - uy }]
    });
    let layout = Layout::from_centers(centers, h);
    let agent = [rng.uniform_range(0.42, 0.58), rng.uniform_range(0.42, 0.58)];
    (!layout.any_overlap(cfg.square_gap) && agent_clear(&layout, agent, cfg.start_clearance))
        .then(|| EnvState::new(agent, layout))
}

fn sample_late(rng: &mut Rng, cfg: &WorldConfig) -> Option<EnvState> {
    let h = cfg.half_size;
    let hub = [rng.uniform_range(0.25, 0.75), rng.uniform_range(0.25, 0.75)];
    let centers = std::array::from_fn(|_| {
        // Uniform in the disc of radius CLUSTER_RADIUS around the hub.
        let r = CLUSTER_RADIUS * rng.uniform().sqrt();
        let th = 2.0 * std::f64::consts::PI * rng.uniform();
        [hub[0] + r * th.cos(), hub[1] + r * th.sin()]
    });
    let layout = Layout::from_centers(centers, h);
    if !layout.inside_arena() || layout.any_overlap(0.01) {
        return None;
    }
    let agent = [rng.uniform(), rng.uniform()];
    let far = (agent[0] - hub[0]).hypot(agent[1] - hub[1]) >= 0.35;
    (far && agent_clear(&layout, agent, cfg.start_clearance)).then(|| EnvState::new(agent, layout))
}

fn sample_furthest(rng: &mut Rng, cfg: &WorldConfig) -> Option<EnvState> {
    let h = cfg.half_size;
    // Canonical frame: agent on the left, blue on the right; then rotate.
    let agent = [rng.uniform_range(0.04, 0.12), rng.uniform_range(0.3, 0.7)];
    let mut centers = [[0.0; 2]; N_COLORS];
    centers[BLUE] = [rng.uniform_range(0.86, 0.95), rng.uniform_range(0.3, 0.7)];
    let mut others: Vec<usize> = (0..N_COLORS).filter(|&c| c != BLUE).collect();
    rng.shuffle(&mut others);
    for (i, &c) in others.iter().enumerate() {
        let band = 0.2 + 0.2 * i as f64;
        centers[c] = [rng.uniform_range(0.35, 0.65), rng.uniform_range(band, band + 0.2)];
    }
    let rot = rng.below(4);
    let rotate = |p: [f64; 2]| match rot {
        0 => p,
        1 => [1.0 - p[1], p[0]],
        2 => [1.0 - p[0], 1.0 - p[1]],
        _ => [p[1], 1.0 - p[0]],
    };
    let layout = Layout::from_centers(centers.map(rotate), h);
    let agent = rotate(agent);
    let state = EnvState::new(agent, layout);
    (!layout.any_overlap(cfg.square_gap)
        && agent_clear(&layout, agent, cfg.start_clearance)
        && LayoutSpec::FurthestCube.holds(&state))
    .then_some(state)
}

/// Samples an initial state satisfying `spec` by rejection.
pub fn reset(rng: &mut Rng, spec: LayoutSpec, cfg: &WorldConfig) -> Result<EnvState> {
    for _ in 0..MAX_ATTEMPTS {
        let s = match spec {
            LayoutSpec::Random => sample_random(rng, cfg),
            LayoutSpec::EarlyDecision => sample_early(rng, cfg),
            LayoutSpec::LateDecision => sample_late(rng, cfg),
            LayoutSpec::FurthestCube => sample_furthest(rng, cfg),
        };
        if let Some(s) = s {
            return Ok(s);
        }
    }
    Err(Error::LayoutExhausted {
        spec: format!("{} with {cfg:?}", spec.name()),
        attempts: MAX_ATTEMPTS,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const SPECS: [LayoutSpec; 4] = [
        LayoutSpec::Random,
        LayoutSpec::EarlyDecision,
        LayoutSpec::LateDecision,
        LayoutSpec::FurthestCube,
    ];

    #[test]
    fn every_spec_satisfies_its_predicate() {
        let cfg = WorldConfig::default();
        for spec in SPECS {
            let mut rng = Rng::new(17);
            for _ in 0..200 {
                let s = reset(&mut rng, spec, &cfg).unwrap();
                assert!(spec.holds(&s), "{spec:?}: {s:?}");
            }
        }
    }

    #[test]
    fn early_decision_one_square_per_quadrant() {
        let cfg = WorldConfig::default();
        let mut rng = Rng::new(2);
        for _ in 0..100 {
            let s = reset(&mut rng, LayoutSpec::EarlyDecision, &cfg).unwrap();
            let mut q: Vec<usize> = s
                .layout
                .squares
                .iter()
                .map(|sq| usize::from(sq.center[0] >= 0.5) + 2 * usize::from(sq.center[1] >= 0.5))
                .collect();
            q.sort();
            assert_eq!(q, vec![0, 1, 2, 3]);
        }
    }

    #[test]
    fn late_decision_within_cluster_disc() {
        let cfg = WorldConfig::default();
        let mut rng = Rng::new(3);
        for _ in 0..100 {
            let s = reset(&mut rng, LayoutSpec::LateDecision, &cfg).unwrap();
            for a in &s.layout.squares {
                for b in &s.layout.squares {
                    assert!((a.center[0] - b.center[0]).hypot(a.center[1] - b.center[1]) <= 0.3 + 1e-12);
                }
            }
        }
    }

    #[test]
    fn same_seed_same_state() {
        let cfg = WorldConfig::default();
        for spec in SPECS {
            let a = reset(&mut Rng::new(99), spec, &cfg).unwrap();
            let b = reset(&mut Rng::new(99), spec, &cfg).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn random_layouts_never_overlap() {
        let cfg = WorldConfig::default();
        let mut rng = Rng::new(1234);
        for _ in 0..1000 {
            let s = reset(&mut rng, LayoutSpec::Random, &cfg).unwrap();
            let sq = &s.layout.squares;
            for i in 0..N_COLORS {
                for j in i + 1..N_COLORS {
                    let reach = sq[i].half_size + sq[j].half_size;
                    let apart = (sq[i].center[0] - sq[j].center[0]).abs() >= reach
                        || (sq[i].center[1] - sq[j].center[1]).abs() >= reach;
                    assert!(apart);
                }
            }
            assert!(s.layout.touched(s.agent).is_none());
        }
    }

    #[test]
    fn impossible_config_reports_spec() {
        let cfg = WorldConfig {
            half_size: 0.3,
            ..WorldConfig::default()
        };
        let err = reset(&mut Rng::new(0), LayoutSpec::Random, &cfg).unwrap_err();
        assert!(err.to_string().contains("random"), "{err}");
    }
}
