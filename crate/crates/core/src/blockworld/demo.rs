use super::{EnvState, Trajectory, WorldConfig};
use crate::error::{Error, Result};
use crate::numerics::Rng;

const MAX_DEMO_STEPS: usize = 500;
const MAX_RESAMPLES: usize = 1000;
const CURVE_SAMPLES: usize = 512;

/// Point at parameter `u` on the Bézier curve with the given control points
/// (de Casteljau).
pub fn bezier_point(ctrl: &[[f64; 2]], u: f64) -> [f64; 2] {
    let mut pts = ctrl.to_vec();
    while pts.len() > 1 {
        for i in 0..pts.len() - 1 {
            pts[i] = [
                (1.0 - u) * pts[i][0] + u * pts[i + 1][0],
                (1.0 - u) * pts[i][1] + u * pts[i + 1][1],
            ];
        }
        pts.pop();
    }
    pts[0]
}

/// Waypoints along the curve, evenly spaced in arc length, with every gap
/// at most `max_step`. The first and last waypoints are the curve endpoints.
pub fn discretize_curve(ctrl: &[[f64; 2]], max_step: f64) -> Vec<[f64; 2]> {
    let poly: Vec<[f64; 2]> = (0..=CURVE_SAMPLES)
        .map(|i| bezier_point(ctrl, i as f64 / CURVE_SAMPLES as f64))
        .collect();
    let mut cum = vec![0.0; poly.len()];
    for i in 1..poly.len() {
        cum[i] = cum[i - 1] + (poly[i][0] - poly[i - 1][0]).hypot(poly[i][1] - poly[i - 1][1]);
    }
    let total = *cum.last().unwrap();
    let n = ((total / max_step).ceil() as usize).max(1);
    let mut out = Vec::with_capacity(n + 1);
    out.push(poly[0]);
    let mut seg = 1;
    for k in 1..n {
        let target = total * k as f64 / n as f64;
        while cum[seg] < target {
            seg += 1;
        }
        let span = cum[seg] - cum[seg - 1];
        let f = if span > 0.0 { (target - cum[seg - 1]) / span } else { 0.0 };
        out.push([
            poly[seg - 1][0] + f * (poly[seg][0] - poly[seg - 1][0]),
            poly[seg - 1][1] + f * (poly[seg][1] - poly[seg - 1][1]),
        ]);
    }
    out.push(*poly.last().unwrap());
    out
}

/// Scripted demonstration from `state` to the square of `target_color`
/// along a random Bézier curve with 0-2 intermediate control points.
///
/// Curves that touch another square first, or need more than 500 steps,
/// are resampled.
pub fn generate_demo(rng: &mut Rng, state: &EnvState, target_color: usize, layout_seed: u64, cfg: &WorldConfig) -> Result<Trajectory> {
    let target = state
        .layout
        .squares
        .get(target_color)
        .ok_or_else(|| Error::InvalidArgument(format!("no square with color {target_color}")))?;
    for _ in 0..MAX_RESAMPLES {
        let h = target.half_size;
        let end = [
            target.center[0] + rng.uniform_range(-h, h),
            target.center[1] + rng.uniform_range(-h, h),
        ];
        let n_ctrl = rng.below(3);
        let mut ctrl = vec![state.agent];
        for _ in 0..n_ctrl {
            ctrl.push([rng.uniform(), rng.uniform()]);
        }
        ctrl.push(end);
        let waypoints = discretize_curve(&ctrl, cfg.delta_max);
        if waypoints.len() - 1 > MAX_DEMO_STEPS {
            continue;
        }
        if let Some(traj) = follow(state, &waypoints, target_color, layout_seed, cfg) {
            return Ok(traj);
        }
    }
    Err(Error::InvalidArgument(format!(
        "could not reach color {target_color} without touching another square"
    )))
}

fn follow(state: &EnvState, waypoints: &[[f64; 2]], target: usize, layout_seed: u64, cfg: &WorldConfig) -> Option<Trajectory> {
    let mut s = *state;
    let mut observations = Vec::new();
    let mut actions = Vec::new();
    for w in waypoints.windows(2) {
        let delta = [w[1][0] - w[0][0], w[1][1] - w[0][1]];
        observations.push(s.observe());
        actions.push(delta);
        let (next, touched) = s.step(delta, cfg);
        s = next;
        if let Some(c) = touched {
            return (c == target).then(|| Trajectory {
                observations,
                actions,
                terminal_observation: s.observe(),
                label: Some(c),
                layout_seed,
            });
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blockworld::{reset, LayoutSpec};

    #[test]
    fn straight_line_when_no_control_points() {
        let pts = discretize_curve(&[[0.1, 0.2], [0.7, 0.5]], 0.05);
        let d0 = [pts[1][0] - pts[0][0], pts[1][1] - pts[0][1]];
        for w in pts.windows(2) {
            let d = [w[1][0] - w[0][0], w[1][1] - w[0][1]];
            let cross = d0[0] * d[1] - d0[1] * d[0];
            assert!(cross.abs() < 1e-12);
        }
    }

    #[test]
    fn curve_endpoints_preserved() {
        let mut rng = Rng::new(4);
        for n in 0..3 {
            let mut ctrl = vec![[0.2, 0.3]];
            for _ in 0..n {
                ctrl.push([rng.uniform(), rng.uniform()]);
            }
            ctrl.push([0.8, 0.9]);
            let pts = discretize_curve(&ctrl, 0.05);
            assert_eq!(pts[0], [0.2, 0.3]);
            assert_eq!(*pts.last().unwrap(), [0.8, 0.9]);
            assert_eq!(bezier_point(&ctrl, 0.0), [0.2, 0.3]);
            assert_eq!(bezier_point(&ctrl, 1.0), [0.8, 0.9]);
        }
    }

    #[test]
    fn demos_respect_step_bound_and_replay_to_label() {
        let cfg = WorldConfig::default();
        let mut rng = Rng::new(77);
        for i in 0..200 {
            let state = reset(&mut rng, LayoutSpec::Random, &cfg).unwrap();
            let color = i % 4;
            let traj = generate_demo(&mut rng, &state, color, 0, &cfg).unwrap();
            assert_eq!(traj.label, Some(color));
            assert_eq!(traj.observations.len(), traj.actions.len());
            let mut s = state;
            let mut first_touch = None;
            for a in &traj.actions {
                assert!(a[0].hypot(a[1]) <= cfg.delta_max + 1e-12);
                assert!(first_touch.is_none(), "actions continue after a touch");
                let (n, t) = s.step(*a, &cfg);
                s = n;
                first_touch = t;
            }
            assert_eq!(first_touch, Some(color));
            assert_eq!(s.observe(), traj.terminal_observation);
            assert_eq!(traj.terminal_observation.slot_color(0), Some(color));
        }
    }

    #[test]
    fn missing_color_rejected() {
        let cfg = WorldConfig::default();
        let mut rng = Rng::new(1);
        let state = reset(&mut rng, LayoutSpec::Random, &cfg).unwrap();
        assert!(generate_demo(&mut rng, &state, 7, 0, &cfg).is_err());
    }
}
