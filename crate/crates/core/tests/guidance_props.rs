use proptest::prelude::*;
use steerkit::blockworld::{reset, LayoutSpec, Observation, WorldConfig, N_COLORS, OBS_DIM};
use steerkit::diffusion::{sample_chunk, DenoiserParams, NoiseSchedule};
use steerkit::dynamics::{DynamicsParams, DynamicsTrainConfig};
use steerkit::guidance::{
    guided_epsilon, guided_sample, metric_and_grad, metric_d, score, DistanceMode, GuidanceConfig, GuidanceSet, MetricMode, RepeatMode,
};
use steerkit::numerics::{Rng, Tape, Tensor};

const L: usize = 16;

fn models(seed: u64) -> (DenoiserParams, DynamicsParams) {
    let mut rng = Rng::new(seed);
    let policy = DenoiserParams::init(L, &[32, 32], false, 0.05, &mut rng);
    let dcfg = DynamicsTrainConfig {
        trunk: vec![32, 32],
        head_hidden: 16,
        ..Default::default()
    };
    let dynamics = DynamicsParams::init(L, &dcfg, 0.05, &mut rng);
    (policy, dynamics)
}

fn obs(seed: u64) -> Observation {
    reset(&mut Rng::new(seed), LayoutSpec::Random, &WorldConfig::default()).unwrap().observe()
}

fn random_obs(rng: &mut Rng) -> Observation {
    let mut o = [0.0; OBS_DIM];
    for x in o.iter_mut() {
        *x = rng.uniform();
    }
    Observation(o)
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn guided_epsilon_is_affine(seed in any::<u64>(), s in 0.0f64..10.0, t in 0.0f64..10.0, ab in 0.0f64..1.0) {
        let mut rng = Rng::new(seed);
        let eps = rng.gaussian(&[8]);
        let g = rng.gaussian(&[8]);
        let h = rng.gaussian(&[8]);
        let c = (1.0 - ab).sqrt();
        let out = guided_epsilon(&eps, &g, s, ab).unwrap();
        for i in 0..8 {
            prop_assert!(close(out.data()[i], eps.data()[i] - s * c * g.data()[i], 1e-14));
        }
        // Linear in the gradient and in the strength once the unguided prediction is removed.
        let sum = g.zip_map(&h, |x, y| x + y).unwrap();
        let lhs = guided_epsilon(&eps, &sum, s, ab).unwrap();
        let a = guided_epsilon(&eps, &g, s, ab).unwrap();
        let b = guided_epsilon(&eps, &h, s, ab).unwrap();
        let st = guided_epsilon(&eps, &g, s + t, ab).unwrap();
        let tt = guided_epsilon(&eps, &g, t, ab).unwrap();
        for i in 0..8 {
            let e = eps.data()[i];
            prop_assert!(close(lhs.data()[i] - e, (a.data()[i] - e) + (b.data()[i] - e), 1e-12));
            prop_assert!(close(st.data()[i] - e, (a.data()[i] - e) + (tt.data()[i] - e), 1e-12));
        }
    }

    #[test]
    fn latent_metric_antisymmetry_and_duplication(seed in any::<u64>(), sigma in 0.05f64..50.0, np in 1usize..5, nn in 0usize..5) {
        let mut rng = Rng::new(seed);
        let pos: Vec<_> = (0..np).map(|_| random_obs(&mut rng)).collect();
        let neg: Vec<_> = (0..nn).map(|_| random_obs(&mut rng)).collect();
        let z = random_obs(&mut rng);
        for mode in [DistanceMode::Euclidean, DistanceMode::Squared] {
            let d = metric_d(&GuidanceSet::latent(pos.clone(), neg.clone()), z.as_slice(), sigma, mode).unwrap();
            let swapped = metric_d(&GuidanceSet::latent(neg.clone(), pos.clone()), z.as_slice(), sigma, mode).unwrap();
            prop_assert!(close(d, -swapped, 1e-12));
            let doubled = [pos.clone(), pos.clone()].concat();
            let dup = metric_d(&GuidanceSet::latent(doubled, vec![]), z.as_slice(), sigma, mode).unwrap();
            let single = metric_d(&GuidanceSet::latent(pos.clone(), vec![]), z.as_slice(), sigma, mode).unwrap();
            prop_assert!(close(dup - single, 2f64.ln(), 1e-10));
        }
    }

    #[test]
    fn position_gradient_matches_closed_form(seed in any::<u64>(), tx in 0.0f64..1.0, ty in 0.0f64..1.0, scale in 0.01f64..0.2) {
        let mut rng = Rng::new(seed);
        let o = random_obs(&mut rng);
        let a = rng.gaussian(&[2 * L]);
        let gset = GuidanceSet { target_point: Some([tx, ty]), ..Default::default() };
        let cfg = GuidanceConfig { metric_mode: MetricMode::Position, ..Default::default() };
        let (value, grad) = metric_and_grad(None, &o, &a, &gset, &cfg, scale).unwrap();
        let mut end = o.agent();
        for d in a.data().chunks(2) {
            end[0] += scale * d[0];
            end[1] += scale * d[1];
        }
        let r = [end[0] - tx, end[1] - ty];
        prop_assert!(close(value, -(r[0] * r[0] + r[1] * r[1]), 1e-12));
        for (i, g) in grad.data().iter().enumerate() {
            prop_assert!(close(*g, -2.0 * scale * r[i % 2], 1e-12));
        }
    }
}

#[test]
fn classifier_metric_is_log_target_probability() {
    let (_, dynamics) = models(1);
    let mut rng = Rng::new(2);
    for trial in 0..50 {
        let o = obs(100 + trial);
        let a = rng.gaussian(&[2 * L]);
        let mut tape = Tape::new();
        let v = tape.leaf(&a, false);
        let logits_var = dynamics.predict_logits(&o, v, &mut tape).unwrap();
        let logits = tape.value(logits_var).data().to_vec();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        let p: Vec<f64> = logits.iter().map(|l| (l - m).exp() / z).collect();
        let targets: Vec<usize> = (0..N_COLORS).filter(|c| (trial as usize >> c) & 1 == 1).collect();
        if targets.is_empty() {
            continue;
        }
        let cfg = GuidanceConfig { metric_mode: MetricMode::Classifier, ..Default::default() };
        let gset = GuidanceSet { target_colors: targets.clone(), ..Default::default() };
        let got = score(Some(&dynamics), &o, &a, &gset, &cfg, 0.05).unwrap();
        let want = targets.iter().map(|&c| p[c]).sum::<f64>().ln();
        assert!(close(got, want, 1e-10), "{got} vs {want}");
        // Avoiding a color maximizes the mass on every other color.
        let avoid = GuidanceSet { avoid_colors: vec![targets[0]], ..Default::default() };
        let got = score(Some(&dynamics), &o, &a, &avoid, &cfg, 0.05).unwrap();
        assert!(close(got, (1.0 - p[targets[0]]).ln(), 1e-10));
    }
}

#[test]
fn zero_strength_repeats_do_not_change_the_sample() {
    let (policy, dynamics) = models(3);
    let sched = NoiseSchedule::default();
    let gset = GuidanceSet { target_colors: vec![0], ..Default::default() };
    for seed in 0..10 {
        let o = obs(seed);
        let base = sample_chunk(&policy, &o, &mut Rng::new(seed), &sched, None).unwrap();
        for m in [1, 4] {
            let cfg = GuidanceConfig { s: 0.0, m, metric_mode: MetricMode::Classifier, ..Default::default() };
            let g = guided_sample(&policy, Some(&dynamics), &o, &gset, &cfg, &mut Rng::new(seed), &sched).unwrap();
            assert_eq!(g.chunk, base, "seed {seed} M {m}");
            assert!(g.trace.is_empty());
        }
    }
}

#[test]
fn guided_sampling_is_seeded_and_traced() {
    let (policy, dynamics) = models(4);
    let sched = NoiseSchedule::default();
    let o = obs(9);
    let gset = GuidanceSet::latent(vec![obs(10), obs(11)], vec![obs(12)]);
    for repeat_mode in [RepeatMode::InPlace, RepeatMode::Renoise] {
        let cfg = GuidanceConfig { s: 2.0, sigma: 0.5, m: 3, repeat_mode, ..Default::default() };
        let a = guided_sample(&policy, Some(&dynamics), &o, &gset, &cfg, &mut Rng::new(5), &sched).unwrap();
        let b = guided_sample(&policy, Some(&dynamics), &o, &gset, &cfg, &mut Rng::new(5), &sched).unwrap();
        assert_eq!(a, b);
        let c = guided_sample(&policy, Some(&dynamics), &o, &gset, &cfg, &mut Rng::new(6), &sched).unwrap();
        assert_ne!(a.chunk, c.chunk);
        assert_eq!(a.trace.len(), sched.inference_steps().len());
        let ks: Vec<usize> = a.trace.iter().map(|t| t.k).collect();
        assert_eq!(ks, sched.inference_steps());
        assert_eq!(a.skipped, 0);
        assert_eq!(a.chunk.len(), L);
    }
}

#[test]
fn guidance_moves_the_metric_uphill() {
    let (policy, dynamics) = models(6);
    let sched = NoiseSchedule::default();
    let gset = GuidanceSet { target_point: Some([0.9, 0.9]), ..Default::default() };
    let mut gains = 0;
    for seed in 0..20 {
        let o = obs(200 + seed);
        let plain = GuidanceConfig { s: 0.0, m: 1, metric_mode: MetricMode::Position, ..Default::default() };
        let strong = GuidanceConfig { s: 20.0, ..plain };
        let a = guided_sample(&policy, Some(&dynamics), &o, &gset, &plain, &mut Rng::new(seed), &sched).unwrap();
        let b = guided_sample(&policy, Some(&dynamics), &o, &gset, &strong, &mut Rng::new(seed), &sched).unwrap();
        let da = score(None, &o, &a.model_chunk, &gset, &plain, 0.05).unwrap();
        let db = score(None, &o, &b.model_chunk, &gset, &plain, 0.05).unwrap();
        gains += usize::from(db > da);
    }
    assert!(gains >= 18, "{gains}/20");
}

#[test]
fn invalid_sets_are_rejected() {
    let (policy, dynamics) = models(7);
    let sched = NoiseSchedule::default();
    let o = obs(1);
    let cfg = GuidanceConfig { metric_mode: MetricMode::Classifier, ..Default::default() };
    let both = GuidanceSet { target_colors: vec![1], avoid_colors: vec![1], ..Default::default() };
    assert!(guided_sample(&policy, Some(&dynamics), &o, &both, &cfg, &mut Rng::new(0), &sched).is_err());
    let latent = GuidanceConfig::default();
    assert!(guided_sample(&policy, Some(&dynamics), &o, &GuidanceSet::default(), &latent, &mut Rng::new(0), &sched).is_err());
    assert!(guided_sample(&policy, None, &o, &GuidanceSet::latent(vec![o], vec![]), &latent, &mut Rng::new(0), &sched).is_err());
    let grad = Tensor::zeros(&[3]);
    assert!(guided_epsilon(&Tensor::zeros(&[4]), &grad, 1.0, 0.5).is_err());
}
