use proptest::prelude::*;
use steerkit::blockworld::{build_dataset, reset, LayoutSpec, Observation, WorldConfig, N_COLORS};
use steerkit::diffusion::{
    ddim_step, forward_noise, predict_clean, sample_chunk, train_denoiser, DenoiserParams, GoalMode, NoiseSchedule, ScheduleConfig, TrainConfig,
};
use steerkit::numerics::{Rng, Tensor};

fn schedule_strategy() -> impl Strategy<Value = ScheduleConfig> {
    (10usize..=200, 1e-5f64..1e-3, 1e-3f64..2e-2, 1usize..=10).prop_map(|(k, b0, b1, n)| ScheduleConfig {
        train_steps: k,
        beta_start: b0 * k as f64 / 1000.0,
        beta_end: b1 * k as f64 / 1000.0,
        ddim_steps: n,
        ..Default::default()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn alpha_bar_strictly_decreasing_in_unit_interval(cfg in schedule_strategy()) {
        let s = NoiseSchedule::new(cfg).unwrap();
        prop_assert_eq!(s.alpha_bar(0), 1.0);
        for k in 1..=cfg.train_steps {
            let ab = s.alpha_bar(k);
            prop_assert!(ab > 0.0 && ab < 1.0);
            prop_assert!(ab < s.alpha_bar(k - 1));
        }
        let steps = s.inference_steps();
        prop_assert_eq!(steps.len(), cfg.ddim_steps);
        prop_assert!(steps.iter().all(|&k| (1..=cfg.train_steps).contains(&k)));
        prop_assert!(steps.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn ddim_inverts_forward_noise(seed in any::<u64>(), k in 1usize..=100) {
        let s = NoiseSchedule::default();
        let mut rng = Rng::new(seed);
        let a0 = rng.gaussian(&[32]);
        let eps = rng.gaussian(&[32]);
        let ak = forward_noise(&a0, k, &eps, &s).unwrap();
        let back = ddim_step(&ak, &eps, k, 0, &s).unwrap();
        for (x, y) in back.data().iter().zip(a0.data()) {
            prop_assert!((x - y).abs() < 1e-10);
        }
        let clean = predict_clean(&ak, &eps, k, &s).unwrap();
        for (x, y) in clean.data().iter().zip(a0.data()) {
            prop_assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_eps_is_pure_rescale(seed in any::<u64>(), k in 2usize..=100, frac in 0.0f64..1.0) {
        let s = NoiseSchedule::default();
        let k_next = ((k - 1) as f64 * frac) as usize;
        let a = Rng::new(seed).gaussian(&[8]);
        let out = ddim_step(&a, &Tensor::zeros(&[8]), k, k_next, &s).unwrap();
        let r = (s.alpha_bar(k_next) / s.alpha_bar(k)).sqrt();
        for (x, y) in out.data().iter().zip(a.data()) {
            prop_assert!((x - r * y).abs() < 1e-12 * (1.0 + r * y.abs()));
        }
    }
}

#[test]
fn forward_noise_variance_matches_schedule() {
    let s = NoiseSchedule::default();
    let mut rng = Rng::new(11);
    let a0 = Tensor::zeros(&[32]);
    for k in [1, 10, 50, 100] {
        let n = 10_000;
        let mean_sq = (0..n)
            .map(|_| forward_noise(&a0, k, &rng.gaussian(&[32]), &s).unwrap().data().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            / n as f64;
        let expect = (1.0 - s.alpha_bar(k)) * 32.0;
        assert!((mean_sq / expect - 1.0).abs() < 0.03, "k={k}: {mean_sq} vs {expect}");
    }
}

#[test]
fn level_out_of_range_rejected() {
    let s = NoiseSchedule::default();
    let a = Tensor::zeros(&[4]);
    assert!(forward_noise(&a, 101, &a, &s).is_err());
    assert!(ddim_step(&a, &a, 101, 0, &s).is_err());
}

#[test]
fn unguided_sampling_is_reproducible() {
    let p = DenoiserParams::init(16, &[32, 32], false, 0.05, &mut Rng::new(1));
    let obs = reset(&mut Rng::new(2), LayoutSpec::Random, &WorldConfig::default()).unwrap().observe();
    let s = NoiseSchedule::default();
    let a = sample_chunk(&p, &obs, &mut Rng::new(3), &s, None).unwrap();
    let b = sample_chunk(&p, &obs, &mut Rng::new(3), &s, None).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 16);
}

#[test]
fn unconditional_policy_ignores_goal_content() {
    let p = DenoiserParams::init(16, &[32], false, 0.05, &mut Rng::new(4));
    let obs = reset(&mut Rng::new(5), LayoutSpec::Random, &WorldConfig::default()).unwrap().observe();
    let a = Rng::new(6).gaussian(&[32]);
    let goal = Observation([0.7; 26]);
    assert_eq!(p.predict_eps(&obs, None, &a, 40).unwrap(), p.predict_eps(&obs, Some(&goal), &a, 40).unwrap());
}

#[test]
fn goal_policy_accepts_zero_goal() {
    let p = DenoiserParams::init(16, &[32], true, 0.05, &mut Rng::new(7));
    let obs = Observation::zeros();
    let eps = p.predict_eps(&obs, Some(&Observation::zeros()), &Rng::new(8).gaussian(&[32]), 10).unwrap();
    assert_eq!(eps.len(), 32);
    assert!(eps.is_finite());
}

#[test]
fn training_halves_the_loss() {
    let world = WorldConfig::default();
    let data = build_dataset(21, 100, LayoutSpec::Random, [1.0; N_COLORS], &world).unwrap();
    let cfg = TrainConfig::default();
    assert_eq!(cfg.epochs, 30);
    let (_, curve) = train_denoiser(&data, &NoiseSchedule::default(), &mut Rng::new(22), &cfg, 16, GoalMode::None).unwrap();
    assert!(curve[29] < 0.5 * curve[0], "epoch 1 {} epoch 30 {}", curve[0], curve[29]);
}
