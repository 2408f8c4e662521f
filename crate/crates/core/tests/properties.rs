use approx::assert_relative_eq;
use flowopd::coldstart::{merge_models, MergeSpec};
use flowopd::config::ExperimentConfig;
use flowopd::flow::{kl_means, kl_velocities, mean_from_velocity, sigma, weight_w};
use flowopd::numgrad::init_params;
use flowopd::rewards::{group_advantage, reward_ring};
use flowopd::{ArchSpec, Condition, NoiseSchedule, ParamVector, TaskWorld};
use proptest::prelude::*;

fn arch() -> ArchSpec {
    ArchSpec::new(3, vec![4, 3], 2).unwrap()
}

fn params(seed: u64) -> ParamVector {
    init_params(&arch(), seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn advantages_are_centred(rewards in prop::collection::vec(-5.0f64..5.0, 2..32)) {
        let adv = group_advantage(&rewards).unwrap();
        let mean = adv.iter().sum::<f64>() / adv.len() as f64;
        prop_assert!(mean.abs() < 1e-9);
    }

    #[test]
    fn advantages_ignore_affine_rescaling(
        rewards in prop::collection::vec(0.0f64..1.0, 2..32),
        scale in 0.1f64..10.0,
        shift in -3.0f64..3.0,
    ) {
        let spread = rewards.iter().cloned().fold(f64::MIN, f64::max) - rewards.iter().cloned().fold(f64::MAX, f64::min);
        prop_assume!(spread > 1e-2);
        let a = group_advantage(&rewards).unwrap();
        let moved: Vec<f64> = rewards.iter().map(|r| scale * r + shift).collect();
        let b = group_advantage(&moved).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-8);
        }
    }

    #[test]
    fn merge_ignores_input_order(seeds in prop::collection::vec(any::<u64>(), 2..5), rot in 0usize..4) {
        let inputs: Vec<ParamVector> = seeds.iter().map(|s| params(*s)).collect();
        let mut rotated = inputs.clone();
        rotated.rotate_left(rot % inputs.len());
        let a = merge_models(&MergeSpec::uniform(inputs)).unwrap();
        let b = merge_models(&MergeSpec::uniform(rotated)).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn merge_is_affine_in_the_weights(s1 in any::<u64>(), s2 in any::<u64>(), w in 0.0f64..1.0) {
        let (a, b) = (params(s1), params(s2));
        let merged = merge_models(&MergeSpec { inputs: vec![a.clone(), b.clone()], weights: vec![w, 1.0 - w] }).unwrap();
        for ((m, x), y) in merged.values().iter().zip(a.values()).zip(b.values()) {
            prop_assert!((m - (w * x + (1.0 - w) * y)).abs() < 1e-12);
        }
    }

    #[test]
    fn ring_reward_is_rotation_invariant(x in -6.0f64..6.0, y in -6.0f64..6.0, angle in 0.0f64..std::f64::consts::TAU) {
        let world = TaskWorld::default();
        let c = Condition::ring(world.ring_radii[0]).unwrap();
        let (s, co) = angle.sin_cos();
        let turned = [co * x - s * y, s * x + co * y];
        let a = reward_ring(&[x, y], &c, &world).unwrap();
        let b = reward_ring(&turned, &c, &world).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn velocity_form_matches_mean_form(
        t in 0.05f64..0.95,
        v1 in prop::collection::vec(-3.0f64..3.0, 2),
        v2 in prop::collection::vec(-3.0f64..3.0, 2),
        x in prop::collection::vec(-3.0f64..3.0, 2),
    ) {
        let s = sigma(t, &NoiseSchedule::default()).unwrap();
        let dt = 0.02;
        let m1 = mean_from_velocity(&x, &v1, t, dt, s).unwrap();
        let m2 = mean_from_velocity(&x, &v2, t, dt, s).unwrap();
        let by_means = kl_means(&m1, &m2, s, dt);
        let by_vel = kl_velocities(&v1, &v2, t, s, dt);
        prop_assert!((by_means - by_vel).abs() <= 1e-9 * (1.0 + by_means));
        prop_assert!(weight_w(t, s, dt) > 0.0);
    }

    #[test]
    fn checkpoints_round_trip(seed in any::<u64>(), h1 in 1usize..9, h2 in 1usize..9) {
        let arch = ArchSpec::new(5, vec![h1, h2], 2).unwrap();
        let p = init_params(&arch, seed).unwrap();
        let mut bytes = Vec::new();
        p.write_to(&mut bytes).unwrap();
        let back = ParamVector::read_from(bytes.as_slice()).unwrap();
        prop_assert_eq!(back, p);
    }

    #[test]
    fn config_round_trips_through_toml(seed in 0..=i64::MAX as u64, lambda in 0.0f64..1.0, g in 2usize..64) {
        let mut cfg = ExperimentConfig { seed, ..ExperimentConfig::default() };
        cfg.opd.lambda = lambda;
        cfg.grpo.group_size = g;
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}

#[test]
fn seeds_beyond_toml_range_are_rejected() {
    let cfg = ExperimentConfig {
        seed: 1 << 63,
        ..ExperimentConfig::default()
    };
    assert!(cfg.validate().is_err());
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let mut bytes = Vec::new();
    params(1).write_to(&mut bytes).unwrap();
    bytes.pop();
    assert!(ParamVector::read_from(bytes.as_slice()).is_err());
}

#[test]
fn constant_rewards_give_zero_advantage() {
    let adv = group_advantage(&[0.3; 8]).unwrap();
    for a in adv {
        assert_relative_eq!(a, 0.0);
    }
}
