use std::collections::BTreeMap;

use flowopd::coldstart::{sft_train, SftDataset};
use flowopd::config::{ExperimentConfig, LabContext, SftConfig};
use flowopd::grpo::{gradient_interference, grpo_gradient, sample_scored_groups, Interference};
use flowopd::numgrad::init_params;
use flowopd::opd::{flow_opd_loss, opd_loss_on_states, visited_states, TeacherEnsemble};
use flowopd::optim::{Optimizer, OptimizerConfig};
use flowopd::rewards::RewardSpec;
use flowopd::rollout::{derive_seed, sample_group};
use flowopd::{ArchSpec, Condition, ParamVector, TaskId, TimeGrid};

fn ctx() -> LabContext {
    ExperimentConfig::default().context()
}

fn model(seed: u64) -> ParamVector {
    init_params(&ExperimentConfig::default().arch, seed).unwrap()
}

fn mean_reward(params: &ParamVector, conditions: &[Condition], task: TaskId, ctx: &LabContext, seed: u64) -> f64 {
    let groups = sample_scored_groups(params, conditions, &RewardSpec::single(task), 32, ctx, seed).unwrap();
    let n: usize = groups.iter().map(|g| g.len()).sum();
    groups.iter().flat_map(|g| g.rewards.clone().unwrap()).sum::<f64>() / n as f64
}

// A small step along the estimated gradient should raise the expected
// reward, checked with common random numbers.
#[test]
fn grpo_step_raises_reward() {
    let ctx = ctx();
    let conditions = ctx.world.conditions(TaskId::Region);
    let mut wins = 0;
    for trial in 0..10u64 {
        let params = model(trial);
        let groups = sample_scored_groups(
            &params,
            &conditions,
            &RewardSpec::single(TaskId::Region),
            64,
            &ctx,
            derive_seed(7, trial),
        )
        .unwrap();
        let grad = grpo_gradient(&params, &groups, 0.0).unwrap();
        let mut stepped = params.clone();
        stepped.add_scaled(&grad, 0.05 / grad.norm()).unwrap();
        let probe = derive_seed(11, trial);
        if mean_reward(&stepped, &conditions, TaskId::Region, &ctx, probe)
            > mean_reward(&params, &conditions, TaskId::Region, &ctx, probe)
        {
            wins += 1;
        }
    }
    assert!(wins >= 8, "reward rose in only {wins} of 10 trials");
}

#[test]
fn negated_rewards_flip_the_gradient() {
    let ctx = ctx();
    let params = model(3);
    let conditions = ctx.world.conditions(TaskId::Ring);
    let groups = sample_scored_groups(&params, &conditions, &RewardSpec::single(TaskId::Ring), 8, &ctx, 5).unwrap();
    let mut flipped = groups.clone();
    for g in &mut flipped {
        g.rewards = g.rewards.take().map(|r| r.into_iter().map(|v| -v).collect());
    }
    let a = grpo_gradient(&params, &groups, 0.0).unwrap();
    let b = grpo_gradient(&params, &flipped, 0.0).unwrap();
    let cos = Interference::between(&a, &b).cosine.unwrap();
    assert!((cos + 1.0).abs() < 1e-12, "cosine {cos}");
}

#[test]
fn self_interference_is_positive() {
    let ctx = ctx();
    let params = model(4);
    let probe = gradient_interference(&params, TaskId::Quality, TaskId::Quality, 16, 8, &ctx, 9).unwrap();
    assert!((probe.cosine.unwrap() - 1.0).abs() < 1e-12);
}

/// Input (x₀, x₁, t, task one-hot) → 4 tanh units → 2 outputs, wired so that each output
/// coordinate only ever sees its own coordinate and its own two units.
fn decoupled(seed: u64) -> ParamVector {
    let arch = ArchSpec::new(7, vec![4], 2).unwrap();
    let base = init_params(&arch, seed).unwrap();
    let mut v = base.values().to_vec();
    // hidden weights: row r, column c at r * 7 + c
    for r in 0..4 {
        let other = if r < 2 { 1 } else { 0 };
        v[r * 7 + other] = 0.0;
    }
    // output weights start after 28 + 4 hidden values: row o, column r
    for o in 0..2 {
        for r in 0..4 {
            if (r < 2) != (o == 0) {
                v[32 + o * 4 + r] = 0.0;
            }
        }
    }
    ParamVector::from_values(arch, v).unwrap()
}

// Rewards on independent coordinates of a decoupled model give gradients
// that are orthogonal in expectation.
#[test]
fn orthogonal_rewards_do_not_interfere() {
    let ctx = ctx();
    let params = decoupled(2);
    let c = Condition::quality();
    let bump = |v: f64| (-(v - 1.0) * (v - 1.0)).exp();
    let probe = |seed: u64, coord: usize| {
        let groups: Vec<_> = (0..512u64)
            .map(|j| {
                let mut g =
                    sample_group(&params, &c, 16, &ctx.train_grid, &ctx.schedule, derive_seed(seed, j)).unwrap();
                g.rewards = Some(g.final_samples().map(|x| bump(x[coord])).collect());
                g
            })
            .collect();
        grpo_gradient(&params, &groups, 0.0).unwrap()
    };
    let a = probe(1, 0);
    let b = probe(1, 1);
    let a_again = probe(2, 0);
    let cross = Interference::between(&a, &b).cosine.unwrap();
    let same = Interference::between(&a, &a_again).cosine.unwrap();
    assert!(cross.abs() < 0.1, "cross-coordinate cosine {cross}");
    assert!(same > 0.5, "same-reward cosine {same}");
}

#[test]
fn identical_student_has_zero_distillation_loss() {
    let ctx = ctx();
    let teacher = model(5);
    let teachers: BTreeMap<TaskId, ParamVector> = TaskId::ALL.iter().map(|t| (*t, teacher.clone())).collect();
    let ens = TeacherEnsemble::from_teachers(teachers, teacher.clone()).unwrap();
    let groups: Vec<_> = ctx
        .world
        .all_conditions()
        .iter()
        .enumerate()
        .map(|(j, c)| sample_group(&teacher, c, 4, &ctx.train_grid, &ctx.schedule, j as u64).unwrap())
        .collect();
    let (loss, grad) = flow_opd_loss(&teacher, &ens, &groups).unwrap();
    assert_eq!(loss, 0.0);
    assert_eq!(grad.norm(), 0.0);
}

#[test]
fn distillation_pulls_student_to_identical_experts() {
    let ctx = ctx();
    let teacher = model(6);
    let teachers: BTreeMap<TaskId, ParamVector> = TaskId::ALL.iter().map(|t| (*t, teacher.clone())).collect();
    let ens = TeacherEnsemble::from_teachers(teachers, teacher.clone()).unwrap();
    let mut student = model(7);
    let conditions = ctx.world.all_conditions();
    let groups: Vec<_> = conditions
        .iter()
        .enumerate()
        .map(|(j, c)| sample_group(&student, c, 8, &ctx.train_grid, &ctx.schedule, j as u64).unwrap())
        .collect();
    let states = visited_states(&groups).unwrap();
    let start = opd_loss_on_states(&student, &ens, &states).unwrap().0;
    let mut opt = Optimizer::new(OptimizerConfig::adam(1e-2), student.len());
    for _ in 0..300 {
        let (_, grad) = opd_loss_on_states(&student, &ens, &states).unwrap();
        opt.descend(&mut student, &grad).unwrap();
    }
    let end = opd_loss_on_states(&student, &ens, &states).unwrap().0;
    assert!(end < 0.05 * start, "loss {start} -> {end}");
}

#[test]
fn sft_collapses_onto_a_point_mass() {
    let c = Condition::quality();
    let target = vec![2.0, -1.0];
    let data = SftDataset {
        records: (0..64).map(|_| (c.clone(), target.clone())).collect(),
    };
    let cfg = SftConfig {
        per_condition: 64,
        iterations: 400,
        batch_size: 32,
        optimizer: OptimizerConfig::adam(1e-2),
        heldout_fraction: 0.25,
    };
    let grid = TimeGrid::training();
    let (params, log) = sft_train(&model(8), &data, &cfg, &grid, 3).unwrap();
    let held: Vec<f64> = log.column("heldout_loss").into_iter().flatten().collect();
    assert!(held.last().unwrap() < &(0.2 * held[0]));

    // most SDE samples from noise should now end near the target
    let ctx = ctx();
    let mut hits = 0;
    for s in 0..32u64 {
        let traj = flowopd::rollout::sample_trajectory(&params, &c, &ctx.eval_grid, &ctx.schedule, s).unwrap();
        let x = traj.final_sample();
        if ((x[0] - target[0]).powi(2) + (x[1] - target[1]).powi(2)).sqrt() < 1.0 {
            hits += 1;
        }
    }
    assert!(hits >= 24, "{hits} of 32 samples landed near the point mass");
}
