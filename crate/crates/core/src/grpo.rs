//! Group-relative policy gradients on SDE rollouts: specialist teachers,
//! the mixed-reward baseline, and the cross-task gradient interference probe.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{GrpoConfig, LabContext, MetricsLog, MixConfig, MixMode, Phase};
use crate::error::{Error, Result};
use crate::eval::evaluate_task;
use crate::numgrad::{GradVector, ParamVector};
use crate::optim::{clip_grad_norm, Optimizer};
use crate::rewards::{group_advantage, score_group, RewardSpec};
use crate::rollout::{derive_seed, replay_score_into, sample_group, Condition, Group, TaskId};

pub(crate) fn check_on_policy(params: &ParamVector, groups: &[Group]) -> Result<()> {
    let current = params.fingerprint();
    for g in groups {
        if g.policy_hash != current || g.trajectories.iter().any(|t| t.policy_hash != current) {
            return Err(Error::OffPolicy {
                sampled: g.policy_hash,
                current,
            });
        }
    }
    Ok(())
}

/// `(1/n_groups) Σ_groups (1/G) Σ_i A_i Σ_steps ∇ log π_θ(x_{k+1} | x_k)`.
///
/// With `clip_range > 0` each step uses the clipped ratio surrogate against
/// the stored log-probabilities; on fresh on-policy groups the ratio is one
/// and both forms coincide.
pub fn grpo_gradient(params: &ParamVector, groups: &[Group], clip_range: f64) -> Result<GradVector> {
    check_on_policy(params, groups)?;
    let mut grad = GradVector::zeros(params.len());
    if groups.is_empty() {
        return Ok(grad);
    }
    let n_groups = groups.len() as f64;
    for group in groups {
        let rewards = group.rewards.as_ref().ok_or(Error::RewardsUnset)?;
        let advantages = group_advantage(rewards)?;
        let weight = 1.0 / (n_groups * group.len() as f64);
        for (traj, adv) in group.trajectories.iter().zip(&advantages) {
            if *adv == 0.0 {
                continue;
            }
            for step in 0..traj.steps() {
                if clip_range > 0.0 {
                    // probe the ratio first; skip clipped steps entirely
                    let mut scratch = vec![0.0; params.len()];
                    let lp = replay_score_into(params, traj, step, 0.0, &mut scratch)?;
                    let ratio = (lp - traj.logprobs[step]).exp();
                    let clipped = (*adv > 0.0 && ratio > 1.0 + clip_range) || (*adv < 0.0 && ratio < 1.0 - clip_range);
                    if !clipped {
                        replay_score_into(params, traj, step, weight * adv * ratio, &mut grad.values)?;
                    }
                } else {
                    replay_score_into(params, traj, step, weight * adv, &mut grad.values)?;
                }
            }
        }
    }
    Ok(grad)
}

fn pick_conditions(pool: &[Condition], n: usize, seed: u64) -> Vec<Condition> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| pool[rng.gen_range(0..pool.len())].clone()).collect()
}

/// Samples and scores one group per condition at the current parameters.
pub fn sample_scored_groups(
    params: &ParamVector,
    conditions: &[Condition],
    spec: &RewardSpec,
    group_size: usize,
    ctx: &LabContext,
    seed: u64,
) -> Result<Vec<Group>> {
    conditions
        .iter()
        .enumerate()
        .map(|(j, c)| {
            let mut g = sample_group(
                params,
                c,
                group_size,
                &ctx.train_grid,
                &ctx.schedule,
                derive_seed(seed, j as u64),
            )?;
            score_group(&mut g, spec, &ctx.world)?;
            Ok(g)
        })
        .collect()
}

/// What one GRPO iteration trains on.
struct IterationPlan {
    pool: Vec<Condition>,
    spec: RewardSpec,
}

/// Shared loop behind teachers and mixed baselines. `eval_tasks` are
/// evaluated every `eval_every` iterations and at the end.
fn run_grpo<F>(
    init: &ParamVector,
    cfg: &GrpoConfig,
    ctx: &LabContext,
    seed: u64,
    phase: Phase,
    eval_tasks: &[TaskId],
    mut plan: F,
) -> Result<(ParamVector, MetricsLog)>
where
    F: FnMut(usize) -> IterationPlan,
{
    let eval_cols: Vec<String> = eval_tasks.iter().map(|t| format!("eval_{}", t.name())).collect();
    let mut columns = vec!["batch_reward", "loss", "grad_norm"];
    columns.extend(eval_cols.iter().map(String::as_str));
    let mut log = MetricsLog::new(phase, &columns);
    let mut params = init.clone();
    let mut opt = Optimizer::new(cfg.optimizer, params.len());
    for it in 0..cfg.iterations {
        let IterationPlan { pool, spec } = plan(it);
        let iter_seed = derive_seed(seed, it as u64);
        let conditions = pick_conditions(&pool, cfg.conditions_per_iteration, derive_seed(iter_seed, u64::MAX));
        let groups = sample_scored_groups(&params, &conditions, &spec, cfg.group_size, ctx, iter_seed)
            .map_err(|e| Error::diverged(it + 1, e.to_string(), Some(&params)))?;
        let batch_reward = groups
            .iter()
            .flat_map(|g| g.rewards.as_ref().unwrap().iter())
            .sum::<f64>()
            / (groups.len() * cfg.group_size) as f64;
        let mut grad = grpo_gradient(&params, &groups, cfg.clip_range)?;
        let grad_norm = clip_grad_norm(&mut grad, cfg.max_grad_norm);
        if !grad_norm.is_finite() {
            return Err(Error::diverged(it + 1, "non-finite policy gradient", Some(&params)));
        }
        let before = params.clone();
        opt.ascend(&mut params, &grad)
            .map_err(|e| Error::diverged(it + 1, e.to_string(), Some(&before)))?;

        let last = it + 1 == cfg.iterations;
        let do_eval = last || (cfg.eval_every > 0 && (it + 1) % cfg.eval_every == 0);
        let mut evals = Vec::with_capacity(eval_tasks.len());
        for t in eval_tasks {
            evals.push(if do_eval {
                Some(evaluate_task(&params, *t, ctx)?.0)
            } else {
                None
            });
        }
        let mut row: Vec<(&str, Option<f64>)> = vec![
            ("batch_reward", Some(batch_reward)),
            ("loss", Some(-batch_reward)),
            ("grad_norm", Some(grad_norm)),
        ];
        row.extend(eval_cols.iter().map(String::as_str).zip(evals));
        log.push(it + 1, &row)?;
    }
    Ok((params, log))
}

/// Single-reward GRPO on the conditions of `task`.
pub fn train_teacher(
    init: &ParamVector,
    task: TaskId,
    cfg: &GrpoConfig,
    ctx: &LabContext,
    seed: u64,
) -> Result<(ParamVector, MetricsLog)> {
    train_on_spec(init, task, &RewardSpec::single(task), cfg, ctx, seed, Phase::Teacher)
}

/// GRPO on the conditions of `task` with an arbitrary reward blend (used for
/// the anchor model).
pub fn train_on_spec(
    init: &ParamVector,
    task: TaskId,
    spec: &RewardSpec,
    cfg: &GrpoConfig,
    ctx: &LabContext,
    seed: u64,
    phase: Phase,
) -> Result<(ParamVector, MetricsLog)> {
    let pool = ctx.world.conditions(task);
    let spec = spec.clone();
    let mut eval_tasks = vec![task];
    eval_tasks.extend(spec.weights.keys().filter(|t| **t != task));
    run_grpo(init, cfg, ctx, seed, phase, &eval_tasks, move |_| IterationPlan {
        pool: pool.clone(),
        spec: spec.clone(),
    })
}

/// Smooth weighted round-robin over tasks with positive weight.
pub fn interleave_schedule(weights: &[(TaskId, f64)], iterations: usize) -> Vec<TaskId> {
    let active: Vec<(TaskId, f64)> = weights.iter().copied().filter(|(_, w)| *w > 0.0).collect();
    let total: f64 = active.iter().map(|(_, w)| w).sum();
    let mut current = vec![0.0; active.len()];
    (0..iterations)
        .map(|_| {
            for (c, (_, w)) in current.iter_mut().zip(&active) {
                *c += w;
            }
            let best = (0..active.len())
                .max_by(|a, b| current[*a].total_cmp(&current[*b]).then(b.cmp(a)))
                .expect("at least one active task");
            current[best] -= total;
            active[best].0
        })
        .collect()
}

/// Multi-reward GRPO baseline: either every sample is scored by the
/// weighted mix of the rewards applicable to its prompt, or whole
/// iterations alternate between single rewards at the configured ratio.
pub fn train_mix(
    init: &ParamVector,
    cfg: &GrpoConfig,
    mix: &MixConfig,
    ctx: &LabContext,
    seed: u64,
) -> Result<(ParamVector, MetricsLog)> {
    let active: Vec<(TaskId, f64)> = mix
        .weights
        .iter()
        .map(|(t, w)| (*t, *w))
        .filter(|(_, w)| *w > 0.0)
        .collect();
    if active.is_empty() {
        return Err(Error::InvalidArgument("mix needs at least one positive weight".into()));
    }
    let eval_tasks: Vec<TaskId> = TaskId::ALL.to_vec();
    match mix.mode {
        MixMode::ScalarMix => {
            let pool: Vec<Condition> = active.iter().flat_map(|(t, _)| ctx.world.conditions(*t)).collect();
            let spec = RewardSpec {
                weights: active.iter().copied().collect(),
            };
            run_grpo(init, cfg, ctx, seed, Phase::Mix, &eval_tasks, |_| IterationPlan {
                pool: pool.clone(),
                spec: spec.clone(),
            })
        }
        MixMode::EpochInterleaved => {
            let schedule = interleave_schedule(&active, cfg.iterations);
            run_grpo(init, cfg, ctx, seed, Phase::Mix, &eval_tasks, |it| IterationPlan {
                pool: ctx.world.conditions(schedule[it]),
                spec: RewardSpec::single(schedule[it]),
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interference {
    pub inner_product: f64,
    /// `None` when either gradient vanishes.
    pub cosine: Option<f64>,
    pub norm_a: f64,
    pub norm_b: f64,
}

impl Interference {
    pub fn between(a: &GradVector, b: &GradVector) -> Self {
        let inner_product = a.dot(b);
        let (norm_a, norm_b) = (a.norm(), b.norm());
        let cosine = if norm_a > 0.0 && norm_b > 0.0 {
            Some((inner_product / (norm_a * norm_b)).clamp(-1.0, 1.0))
        } else {
            None
        };
        Interference {
            inner_product,
            cosine,
            norm_a,
            norm_b,
        }
    }
}

fn rescored(groups: &[Group], spec: &RewardSpec, ctx: &LabContext) -> Result<Vec<Group>> {
    let mut out = groups.to_vec();
    for g in &mut out {
        score_group(g, spec, &ctx.world)?;
    }
    Ok(out)
}

/// Estimates `⟨∇J_A, ∇J_B⟩` and the cosine between the two GRPO gradients
/// at `params`. Probe groups are sampled on the conditions of `task_a`;
/// task B's gradient reuses those same rollouts whenever its reward can be
/// evaluated on them (B equal to A, or a condition-free reward), and
/// otherwise uses groups on B's own conditions.
pub fn gradient_interference(
    params: &ParamVector,
    task_a: TaskId,
    task_b: TaskId,
    probe_groups: usize,
    group_size: usize,
    ctx: &LabContext,
    seed: u64,
) -> Result<Interference> {
    if probe_groups == 0 {
        return Err(Error::InvalidArgument(
            "interference needs at least one probe group".into(),
        ));
    }
    let conds_a = pick_conditions(&ctx.world.conditions(task_a), probe_groups, derive_seed(seed, 1));
    let spec_a = RewardSpec::single(task_a);
    let spec_b = RewardSpec::single(task_b);
    let groups_a = sample_scored_groups(params, &conds_a, &spec_a, group_size, ctx, derive_seed(seed, 2))?;
    let grad_a = grpo_gradient(params, &groups_a, 0.0)?;
    let shares_rollouts = task_b == task_a || matches!(task_b, TaskId::Preference | TaskId::Quality);
    let groups_b = if shares_rollouts {
        rescored(&groups_a, &spec_b, ctx)?
    } else {
        let conds_b = pick_conditions(&ctx.world.conditions(task_b), probe_groups, derive_seed(seed, 3));
        sample_scored_groups(params, &conds_b, &spec_b, group_size, ctx, derive_seed(seed, 4))?
    };
    let grad_b = grpo_gradient(params, &groups_b, 0.0)?;
    Ok(Interference::between(&grad_a, &grad_b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;
    use crate::numgrad::{init_params, ArchSpec};
    use crate::rollout::replay_logprob;

    fn setup() -> (ParamVector, LabContext) {
        let cfg = ExperimentConfig::default();
        let arch = ArchSpec::new(cfg.arch.input_dim, vec![12], 2).unwrap();
        (init_params(&arch, 11).unwrap(), cfg.context())
    }

    fn small_cfg(iterations: usize) -> GrpoConfig {
        GrpoConfig {
            group_size: 4,
            conditions_per_iteration: 2,
            iterations,
            eval_every: 0,
            ..ExperimentConfig::default().grpo
        }
    }

    #[test]
    fn equal_rewards_give_zero_gradient() {
        let (p, ctx) = setup();
        let c = Condition::quality();
        let mut g = sample_group(&p, &c, 5, &ctx.train_grid, &ctx.schedule, 3).unwrap();
        g.rewards = Some(vec![0.4; 5]);
        let grad = grpo_gradient(&p, &[g], 0.0).unwrap();
        assert!(grad.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn two_sample_group_unrolls_to_half_difference() {
        let (p, ctx) = setup();
        let c = Condition::region(2, 4).unwrap();
        let mut g = sample_group(&p, &c, 2, &ctx.train_grid, &ctx.schedule, 9).unwrap();
        g.rewards = Some(vec![0.0, 1.0]);
        let grad = grpo_gradient(&p, std::slice::from_ref(&g), 0.0).unwrap();
        let traj_grad = |i: usize| {
            let mut acc = GradVector::zeros(p.len());
            for k in 0..g.trajectories[i].steps() {
                acc.add_assign(&replay_logprob(&p, &g.trajectories[i], k).unwrap().1);
            }
            acc
        };
        let mut want = traj_grad(1);
        let mut neg = traj_grad(0);
        neg.scale(-1.0);
        want.add_assign(&neg);
        want.scale(0.5);
        assert!(grad.relative_error(&want) < 1e-12);
        // clipping is inert on fresh on-policy groups
        let clipped = grpo_gradient(&p, &[g], 0.2).unwrap();
        assert!(clipped.relative_error(&grad) < 1e-12);
    }

    #[test]
    fn rejects_unscored_and_off_policy_groups() {
        let (p, ctx) = setup();
        let c = Condition::quality();
        let g = sample_group(&p, &c, 3, &ctx.train_grid, &ctx.schedule, 1).unwrap();
        assert!(matches!(
            grpo_gradient(&p, std::slice::from_ref(&g), 0.0),
            Err(Error::RewardsUnset)
        ));
        let mut other = p.clone();
        other.values_mut()[0] += 1e-9;
        let mut scored = g;
        scored.rewards = Some(vec![0.0, 0.5, 1.0]);
        assert!(matches!(
            grpo_gradient(&other, &[scored], 0.0),
            Err(Error::OffPolicy { .. })
        ));
    }

    #[test]
    fn zero_iterations_return_init() {
        let (p, ctx) = setup();
        let (out, log) = train_teacher(&p, TaskId::Ring, &small_cfg(0), &ctx, 1).unwrap();
        assert_eq!(out, p);
        assert!(log.rows.is_empty());
    }

    #[test]
    fn single_task_mix_matches_teacher() {
        let (p, ctx) = setup();
        let cfg = small_cfg(3);
        let (teacher, _) = train_teacher(&p, TaskId::Ring, &cfg, &ctx, 5).unwrap();
        let mix = MixConfig {
            mode: MixMode::ScalarMix,
            weights: [(TaskId::Ring, 1.0), (TaskId::Region, 0.0)].into_iter().collect(),
        };
        let (mixed, _) = train_mix(&p, &cfg, &mix, &ctx, 5).unwrap();
        assert_eq!(mixed, teacher);
        let inter = MixConfig {
            mode: MixMode::EpochInterleaved,
            ..mix
        };
        let (inter, _) = train_mix(&p, &cfg, &inter, &ctx, 5).unwrap();
        assert_eq!(inter, teacher);
    }

    #[test]
    fn round_robin_respects_ratios() {
        let s = interleave_schedule(
            &[(TaskId::Region, 3.0), (TaskId::Ring, 1.0), (TaskId::Preference, 1.0)],
            10,
        );
        let count = |t| s.iter().filter(|x| **x == t).count();
        assert_eq!(
            (count(TaskId::Region), count(TaskId::Ring), count(TaskId::Preference)),
            (6, 2, 2)
        );
        assert_eq!(&s[..5], &s[5..]);
        let only = interleave_schedule(&[(TaskId::Quality, 2.0), (TaskId::Ring, 0.0)], 4);
        assert_eq!(only, vec![TaskId::Quality; 4]);
    }

    #[test]
    fn self_interference_is_one() {
        let (p, ctx) = setup();
        let r = gradient_interference(&p, TaskId::Region, TaskId::Region, 3, 6, &ctx, 4).unwrap();
        assert!((r.cosine.unwrap() - 1.0).abs() < 1e-12);
        assert!(r.inner_product > 0.0);
        let z = Interference::between(
            &GradVector::zeros(3),
            &GradVector {
                values: vec![1.0, 0.0, 0.0],
            },
        );
        assert_eq!(z.cosine, None);
    }
}
