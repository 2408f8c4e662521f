//! On-policy distillation: hard task-to-teacher routing, the time-weighted
//! velocity regression on states visited by the student's own SDE, the
//! score-function form kept as a cross-check, and the anchor penalty.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{AnchorScope, LabContext, MetricsLog, OpdConfig, Phase};
use crate::error::{Error, Result};
use crate::eval::evaluate_task;
use crate::flow::{mean_from_velocity, mean_velocity_gain, transition_variance, velocity, velocity_tape, weight_w};
use crate::grpo::check_on_policy;
use crate::numgrad::{backward_into, GradVector, ParamVector};
use crate::optim::{clip_grad_norm, Optimizer};
use crate::pipeline::fm_batch;
use crate::rollout::{derive_seed, replay_score_into, sample_group, Condition, Group, TaskId};

/// Deterministic map from task to the key of its expert.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RoutingTable {
    pub routes: BTreeMap<TaskId, String>,
}

impl RoutingTable {
    /// Every task routed to the expert named after it.
    pub fn by_task_name(tasks: &[TaskId]) -> Self {
        RoutingTable {
            routes: tasks.iter().map(|t| (*t, t.name().to_string())).collect(),
        }
    }

    pub fn tasks(&self) -> impl Iterator<Item = TaskId> + '_ {
        self.routes.keys().copied()
    }
}

pub fn route<'a>(c: &Condition, table: &'a RoutingTable) -> Result<&'a str> {
    table
        .routes
        .get(&c.task)
        .map(String::as_str)
        .ok_or(Error::Unrouted(c.task))
}

/// Frozen teachers plus the frozen anchor model.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherEnsemble {
    experts: BTreeMap<String, ParamVector>,
    anchor: ParamVector,
    routing: RoutingTable,
}

impl TeacherEnsemble {
    pub fn new(experts: BTreeMap<String, ParamVector>, anchor: ParamVector, routing: RoutingTable) -> Result<Self> {
        for (task, key) in &routing.routes {
            if !experts.contains_key(key) {
                return Err(Error::InvalidArgument(format!(
                    "task {task} routes to missing expert {key:?}"
                )));
            }
        }
        if experts.values().any(|p| p.arch() != anchor.arch()) {
            return Err(Error::ArchMismatch);
        }
        Ok(TeacherEnsemble {
            experts,
            anchor,
            routing,
        })
    }

    /// One expert per task, keyed by task name.
    pub fn from_teachers(teachers: BTreeMap<TaskId, ParamVector>, anchor: ParamVector) -> Result<Self> {
        let routing = RoutingTable::by_task_name(&teachers.keys().copied().collect::<Vec<_>>());
        let experts = teachers.into_iter().map(|(t, p)| (t.name().to_string(), p)).collect();
        TeacherEnsemble::new(experts, anchor, routing)
    }

    pub fn expert_for(&self, c: &Condition) -> Result<&ParamVector> {
        let key = route(c, &self.routing)?;
        Ok(&self.experts[key])
    }

    pub fn experts(&self) -> &BTreeMap<String, ParamVector> {
        &self.experts
    }

    pub fn anchor(&self) -> &ParamVector {
        &self.anchor
    }

    pub fn routing(&self) -> &RoutingTable {
        &self.routing
    }

    fn check_student(&self, student: &ParamVector) -> Result<()> {
        if student.arch() != self.anchor.arch() {
            return Err(Error::ArchMismatch);
        }
        Ok(())
    }
}

/// Velocity of the routed expert; a constant as far as the student is concerned.
pub fn target_velocity(ens: &TeacherEnsemble, c: &Condition, x_t: &[f64], t: f64) -> Result<Vec<f64>> {
    velocity(ens.expert_for(c)?, x_t, t, c)
}

/// A state at which student and target velocities are compared.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeState {
    pub x: Vec<f64>,
    pub t: f64,
    pub dt: f64,
    pub sigma_t: f64,
    pub condition: Condition,
}

/// Every pre-transition state of every trajectory, in group order.
pub fn visited_states(groups: &[Group]) -> Result<Vec<ProbeState>> {
    let mut out = Vec::new();
    for g in groups {
        for traj in &g.trajectories {
            let dt = traj.grid.dt();
            for k in 0..traj.steps() {
                let t = traj.times[k];
                out.push(ProbeState {
                    x: traj.states[k].clone(),
                    t,
                    dt,
                    sigma_t: traj.schedule.sigma(t)?,
                    condition: traj.condition.clone(),
                });
            }
        }
    }
    Ok(out)
}

/// Mean of `w(t)·‖v_θ − target‖²` over `states`, gradient through `v_θ` only.
pub fn weighted_velocity_loss<F>(
    student: &ParamVector,
    states: &[ProbeState],
    mut target: F,
) -> Result<(f64, GradVector)>
where
    F: FnMut(&ProbeState) -> Result<Vec<f64>>,
{
    if states.is_empty() {
        return Err(Error::InvalidArgument(
            "no states to evaluate the velocity loss on".into(),
        ));
    }
    let n = states.len() as f64;
    let mut grad = GradVector::zeros(student.len());
    let mut loss = 0.0;
    for s in states {
        let goal = target(s)?;
        let tape = velocity_tape(student, &s.x, s.t, &s.condition)?;
        let w = weight_w(s.t, s.sigma_t, s.dt);
        let resid: Vec<f64> = tape.output().iter().zip(&goal).map(|(v, g)| v - g).collect();
        loss += w * resid.iter().map(|r| r * r).sum::<f64>();
        backward_into(student, &tape, &resid, 2.0 * w / n, &mut grad.values)?;
    }
    Ok((loss / n, grad))
}

/// Routed-teacher regression on the visited states of on-policy groups.
pub fn flow_opd_loss(student: &ParamVector, ens: &TeacherEnsemble, groups: &[Group]) -> Result<(f64, GradVector)> {
    ens.check_student(student)?;
    check_on_policy(student, groups)?;
    opd_loss_on_states(student, ens, &visited_states(groups)?)
}

pub fn opd_loss_on_states(
    student: &ParamVector,
    ens: &TeacherEnsemble,
    states: &[ProbeState],
) -> Result<(f64, GradVector)> {
    weighted_velocity_loss(student, states, |s| target_velocity(ens, &s.condition, &s.x, s.t))
}

/// Anchor penalty (without the λ factor).
pub fn mar_loss(student: &ParamVector, anchor: &ParamVector, probes: &[ProbeState]) -> Result<(f64, GradVector)> {
    if student.arch() != anchor.arch() {
        return Err(Error::ArchMismatch);
    }
    weighted_velocity_loss(student, probes, |s| velocity(anchor, &s.x, s.t, &s.condition))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TotalLoss {
    pub total: f64,
    pub opd: f64,
    pub mar: f64,
    pub grad: GradVector,
}

pub fn total_loss(
    student: &ParamVector,
    ens: &TeacherEnsemble,
    groups: &[Group],
    probes: &[ProbeState],
    lambda: f64,
) -> Result<TotalLoss> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!("lambda {lambda} must be non-negative")));
    }
    let (opd, mut grad) = flow_opd_loss(student, ens, groups)?;
    let mar = if lambda > 0.0 {
        let (mar, mut g) = mar_loss(student, &ens.anchor, probes)?;
        g.scale(lambda);
        grad.add_assign(&g);
        mar
    } else if probes.is_empty() {
        0.0
    } else {
        mar_loss(student, &ens.anchor, probes)?.0
    };
    Ok(TotalLoss {
        total: opd + lambda * mar,
        opd,
        mar,
        grad,
    })
}

/// Score-function form of the distillation gradient, split into its parts.
#[derive(Debug, Clone, PartialEq)]
pub struct PgOpdGradient {
    /// Mean over steps of `−KL_k · ∇ log π_θ(x_{k+1} | x_k)`.
    pub score: GradVector,
    /// Mean over steps of `∇_θ(−KL_k)`, differentiated through the
    /// transition means.
    pub direct: GradVector,
    /// Per-step KL to the routed teacher's transition, in visiting order.
    pub step_kl: Vec<f64>,
}

/// Adds `scale · ∇_θ log π_θ(action | x)` for the transition at `s`.
pub fn transition_score_into(
    student: &ParamVector,
    s: &ProbeState,
    action: &[f64],
    scale: f64,
    grad: &mut [f64],
) -> Result<()> {
    let tape = velocity_tape(student, &s.x, s.t, &s.condition)?;
    let mu = mean_from_velocity(&s.x, tape.output(), s.t, s.dt, s.sigma_t)?;
    let gain = mean_velocity_gain(s.t, s.sigma_t, s.dt) / transition_variance(s.sigma_t, s.dt);
    let upstream: Vec<f64> = action.iter().zip(&mu).map(|(a, m)| gain * (a - m)).collect();
    backward_into(student, &tape, &upstream, scale, grad)?;
    Ok(())
}

pub fn pg_opd_gradient(student: &ParamVector, ens: &TeacherEnsemble, groups: &[Group]) -> Result<PgOpdGradient> {
    ens.check_student(student)?;
    check_on_policy(student, groups)?;
    let n_steps: usize = groups.iter().flat_map(|g| &g.trajectories).map(|t| t.steps()).sum();
    if n_steps == 0 {
        return Err(Error::InvalidArgument("no transitions in the batch".into()));
    }
    let n = n_steps as f64;
    let mut score = GradVector::zeros(student.len());
    let mut direct = GradVector::zeros(student.len());
    let mut step_kl = Vec::with_capacity(n_steps);
    for traj in groups.iter().flat_map(|g| &g.trajectories) {
        let dt = traj.grid.dt();
        for k in 0..traj.steps() {
            let t = traj.times[k];
            let sigma_t = traj.schedule.sigma(t)?;
            let x = &traj.states[k];
            let tape = velocity_tape(student, x, t, &traj.condition)?;
            let mu = mean_from_velocity(x, tape.output(), t, dt, sigma_t)?;
            let v_target = target_velocity(ens, &traj.condition, x, t)?;
            let mu_target = mean_from_velocity(x, &v_target, t, dt, sigma_t)?;
            let var = transition_variance(sigma_t, dt);
            let kl = crate::flow::kl_means(&mu, &mu_target, sigma_t, dt);
            step_kl.push(kl);
            replay_score_into(student, traj, k, -kl / n, &mut score.values)?;
            // ∂KL/∂μ = (μ − μ_target)/var, ∂μ/∂v = gain
            let gain = mean_velocity_gain(t, sigma_t, dt);
            let upstream: Vec<f64> = mu.iter().zip(&mu_target).map(|(a, b)| gain * (a - b) / var).collect();
            backward_into(student, &tape, &upstream, -1.0 / n, &mut direct.values)?;
        }
    }
    Ok(PgOpdGradient { score, direct, step_kl })
}

/// Off-policy probes on interpolation paths between data and noise, over
/// the given conditions, at grid times.
pub fn full_data_probes(conditions: &[Condition], n: usize, ctx: &LabContext, seed: u64) -> Result<Vec<ProbeState>> {
    if conditions.is_empty() {
        return Err(Error::InvalidArgument("no conditions for anchor probes".into()));
    }
    let data = ctx.world.sample_data(n, derive_seed(seed, 0));
    let grid = &ctx.train_grid;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    let batch = fm_batch(&data, conditions, grid, derive_seed(seed, 2))?;
    batch
        .into_iter()
        .map(|s| {
            let t = grid.time(rng.gen_range(0..grid.steps));
            let x = crate::flow::ot_interpolate(&s.x0, &s.x1, t)?;
            Ok(ProbeState {
                x,
                t,
                dt: grid.dt(),
                sigma_t: ctx.schedule.sigma(t)?,
                condition: s.condition,
            })
        })
        .collect()
}

/// Mean `w(t)·‖v_θ − v_anchor‖²` on a fixed probe set over every condition.
pub fn anchor_discrepancy(student: &ParamVector, anchor: &ParamVector, ctx: &LabContext) -> Result<f64> {
    let probes = full_data_probes(
        &ctx.world.all_conditions(),
        ctx.eval.anchor_probes.max(1),
        ctx,
        ctx.eval.seed,
    )?;
    Ok(mar_loss(student, anchor, &probes)?.0)
}

fn subsample(states: Vec<ProbeState>, n: usize, seed: u64) -> Vec<ProbeState> {
    if states.len() <= n {
        return states;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| states[rng.gen_range(0..states.len())].clone()).collect()
}

/// Distils the ensemble into `cold` on the conditions of every routed task.
pub fn train_student(
    cold: &ParamVector,
    ens: &TeacherEnsemble,
    cfg: &OpdConfig,
    ctx: &LabContext,
    seed: u64,
) -> Result<(ParamVector, MetricsLog)> {
    ens.check_student(cold)?;
    let tasks: Vec<TaskId> = ens.routing.tasks().collect();
    let pool: Vec<Condition> = tasks.iter().flat_map(|t| ctx.world.conditions(*t)).collect();
    if pool.is_empty() {
        return Err(Error::InvalidArgument("routing table covers no task".into()));
    }
    let eval_cols: Vec<String> = tasks.iter().map(|t| format!("eval_{}", t.name())).collect();
    let mut columns = vec!["loss", "flow_opd_loss", "mar_loss", "grad_norm", "anchor_discrepancy"];
    columns.extend(eval_cols.iter().map(String::as_str));
    let mut log = MetricsLog::new(Phase::Opd, &columns);
    let mut params = cold.clone();
    let mut opt = Optimizer::new(cfg.optimizer, params.len());
    let all_conditions = ctx.world.all_conditions();
    for it in 0..cfg.iterations {
        let iter_seed = derive_seed(seed, it as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(iter_seed, u64::MAX));
        let groups = (0..cfg.conditions_per_iteration)
            .map(|j| {
                let c = &pool[rng.gen_range(0..pool.len())];
                sample_group(
                    &params,
                    c,
                    cfg.group_size,
                    &ctx.train_grid,
                    &ctx.schedule,
                    derive_seed(iter_seed, j as u64),
                )
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::diverged(it + 1, e.to_string(), Some(&params)))?;
        let probe_seed = derive_seed(iter_seed, u64::MAX - 1);
        let probes = match cfg.anchor_scope {
            AnchorScope::FullData => full_data_probes(&all_conditions, cfg.mar_probes_per_iteration, ctx, probe_seed)?,
            AnchorScope::OnPolicyStates => {
                subsample(visited_states(&groups)?, cfg.mar_probes_per_iteration, probe_seed)
            }
        };
        let TotalLoss {
            total,
            opd,
            mar,
            mut grad,
        } = total_loss(&params, ens, &groups, &probes, cfg.lambda)?;
        if !total.is_finite() {
            return Err(Error::diverged(it + 1, "non-finite distillation loss", Some(&params)));
        }
        let grad_norm = clip_grad_norm(&mut grad, cfg.max_grad_norm);
        let before = params.clone();
        opt.descend(&mut params, &grad)
            .map_err(|e| Error::diverged(it + 1, e.to_string(), Some(&before)))?;

        let last = it + 1 == cfg.iterations;
        let do_eval = last || (cfg.eval_every > 0 && (it + 1) % cfg.eval_every == 0);
        let anchor_disc = if do_eval {
            Some(anchor_discrepancy(&params, &ens.anchor, ctx)?)
        } else {
            None
        };
        let mut evals = Vec::with_capacity(tasks.len());
        for t in &tasks {
            evals.push(if do_eval {
                Some(evaluate_task(&params, *t, ctx)?.0)
            } else {
                None
            });
        }
        let mut row: Vec<(&str, Option<f64>)> = vec![
            ("loss", Some(total)),
            ("flow_opd_loss", Some(opd)),
            ("mar_loss", Some(mar)),
            ("grad_norm", Some(grad_norm)),
            ("anchor_discrepancy", anchor_disc),
        ];
        row.extend(eval_cols.iter().map(String::as_str).zip(evals));
        log.push(it + 1, &row)?;
    }
    Ok((params, log))
}
