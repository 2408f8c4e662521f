//! On-policy SDE rollouts: conditions, trajectories, groups, and replay of
//! per-step log-probabilities with their parameter gradients.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{
    self, em_step, mean_from_velocity, mean_velocity_gain, transition_logprob, transition_variance, velocity_tape,
    NoiseSchedule, TimeGrid, VARIANCE_FLOOR,
};
use crate::numgrad::{backward_into, GradVector, ParamVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskId {
    Region,
    Ring,
    Preference,
    Quality,
}

impl TaskId {
    pub const ALL: [TaskId; 4] = [TaskId::Region, TaskId::Ring, TaskId::Preference, TaskId::Quality];

    pub fn index(self) -> usize {
        match self {
            TaskId::Region => 0,
            TaskId::Ring => 1,
            TaskId::Preference => 2,
            TaskId::Quality => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskId::Region => "region",
            TaskId::Ring => "ring",
            TaskId::Preference => "preference",
            TaskId::Quality => "quality",
        }
    }

    pub fn parse(s: &str) -> Result<TaskId> {
        TaskId::ALL
            .into_iter()
            .find(|t| t.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown task '{s}'")))
    }
}

impl std::fmt::Display for TaskId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A synthetic prompt. Region conditions carry a one-hot over mixture
/// components, Ring conditions a single radius, the other tasks nothing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub task: TaskId,
    pub params: Vec<f64>,
}

impl Condition {
    pub fn new(task: TaskId, params: Vec<f64>) -> Result<Self> {
        let c = Condition { task, params };
        c.validate()?;
        Ok(c)
    }

    pub fn region(component: usize, n_components: usize) -> Result<Self> {
        if component >= n_components {
            return Err(Error::InvalidArgument(format!(
                "component {component} out of range for {n_components} components"
            )));
        }
        let mut params = vec![0.0; n_components];
        params[component] = 1.0;
        Self::new(TaskId::Region, params)
    }

    pub fn ring(radius: f64) -> Result<Self> {
        Self::new(TaskId::Ring, vec![radius])
    }

    pub fn preference() -> Self {
        Condition {
            task: TaskId::Preference,
            params: Vec::new(),
        }
    }

    pub fn quality() -> Self {
        Condition {
            task: TaskId::Quality,
            params: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(format!("{} condition: {msg}", self.task)));
        match self.task {
            TaskId::Region => {
                let ones = self.params.iter().filter(|v| **v == 1.0).count();
                let zeros = self.params.iter().filter(|v| **v == 0.0).count();
                if ones != 1 || ones + zeros != self.params.len() {
                    return bad("params must be a one-hot component selector");
                }
            }
            TaskId::Ring => {
                if self.params.len() != 1 || !(self.params[0] > 0.0) {
                    return bad("params must be a single positive radius");
                }
            }
            TaskId::Preference | TaskId::Quality => {
                if !self.params.is_empty() {
                    return bad("takes no params");
                }
            }
        }
        Ok(())
    }

    /// Target component of a Region condition.
    pub fn component(&self) -> Option<usize> {
        match self.task {
            TaskId::Region => self.params.iter().position(|v| *v == 1.0),
            _ => None,
        }
    }

    pub fn radius(&self) -> Option<f64> {
        match self.task {
            TaskId::Ring => self.params.first().copied(),
            _ => None,
        }
    }

    /// Appends a `width`-long embedding: task one-hot, then params, then zeros.
    pub fn embed_into(&self, width: usize, out: &mut Vec<f64>) -> Result<()> {
        let needed = TaskId::ALL.len() + self.params.len();
        if width < needed {
            return Err(Error::DimensionMismatch {
                what: "condition embedding",
                expected: needed,
                got: width,
            });
        }
        let start = out.len();
        out.extend(TaskId::ALL.iter().map(|t| if *t == self.task { 1.0 } else { 0.0 }));
        out.extend_from_slice(&self.params);
        out.resize(start + width, 0.0);
        Ok(())
    }

    pub fn label(&self) -> String {
        match self.task {
            TaskId::Region => format!("region[{}]", self.component().unwrap_or(0)),
            TaskId::Ring => format!("ring[{}]", self.params[0]),
            t => t.name().to_string(),
        }
    }
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Child seed for `(parent, index)`; used for trajectory, step and
/// iteration streams so that sampling order never affects the draws.
pub fn derive_seed(parent: u64, index: u64) -> u64 {
    mix64(parent ^ mix64(index.wrapping_add(0x632b_e59b_d9b4_e019)))
}

pub fn standard_normal(seed: u64, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub noises: Vec<Vec<f64>>,
    pub logprobs: Vec<f64>,
    pub condition: Condition,
    pub grid: TimeGrid,
    pub schedule: NoiseSchedule,
    /// Fingerprint of the parameters that generated this rollout.
    pub policy_hash: u64,
}

impl Trajectory {
    pub fn final_sample(&self) -> &[f64] {
        self.states.last().expect("trajectory has at least one state")
    }

    pub fn steps(&self) -> usize {
        self.noises.len()
    }

    /// Line-oriented dump: one row per step with `t`, `x_t`, noise and logprob.
    pub fn dump(&self) -> String {
        let d = self.states[0].len();
        let mut out = String::new();
        let _ = write!(
            out,
            "# condition={} policy={:#018x}\nstep\tt",
            self.condition.label(),
            self.policy_hash
        );
        for i in 0..d {
            let _ = write!(out, "\tx{i}");
        }
        for i in 0..d {
            let _ = write!(out, "\tnoise{i}");
        }
        out.push_str("\tlogprob\n");
        for k in 0..=self.steps() {
            let _ = write!(out, "{k}\t{}", self.times[k]);
            for v in &self.states[k] {
                let _ = write!(out, "\t{v}");
            }
            if k < self.steps() {
                for v in &self.noises[k] {
                    let _ = write!(out, "\t{v}");
                }
                let _ = write!(out, "\t{}", self.logprobs[k]);
            } else {
                for _ in 0..d {
                    out.push_str("\t-");
                }
                out.push_str("\t-");
            }
            out.push('\n');
        }
        out
    }
}

pub fn sample_trajectory(
    params: &ParamVector,
    c: &Condition,
    grid: &TimeGrid,
    schedule: &NoiseSchedule,
    rng_seed: u64,
) -> Result<Trajectory> {
    grid.validate()?;
    if !(schedule.a > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "noise level {} must be positive",
            schedule.a
        )));
    }
    let d = params.arch().output_dim;
    let dt = grid.dt();
    let times = grid.times();
    let mut states = Vec::with_capacity(grid.steps + 1);
    let mut noises = Vec::with_capacity(grid.steps);
    let mut logprobs = Vec::with_capacity(grid.steps);
    states.push(standard_normal(derive_seed(rng_seed, 0), d));
    for k in 0..grid.steps {
        let t = times[k];
        let sigma_t = schedule.sigma(t)?;
        let x = &states[k];
        let v = flow::velocity(params, x, t, c)?;
        let noise = standard_normal(derive_seed(rng_seed, k as u64 + 1), d);
        let next = em_step(x, &v, t, dt, sigma_t, &noise)?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "state at step {k} (t = {t}) for {}",
                c.label()
            )));
        }
        let mu = mean_from_velocity(x, &v, t, dt, sigma_t)?;
        logprobs.push(transition_logprob(&next, &mu, transition_variance(sigma_t, dt))?);
        noises.push(noise);
        states.push(next);
    }
    Ok(Trajectory {
        times,
        states,
        noises,
        logprobs,
        condition: c.clone(),
        grid: *grid,
        schedule: *schedule,
        policy_hash: params.fingerprint(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub condition: Condition,
    pub trajectories: Vec<Trajectory>,
    pub rewards: Option<Vec<f64>>,
    pub policy_hash: u64,
}

impl Group {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn final_samples(&self) -> impl Iterator<Item = &[f64]> {
        self.trajectories.iter().map(|t| t.final_sample())
    }
}

/// Seed of trajectory `index` within a group.
pub fn trajectory_seed(master_seed: u64, index: usize) -> u64 {
    derive_seed(master_seed, index as u64)
}

pub fn sample_group(
    params: &ParamVector,
    c: &Condition,
    group_size: usize,
    grid: &TimeGrid,
    schedule: &NoiseSchedule,
    master_seed: u64,
) -> Result<Group> {
    if group_size < 2 {
        return Err(Error::InvalidArgument(format!(
            "group size {group_size} must be at least 2"
        )));
    }
    let trajectories = (0..group_size)
        .map(|i| sample_trajectory(params, c, grid, schedule, trajectory_seed(master_seed, i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Group {
        condition: c.clone(),
        trajectories,
        rewards: None,
        policy_hash: params.fingerprint(),
    })
}

fn check_step(traj: &Trajectory, step: usize) -> Result<()> {
    if step >= traj.steps() {
        return Err(Error::InvalidArgument(format!(
            "step {step} out of range for a {}-step trajectory",
            traj.steps()
        )));
    }
    if traj.states.len() != traj.steps() + 1
        || traj.logprobs.len() != traj.steps()
        || traj.grid.steps != traj.steps()
        || traj.times[step] != traj.grid.time(step)
    {
        return Err(Error::InvalidArgument(
            "stored trajectory does not match its grid".into(),
        ));
    }
    Ok(())
}

/// Adds `scale · ∇_θ log π_θ(x_{k+1} | x_k)` into `grad` and returns the
/// log-probability under `params`.
pub fn replay_score_into(
    params: &ParamVector,
    traj: &Trajectory,
    step: usize,
    scale: f64,
    grad: &mut [f64],
) -> Result<f64> {
    check_step(traj, step)?;
    let t = traj.times[step];
    let dt = traj.grid.dt();
    let sigma_t = traj.schedule.sigma(t)?;
    let x = &traj.states[step];
    let next = &traj.states[step + 1];
    let tape = velocity_tape(params, x, t, &traj.condition)?;
    let mu = mean_from_velocity(x, tape.output(), t, dt, sigma_t)?;
    let var = transition_variance(sigma_t, dt);
    let logprob = transition_logprob(next, &mu, var)?;
    let gain = mean_velocity_gain(t, sigma_t, dt) / var.max(VARIANCE_FLOOR);
    let upstream: Vec<f64> = next.iter().zip(&mu).map(|(a, m)| gain * (a - m)).collect();
    backward_into(params, &tape, &upstream, scale, grad)?;
    Ok(logprob)
}

pub fn replay_logprob(params: &ParamVector, traj: &Trajectory, step: usize) -> Result<(f64, GradVector)> {
    let mut grad = GradVector::zeros(params.len());
    let lp = replay_score_into(params, traj, step, 1.0, &mut grad.values)?;
    Ok((lp, grad))
}
