//! Synthetic reward stack on a planar Gaussian-mixture world, plus
//! group-relative advantages and scalar reward mixing.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rollout::{Condition, Group, TaskId};

/// Floor on the group standard deviation used by [`group_advantage`].
pub const ADVANTAGE_STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub mean: Vec<f64>,
    pub scale: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskWorld {
    pub data_mixture: Vec<MixtureComponent>,
    pub region_labels: Vec<String>,
    /// Width `τ_r` of the region reward.
    pub region_width: f64,
    pub ring_radii: Vec<f64>,
    /// Width `τ_o` of the ring reward.
    pub ring_width: f64,
    pub preference_center: Vec<f64>,
    pub preference_scale: f64,
}

impl Default for TaskWorld {
    fn default() -> Self {
        let means = [[3.0, 3.0], [-3.0, 3.0], [-3.0, -3.0], [3.0, -3.0]];
        TaskWorld {
            data_mixture: means
                .iter()
                .map(|m| MixtureComponent {
                    mean: m.to_vec(),
                    scale: 1.0,
                    weight: 0.25,
                })
                .collect(),
            region_labels: ["upper-right", "upper-left", "lower-left", "lower-right"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            region_width: 1.0,
            ring_radii: vec![3.0 * std::f64::consts::SQRT_2],
            ring_width: 0.5,
            preference_center: vec![3.8, 3.8],
            preference_scale: 0.5,
        }
    }
}

impl TaskWorld {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("task world: {m}")));
        if self.data_mixture.is_empty() {
            return bad("mixture needs at least one component".into());
        }
        let d = self.state_dim();
        if self.data_mixture.iter().any(|c| c.mean.len() != d) || self.preference_center.len() != d {
            return bad("all means and the preference center must share one dimension".into());
        }
        if self.data_mixture.iter().any(|c| !(c.scale > 0.0) || !(c.weight >= 0.0)) {
            return bad("scales must be positive and weights non-negative".into());
        }
        let total: f64 = self.data_mixture.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("mixture weights sum to {total}, not 1"));
        }
        if self.region_labels.len() != self.data_mixture.len() {
            return bad("one region label per component is required".into());
        }
        if self.ring_radii.is_empty() || self.ring_radii.iter().any(|r| !(*r > 0.0)) {
            return bad("ring radii must be a non-empty list of positive values".into());
        }
        if !(self.region_width > 0.0 && self.ring_width > 0.0 && self.preference_scale > 0.0) {
            return bad("reward widths must be positive".into());
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        self.data_mixture[0].mean.len()
    }

    pub fn n_components(&self) -> usize {
        self.data_mixture.len()
    }

    /// Width of the condition embedding: task one-hot plus the widest params.
    pub fn condition_width(&self) -> usize {
        TaskId::ALL.len() + self.n_components().max(1)
    }

    /// The fixed condition set of a task.
    pub fn conditions(&self, task: TaskId) -> Vec<Condition> {
        match task {
            TaskId::Region => (0..self.n_components())
                .map(|k| Condition::region(k, self.n_components()).expect("component in range"))
                .collect(),
            TaskId::Ring => self
                .ring_radii
                .iter()
                .map(|r| Condition::ring(*r).expect("validated radius"))
                .collect(),
            TaskId::Preference => vec![Condition::preference()],
            TaskId::Quality => vec![Condition::quality()],
        }
    }

    pub fn all_conditions(&self) -> Vec<Condition> {
        TaskId::ALL.iter().flat_map(|t| self.conditions(*t)).collect()
    }

    /// Draws `n` points from the data mixture.
    pub fn sample_data(&self, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let comp = self.pick_component(rng.gen::<f64>());
                comp.mean
                    .iter()
                    .map(|m| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        m + comp.scale * z
                    })
                    .collect()
            })
            .collect()
    }

    fn pick_component(&self, u: f64) -> &MixtureComponent {
        let mut acc = 0.0;
        for c in &self.data_mixture {
            acc += c.weight;
            if u < acc {
                return c;
            }
        }
        self.data_mixture.last().unwrap()
    }

    pub fn density(&self, x: &[f64]) -> f64 {
        let d = x.len() as f64;
        self.data_mixture
            .iter()
            .map(|c| {
                let sq: f64 = x.iter().zip(&c.mean).map(|(a, b)| (a - b) * (a - b)).sum();
                let var = c.scale * c.scale;
                c.weight * (-0.5 * sq / var).exp() / (2.0 * std::f64::consts::PI * var).powf(0.5 * d)
            })
            .sum()
    }

    fn peak_density(&self) -> f64 {
        let d = self.state_dim() as f64;
        self.data_mixture
            .iter()
            .map(|c| c.weight / (2.0 * std::f64::consts::PI * c.scale * c.scale).powf(0.5 * d))
            .fold(0.0, f64::max)
    }

    /// Index of the component whose mean is closest to `x`.
    pub fn nearest_component(&self, x: &[f64]) -> (usize, f64) {
        self.data_mixture
            .iter()
            .enumerate()
            .map(|(k, c)| (k, dist(x, &c.mean)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap()
    }
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    dist_sq(a, b).sqrt()
}

fn expect_task(c: &Condition, task: TaskId) -> Result<()> {
    if c.task != task {
        return Err(Error::WrongTask {
            expected: task,
            got: c.task,
        });
    }
    Ok(())
}

pub fn reward_region(x: &[f64], c: &Condition, world: &TaskWorld) -> Result<f64> {
    expect_task(c, TaskId::Region)?;
    let k = c
        .component()
        .filter(|k| *k < world.n_components())
        .ok_or_else(|| Error::InvalidArgument(format!("{} names no component of this world", c.label())))?;
    let tau = world.region_width;
    Ok((-dist_sq(x, &world.data_mixture[k].mean) / (2.0 * tau * tau)).exp())
}

pub fn reward_ring(x: &[f64], c: &Condition, world: &TaskWorld) -> Result<f64> {
    expect_task(c, TaskId::Ring)?;
    let r = c
        .radius()
        .ok_or_else(|| Error::InvalidArgument("ring condition without radius".into()))?;
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let tau = world.ring_width;
    Ok((-(norm - r).powi(2) / (2.0 * tau * tau)).exp())
}

pub fn reward_preference(x: &[f64], world: &TaskWorld) -> f64 {
    let s = world.preference_scale;
    (-dist_sq(x, &world.preference_center) / (2.0 * s * s)).exp()
}

/// Mixture density at `x` relative to the tallest component peak.
pub fn reward_quality(x: &[f64], world: &TaskWorld) -> f64 {
    (world.density(x) / world.peak_density()).min(1.0)
}

/// Reward of the condition's own task.
pub fn task_reward(x: &[f64], c: &Condition, world: &TaskWorld) -> Result<f64> {
    match c.task {
        TaskId::Region => reward_region(x, c, world),
        TaskId::Ring => reward_ring(x, c, world),
        TaskId::Preference => Ok(reward_preference(x, world)),
        TaskId::Quality => Ok(reward_quality(x, world)),
    }
}

/// Every reward that can be evaluated under `c`: the condition's own task
/// plus the two condition-free rewards.
pub fn applicable_rewards(x: &[f64], c: &Condition, world: &TaskWorld) -> Result<BTreeMap<TaskId, f64>> {
    let mut out = BTreeMap::new();
    out.insert(c.task, task_reward(x, c, world)?);
    out.insert(TaskId::Preference, reward_preference(x, world));
    out.insert(TaskId::Quality, reward_quality(x, world));
    Ok(out)
}

/// `(r − mean) / max(std, ε)` with the population standard deviation.
pub fn group_advantage(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "advantage needs at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std <= ADVANTAGE_STD_FLOOR {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// Weighted mean of the per-task rewards over the keys present in both maps.
pub fn mix_reward(per_task: &BTreeMap<TaskId, f64>, weights: &BTreeMap<TaskId, f64>) -> Result<f64> {
    if per_task.is_empty() || weights.is_empty() {
        return Err(Error::InvalidArgument("reward mix needs rewards and weights".into()));
    }
    if weights.values().any(|w| !(*w >= 0.0)) {
        return Err(Error::InvalidArgument("reward weights must be non-negative".into()));
    }
    let (num, den) = per_task
        .iter()
        .filter_map(|(task, r)| weights.get(task).map(|w| (w * r, *w)))
        .fold((0.0, 0.0), |(n, d), (a, b)| (n + a, d + b));
    if den <= 0.0 {
        return Err(Error::InvalidArgument(
            "no positive weight on any available reward".into(),
        ));
    }
    Ok(num / den)
}

/// What a training run optimizes: a non-negative weighting over tasks.
/// A single entry is a specialist reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    pub weights: BTreeMap<TaskId, f64>,
}

impl RewardSpec {
    pub fn single(task: TaskId) -> Self {
        RewardSpec {
            weights: BTreeMap::from([(task, 1.0)]),
        }
    }

    pub fn blend(weights: &[(TaskId, f64)]) -> Self {
        RewardSpec {
            weights: weights.iter().copied().collect(),
        }
    }

    pub fn evaluate(&self, x: &[f64], c: &Condition, world: &TaskWorld) -> Result<f64> {
        if self.weights.len() == 1 {
            let (task, _) = self.weights.iter().next().unwrap();
            if *task == c.task {
                return task_reward(x, c, world);
            }
        }
        mix_reward(&applicable_rewards(x, c, world)?, &self.weights)
    }
}

/// Scores every final sample of the group under `spec`.
pub fn score_group(group: &mut Group, spec: &RewardSpec, world: &TaskWorld) -> Result<()> {
    let rewards = group
        .final_samples()
        .map(|x| spec.evaluate(x, &group.condition, world))
        .collect::<Result<Vec<_>>>()?;
    group.rewards = Some(rewards);
    Ok(())
}
