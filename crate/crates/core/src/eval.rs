//! Fixed evaluation protocol: per-task mean rewards of SDE samples on the
//! evaluation grid, plus cross-reward tables for seesaw diagnostics.

use std::collections::BTreeMap;

use crate::config::LabContext;
use crate::error::Result;
use crate::numgrad::ParamVector;
use crate::rewards::{applicable_rewards, task_reward};
use crate::rollout::{derive_seed, sample_group, Condition, TaskId};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Mean reward of each task on its own conditions.
    pub per_task: BTreeMap<TaskId, f64>,
    /// For each task's condition set, the mean of every reward applicable there.
    pub cross: BTreeMap<TaskId, BTreeMap<TaskId, f64>>,
}

impl EvalReport {
    /// Mean of the four per-task scores, each already in [0, 1].
    pub fn normalized_average(&self) -> f64 {
        self.per_task.values().sum::<f64>() / self.per_task.len() as f64
    }

    pub fn render(&self) -> String {
        let mut out = String::from("task,own_reward");
        for t in TaskId::ALL {
            out.push_str(&format!(",{}_on_these_prompts", t.name()));
        }
        out.push('\n');
        for (task, own) in &self.per_task {
            out.push_str(&format!("{},{own}", task.name()));
            for t in TaskId::ALL {
                match self.cross.get(task).and_then(|m| m.get(&t)) {
                    Some(v) => out.push_str(&format!(",{v}")),
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out.push_str(&format!("normalized_average,{}\n", self.normalized_average()));
        out
    }
}

/// Samples split evenly over the task's conditions (at least two each).
fn per_condition(total: usize, n_conditions: usize) -> usize {
    (total / n_conditions.max(1)).max(2)
}

/// Final samples for every condition of `task` on the evaluation grid.
pub fn eval_samples(params: &ParamVector, task: TaskId, ctx: &LabContext) -> Result<Vec<(Condition, Vec<Vec<f64>>)>> {
    let conditions = ctx.world.conditions(task);
    let n = per_condition(ctx.eval.samples_per_task, conditions.len());
    conditions
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let seed = derive_seed(derive_seed(ctx.eval.seed, task.index() as u64), i as u64);
            let group = sample_group(params, &c, n, &ctx.eval_grid, &ctx.schedule, seed)?;
            let samples = group.final_samples().map(|x| x.to_vec()).collect();
            Ok((c, samples))
        })
        .collect()
}

pub fn evaluate_task(params: &ParamVector, task: TaskId, ctx: &LabContext) -> Result<(f64, BTreeMap<TaskId, f64>)> {
    let mut own = 0.0;
    let mut cross: BTreeMap<TaskId, f64> = BTreeMap::new();
    let mut count = 0usize;
    for (c, samples) in eval_samples(params, task, ctx)? {
        for x in &samples {
            own += task_reward(x, &c, &ctx.world)?;
            for (t, r) in applicable_rewards(x, &c, &ctx.world)? {
                *cross.entry(t).or_default() += r;
            }
            count += 1;
        }
    }
    let n = count as f64;
    cross.values_mut().for_each(|v| *v /= n);
    Ok((own / n, cross))
}

pub fn evaluate(params: &ParamVector, ctx: &LabContext) -> Result<EvalReport> {
    let mut per_task = BTreeMap::new();
    let mut cross = BTreeMap::new();
    for task in TaskId::ALL {
        let (own, table) = evaluate_task(params, task, ctx)?;
        per_task.insert(task, own);
        cross.insert(task, table);
    }
    Ok(EvalReport { per_task, cross })
}
