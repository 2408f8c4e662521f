//! Browser bindings for the demo page in `www/`.
//!
//! Everything here runs on the default world. Sample paths use the exact
//! velocity of the data mixture, so the page needs no trained checkpoint.

use flowopd::flow::{em_step, weight_w};
use flowopd::rewards::task_reward;
use flowopd::rollout::{derive_seed, standard_normal};
use flowopd::{Condition, NoiseSchedule, TaskId, TaskWorld, TimeGrid};
use wasm_bindgen::prelude::*;

fn js_err(e: flowopd::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Flat `[t, σ_t, w(t), …]` triples over an evaluation grid of `steps` steps.
#[wasm_bindgen]
pub fn weight_curve(noise_level: f64, steps: usize) -> Result<Vec<f64>, JsError> {
    let schedule = NoiseSchedule { a: noise_level };
    let grid = TimeGrid::new(steps, 0.02, 0.98).map_err(js_err)?;
    let dt = grid.dt();
    let mut out = Vec::with_capacity(3 * steps);
    for t in grid.times().into_iter().take(steps) {
        let s = schedule.sigma(t).map_err(js_err)?;
        out.extend([t, s, weight_w(t, s, dt)]);
    }
    Ok(out)
}

/// `E[x1 − x0 | x_t]` for the OT path from the world's Gaussian mixture,
/// optionally restricted to a single component.
fn mixture_velocity(world: &TaskWorld, x: &[f64], t: f64, only: Option<usize>) -> Vec<f64> {
    let d = x.len();
    let mut terms = Vec::with_capacity(world.data_mixture.len());
    for (k, c) in world.data_mixture.iter().enumerate() {
        if only.is_some_and(|j| j != k) {
            continue;
        }
        let s2 = c.scale * c.scale;
        let var = (1.0 - t) * (1.0 - t) * s2 + t * t;
        let centred: Vec<f64> = x.iter().zip(&c.mean).map(|(xi, m)| xi - (1.0 - t) * m).collect();
        let sq: f64 = centred.iter().map(|v| v * v).sum();
        let log_w = c.weight.ln() - 0.5 * sq / var - 0.5 * d as f64 * var.ln();
        let gain = (t - (1.0 - t) * s2) / var;
        let v: Vec<f64> = centred.iter().zip(&c.mean).map(|(z, m)| gain * z - m).collect();
        terms.push((log_w, v));
    }
    let top = terms.iter().map(|(l, _)| *l).fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    let mut v = vec![0.0; d];
    for (l, vk) in &terms {
        let w = (l - top).exp();
        total += w;
        for (a, b) in v.iter_mut().zip(vk) {
            *a += w * b;
        }
    }
    v.iter().map(|a| a / total).collect()
}

/// `n` SDE paths from noise to data as flat `[x, y]` points, `steps + 1`
/// per path. `component` < 0 samples the whole mixture.
#[wasm_bindgen]
pub fn sample_paths(noise_level: f64, steps: usize, n: usize, component: i32, seed: u64) -> Result<Vec<f64>, JsError> {
    let world = TaskWorld::default();
    let schedule = NoiseSchedule { a: noise_level };
    let grid = TimeGrid::new(steps, 0.02, 0.98).map_err(js_err)?;
    let only = usize::try_from(component).ok().filter(|k| *k < world.n_components());
    let dt = grid.dt();
    let mut out = Vec::with_capacity(n * (steps + 1) * 2);
    for i in 0..n {
        let path_seed = derive_seed(seed, i as u64);
        let mut x = standard_normal(derive_seed(path_seed, 0), 2);
        out.extend_from_slice(&x);
        for (k, t) in grid.times().into_iter().take(steps).enumerate() {
            let s = schedule.sigma(t).map_err(js_err)?;
            let v = mixture_velocity(&world, &x, t, only);
            let z = standard_normal(derive_seed(path_seed, k as u64 + 1), 2);
            x = em_step(&x, &v, t, dt, s, &z).map_err(js_err)?;
            out.extend_from_slice(&x);
        }
    }
    Ok(out)
}

fn condition_for(world: &TaskWorld, task: TaskId, component: usize) -> Result<Condition, JsError> {
    match task {
        TaskId::Region => Condition::region(component % world.n_components(), world.n_components()).map_err(js_err),
        TaskId::Ring => Condition::ring(world.ring_radii[0]).map_err(js_err),
        TaskId::Preference => Ok(Condition::preference()),
        TaskId::Quality => Ok(Condition::quality()),
    }
}

/// Row-major `n × n` reward grid over `[-extent, extent]²`, top row first.
#[wasm_bindgen]
pub fn reward_field(task: &str, component: usize, n: usize, extent: f64) -> Result<Vec<f64>, JsError> {
    let world = TaskWorld::default();
    let task = TaskId::parse(task).map_err(js_err)?;
    let c = condition_for(&world, task, component)?;
    let step = 2.0 * extent / (n.max(2) - 1) as f64;
    let mut out = Vec::with_capacity(n * n);
    for row in 0..n {
        let y = extent - row as f64 * step;
        for col in 0..n {
            let x = -extent + col as f64 * step;
            out.push(task_reward(&[x, y], &c, &world).map_err(js_err)?);
        }
    }
    Ok(out)
}
