//! Oracle suite: every identity the training code relies on, checked
//! against an independent computation, with the measured error reported
//! next to its tolerance.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::coldstart::{merge_models, MergeSpec};
use crate::config::LabContext;
use crate::error::Result;
use crate::flow::{
    fm_loss, gaussian_kl_general, kl_means, mean_from_velocity, transition_logprob, transition_variance, velocity,
    weight_w, NoiseSchedule, PathSample, TimeGrid,
};
use crate::numgrad::{finite_diff_grad, init_params, ArchSpec, GradVector, ParamVector};
use crate::opd::{
    flow_opd_loss, mar_loss, opd_loss_on_states, pg_opd_gradient, transition_score_into, visited_states,
    weighted_velocity_loss, ProbeState, TeacherEnsemble,
};
use crate::rollout::{derive_seed, replay_logprob, sample_group, sample_trajectory, Condition, Group, TaskId};

/// Replaceable pieces of the maths, so that the suite can be shown to
/// notice a wrong formula.
#[derive(Debug, Clone, Copy)]
pub struct Hooks {
    pub weight: fn(f64, f64, f64) -> f64,
}

impl Default for Hooks {
    fn default() -> Self {
        Hooks { weight: weight_w }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    /// Passes when `measured ≤ tolerance` (NaN fails).
    pub fn at_most(name: &str, measured: f64, tolerance: f64, detail: String) -> Self {
        CheckResult {
            name: name.to_string(),
            measured,
            tolerance,
            passed: measured <= tolerance,
            detail,
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {:<28} measured {:.3e}  tolerance {:.3e}  {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.tolerance,
            self.detail
        )
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Report {
    pub checks: Vec<CheckResult>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let _ = writeln!(out, "{}", c.line());
        }
        let failed = self.checks.iter().filter(|c| !c.passed).count();
        let _ = writeln!(out, "{} checks, {failed} failed", self.checks.len());
        out
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

fn normal_vec(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> Vec<f64> {
    (0..d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Random transition setting: time, step, noise level.
fn random_step(rng: &mut ChaCha8Rng) -> (f64, f64, f64) {
    let t = rng.gen_range(0.02..0.98);
    let dt = rng.gen_range(0.005..0.1);
    let a = rng.gen_range(0.3..1.5);
    let sigma = NoiseSchedule { a }.sigma(t).expect("t inside (0, 1)");
    (t, dt, sigma)
}

/// General Gaussian KL, isotropic mean form, and velocity form agree.
pub fn check_kl_chain(instances: usize, seed: u64, hooks: &Hooks) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let d = rng.gen_range(1..=4);
        let (t, dt, sigma) = random_step(&mut rng);
        let x = normal_vec(&mut rng, d, 2.0);
        let v = normal_vec(&mut rng, d, 1.0);
        let u = normal_vec(&mut rng, d, 1.0);
        let mu_v = mean_from_velocity(&x, &v, t, dt, sigma)?;
        let mu_u = mean_from_velocity(&x, &u, t, dt, sigma)?;
        let cov = DMatrix::identity(d, d) * transition_variance(sigma, dt);
        let general = gaussian_kl_general(&mu_v, &cov, &mu_u, &cov)?;
        let means = kl_means(&mu_v, &mu_u, sigma, dt);
        let sq: f64 = v.iter().zip(&u).map(|(a, b)| (a - b) * (a - b)).sum();
        let vel = (hooks.weight)(t, sigma, dt) * sq;
        worst = worst.max(rel(general, means)).max(rel(vel, means));
    }
    Ok(CheckResult::at_most(
        "kl_chain",
        worst,
        1e-9,
        format!("max relative error over {instances} instances"),
    ))
}

/// Closed-form KL against a Monte-Carlo estimate of `E_π[log π − log π*]`.
/// Measured value: worst deviation in standard errors.
pub fn check_mc_kl(pairs: usize, samples: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..pairs {
        let d = 2;
        let (_, dt, sigma) = random_step(&mut rng);
        let var = transition_variance(sigma, dt);
        let mu = normal_vec(&mut rng, d, 1.0);
        // keep the pair close enough that the estimator's variance is sane
        let offset = normal_vec(&mut rng, d, 0.7 * var.sqrt());
        let target: Vec<f64> = mu.iter().zip(&offset).map(|(a, b)| a + b).collect();
        let exact = kl_means(&mu, &target, sigma, dt);
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        let sd = var.sqrt();
        let mut x = vec![0.0; d];
        for _ in 0..samples {
            for (xi, m) in x.iter_mut().zip(&mu) {
                *xi = m + sd * rng.sample::<f64, _>(StandardNormal);
            }
            let s = transition_logprob(&x, &mu, var)? - transition_logprob(&x, &target, var)?;
            sum += s;
            sum_sq += s * s;
        }
        let n = samples as f64;
        let mean = sum / n;
        let se = ((sum_sq / n - mean * mean).max(0.0) / n).sqrt();
        worst = worst.max((mean - exact).abs() / se.max(1e-300));
    }
    Ok(CheckResult::at_most(
        "mc_kl",
        worst,
        3.0,
        format!("worst |MC - exact| in standard errors over {pairs} pairs of {samples} samples"),
    ))
}

fn oracle_arch() -> ArchSpec {
    ArchSpec::new(11, vec![8, 6], 2).expect("valid oracle arch")
}

fn random_condition(rng: &mut ChaCha8Rng) -> Condition {
    match rng.gen_range(0..4) {
        0 => Condition::region(rng.gen_range(0..4), 4).expect("component in range"),
        1 => Condition::ring(rng.gen_range(1.0..5.0)).expect("positive radius"),
        2 => Condition::preference(),
        _ => Condition::quality(),
    }
}

fn random_probe(rng: &mut ChaCha8Rng) -> ProbeState {
    let (t, dt, sigma_t) = random_step(rng);
    ProbeState {
        x: normal_vec(rng, 2, 2.0),
        t,
        dt,
        sigma_t,
        condition: random_condition(rng),
    }
}

fn random_ensemble(rng: &mut ChaCha8Rng) -> Result<TeacherEnsemble> {
    let arch = oracle_arch();
    let mut teachers = BTreeMap::new();
    for t in TaskId::ALL {
        teachers.insert(t, init_params(&arch, rng.gen())?);
    }
    TeacherEnsemble::from_teachers(teachers, init_params(&arch, rng.gen())?)
}

const FD_EPS: f64 = 1e-5;

fn fd_check<F, G>(name: &str, instances: usize, seed: u64, mut make: F) -> Result<CheckResult>
where
    F: FnMut(&mut ChaCha8Rng) -> Result<(ParamVector, GradVector, G)>,
    G: Fn(&ParamVector) -> f64,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (params, analytic, f) = make(&mut rng)?;
        let numeric = finite_diff_grad(f, &params, FD_EPS)?;
        worst = worst.max(analytic.relative_error(&numeric));
    }
    Ok(CheckResult::at_most(
        name,
        worst,
        1e-4,
        format!("max relative L2 error vs central differences over {instances} instances"),
    ))
}

/// Analytic gradients of the four differentiable objectives against
/// central finite differences.
pub fn check_gradients(instances: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let arch = oracle_arch();
    let fm = fd_check("grad_fm_loss", instances, derive_seed(seed, 0), |rng| {
        let params = init_params(&arch, rng.gen())?;
        let batch = (0..4)
            .map(|_| {
                let x0 = normal_vec(rng, 2, 3.0);
                let x1 = normal_vec(rng, 2, 1.0);
                PathSample::new(x0, x1, rng.gen_range(0.02..0.98), random_condition(rng))
            })
            .collect::<Result<Vec<_>>>()?;
        let (_, grad) = fm_loss(&params, &batch)?;
        Ok((params, grad, move |p: &ParamVector| {
            fm_loss(p, &batch).map(|r| r.0).unwrap_or(f64::NAN)
        }))
    })?;
    let opd = fd_check("grad_flow_opd_loss", instances, derive_seed(seed, 1), |rng| {
        let ens = random_ensemble(rng)?;
        let student = init_params(&arch, rng.gen())?;
        let states: Vec<ProbeState> = (0..4).map(|_| random_probe(rng)).collect();
        let (_, grad) = opd_loss_on_states(&student, &ens, &states)?;
        Ok((student, grad, move |p: &ParamVector| {
            opd_loss_on_states(p, &ens, &states).map(|r| r.0).unwrap_or(f64::NAN)
        }))
    })?;
    let mar = fd_check("grad_mar_loss", instances, derive_seed(seed, 2), |rng| {
        let anchor = init_params(&arch, rng.gen())?;
        let student = init_params(&arch, rng.gen())?;
        let probes: Vec<ProbeState> = (0..4).map(|_| random_probe(rng)).collect();
        let (_, grad) = mar_loss(&student, &anchor, &probes)?;
        Ok((student, grad, move |p: &ParamVector| {
            mar_loss(p, &anchor, &probes).map(|r| r.0).unwrap_or(f64::NAN)
        }))
    })?;
    let logprob = fd_check("grad_transition_logprob", instances, derive_seed(seed, 3), |rng| {
        let params = init_params(&arch, rng.gen())?;
        let grid = TimeGrid::new(rng.gen_range(2..12), 0.02, 0.98)?;
        let schedule = NoiseSchedule {
            a: rng.gen_range(0.3..1.2),
        };
        let traj = sample_trajectory(&params, &random_condition(rng), &grid, &schedule, rng.gen())?;
        let step = rng.gen_range(0..traj.steps());
        let (_, grad) = replay_logprob(&params, &traj, step)?;
        Ok((params, grad, move |p: &ParamVector| {
            replay_logprob(p, &traj, step).map(|r| r.0).unwrap_or(f64::NAN)
        }))
    })?;
    Ok(vec![fm, opd, mar, logprob])
}

fn oracle_groups(
    student: &ParamVector,
    n_groups: usize,
    group_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Group>> {
    let grid = TimeGrid::training();
    let schedule = NoiseSchedule::default();
    (0..n_groups)
        .map(|_| sample_group(student, &random_condition(rng), group_size, &grid, &schedule, rng.gen()))
        .collect()
}

/// On shared on-policy batches: the summed per-step KLs equal the summed
/// weighted velocity gaps, and the gradient of the KL sum taken through
/// the transition means equals the regression gradient.
pub fn check_opd_identity(batches: usize, seed: u64, hooks: &Hooks) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = oracle_arch();
    let (mut worst_value, mut worst_grad): (f64, f64) = (0.0, 0.0);
    for _ in 0..batches {
        let ens = random_ensemble(&mut rng)?;
        let student = init_params(&arch, rng.gen())?;
        let groups = oracle_groups(&student, 3, 4, &mut rng)?;
        let pg = pg_opd_gradient(&student, &ens, &groups)?;
        let states = visited_states(&groups)?;
        let mut vel_sum = 0.0;
        for s in &states {
            let v = velocity(&student, &s.x, s.t, &s.condition)?;
            let target = velocity(ens.expert_for(&s.condition)?, &s.x, s.t, &s.condition)?;
            let sq: f64 = v.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum();
            vel_sum += (hooks.weight)(s.t, s.sigma_t, s.dt) * sq;
        }
        let kl_sum: f64 = pg.step_kl.iter().sum();
        worst_value = worst_value.max(rel(vel_sum, kl_sum));
        let (_, mse_grad) = flow_opd_loss(&student, &ens, &groups)?;
        let mut kl_grad = pg.direct.clone();
        kl_grad.scale(-1.0);
        worst_grad = worst_grad.max(kl_grad.relative_error(&mse_grad));
    }
    Ok(vec![
        CheckResult::at_most(
            "kl_sum_equals_weighted_mse",
            worst_value,
            1e-9,
            format!("max relative error over {batches} on-policy batches"),
        ),
        CheckResult::at_most(
            "kl_gradient_equals_mse_gradient",
            worst_grad,
            1e-9,
            format!("max relative L2 error over {batches} on-policy batches"),
        ),
    ])
}

/// The score part of the policy-gradient form has zero mean at fixed
/// states: with N fresh actions, the norm of the empirical mean must stay
/// within `5·std/√N`. Measured value: that norm divided by `std/√N`.
pub fn check_score_nullity(actions: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = oracle_arch();
    let ens = random_ensemble(&mut rng)?;
    let student = init_params(&arch, rng.gen())?;
    let states: Vec<ProbeState> = (0..3).map(|_| random_probe(&mut rng)).collect();
    let mut consts = Vec::with_capacity(states.len());
    let mut mus = Vec::with_capacity(states.len());
    for s in &states {
        let v = velocity(&student, &s.x, s.t, &s.condition)?;
        let vt = velocity(ens.expert_for(&s.condition)?, &s.x, s.t, &s.condition)?;
        let mu = mean_from_velocity(&s.x, &v, s.t, s.dt, s.sigma_t)?;
        let mu_t = mean_from_velocity(&s.x, &vt, s.t, s.dt, s.sigma_t)?;
        consts.push(-kl_means(&mu, &mu_t, s.sigma_t, s.dt));
        mus.push(mu);
    }
    let p = student.len();
    let mut sum = vec![0.0; p];
    let mut sum_sq = 0.0;
    let mut g = vec![0.0; p];
    for _ in 0..actions {
        g.iter_mut().for_each(|v| *v = 0.0);
        for ((s, mu), c) in states.iter().zip(&mus).zip(&consts) {
            let sd = transition_variance(s.sigma_t, s.dt).sqrt();
            let action: Vec<f64> = mu
                .iter()
                .map(|m| m + sd * rng.sample::<f64, _>(StandardNormal))
                .collect();
            transition_score_into(&student, s, &action, *c, &mut g)?;
        }
        for (a, b) in sum.iter_mut().zip(&g) {
            *a += b;
        }
        sum_sq += g.iter().map(|v| v * v).sum::<f64>();
    }
    let n = actions as f64;
    let mean_norm_sq: f64 = sum.iter().map(|s| (s / n) * (s / n)).sum();
    let spread = (sum_sq / n - mean_norm_sq).max(0.0).sqrt();
    let ratio = mean_norm_sq.sqrt() / (spread / n.sqrt()).max(1e-300);
    Ok(CheckResult::at_most(
        "score_term_nullity",
        ratio,
        5.0,
        format!("|mean score term| in units of std/sqrt(N), N = {actions}"),
    ))
}

/// Bit-exact merge identities.
pub fn check_merge_identities(seed: u64) -> Result<CheckResult> {
    let arch = oracle_arch();
    let a = init_params(&arch, derive_seed(seed, 0))?;
    let b = init_params(&arch, derive_seed(seed, 1))?;
    let same = merge_models(&MergeSpec::uniform(vec![a.clone(); 4]))? == a;
    let first = merge_models(&MergeSpec {
        inputs: vec![a.clone(), b],
        weights: vec![1.0, 0.0],
    })? == a;
    let failures = (!same) as u8 + (!first) as u8;
    Ok(CheckResult::at_most(
        "merge_identities",
        failures as f64,
        0.0,
        "identical inputs and one-hot weights return the input bit for bit".into(),
    ))
}

/// Perturbing a teacher changes the loss, and the student gradient is the
/// one obtained with its targets frozen as constants.
pub fn check_stop_gradient(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = oracle_arch();
    let student = init_params(&arch, rng.gen())?;
    let ens = random_ensemble(&mut rng)?;
    let states: Vec<ProbeState> = (0..6).map(|_| random_probe(&mut rng)).collect();
    let mut experts = ens.experts().clone();
    for p in experts.values_mut() {
        *p = init_params(&arch, rng.gen())?;
    }
    let moved = TeacherEnsemble::new(experts, ens.anchor().clone(), ens.routing().clone())?;
    let (base, _) = opd_loss_on_states(&student, &ens, &states)?;
    let (loss, grad) = opd_loss_on_states(&student, &moved, &states)?;
    let frozen: Vec<Vec<f64>> = states
        .iter()
        .map(|s| velocity(moved.expert_for(&s.condition)?, &s.x, s.t, &s.condition))
        .collect::<Result<_>>()?;
    let mut i = 0;
    let (_, constant_grad) = weighted_velocity_loss(&student, &states, |_| {
        i += 1;
        Ok(frozen[i - 1].clone())
    })?;
    let err = grad.relative_error(&constant_grad);
    let loss_changed = loss != base;
    Ok(CheckResult::at_most(
        "stop_gradient",
        if loss_changed { err } else { f64::INFINITY },
        0.0,
        "gradient with perturbed teachers equals the constant-target gradient".into(),
    ))
}

/// Changing task k's teacher leaves the gradient of every other task's
/// states unchanged, and the full-batch gradient is the count-weighted sum
/// of the per-task gradients.
pub fn check_routing_isolation(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = oracle_arch();
    let student = init_params(&arch, rng.gen())?;
    let ens = random_ensemble(&mut rng)?;
    let states: Vec<ProbeState> = (0..12).map(|_| random_probe(&mut rng)).collect();
    let region: Vec<ProbeState> = states
        .iter()
        .filter(|s| s.condition.task == TaskId::Region)
        .cloned()
        .collect();
    let rest: Vec<ProbeState> = states
        .iter()
        .filter(|s| s.condition.task != TaskId::Region)
        .cloned()
        .collect();
    let mut experts = ens.experts().clone();
    experts.insert(TaskId::Region.name().to_string(), init_params(&arch, rng.gen())?);
    let moved = TeacherEnsemble::new(experts, ens.anchor().clone(), ens.routing().clone())?;
    let (_, g_rest) = opd_loss_on_states(&student, &ens, &rest)?;
    let (_, g_rest_moved) = opd_loss_on_states(&student, &moved, &rest)?;
    let mut worst = g_rest_moved.relative_error(&g_rest);
    if !region.is_empty() {
        let (_, g_all) = opd_loss_on_states(&student, &ens, &states)?;
        let (_, mut g_region) = opd_loss_on_states(&student, &ens, &region)?;
        let n = states.len() as f64;
        g_region.scale(region.len() as f64 / n);
        let mut recombined = g_rest.clone();
        recombined.scale(rest.len() as f64 / n);
        recombined.add_assign(&g_region);
        worst = worst.max(recombined.relative_error(&g_all));
    }
    Ok(CheckResult::at_most(
        "routing_isolation",
        worst,
        1e-12,
        "other tasks' gradients ignore the region teacher; batch gradient decomposes by task".into(),
    ))
}

/// Problem sizes of the suite.
#[derive(Debug, Clone, Copy)]
pub struct SuiteSize {
    pub kl_instances: usize,
    pub mc_pairs: usize,
    pub mc_samples: usize,
    pub grad_instances: usize,
    pub identity_batches: usize,
    pub nullity_actions: usize,
}

impl Default for SuiteSize {
    fn default() -> Self {
        SuiteSize {
            kl_instances: 1000,
            mc_pairs: 20,
            mc_samples: 1_000_000,
            grad_instances: 50,
            identity_batches: 10,
            nullity_actions: 10_000,
        }
    }
}

pub fn run_suite(seed: u64, size: &SuiteSize, hooks: &Hooks) -> Result<Report> {
    let s = |i| derive_seed(seed, i);
    let mut checks = vec![
        check_kl_chain(size.kl_instances, s(0), hooks)?,
        check_mc_kl(size.mc_pairs, size.mc_samples, s(1))?,
    ];
    checks.extend(check_gradients(size.grad_instances, s(2))?);
    checks.extend(check_opd_identity(size.identity_batches, s(3), hooks)?);
    checks.push(check_score_nullity(size.nullity_actions, s(4))?);
    checks.push(check_merge_identities(s(5))?);
    checks.push(check_stop_gradient(s(6))?);
    checks.push(check_routing_isolation(s(7))?);
    Ok(Report { checks })
}

/// The suite with the lab's own seed; the context is only used for its seed.
pub fn run_default(ctx: &LabContext) -> Result<Report> {
    run_suite(ctx.eval.seed, &SuiteSize::default(), &Hooks::default())
}
