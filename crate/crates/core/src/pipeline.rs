//! Phase orchestration: pretraining, teachers, baselines, cold start,
//! distillation and evaluation, each a pure function of the configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::coldstart::{build_sft_dataset, merge_models, sft_train, MergeSpec};
use crate::config::{ColdstartMode, ExperimentConfig, MetricsLog, MixConfig, MixMode, Phase};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::flow::{fm_loss, PathSample, TimeGrid};
use crate::grpo::{gradient_interference, train_mix, train_on_spec, train_teacher, Interference};
use crate::numgrad::{init_params, ArchSpec, ParamVector};
use crate::opd::{train_student, TeacherEnsemble};
use crate::optim::Optimizer;
use crate::rewards::TaskWorld;
use crate::rollout::{derive_seed, standard_normal, Condition, TaskId};
use crate::verify::{self, Report};

/// Seed streams of the individual phases.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const PRETRAIN: u64 = 2;
    pub const HELDOUT: u64 = 3;
    pub const TEACHER: u64 = 4;
    pub const ANCHOR: u64 = 5;
    pub const MIX: u64 = 6;
    pub const SFT: u64 = 7;
    pub const OPD: u64 = 8;
    pub const DIAG: u64 = 9;
}

/// Flow-matching batch: data points paired with fresh noise at times drawn
/// uniformly on the grid's range, conditions drawn from `conditions`.
pub fn fm_batch(data: &[Vec<f64>], conditions: &[Condition], grid: &TimeGrid, seed: u64) -> Result<Vec<PathSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    data.iter()
        .enumerate()
        .map(|(i, x0)| {
            let noise = standard_normal(derive_seed(seed, i as u64), x0.len());
            let t = rng.gen_range(grid.t_min..grid.t_max);
            let c = conditions[rng.gen_range(0..conditions.len())].clone();
            PathSample::new(x0.clone(), noise, t, c)
        })
        .collect()
}

fn pretrain_batch(
    world: &TaskWorld,
    conditions: &[Condition],
    n: usize,
    grid: &TimeGrid,
    seed: u64,
) -> Result<Vec<PathSample>> {
    let data = world.sample_data(n, derive_seed(seed, u64::MAX));
    fm_batch(&data, conditions, grid, seed)
}

pub fn pretrain_fm(cfg: &ExperimentConfig) -> Result<(ParamVector, MetricsLog)> {
    let pc = &cfg.pretrain;
    let conditions = cfg.world.all_conditions();
    let mut params = init_params(&cfg.arch, derive_seed(cfg.seed, streams::INIT))?;
    let heldout_seed = derive_seed(cfg.seed, streams::HELDOUT);
    let heldout = pretrain_batch(
        &cfg.world,
        &conditions,
        pc.heldout_size.max(1),
        &cfg.train_grid,
        heldout_seed,
    )?;
    let mut opt = Optimizer::new(pc.optimizer, params.len());
    let mut log = MetricsLog::new(Phase::Pretrain, &["loss", "grad_norm", "heldout_loss"]);
    let stream = derive_seed(cfg.seed, streams::PRETRAIN);
    for it in 0..pc.iterations {
        let batch = pretrain_batch(
            &cfg.world,
            &conditions,
            pc.batch_size,
            &cfg.train_grid,
            derive_seed(stream, it as u64),
        )?;
        let (loss, grad) = fm_loss(&params, &batch)?;
        if !loss.is_finite() {
            return Err(Error::diverged(it + 1, "non-finite flow-matching loss", Some(&params)));
        }
        let before = params.clone();
        opt.descend(&mut params, &grad)
            .map_err(|e| Error::diverged(it + 1, e.to_string(), Some(&before)))?;
        let last = it + 1 == pc.iterations;
        let heldout_loss = if last || (it + 1) % 100 == 0 {
            Some(fm_loss(&params, &heldout)?.0)
        } else {
            None
        };
        log.push(
            it + 1,
            &[
                ("loss", Some(loss)),
                ("grad_norm", Some(grad.norm())),
                ("heldout_loss", heldout_loss),
            ],
        )?;
    }
    Ok((params, log))
}

/// Files of one run directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn pretrain(&self) -> PathBuf {
        self.path("pretrain.ckpt")
    }

    pub fn teacher(&self, task: TaskId) -> PathBuf {
        self.path(&format!("teacher_{}.ckpt", task.name()))
    }

    pub fn anchor(&self) -> PathBuf {
        self.path("anchor.ckpt")
    }

    pub fn mix(&self, mode: MixMode) -> PathBuf {
        self.path(&format!("mix_{}.ckpt", mix_name(mode)))
    }

    pub fn coldstart(&self, mode: ColdstartMode) -> PathBuf {
        self.path(&format!("coldstart_{}.ckpt", coldstart_name(mode)))
    }

    pub fn student(&self) -> PathBuf {
        self.path("student.ckpt")
    }

    fn create(&self) -> Result<()> {
        std::fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))
    }

    /// Writes a checkpoint that must not exist yet.
    fn write_checkpoint(&self, path: &Path, params: &ParamVector) -> Result<()> {
        let file = std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        params.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    fn write_text(&self, name: &str, text: &str) -> Result<()> {
        let path = self.path(name);
        std::fs::write(&path, text).map_err(|e| Error::io(path, e))
    }

    fn write_log(&self, stem: &str, log: &MetricsLog) -> Result<()> {
        self.write_text(&format!("{stem}.csv"), &log.to_csv())?;
        self.write_text(&format!("{stem}.schema.txt"), &log.schema(stem))
    }

    /// Wall-clock seconds go to a separate file so that the metrics stay
    /// reproducible.
    fn record_time(&self, what: &str, started: Instant) -> Result<()> {
        let path = self.path("timing.txt");
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        writeln!(f, "{what}\t{:.3}", started.elapsed().as_secs_f64()).map_err(|e| Error::io(&path, e))
    }

    fn load(&self, path: &Path, arch: &ArchSpec) -> Result<ParamVector> {
        let p = ParamVector::load(path)?;
        if p.arch() != arch {
            return Err(Error::ArchMismatch);
        }
        Ok(p)
    }

    fn begin(&self, cfg: &ExperimentConfig) -> Result<()> {
        self.create()?;
        cfg.save(&self.path("config.toml"))
    }
}

pub fn mix_name(mode: MixMode) -> &'static str {
    match mode {
        MixMode::ScalarMix => "scalar",
        MixMode::EpochInterleaved => "interleaved",
    }
}

pub fn coldstart_name(mode: ColdstartMode) -> &'static str {
    match mode {
        ColdstartMode::Merge => "merge",
        ColdstartMode::Sft => "sft",
    }
}

pub fn teacher_seed(cfg: &ExperimentConfig, task: TaskId) -> u64 {
    derive_seed(derive_seed(cfg.seed, streams::TEACHER), task.index() as u64)
}

pub fn cmd_pretrain_fm(cfg: &ExperimentConfig, run: &RunDir) -> Result<ParamVector> {
    let started = Instant::now();
    run.begin(cfg)?;
    let (params, log) = pretrain_fm(cfg)?;
    run.write_checkpoint(&run.pretrain(), &params)?;
    run.write_log("pretrain", &log)?;
    run.record_time("pretrain-fm", started)?;
    Ok(params)
}

/// One teacher per task plus the anchor, all started from the pretrained model.
pub fn cmd_train_teachers(cfg: &ExperimentConfig, run: &RunDir) -> Result<BTreeMap<TaskId, ParamVector>> {
    let started = Instant::now();
    run.begin(cfg)?;
    let init = run.load(&run.pretrain(), &cfg.arch)?;
    let ctx = cfg.context();
    let mut teachers = BTreeMap::new();
    for task in TaskId::ALL {
        let (p, log) = train_teacher(&init, task, &cfg.grpo, &ctx, teacher_seed(cfg, task))?;
        run.write_checkpoint(&run.teacher(task), &p)?;
        run.write_log(&format!("teacher_{}", task.name()), &log)?;
        teachers.insert(task, p);
    }
    let anchor_seed = derive_seed(cfg.seed, streams::ANCHOR);
    let (anchor, log) = train_on_spec(
        &init,
        TaskId::Quality,
        &cfg.anchor_reward,
        &cfg.grpo,
        &ctx,
        anchor_seed,
        Phase::Anchor,
    )?;
    run.write_checkpoint(&run.anchor(), &anchor)?;
    run.write_log("anchor", &log)?;
    run.record_time("train-teachers", started)?;
    Ok(teachers)
}

pub fn load_ensemble(cfg: &ExperimentConfig, run: &RunDir) -> Result<TeacherEnsemble> {
    let mut teachers = BTreeMap::new();
    for task in TaskId::ALL {
        teachers.insert(task, run.load(&run.teacher(task), &cfg.arch)?);
    }
    TeacherEnsemble::from_teachers(teachers, run.load(&run.anchor(), &cfg.arch)?)
}

pub fn cmd_coldstart(cfg: &ExperimentConfig, run: &RunDir, mode: ColdstartMode) -> Result<ParamVector> {
    let started = Instant::now();
    run.begin(cfg)?;
    let ens = load_ensemble(cfg, run)?;
    let params = match mode {
        ColdstartMode::Merge => {
            let experts: Vec<(TaskId, ParamVector)> = TaskId::ALL
                .iter()
                .map(|t| Ok((*t, ens.expert_for(&cfg.world.conditions(*t)[0])?.clone())))
                .collect::<Result<_>>()?;
            let weights = match &cfg.coldstart.merge_weights {
                None => vec![1.0 / experts.len() as f64; experts.len()],
                Some(w) => {
                    let raw: Vec<f64> = experts.iter().map(|(t, _)| w.get(t).copied().unwrap_or(0.0)).collect();
                    let total: f64 = raw.iter().sum();
                    if !(total > 0.0) {
                        return Err(Error::Config(
                            "coldstart.merge_weights must have a positive entry".into(),
                        ));
                    }
                    raw.iter().map(|v| v / total).collect()
                }
            };
            merge_models(&MergeSpec {
                inputs: experts.into_iter().map(|(_, p)| p).collect(),
                weights,
            })?
        }
        ColdstartMode::Sft => {
            let init = run.load(&run.pretrain(), &cfg.arch)?;
            let seed = derive_seed(cfg.seed, streams::SFT);
            let data = build_sft_dataset(
                &ens,
                &cfg.world.all_conditions(),
                cfg.coldstart.sft.per_condition,
                &cfg.train_grid,
                &cfg.schedule,
                derive_seed(seed, 0),
            )?;
            run.write_text("sft_dataset.tsv", &data.to_table())?;
            let (p, log) = sft_train(&init, &data, &cfg.coldstart.sft, &cfg.train_grid, derive_seed(seed, 1))?;
            run.write_log("sft", &log)?;
            p
        }
    };
    run.write_checkpoint(&run.coldstart(mode), &params)?;
    run.record_time(&format!("coldstart-{}", coldstart_name(mode)), started)?;
    Ok(params)
}

pub fn cmd_train_opd(cfg: &ExperimentConfig, run: &RunDir) -> Result<ParamVector> {
    let started = Instant::now();
    run.begin(cfg)?;
    let ens = load_ensemble(cfg, run)?;
    let cold = run.load(&run.coldstart(cfg.coldstart.mode), &cfg.arch)?;
    let (params, log) = train_student(
        &cold,
        &ens,
        &cfg.opd,
        &cfg.context(),
        derive_seed(cfg.seed, streams::OPD),
    )?;
    run.write_checkpoint(&run.student(), &params)?;
    run.write_log("opd", &log)?;
    run.record_time("train-opd", started)?;
    Ok(params)
}

pub fn cmd_baseline_mix(cfg: &ExperimentConfig, run: &RunDir, mode: MixMode) -> Result<ParamVector> {
    let started = Instant::now();
    run.begin(cfg)?;
    let init = run.load(&run.pretrain(), &cfg.arch)?;
    let mix = MixConfig {
        mode,
        weights: cfg.mix.weights.clone(),
    };
    let (params, log) = train_mix(
        &init,
        &cfg.grpo,
        &mix,
        &cfg.context(),
        derive_seed(cfg.seed, streams::MIX),
    )?;
    run.write_checkpoint(&run.mix(mode), &params)?;
    run.write_log(&format!("mix_{}", mix_name(mode)), &log)?;
    run.record_time(&format!("baseline-mix-{}", mix_name(mode)), started)?;
    Ok(params)
}

/// Evaluates a checkpoint and writes `eval_<stem>.csv` into the run directory.
pub fn cmd_eval(cfg: &ExperimentConfig, run: &RunDir, checkpoint: &Path) -> Result<EvalReport> {
    let started = Instant::now();
    run.create()?;
    let params = run.load(checkpoint, &cfg.arch)?;
    let report = evaluate(&params, &cfg.context())?;
    let stem = checkpoint.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    run.write_text(&format!("eval_{stem}.csv"), &report.render())?;
    run.record_time(&format!("eval-{stem}"), started)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterferenceReport {
    pub task_a: TaskId,
    pub task_b: TaskId,
    pub probes: Vec<Interference>,
}

impl InterferenceReport {
    pub fn negative_fraction(&self) -> (usize, usize) {
        let neg = self.probes.iter().filter(|p| p.cosine.is_some_and(|c| c < 0.0)).count();
        (neg, self.probes.len())
    }

    pub fn render(&self) -> String {
        let mut out = String::from("repeat,inner_product,cosine,norm_a,norm_b\n");
        for (i, p) in self.probes.iter().enumerate() {
            let cos = p.cosine.map(|c| c.to_string()).unwrap_or_else(|| "undefined".into());
            let _ = writeln!(out, "{i},{},{cos},{},{}", p.inner_product, p.norm_a, p.norm_b);
        }
        out
    }
}

pub fn interference_report(
    cfg: &ExperimentConfig,
    params: &ParamVector,
    task_a: TaskId,
    task_b: TaskId,
) -> Result<InterferenceReport> {
    let ctx = cfg.context();
    let stream = derive_seed(cfg.seed, streams::DIAG);
    let probes = (0..cfg.diag.repeats)
        .map(|r| {
            gradient_interference(
                params,
                task_a,
                task_b,
                cfg.diag.probe_groups,
                cfg.diag.group_size,
                &ctx,
                derive_seed(stream, r as u64),
            )
        })
        .collect::<Result<_>>()?;
    Ok(InterferenceReport { task_a, task_b, probes })
}

pub fn cmd_diag_interference(
    cfg: &ExperimentConfig,
    run: &RunDir,
    checkpoint: &Path,
    task_a: TaskId,
    task_b: TaskId,
) -> Result<InterferenceReport> {
    let started = Instant::now();
    run.create()?;
    let params = run.load(checkpoint, &cfg.arch)?;
    let report = interference_report(cfg, &params, task_a, task_b)?;
    run.write_text(
        &format!("interference_{}_{}.csv", task_a.name(), task_b.name()),
        &report.render(),
    )?;
    run.record_time("diag-interference", started)?;
    Ok(report)
}

pub fn cmd_verify(cfg: &ExperimentConfig, run: &RunDir) -> Result<Report> {
    let started = Instant::now();
    run.create()?;
    let report = verify::run_default(&cfg.context())?;
    run.write_text("verify.txt", &report.render())?;
    run.record_time("verify", started)?;
    Ok(report)
}
