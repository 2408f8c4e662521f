//! End-to-end acceptance run: nine criteria, one PASS/FAIL line each.
//! Exits non-zero when any criterion fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use flowopd::coldstart::{build_sft_dataset, merge_models, sft_train, MergeSpec};
use flowopd::config::{ColdstartMode, ExperimentConfig, MixMode, Phase};
use flowopd::eval::{evaluate, evaluate_task};
use flowopd::grpo::{train_mix, train_on_spec, train_teacher};
use flowopd::opd::{anchor_discrepancy, train_student, TeacherEnsemble};
use flowopd::pipeline::{self, interference_report, pretrain_fm, streams, teacher_seed, RunDir};
use flowopd::rollout::derive_seed;
use flowopd::verify::{self, CheckResult, Hooks};
use flowopd::{ParamVector, Result, TaskId};

const SEED: u64 = 20_240_601;
const KL_CHAIN_INSTANCES: usize = 1000;
const MC_PAIRS: usize = 20;
const MC_SAMPLES: usize = 1_000_000;
const GRAD_INSTANCES: usize = 50;
const IDENTITY_BATCHES: usize = 10;
const NULLITY_ACTIONS: usize = 10_000;
const REGION_GAIN: f64 = 0.25;
const NEGATIVE_COSINE_MIN: usize = 8;
const TEACHER_FRACTION: f64 = 0.9;
const LAMBDAS: [f64; 3] = [0.0, 0.02, 0.2];
const SFT_REDUCTION: f64 = 0.30;

struct Line {
    passed: bool,
    text: String,
}

fn line(id: usize, name: &str, passed: bool, detail: String, started: Instant) -> Line {
    Line {
        passed,
        text: format!(
            "{} [{id}] {name}: {detail} ({:.1}s)",
            if passed { "PASS" } else { "FAIL" },
            started.elapsed().as_secs_f64()
        ),
    }
}

fn checks(id: usize, name: &str, results: &[CheckResult], started: Instant) -> Line {
    let detail = results
        .iter()
        .map(|c| format!("{} {:.3e} <= {:.1e}", c.name, c.measured, c.tolerance))
        .collect::<Vec<_>>()
        .join("; ");
    line(id, name, results.iter().all(|c| c.passed), detail, started)
}

/// Everything the end-to-end criteria share, trained once at defaults.
struct Lab {
    cfg: ExperimentConfig,
    pretrained: ParamVector,
    teachers: BTreeMap<TaskId, ParamVector>,
    anchor: ParamVector,
}

fn build_lab() -> Result<Lab> {
    let cfg = ExperimentConfig {
        seed: SEED,
        ..ExperimentConfig::default()
    };
    let ctx = cfg.context();
    let (pretrained, _) = pretrain_fm(&cfg)?;
    let mut teachers = BTreeMap::new();
    for task in TaskId::ALL {
        let (p, _) = train_teacher(&pretrained, task, &cfg.grpo, &ctx, teacher_seed(&cfg, task))?;
        teachers.insert(task, p);
    }
    let anchor_seed = derive_seed(cfg.seed, streams::ANCHOR);
    let (anchor, _) = train_on_spec(
        &pretrained,
        TaskId::Quality,
        &cfg.anchor_reward,
        &cfg.grpo,
        &ctx,
        anchor_seed,
        Phase::Anchor,
    )?;
    Ok(Lab {
        cfg,
        pretrained,
        teachers,
        anchor,
    })
}

fn seesaw(lab: &Lab) -> Result<(bool, String)> {
    let ctx = lab.cfg.context();
    let teacher = &lab.teachers[&TaskId::Region];
    let (region_before, _) = evaluate_task(&lab.pretrained, TaskId::Region, &ctx)?;
    let (region_after, _) = evaluate_task(teacher, TaskId::Region, &ctx)?;
    let (pref_before, _) = evaluate_task(&lab.pretrained, TaskId::Preference, &ctx)?;
    let (pref_after, _) = evaluate_task(teacher, TaskId::Preference, &ctx)?;
    let report = interference_report(&lab.cfg, &lab.pretrained, TaskId::Region, TaskId::Preference)?;
    let (neg, total) = report.negative_fraction();
    let gain = region_after - region_before;
    let passed = gain >= REGION_GAIN && pref_after <= pref_before && neg >= NEGATIVE_COSINE_MIN;
    Ok((
        passed,
        format!(
            "region {region_before:.3} -> {region_after:.3} (gain {gain:.3} >= {REGION_GAIN}); \
             preference {pref_before:.3e} -> {pref_after:.3e} (must not rise); \
             cosine < 0 in {neg}/{total} (need {NEGATIVE_COSINE_MIN})"
        ),
    ))
}

fn ensemble(lab: &Lab) -> Result<TeacherEnsemble> {
    TeacherEnsemble::from_teachers(lab.teachers.clone(), lab.anchor.clone())
}

fn cold_start(lab: &Lab) -> Result<ParamVector> {
    merge_models(&MergeSpec::uniform(lab.teachers.values().cloned().collect()))
}

fn students(lab: &Lab) -> Result<Vec<(f64, ParamVector)>> {
    let ens = ensemble(lab)?;
    let cold = cold_start(lab)?;
    let ctx = lab.cfg.context();
    LAMBDAS
        .iter()
        .map(|&lambda| {
            let mut opd = lab.cfg.opd.clone();
            opd.lambda = lambda;
            let (p, _) = train_student(&cold, &ens, &opd, &ctx, derive_seed(lab.cfg.seed, streams::OPD))?;
            Ok((lambda, p))
        })
        .collect()
}

fn opd_vs_mix(lab: &Lab, student: &ParamVector) -> Result<(bool, String)> {
    let ctx = lab.cfg.context();
    // matched budget: the student gets as many iterations as the mix baseline
    assert_eq!(lab.cfg.opd.iterations, lab.cfg.grpo.iterations);
    let (mix, _) = train_mix(
        &lab.pretrained,
        &lab.cfg.grpo,
        &lab.cfg.mix,
        &ctx,
        derive_seed(lab.cfg.seed, streams::MIX),
    )?;
    let s = evaluate(student, &ctx)?;
    let m = evaluate(&mix, &ctx)?;
    let mut passed = true;
    let mut parts = Vec::new();
    for task in TaskId::ALL {
        let (teacher, _) = evaluate_task(&lab.teachers[&task], task, &ctx)?;
        let (sv, mv) = (s.per_task[&task], m.per_task[&task]);
        let ok = sv >= mv && sv >= TEACHER_FRACTION * teacher;
        passed &= ok;
        parts.push(format!("{task} student {sv:.3} mix {mv:.3} teacher {teacher:.3}"));
    }
    Ok((passed, parts.join("; ")))
}

fn mar_effect(lab: &Lab, students: &[(f64, ParamVector)]) -> Result<(bool, String)> {
    let ctx = lab.cfg.context();
    let disc = students
        .iter()
        .map(|(l, p)| Ok((*l, anchor_discrepancy(p, &lab.anchor, &ctx)?)))
        .collect::<Result<Vec<_>>>()?;
    let passed = disc.windows(2).all(|w| w[1].1 <= w[0].1);
    let detail = disc
        .iter()
        .map(|(l, d)| format!("lambda {l}: {d:.4}"))
        .collect::<Vec<_>>()
        .join(", ");
    Ok((passed, format!("anchor discrepancy {detail} (non-increasing)")))
}

fn coldstart_identities(lab: &Lab) -> Result<(bool, String)> {
    let region = &lab.teachers[&TaskId::Region];
    let ring = &lab.teachers[&TaskId::Ring];
    let same = merge_models(&MergeSpec::uniform(vec![region.clone(); 4]))? == *region;
    let first = merge_models(&MergeSpec {
        inputs: vec![region.clone(), ring.clone()],
        weights: vec![1.0, 0.0],
    })? == *region;
    let cfg = &lab.cfg;
    let seed = derive_seed(cfg.seed, streams::SFT);
    let data = build_sft_dataset(
        &ensemble(lab)?,
        &cfg.world.all_conditions(),
        cfg.coldstart.sft.per_condition,
        &cfg.train_grid,
        &cfg.schedule,
        derive_seed(seed, 0),
    )?;
    let (_, log) = sft_train(
        &lab.pretrained,
        &data,
        &cfg.coldstart.sft,
        &cfg.train_grid,
        derive_seed(seed, 1),
    )?;
    let held: Vec<f64> = log.column("heldout_loss").into_iter().flatten().collect();
    let (before, after) = (held[0], *held.last().expect("final held-out loss"));
    let reduction = 1.0 - after / before;
    Ok((
        same && first && reduction >= SFT_REDUCTION,
        format!(
            "identical merge exact {same}; weight [1,0] exact {first}; SFT held-out fm_loss {before:.4} -> {after:.4} \
             (reduction {:.1}% >= {:.0}%)",
            100.0 * reduction,
            100.0 * SFT_REDUCTION
        ),
    ))
}

fn run_all_commands(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    let run = RunDir::new(dir);
    pipeline::cmd_pretrain_fm(cfg, &run)?;
    pipeline::cmd_train_teachers(cfg, &run)?;
    pipeline::cmd_baseline_mix(cfg, &run, MixMode::ScalarMix)?;
    pipeline::cmd_baseline_mix(cfg, &run, MixMode::EpochInterleaved)?;
    pipeline::cmd_coldstart(cfg, &run, ColdstartMode::Sft)?;
    pipeline::cmd_coldstart(cfg, &run, ColdstartMode::Merge)?;
    pipeline::cmd_train_opd(cfg, &run)?;
    pipeline::cmd_eval(cfg, &run, &run.student())?;
    pipeline::cmd_diag_interference(cfg, &run, &run.pretrain(), TaskId::Region, TaskId::Preference)?;
    Ok(())
}

fn determinism() -> Result<(bool, String)> {
    let smoke = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml");
    let cfg = ExperimentConfig::load(&smoke)?;
    let dirs = [
        tempfile::tempdir().expect("tempdir"),
        tempfile::tempdir().expect("tempdir"),
    ];
    for d in &dirs {
        run_all_commands(&cfg, d.path())?;
    }
    let mut names: Vec<String> = std::fs::read_dir(dirs[0].path())
        .expect("run dir")
        .map(|e| e.expect("entry").file_name().to_string_lossy().into_owned())
        .filter(|n| n != "timing.txt")
        .collect();
    names.sort();
    let mut differing = Vec::new();
    for n in &names {
        let a = std::fs::read(dirs[0].path().join(n)).expect("first run file");
        let b = std::fs::read(dirs[1].path().join(n)).unwrap_or_default();
        if a != b {
            differing.push(n.clone());
        }
    }
    let ckpts = names.iter().filter(|n| n.ends_with(".ckpt")).count();
    let csvs = names.iter().filter(|n| n.ends_with(".csv")).count();
    Ok((
        differing.is_empty() && ckpts >= 10,
        format!(
            "{} files ({ckpts} checkpoints, {csvs} csv) compared across two runs of every command; differing: {differing:?}",
            names.len()
        ),
    ))
}

fn outcome(id: usize, name: &str, started: Instant, r: Result<(bool, String)>) -> Line {
    match r {
        Ok((passed, detail)) => line(id, name, passed, detail, started),
        Err(e) => line(id, name, false, format!("error: {e}"), started),
    }
}

fn main() {
    let total = Instant::now();
    let mut lines = Vec::new();
    let mut emit = |l: Line| {
        println!("{}", l.text);
        lines.push(l.passed);
    };
    let hooks = Hooks::default();

    let t = Instant::now();
    match verify::check_kl_chain(KL_CHAIN_INSTANCES, derive_seed(SEED, 1), &hooks) {
        Ok(c) => emit(checks(1, "KL chain identity", &[c], t)),
        Err(e) => emit(outcome(1, "KL chain identity", t, Err(e))),
    }

    let t = Instant::now();
    match verify::check_mc_kl(MC_PAIRS, MC_SAMPLES, derive_seed(SEED, 2)) {
        Ok(c) => emit(checks(2, "Monte-Carlo KL oracle (in standard errors)", &[c], t)),
        Err(e) => emit(outcome(2, "Monte-Carlo KL oracle", t, Err(e))),
    }

    let t = Instant::now();
    match verify::check_gradients(GRAD_INSTANCES, derive_seed(SEED, 3)) {
        Ok(c) => emit(checks(3, "gradient oracles", &c, t)),
        Err(e) => emit(outcome(3, "gradient oracles", t, Err(e))),
    }

    let t = Instant::now();
    let identity = verify::check_opd_identity(IDENTITY_BATCHES, derive_seed(SEED, 4), &hooks).and_then(|mut c| {
        c.push(verify::check_score_nullity(NULLITY_ACTIONS, derive_seed(SEED, 5))?);
        Ok(c)
    });
    match identity {
        Ok(c) => emit(checks(
            4,
            "regression/KL gradient identity and score-term nullity",
            &c,
            t,
        )),
        Err(e) => emit(outcome(4, "regression/KL gradient identity", t, Err(e))),
    }

    let t = Instant::now();
    let lab = build_lab();
    println!(
        "      shared pretrain + teachers + anchor trained in {:.1}s",
        t.elapsed().as_secs_f64()
    );
    match lab {
        Err(e) => {
            for (id, name) in [
                (5, "seesaw"),
                (6, "distillation vs mix"),
                (7, "anchor penalty"),
                (8, "cold start"),
            ] {
                emit(line(id, name, false, format!("lab setup failed: {e}"), t));
            }
        }
        Ok(lab) => {
            let t = Instant::now();
            emit(outcome(5, "seesaw reproduction", t, seesaw(&lab)));

            let t = Instant::now();
            let trained = students(&lab);
            let default_lambda = lab.cfg.opd.lambda;
            match trained {
                Err(e) => {
                    emit(line(6, "distillation vs mix", false, format!("error: {e}"), t));
                    emit(line(7, "anchor penalty", false, format!("error: {e}"), t));
                }
                Ok(students) => {
                    let student = &students
                        .iter()
                        .find(|(l, _)| *l == default_lambda)
                        .expect("default lambda trained")
                        .1;
                    emit(outcome(6, "distillation vs mix baseline", t, opd_vs_mix(&lab, student)));
                    let t = Instant::now();
                    emit(outcome(7, "anchor penalty effect", t, mar_effect(&lab, &students)));
                }
            }

            let t = Instant::now();
            emit(outcome(8, "cold-start identities", t, coldstart_identities(&lab)));
        }
    }

    let t = Instant::now();
    emit(outcome(9, "determinism", t, determinism()));

    let failed = lines.iter().filter(|p| !**p).count();
    println!(
        "acceptance: {} of {} criteria passed in {:.1}s",
        lines.len() - failed,
        lines.len(),
        total.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
