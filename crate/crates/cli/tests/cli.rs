use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml")
}

fn flowopd(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowopd"))
        .arg("--config")
        .arg(smoke_config())
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = flowopd(out, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

#[test]
fn help_lists_every_subcommand() {
    let o = Command::new(env!("CARGO_BIN_EXE_flowopd"))
        .arg("--help")
        .output()
        .unwrap();
    let text = String::from_utf8(o.stdout).unwrap();
    for sub in [
        "pretrain-fm",
        "train-teachers",
        "coldstart",
        "train-opd",
        "baseline-mix",
        "eval",
        "diag-interference",
        "verify",
        "show-config",
    ] {
        assert!(text.contains(sub), "help is missing {sub}");
    }
}

#[test]
fn smoke_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    ok(out, &["pretrain-fm"]);
    ok(out, &["train-teachers"]);
    ok(out, &["baseline-mix", "--mode", "scalar-mix"]);
    ok(out, &["coldstart", "--mode", "sft"]);
    ok(out, &["coldstart"]);
    ok(out, &["train-opd"]);
    let student = out.join("student.ckpt");
    let report = ok(out, &["eval", "--checkpoint", student.to_str().unwrap()]);
    assert!(report.contains("region"));
    let diag = ok(out, &["diag-interference", "--checkpoint", student.to_str().unwrap()]);
    assert!(diag.contains("negative cosine in"));
    for f in [
        "pretrain.ckpt",
        "teacher_ring.ckpt",
        "anchor.ckpt",
        "mix_scalar.ckpt",
        "coldstart_sft.ckpt",
        "coldstart_merge.ckpt",
        "eval_student.csv",
    ] {
        assert!(out.join(f).exists(), "missing {f}");
    }
}

#[test]
fn rerunning_a_phase_does_not_clobber_it() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["pretrain-fm"]);
    let before = std::fs::read(dir.path().join("pretrain.ckpt")).unwrap();
    let o = flowopd(dir.path(), &["pretrain-fm"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(std::fs::read(dir.path().join("pretrain.ckpt")).unwrap(), before);
}

#[test]
fn bad_config_exits_with_code_four() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "schema_version = 1\nseed = \"nope\"\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_flowopd"))
        .arg("--config")
        .arg(&cfg)
        .arg("show-config")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(4));

    let missing = Command::new(env!("CARGO_BIN_EXE_flowopd"))
        .args(["--config", "/definitely/not/here.toml", "show-config"])
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(4));
}

#[test]
fn missing_checkpoint_is_an_ordinary_failure() {
    let dir = tempfile::tempdir().unwrap();
    let o = flowopd(dir.path(), &["eval", "--checkpoint", "/nope.ckpt"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn verify_passes() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(dir.path(), &["verify"]);
    assert!(!text.contains("FAIL"), "{text}");
    assert!(dir.path().join("verify.txt").exists());
}

#[test]
fn show_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(dir.path(), &["--seed", "17", "show-config"]);
    let cfg = dir.path().join("echo.toml");
    std::fs::write(&cfg, &text).unwrap();
    let again = Command::new(env!("CARGO_BIN_EXE_flowopd"))
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path())
        .arg("show-config")
        .output()
        .unwrap();
    assert_eq!(String::from_utf8(again.stdout).unwrap(), text);
    assert!(text.contains("seed = 17"));
}
