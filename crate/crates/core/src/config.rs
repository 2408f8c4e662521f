//! Experiment configuration (a versioned TOML document) and metric rows.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{NoiseSchedule, TimeGrid};
use crate::numgrad::ArchSpec;
use crate::optim::OptimizerConfig;
use crate::rewards::{RewardSpec, TaskWorld};
use crate::rollout::TaskId;

pub const SCHEMA_VERSION: u32 = 1;

/// World, sampler and evaluation settings shared by every phase.
#[derive(Debug, Clone, PartialEq)]
pub struct LabContext {
    pub world: TaskWorld,
    pub schedule: NoiseSchedule,
    pub train_grid: TimeGrid,
    pub eval_grid: TimeGrid,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub heldout_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub conditions_per_iteration: usize,
    pub iterations: usize,
    pub optimizer: OptimizerConfig,
    /// PPO-style ratio clip; 0 disables the surrogate.
    pub clip_range: f64,
    pub max_grad_norm: f64,
    /// Full evaluation cadence in iterations (0 = only at the end).
    pub eval_every: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MixMode {
    ScalarMix,
    EpochInterleaved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixConfig {
    pub mode: MixMode,
    pub weights: BTreeMap<TaskId, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ColdstartMode {
    Merge,
    Sft,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftConfig {
    pub per_condition: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub heldout_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColdstartConfig {
    pub mode: ColdstartMode,
    /// Per-task merge weights; uniform over the experts when absent.
    pub merge_weights: Option<BTreeMap<TaskId, f64>>,
    pub sft: SftConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnchorScope {
    OnPolicyStates,
    FullData,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpdConfig {
    pub lambda: f64,
    pub group_size: usize,
    pub conditions_per_iteration: usize,
    pub iterations: usize,
    pub optimizer: OptimizerConfig,
    pub max_grad_norm: f64,
    pub anchor_scope: AnchorScope,
    pub mar_probes_per_iteration: usize,
    pub eval_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub samples_per_task: usize,
    pub seed: u64,
    /// Probe states used for the anchor discrepancy report.
    pub anchor_probes: usize,
}

/// Gradient-interference probe sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagConfig {
    pub probe_groups: usize,
    pub group_size: usize,
    /// Independent probe seeds per report.
    pub repeats: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub world: TaskWorld,
    pub arch: ArchSpec,
    pub schedule: NoiseSchedule,
    pub train_grid: TimeGrid,
    pub eval_grid: TimeGrid,
    pub pretrain: PretrainConfig,
    pub grpo: GrpoConfig,
    /// Reward blend of the frozen anchor model.
    pub anchor_reward: RewardSpec,
    pub mix: MixConfig,
    pub coldstart: ColdstartConfig,
    pub opd: OpdConfig,
    pub eval: EvalConfig,
    pub diag: DiagConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let world = TaskWorld::default();
        let arch = ArchSpec {
            input_dim: world.state_dim() + 1 + world.condition_width(),
            hidden_widths: vec![32, 32],
            output_dim: world.state_dim(),
        };
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            world,
            arch,
            schedule: NoiseSchedule::default(),
            train_grid: TimeGrid::training(),
            eval_grid: TimeGrid::evaluation(),
            pretrain: PretrainConfig {
                iterations: 3000,
                batch_size: 128,
                optimizer: OptimizerConfig::adam(3e-3),
                heldout_size: 1024,
            },
            grpo: GrpoConfig {
                group_size: 24,
                conditions_per_iteration: 8,
                iterations: 500,
                optimizer: OptimizerConfig::adam(2e-3),
                clip_range: 0.0,
                max_grad_norm: 10.0,
                eval_every: 50,
            },
            anchor_reward: RewardSpec::blend(&[(TaskId::Quality, 1.0), (TaskId::Preference, 1.0)]),
            mix: MixConfig {
                mode: MixMode::ScalarMix,
                weights: BTreeMap::from([
                    (TaskId::Region, 3.0),
                    (TaskId::Ring, 1.0),
                    (TaskId::Preference, 1.0),
                    (TaskId::Quality, 1.0),
                ]),
            },
            coldstart: ColdstartConfig {
                mode: ColdstartMode::Merge,
                merge_weights: None,
                sft: SftConfig {
                    per_condition: 256,
                    iterations: 1500,
                    batch_size: 128,
                    optimizer: OptimizerConfig::adam(2e-3),
                    heldout_fraction: 0.2,
                },
            },
            opd: OpdConfig {
                lambda: 0.02,
                group_size: 8,
                conditions_per_iteration: 8,
                iterations: 500,
                optimizer: OptimizerConfig::adam(2e-3),
                max_grad_norm: 10.0,
                anchor_scope: AnchorScope::FullData,
                mar_probes_per_iteration: 64,
                eval_every: 50,
            },
            eval: EvalConfig {
                samples_per_task: 256,
                seed: 0x5eed_e7a1,
                anchor_probes: 512,
            },
            diag: DiagConfig {
                probe_groups: 512,
                group_size: 24,
                repeats: 10,
            },
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.seed > i64::MAX as u64 {
            return Err(Error::Config(format!("seed {} does not fit a TOML integer", self.seed)));
        }
        self.world.validate()?;
        self.arch
            .validate_for_state(self.world.state_dim())
            .map_err(|e| Error::Config(e.to_string()))?;
        let want = self.world.state_dim() + 1 + self.world.condition_width();
        if self.arch.input_dim != want {
            return Err(Error::Config(format!(
                "arch.input_dim is {} but state + time + condition embedding needs {want}",
                self.arch.input_dim
            )));
        }
        if !(self.schedule.a > 0.0) {
            return Err(Error::Config("schedule.a must be positive".into()));
        }
        self.train_grid.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.eval_grid.validate().map_err(|e| Error::Config(e.to_string()))?;
        for opt in [
            &self.pretrain.optimizer,
            &self.grpo.optimizer,
            &self.coldstart.sft.optimizer,
            &self.opd.optimizer,
        ] {
            opt.validate()?;
        }
        if self.grpo.group_size < 2 || self.opd.group_size < 2 {
            return Err(Error::Config("group sizes must be at least 2".into()));
        }
        if !(self.grpo.clip_range >= 0.0) {
            return Err(Error::Config("grpo.clip_range must be non-negative".into()));
        }
        if !(self.opd.lambda >= 0.0) {
            return Err(Error::Config("opd.lambda must be non-negative".into()));
        }
        if self.pretrain.batch_size == 0 || self.coldstart.sft.batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        let f = self.coldstart.sft.heldout_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::Config(
                "coldstart.sft.heldout_fraction must lie in (0, 1)".into(),
            ));
        }
        if self.mix.weights.values().any(|w| !(*w >= 0.0)) || self.mix.weights.values().all(|w| *w == 0.0) {
            return Err(Error::Config(
                "mix weights must be non-negative and not all zero".into(),
            ));
        }
        if self.diag.probe_groups == 0 || self.diag.group_size < 2 {
            return Err(Error::Config("diag needs probe groups of at least two samples".into()));
        }
        if self.eval.samples_per_task == 0 {
            return Err(Error::Config("eval.samples_per_task must be positive".into()));
        }
        Ok(())
    }

    pub fn context(&self) -> LabContext {
        LabContext {
            world: self.world.clone(),
            schedule: self.schedule,
            train_grid: self.train_grid,
            eval_grid: self.eval_grid,
            eval: self.eval.clone(),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Pretrain,
    Teacher,
    Anchor,
    Mix,
    Sft,
    Opd,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Teacher => "teacher",
            Phase::Anchor => "anchor",
            Phase::Mix => "mix",
            Phase::Sft => "sft",
            Phase::Opd => "opd",
        }
    }
}

/// One row of a metrics table. Missing values print as empty cells.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub phase: Phase,
    pub iteration: usize,
    pub values: Vec<(String, Option<f64>)>,
}

/// Append-only metrics log for one run phase, rendered as CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsLog {
    pub phase: Phase,
    pub columns: Vec<String>,
    pub rows: Vec<MetricRow>,
}

impl MetricsLog {
    pub fn new(phase: Phase, columns: &[&str]) -> Self {
        MetricsLog {
            phase,
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, iteration: usize, values: &[(&str, Option<f64>)]) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if iteration <= last.iteration {
                return Err(Error::InvalidArgument(format!(
                    "metrics iteration {iteration} does not follow {}",
                    last.iteration
                )));
            }
        }
        let mut row = Vec::with_capacity(self.columns.len());
        for col in &self.columns {
            let v = values.iter().find(|(k, _)| k == col).and_then(|(_, v)| *v);
            row.push((col.clone(), v));
        }
        self.rows.push(MetricRow {
            phase: self.phase,
            iteration,
            values: row,
        });
        Ok(())
    }

    pub fn column(&self, name: &str) -> Vec<Option<f64>> {
        let idx = self.columns.iter().position(|c| c == name);
        self.rows.iter().map(|r| idx.and_then(|i| r.values[i].1)).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("phase,iteration");
        for c in &self.columns {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{},{}", r.phase.name(), r.iteration);
            for (_, v) in &r.values {
                out.push(',');
                if let Some(v) = v {
                    let _ = write!(out, "{v}");
                }
            }
            out.push('\n');
        }
        out
    }

    /// Column documentation written next to each CSV.
    /// Column descriptions for the CSV written as `<stem>.csv`.
    pub fn schema(&self, stem: &str) -> String {
        let mut out = format!("# columns of {stem}.csv\nphase: run phase name\niteration: 1-based step index\n");
        for c in &self.columns {
            let _ = writeln!(out, "{c}: {}", describe_column(c));
        }
        out
    }
}

fn describe_column(name: &str) -> &'static str {
    match name {
        "loss" => "training objective value at this step",
        "grad_norm" => "gradient norm before clipping",
        "batch_reward" => "mean reward of the on-policy groups used in this step",
        "flow_opd_loss" => "time-weighted velocity discrepancy to routed teachers on visited states",
        "mar_loss" => "anchor penalty before the lambda factor",
        "anchor_discrepancy" => "mean w(t)·|v_student − v_anchor|² on the fixed evaluation probes",
        "heldout_loss" => "flow-matching loss on the held-out split",
        n if n.starts_with("eval_") => "mean task reward on the fixed evaluation set (blank when not evaluated)",
        _ => "metric",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml().unwrap();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn validation_errors() {
        let cfg = ExperimentConfig {
            schema_version: 7,
            ..ExperimentConfig::default()
        };
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.arch.input_dim = 5;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.grpo.group_size = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.opd.lambda = -0.1;
        assert!(cfg.validate().is_err());
        assert!(ExperimentConfig::from_toml("schema_version = 1").is_err());
    }

    #[test]
    fn metrics_csv() {
        let mut log = MetricsLog::new(Phase::Teacher, &["loss", "eval_region"]);
        log.push(1, &[("loss", Some(0.5))]).unwrap();
        log.push(2, &[("loss", Some(0.25)), ("eval_region", Some(0.75))])
            .unwrap();
        assert!(log.push(2, &[]).is_err());
        assert_eq!(
            log.to_csv(),
            "phase,iteration,loss,eval_region\nteacher,1,0.5,\nteacher,2,0.25,0.75\n"
        );
        assert_eq!(log.column("eval_region"), vec![None, Some(0.75)]);
        assert!(log.schema("teacher_region").contains("eval_region"));
    }
}
