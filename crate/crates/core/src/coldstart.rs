//! Student initialisation: weighted parameter merging of the teachers, or
//! flow-matching fine-tuning on samples drawn from them.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{MetricsLog, Phase, SftConfig};
use crate::error::{Error, Result};
use crate::flow::{fm_loss, NoiseSchedule, PathSample, TimeGrid};
use crate::numgrad::ParamVector;
use crate::opd::TeacherEnsemble;
use crate::optim::Optimizer;
use crate::rollout::{derive_seed, sample_trajectory, standard_normal, Condition, TaskId};

#[derive(Debug, Clone, PartialEq)]
pub struct MergeSpec {
    pub inputs: Vec<ParamVector>,
    pub weights: Vec<f64>,
}

impl MergeSpec {
    pub fn uniform(inputs: Vec<ParamVector>) -> Self {
        let w = 1.0 / inputs.len().max(1) as f64;
        let weights = vec![w; inputs.len()];
        MergeSpec { inputs, weights }
    }

    pub fn validate(&self) -> Result<()> {
        if self.inputs.is_empty() {
            return Err(Error::InvalidArgument("merge needs at least one model".into()));
        }
        if self.inputs.len() != self.weights.len() {
            return Err(Error::DimensionMismatch {
                what: "merge weights",
                expected: self.inputs.len(),
                got: self.weights.len(),
            });
        }
        if self.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidArgument(
                "merge weights must be finite and non-negative".into(),
            ));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("merge weights sum to {total}, not 1")));
        }
        let arch = self.inputs[0].arch();
        if self.inputs.iter().any(|p| p.arch() != arch) {
            return Err(Error::ArchMismatch);
        }
        Ok(())
    }
}

/// Elementwise `Σ wᵢ θᵢ`, written as an offset from the first input with
/// positive weight so that zero weights and identical inputs are exact.
pub fn merge_models(spec: &MergeSpec) -> Result<ParamVector> {
    spec.validate()?;
    let base = spec.weights.iter().position(|w| *w > 0.0).expect("weights sum to one");
    let mut values = spec.inputs[base].values().to_vec();
    for (i, (p, w)) in spec.inputs.iter().zip(&spec.weights).enumerate() {
        if i == base || *w == 0.0 {
            continue;
        }
        for ((v, x), b) in values.iter_mut().zip(p.values()).zip(spec.inputs[base].values()) {
            *v += w * (x - b);
        }
    }
    ParamVector::from_values(spec.inputs[base].arch().clone(), values)
}

/// One SFT example: a prompt and a final teacher sample.
pub type Record = (Condition, Vec<f64>);

/// Final samples from the routed teachers, paired with their conditions.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SftDataset {
    pub records: Vec<(Condition, Vec<f64>)>,
}

impl SftDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Tab-separated rows: task, comma-joined condition params (`-` when
    /// empty), then the sample coordinates.
    pub fn to_table(&self) -> String {
        let mut out = String::from("# task\tparams\tsample...\n");
        for (c, x) in &self.records {
            let params = if c.params.is_empty() {
                "-".to_string()
            } else {
                c.params.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(",")
            };
            let _ = write!(out, "{}\t{params}", c.task.name());
            for v in x {
                let _ = write!(out, "\t{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_table(text: &str) -> Result<Self> {
        let bad = |n: usize, msg: &str| Error::InvalidArgument(format!("dataset line {}: {msg}", n + 1));
        let mut records = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let mut cols = line.split('\t');
            let task = TaskId::parse(cols.next().unwrap_or_default()).map_err(|_| bad(n, "unknown task"))?;
            let params = match cols.next() {
                Some("-") => Vec::new(),
                Some(p) => p
                    .split(',')
                    .map(|v| v.parse::<f64>().map_err(|_| bad(n, "bad condition parameter")))
                    .collect::<Result<_>>()?,
                None => return Err(bad(n, "missing condition parameters")),
            };
            let x = cols
                .map(|v| v.parse::<f64>().map_err(|_| bad(n, "bad coordinate")))
                .collect::<Result<Vec<_>>>()?;
            if x.is_empty() {
                return Err(bad(n, "missing sample"));
            }
            records.push((Condition::new(task, params)?, x));
        }
        Ok(SftDataset { records })
    }
}

pub fn build_sft_dataset(
    ens: &TeacherEnsemble,
    conditions: &[Condition],
    per_condition: usize,
    grid: &TimeGrid,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<SftDataset> {
    let mut records = Vec::with_capacity(conditions.len() * per_condition);
    for (i, c) in conditions.iter().enumerate() {
        let teacher = ens.expert_for(c)?;
        let cseed = derive_seed(seed, i as u64);
        for j in 0..per_condition {
            let traj = sample_trajectory(teacher, c, grid, schedule, derive_seed(cseed, j as u64))?;
            records.push((c.clone(), traj.final_sample().to_vec()));
        }
    }
    Ok(SftDataset { records })
}

fn path_samples(records: &[&(Condition, Vec<f64>)], grid: &TimeGrid, seed: u64) -> Result<Vec<PathSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    records
        .iter()
        .enumerate()
        .map(|(i, (c, x))| {
            let noise = standard_normal(derive_seed(seed, i as u64), x.len());
            let t = rng.gen_range(grid.t_min..grid.t_max);
            PathSample::new(x.clone(), noise, t, c.clone())
        })
        .collect()
}

/// Splits off a held-out fraction (at least one record) with a seeded shuffle.
pub fn split_dataset(data: &SftDataset, heldout_fraction: f64, seed: u64) -> (Vec<&Record>, Vec<&Record>) {
    let mut refs: Vec<_> = data.records.iter().collect();
    refs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_held =
        ((refs.len() as f64 * heldout_fraction).round() as usize).clamp(1, refs.len().saturating_sub(1).max(1));
    let train = refs.split_off(n_held);
    (train, refs)
}

/// Flow-matching fine-tuning on the dataset's samples. The log's first
/// row (iteration 0) holds the held-out loss of `init`.
pub fn sft_train(
    init: &ParamVector,
    data: &SftDataset,
    cfg: &SftConfig,
    grid: &TimeGrid,
    seed: u64,
) -> Result<(ParamVector, MetricsLog)> {
    if data.len() < 2 {
        return Err(Error::InvalidArgument("SFT needs at least two records".into()));
    }
    if !(cfg.heldout_fraction > 0.0 && cfg.heldout_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "held-out fraction {} outside (0, 1)",
            cfg.heldout_fraction
        )));
    }
    let (train, held) = split_dataset(data, cfg.heldout_fraction, derive_seed(seed, 0));
    let heldout = path_samples(&held, grid, derive_seed(seed, 1))?;
    let mut log = MetricsLog::new(Phase::Sft, &["loss", "grad_norm", "heldout_loss"]);
    log.push(0, &[("heldout_loss", Some(fm_loss(init, &heldout)?.0))])?;
    let mut params = init.clone();
    let mut opt = Optimizer::new(cfg.optimizer, params.len());
    let stream = derive_seed(seed, 2);
    for it in 0..cfg.iterations {
        let iter_seed = derive_seed(stream, it as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(iter_seed);
        let picked: Vec<_> = (0..cfg.batch_size.max(1))
            .map(|_| train[rng.gen_range(0..train.len())])
            .collect();
        let batch = path_samples(&picked, grid, derive_seed(iter_seed, 1))?;
        let (loss, grad) = fm_loss(&params, &batch)?;
        if !loss.is_finite() {
            return Err(Error::diverged(it + 1, "non-finite flow-matching loss", Some(&params)));
        }
        let before = params.clone();
        opt.descend(&mut params, &grad)
            .map_err(|e| Error::diverged(it + 1, e.to_string(), Some(&before)))?;
        let last = it + 1 == cfg.iterations;
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numgrad::{init_params, ArchSpec};

    fn arch() -> ArchSpec {
        ArchSpec::new(11, vec![6], 2).unwrap()
    }

    #[test]
    fn merge_arithmetic() {
        let zero = ParamVector::zeros(arch()).unwrap();
        let p = zero.with_value(1, 2.0);
        let q = zero.with_value(0, 2.0);
        let m = merge_models(&MergeSpec::uniform(vec![p.clone(), q.clone()])).unwrap();
        assert_eq!(&m.values()[..2], &[1.0, 1.0]);
        assert!(m.values()[2..].iter().all(|v| *v == 0.0));
        let first = merge_models(&MergeSpec {
            inputs: vec![p.clone(), q.clone()],
            weights: vec![1.0, 0.0],
        })
        .unwrap();
        assert_eq!(first, p);
        let second = merge_models(&MergeSpec {
            inputs: vec![p, q.clone()],
            weights: vec![0.0, 1.0],
        })
        .unwrap();
        assert_eq!(second, q);
    }

    #[test]
    fn merge_of_identical_models_is_exact() {
        let p = init_params(&arch(), 4).unwrap();
        let spec = MergeSpec {
            inputs: vec![p.clone(); 3],
            weights: vec![0.2, 0.3, 0.5],
        };
        assert_eq!(merge_models(&spec).unwrap(), p);
        assert_eq!(merge_models(&MergeSpec::uniform(vec![p.clone(); 3])).unwrap(), p);
    }

    #[test]
    fn merge_rejects_bad_specs() {
        let p = init_params(&arch(), 1).unwrap();
        let other = init_params(&ArchSpec::new(11, vec![5], 2).unwrap(), 1).unwrap();
        let bad = |inputs: Vec<ParamVector>, weights: Vec<f64>| merge_models(&MergeSpec { inputs, weights }).is_err();
        assert!(bad(vec![p.clone(), other], vec![0.5, 0.5]));
        assert!(bad(vec![p.clone()], vec![0.5, 0.5]));
        assert!(bad(vec![p.clone(), p.clone()], vec![0.7, 0.7]));
        assert!(bad(vec![p.clone(), p], vec![1.5, -0.5]));
        assert!(bad(vec![], vec![]));
    }

    #[test]
    fn table_round_trip() {
        let data = SftDataset {
            records: vec![
                (Condition::region(2, 4).unwrap(), vec![0.5, -1.25]),
                (Condition::quality(), vec![3.0, 1e-3]),
                (Condition::ring(4.242640687119285).unwrap(), vec![-0.1, 0.2]),
            ],
        };
        let back = SftDataset::from_table(&data.to_table()).unwrap();
        assert_eq!(back, data);
        assert!(SftDataset::from_table("ring\t1.0\tx\n").is_err());
        assert!(SftDataset::from_table("bogus\t-\t1\t2\n").is_err());
    }

    #[test]
    fn split_keeps_every_record_once() {
        let data = SftDataset {
            records: (0..10).map(|i| (Condition::quality(), vec![i as f64, 0.0])).collect(),
        };
        let (train, held) = split_dataset(&data, 0.2, 3);
        assert_eq!((train.len(), held.len()), (8, 2));
        let mut seen: Vec<f64> = train.iter().chain(&held).map(|r| r.1[0]).collect();
        seen.sort_by(f64::total_cmp);
        assert_eq!(seen, (0..10).map(|i| i as f64).collect::<Vec<_>>());
    }
}
