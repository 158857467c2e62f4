//! Shared pieces of `gen`, `train` and `sweep`: data, teachers, one run and its metrics.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use bcp_distill::analysis::{avg_gap, distance_plateau, tail_metrics};
use bcp_distill::nn::write_checkpoint;
use bcp_distill::synth::{
    bayes_risk, generate, nearest_linear_optimum, oracle_risk, read_dataset, sample_task, split, write_dataset,
};
use bcp_distill::teachers::{teacher_quality, train_ensemble, train_teacher, TeacherKind};
use bcp_distill::training::{initial_params, train, TrainConfig};
use bcp_distill::{Dataset, NetworkParams, RngStream, TeacherRegistry, TrainingTrace};

use crate::config::{ExperimentConfig, TaskConfig, TeacherModel};
use crate::{io_error, CliError};

/// Full dataset of the task block: means from `data_seed/task`, rows from `data_seed/data`.
pub fn build_dataset(task: &TaskConfig) -> Result<Dataset, CliError> {
    let root = RngStream::new(task.data_seed);
    let spec = sample_task(task.num_classes, task.input_dim, task.noise_variance, &mut root.child("task"))?;
    Ok(generate(&spec, task.num_samples, &mut root.child("data"))?)
}

pub fn write_dataset_file(dataset: &Dataset, path: &Path) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_error(parent))?;
    }
    let mut out = BufWriter::new(File::create(path).map_err(io_error(path))?);
    write_dataset(dataset, &mut out)?;
    out.flush().map_err(io_error(path))
}

/// Dataset from `path` when given, otherwise generated from the task block.
pub fn load_or_build(config: &ExperimentConfig, path: Option<&Path>) -> Result<Dataset, CliError> {
    let Some(path) = path else {
        return build_dataset(&config.task);
    };
    let file = File::open(path).map_err(io_error(path))?;
    let dataset = read_dataset(BufReader::new(file))?;
    if dataset.spec.num_classes != config.task.num_classes || dataset.spec.input_dim != config.task.input_dim {
        return Err(CliError::Config(format!(
            "dataset {} has K={}, d={} but the config asks for K={}, d={}",
            path.display(),
            dataset.spec.num_classes,
            dataset.spec.input_dim,
            config.task.num_classes,
            config.task.input_dim
        )));
    }
    Ok(dataset)
}

pub fn split_dataset(config: &ExperimentConfig, dataset: &Dataset) -> Result<(Dataset, Dataset), CliError> {
    let mut stream = RngStream::new(config.task.data_seed).child("split");
    Ok(split(dataset, config.task.train_fraction, &mut stream)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TeacherSummary {
    /// Mean squared distance to the true posteriors on the test split.
    pub quality: f64,
    /// Same quantity averaged over the ensemble's members taken alone.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub member_quality: Option<f64>,
}

/// Trains (or wraps) the teacher described by `[teachers]`.
pub fn build_teachers(
    config: &ExperimentConfig,
    train_set: &Dataset,
    test_set: &Dataset,
) -> Result<(TeacherRegistry, Option<TeacherSummary>), CliError> {
    let Some(tc) = &config.teachers else {
        return Ok((TeacherRegistry::default(), None));
    };
    let data = match tc.train_samples {
        Some(n) => train_set.head(n.min(train_set.len())),
        None => train_set.clone(),
    };
    let arch = bcp_distill::Architecture::new(config.task.input_dim, tc.hidden_layers.clone(), config.task.num_classes)?;
    let train_cfg = TrainConfig::new(
        tc.learning_rate,
        tc.iterations,
        bcp_distill::SupervisionSpec::OneHot,
        tc.seed,
    );
    let stream = RngStream::new(tc.seed).child("teachers");
    let kind = match tc.kind {
        TeacherModel::Oracle => TeacherKind::Oracle,
        TeacherModel::Single => TeacherKind::Deterministic(train_teacher(&data, &arch, &train_cfg, &stream)?),
        TeacherModel::Ensemble => train_ensemble(&data, &arch, &train_cfg, tc.members, &stream)?,
    };
    let member_quality = match &kind {
        TeacherKind::Ensemble(members) => {
            let mut total = 0.0;
            for m in members {
                total += teacher_quality(&TeacherKind::Deterministic(m.clone()), test_set)?;
            }
            Some(total / members.len() as f64)
        }
        _ => None,
    };
    let summary = TeacherSummary {
        quality: teacher_quality(&kind, test_set)?,
        member_quality,
    };
    Ok((TeacherRegistry::default().with(tc.name.clone(), kind), Some(summary)))
}

/// Everything `summary.toml` reports about one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub iterations_completed: usize,
    /// Mean posterior entropy on the test split.
    pub bayes_risk: f64,
    /// Cross-entropy of the true posterior on the test split; gaps are measured against it.
    pub oracle_risk: f64,
    pub final_gen_error: f64,
    pub final_accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub avg_gap: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tail: Option<TailSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distance_plateau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher: Option<TeacherSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailSummary {
    pub l_avg: f64,
    pub acc_avg: f64,
    pub sigma_l: f64,
    pub sigma_acc: f64,
    pub n_tail: usize,
    pub window: usize,
}

pub struct RunOutcome {
    pub params: NetworkParams,
    pub trace: TrainingTrace,
    pub metrics: RunMetrics,
    pub error: Option<bcp_distill::Error>,
}

/// Tail averages over the last `tail_fraction` of rows, window capped at that count.
pub fn tail_summary(config: &ExperimentConfig, trace: &TrainingTrace) -> Option<TailSummary> {
    let n_tail = ((trace.len() as f64 * config.analysis.tail_fraction).ceil() as usize).min(trace.len());
    if n_tail == 0 {
        return None;
    }
    let m = tail_metrics(trace, n_tail, config.analysis.window.min(n_tail)).ok()?;
    Some(TailSummary {
        l_avg: m.l_avg,
        acc_avg: m.acc_avg,
        sigma_l: m.sigma_l,
        sigma_acc: m.sigma_acc,
        n_tail: m.n_tail,
        window: m.window,
    })
}

/// Trains the student with training seed `seed`. A numeric failure still
/// returns the partial trace, with the error attached.
pub fn run_one(
    config: &ExperimentConfig,
    seed: u64,
    train_set: &Dataset,
    test_set: &Dataset,
    teachers: &TeacherRegistry,
) -> Result<RunOutcome, CliError> {
    let arch = config.student_architecture()?;
    let mut train_cfg = config.train_config_with_seed(seed)?;
    if config.training.track_distance {
        let start = initial_params(&arch, &train_cfg);
        train_cfg.track_distance_to = Some(nearest_linear_optimum(&train_set.spec, &start)?);
    }
    let (params, trace, error) = match train(train_set, test_set, &arch, &train_cfg, teachers) {
        Ok((params, trace)) => (params, trace, None),
        Err(failure) => {
            let failure = *failure;
            if !matches!(failure.error, bcp_distill::Error::NumericFailure { .. }) {
                return Err(failure.error.into());
            }
            (failure.params, failure.trace, Some(failure.error))
        }
    };
    let reference = oracle_risk(test_set);
    let last = trace.last().copied();
    let metrics = RunMetrics {
        seed,
        iterations_completed: last.map_or(0, |r| r.iteration),
        bayes_risk: bayes_risk(test_set),
        oracle_risk: reference,
        final_gen_error: last.map_or(f64::NAN, |r| r.gen_error),
        final_accuracy: last.map_or(f64::NAN, |r| r.accuracy),
        avg_gap: avg_gap(&trace, config.analysis.t0, reference).ok(),
        tail: tail_summary(config, &trace),
        distance_plateau: if trace.has_distance() {
            distance_plateau(&trace, config.analysis.tail_fraction).ok()
        } else {
            None
        },
        teacher: None,
        failure: error.as_ref().map(|e| e.to_string()),
    };
    Ok(RunOutcome {
        params,
        trace,
        metrics,
        error,
    })
}

/// Writes `trace.csv`, `params.ckpt` and `summary.toml` into `dir`.
pub fn write_run(outcome: &RunOutcome, dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io_error(dir))?;
    let trace_path = dir.join("trace.csv");
    let mut out = BufWriter::new(File::create(&trace_path).map_err(io_error(&trace_path))?);
    outcome.trace.write_csv(&mut out)?;
    out.flush().map_err(io_error(&trace_path))?;

    let ckpt_path = dir.join("params.ckpt");
    let mut out = BufWriter::new(File::create(&ckpt_path).map_err(io_error(&ckpt_path))?);
    write_checkpoint(&outcome.params, &mut out)?;
    out.flush().map_err(io_error(&ckpt_path))?;

    let summary_path = dir.join("summary.toml");
    let text = toml::to_string(&outcome.metrics).expect("run metrics serialize");
    fs::write(&summary_path, text).map_err(io_error(&summary_path))
}

pub fn read_run_metrics(dir: &Path) -> Result<RunMetrics, CliError> {
    let path = dir.join("summary.toml");
    let text = fs::read_to_string(&path).map_err(io_error(&path))?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// `train` subcommand: one run written to `out_dir`.
pub fn cmd_train(config: &ExperimentConfig, data: Option<&Path>, out_dir: &Path) -> Result<RunMetrics, CliError> {
    let dataset = load_or_build(config, data)?;
    let (train_set, test_set) = split_dataset(config, &dataset)?;
    let (teachers, teacher_summary) = build_teachers(config, &train_set, &test_set)?;
    let mut outcome = run_one(config, config.training.seed, &train_set, &test_set, &teachers)?;
    outcome.metrics.teacher = teacher_summary;
    write_run(&outcome, out_dir)?;
    match outcome.error {
        Some(e) => Err(e.into()),
        None => Ok(outcome.metrics),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use bcp_distill::SupervisionSpec;

    fn small_config() -> ExperimentConfig {
        let mut c = ExperimentConfig::paper_defaults();
        c.task.num_samples = 600;
        c.student.hidden_layers = vec![];
        c.training.iterations = 300;
        c.training.eval_interval = 30;
        c.analysis.t0 = 150;
        c
    }

    #[test]
    fn dataset_is_deterministic_in_data_seed() {
        let c = small_config();
        assert_eq!(build_dataset(&c.task).unwrap(), build_dataset(&c.task).unwrap());
        let mut other = c.clone();
        other.task.data_seed += 1;
        assert_ne!(build_dataset(&c.task).unwrap(), build_dataset(&other.task).unwrap());
    }

    #[test]
    fn lambda_zero_mixture_reproduces_one_hot_trace() {
        let c = small_config();
        let data = build_dataset(&c.task).unwrap();
        let (tr, te) = split_dataset(&c, &data).unwrap();
        let reg = TeacherRegistry::default();
        let hard = run_one(&c, 5, &tr, &te, &reg).unwrap();
        let mut mixed = c.clone();
        mixed.supervision = SupervisionSpec::Mixture {
            lambda: 0.0,
            soft: Box::new(SupervisionSpec::Dirichlet { epsilon: 0.5 }),
        };
        let soft = run_one(&mixed, 5, &tr, &te, &reg).unwrap();
        assert_eq!(hard.trace, soft.trace);
    }

    #[test]
    fn metrics_cover_gap_and_tail() {
        let mut c = small_config();
        c.training.track_distance = true;
        let data = build_dataset(&c.task).unwrap();
        let (tr, te) = split_dataset(&c, &data).unwrap();
        let out = run_one(&c, 1, &tr, &te, &TeacherRegistry::default()).unwrap();
        assert_eq!(out.trace.len(), 11);
        assert!(out.metrics.avg_gap.is_some());
        let tail = out.metrics.tail.unwrap();
        assert_eq!((tail.n_tail, tail.window), (3, 3));
        assert!(out.metrics.distance_plateau.is_some());
    }
}
