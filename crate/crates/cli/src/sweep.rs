//! `sweep`: one parameter over a list of values, several seeds per value.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use bcp_distill::analysis::{grad_noise_formula, grad_noise_mc};
use bcp_distill::synth::bayes_optimum_linear;
use bcp_distill::{fmt_f64, Dataset, RngStream, SupervisionSpec, TeacherRegistry};

use crate::config::{ExperimentConfig, SweepParameter};
use crate::run::{build_teachers, load_or_build, run_one, split_dataset, write_run, RunMetrics, TeacherSummary};
use crate::{io_error, CliError};

pub const SUMMARY_HEADER: &str = "epsilon,lambda,L_avg,ACC_avg,sigma_L,sigma_ACC,avg_gap,grad_noise_formula,grad_noise_mc,\
alpha,members,runs,failed,L_avg_sd,ACC_avg_sd,sigma_L_sd,sigma_ACC_sd,avg_gap_sd";

/// Across-seed mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub sd: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        if values.is_empty() {
            return Stat {
                mean: f64::NAN,
                sd: f64::NAN,
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Stat { mean, sd }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointSummary {
    pub value: f64,
    pub epsilon: Option<f64>,
    pub lambda: Option<f64>,
    pub alpha: f64,
    pub members: Option<usize>,
    pub runs: usize,
    pub failed: usize,
    pub l_avg: Stat,
    pub acc_avg: Stat,
    pub sigma_l: Stat,
    pub sigma_acc: Stat,
    pub avg_gap: Stat,
    pub grad_noise_formula: Option<f64>,
    pub grad_noise_mc: Option<f64>,
    pub teacher: Option<TeacherSummary>,
    pub seeds: Vec<RunMetrics>,
}

fn supervision_epsilon(spec: &SupervisionSpec) -> Option<f64> {
    match spec {
        SupervisionSpec::Dirichlet { epsilon } => Some(*epsilon),
        SupervisionSpec::Mixture { soft, .. } => supervision_epsilon(soft),
        _ => None,
    }
}

fn supervision_lambda(spec: &SupervisionSpec) -> Option<f64> {
    match spec {
        SupervisionSpec::Mixture { lambda, .. } => Some(*lambda),
        _ => None,
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

pub fn write_summary_csv(points: &[PointSummary], path: &Path) -> Result<(), CliError> {
    let mut text = String::new();
    text.push_str(SUMMARY_HEADER);
    text.push('\n');
    for p in points {
        let _ = writeln!(
            text,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            opt(p.epsilon),
            opt(p.lambda),
            fmt_f64(p.l_avg.mean),
            fmt_f64(p.acc_avg.mean),
            fmt_f64(p.sigma_l.mean),
            fmt_f64(p.sigma_acc.mean),
            fmt_f64(p.avg_gap.mean),
            opt(p.grad_noise_formula),
            opt(p.grad_noise_mc),
            fmt_f64(p.alpha),
            p.members.map(|m| m.to_string()).unwrap_or_default(),
            p.runs,
            p.failed,
            fmt_f64(p.l_avg.sd),
            fmt_f64(p.acc_avg.sd),
            fmt_f64(p.sigma_l.sd),
            fmt_f64(p.sigma_acc.sd),
            fmt_f64(p.avg_gap.sd),
        );
    }
    fs::write(path, text).map_err(io_error(path))
}

/// Gradient noise of the point's supervision at the linear Bayes optimum,
/// estimated on the first `noise_samples` test rows.
fn noise_estimates(
    config: &ExperimentConfig,
    test_set: &Dataset,
    teachers: &TeacherRegistry,
) -> Result<(Option<f64>, Option<f64>), CliError> {
    let optimum = bayes_optimum_linear(&test_set.spec);
    let rows = test_set.head(config.analysis.noise_samples.min(test_set.len()));
    let formula = grad_noise_formula(&config.supervision, &optimum, &rows)?.map(|e| e.value);
    let mut stream = RngStream::new(config.training.seed).child("noise-estimate");
    let mc = grad_noise_mc(
        &config.supervision,
        &optimum,
        &rows,
        config.analysis.noise_draws,
        teachers,
        &mut stream,
    )?;
    Ok((formula, Some(mc.value)))
}

fn point_dir(out_dir: &Path, parameter: SweepParameter, value: f64) -> PathBuf {
    out_dir.join("runs").join(format!("{}_{value}", parameter.label()))
}

pub fn worker_pool(workers: usize) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| CliError::Config(format!("cannot start {workers} workers: {e}")))
}

/// Runs every (value, seed) pair on `workers` threads and writes per-run
/// directories plus `summary.csv` (one row per value, sorted by value).
pub fn cmd_sweep(
    config: &ExperimentConfig,
    data: Option<&Path>,
    out_dir: &Path,
    workers: usize,
) -> Result<Vec<PointSummary>, CliError> {
    let sweep = config
        .sweep
        .clone()
        .ok_or_else(|| CliError::Config("sweep needs a [sweep] block".into()))?;
    let dataset = load_or_build(config, data)?;
    let (train_set, test_set) = split_dataset(config, &dataset)?;

    let mut values = sweep.values.clone();
    values.sort_by(f64::total_cmp);
    values.dedup();
    let points: Vec<(f64, ExperimentConfig)> = values
        .iter()
        .map(|&v| config.at_point(sweep.parameter, v).map(|c| (v, c)))
        .collect::<Result<_, _>>()?;

    let pool = worker_pool(workers)?;
    let shared = if sweep.parameter == SweepParameter::Members {
        None
    } else {
        Some(build_teachers(config, &train_set, &test_set)?)
    };
    let teachers: Vec<(TeacherRegistry, Option<TeacherSummary>)> = match &shared {
        Some(t) => vec![t.clone(); points.len()],
        None => pool.install(|| {
            points
                .par_iter()
                .map(|(_, c)| build_teachers(c, &train_set, &test_set))
                .collect::<Result<_, _>>()
        })?,
    };

    let jobs: Vec<(usize, u64)> = (0..points.len())
        .flat_map(|p| (0..sweep.seeds_per_point as u64).map(move |j| (p, config.training.seed + j)))
        .collect();
    let results: Vec<Result<RunMetrics, String>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(p, seed)| {
                let (value, point) = &points[p];
                let outcome = run_one(point, seed, &train_set, &test_set, &teachers[p].0).map_err(|e| e.to_string())?;
                let dir = point_dir(out_dir, sweep.parameter, *value).join(format!("seed_{seed}"));
                write_run(&outcome, &dir).map_err(|e| e.to_string())?;
                match outcome.error {
                    Some(e) => Err(format!("seed {seed}: {e}")),
                    None => Ok(outcome.metrics),
                }
            })
            .collect()
    });
    let noise: Vec<(Option<f64>, Option<f64>)> = pool.install(|| {
        points
            .par_iter()
            .zip(&teachers)
            .map(|((_, c), (reg, _))| noise_estimates(c, &test_set, reg))
            .collect::<Result<_, _>>()
    })?;

    let per_point = sweep.seeds_per_point;
    let mut summaries = Vec::with_capacity(points.len());
    for (p, (value, point)) in points.iter().enumerate() {
        let chunk = &results[p * per_point..(p + 1) * per_point];
        let ok: Vec<RunMetrics> = chunk.iter().filter_map(|r| r.as_ref().ok().cloned()).collect();
        for err in chunk.iter().filter_map(|r| r.as_ref().err()) {
            eprintln!("{} = {value}: run failed: {err}", sweep.parameter.label());
        }
        let tails: Vec<_> = ok.iter().filter_map(|m| m.tail).collect();
        let gaps: Vec<f64> = ok.iter().filter_map(|m| m.avg_gap).collect();
        let stat = |f: fn(&crate::run::TailSummary) -> f64| Stat::of(&tails.iter().map(f).collect::<Vec<_>>());
        summaries.push(PointSummary {
            value: *value,
            epsilon: supervision_epsilon(&point.supervision),
            lambda: supervision_lambda(&point.supervision),
            alpha: point.training.learning_rate,
            members: point.teachers.as_ref().map(|t| t.members),
            runs: chunk.len(),
            failed: chunk.len() - ok.len(),
            l_avg: stat(|t| t.l_avg),
            acc_avg: stat(|t| t.acc_avg),
            sigma_l: stat(|t| t.sigma_l),
            sigma_acc: stat(|t| t.sigma_acc),
            avg_gap: Stat::of(&gaps),
            grad_noise_formula: noise[p].0,
            grad_noise_mc: noise[p].1,
            teacher: teachers[p].1,
            seeds: ok,
        });
    }
    fs::create_dir_all(out_dir).map_err(io_error(out_dir))?;
    write_summary_csv(&summaries, &out_dir.join("summary.csv"))?;
    Ok(summaries)
}
