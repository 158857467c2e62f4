//! `report`: SVG learning curves and ε-sweep fits plus a markdown summary.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};

use bcp_distill::analysis::{fit_inverse_eps, InverseEpsFit};
use bcp_distill::{fmt_f64, TrainingTrace};

use crate::run::read_run_metrics;
use crate::svg::{Chart, Mark, Series};
use crate::{io_error, CliError};

struct RunTrace {
    label: String,
    trace: TrainingTrace,
    reference: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepFit {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub fit: InverseEpsFit,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReportSummary {
    pub files: Vec<PathBuf>,
    pub fits: Vec<SweepFit>,
}

fn run_label(dir: &Path) -> String {
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    match dir.parent().and_then(|p| p.file_name()) {
        Some(parent) if name.starts_with("seed_") => format!("{}/{name}", parent.to_string_lossy()),
        _ => name,
    }
}

fn read_trace(dir: &Path) -> Result<RunTrace, CliError> {
    let path = dir.join("trace.csv");
    let file = File::open(&path).map_err(io_error(&path))?;
    let trace = TrainingTrace::read_csv(BufReader::new(file))?;
    if trace.is_empty() {
        return Err(CliError::Config(format!("{} has no rows", path.display())));
    }
    let reference = read_run_metrics(dir).ok().map(|m| m.oracle_risk);
    Ok(RunTrace {
        label: run_label(dir),
        trace,
        reference,
    })
}

/// `(epsilon, avg_gap)` pairs from a sweep's `summary.csv`.
fn read_epsilon_points(path: &Path) -> Result<Vec<(f64, f64)>, CliError> {
    let text = fs::read_to_string(path).map_err(io_error(path))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    let column = |name: &str| {
        header
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| CliError::Config(format!("{} lacks a `{name}` column", path.display())))
    };
    let (eps_col, gap_col) = (column("epsilon")?, column("avg_gap")?);
    let mut points = Vec::new();
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        let parse = |i: usize| fields.get(i).and_then(|f| f.parse::<f64>().ok());
        if let (Some(eps), Some(gap)) = (parse(eps_col), parse(gap_col)) {
            if gap.is_finite() {
                points.push((eps, gap));
            }
        }
    }
    Ok(points)
}

fn write_file(path: PathBuf, text: &str, files: &mut Vec<PathBuf>) -> Result<(), CliError> {
    fs::write(&path, text).map_err(io_error(&path))?;
    files.push(path);
    Ok(())
}

/// Renders every run directory (with `trace.csv`) and sweep directory (with
/// `summary.csv`) in `dirs` into `out_dir`.
pub fn cmd_report(dirs: &[PathBuf], out_dir: &Path) -> Result<ReportSummary, CliError> {
    if dirs.is_empty() {
        return Err(CliError::Config("report needs at least one run or sweep directory".into()));
    }
    let mut runs = Vec::new();
    let mut sweeps = Vec::new();
    for dir in dirs {
        if dir.join("trace.csv").is_file() {
            runs.push(read_trace(dir)?);
        } else if dir.join("summary.csv").is_file() {
            sweeps.push((run_label(dir), read_epsilon_points(&dir.join("summary.csv"))?));
        } else {
            return Err(CliError::Config(format!(
                "{} holds neither trace.csv nor summary.csv",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(out_dir).map_err(io_error(out_dir))?;
    let mut summary = ReportSummary::default();
    let mut md = String::from("# Experiment report\n\n");

    if !runs.is_empty() {
        let mut references: Vec<f64> = runs.iter().filter_map(|r| r.reference).collect();
        references.sort_by(f64::total_cmp);
        references.dedup();
        let curves = |value: fn(&bcp_distill::training::TraceRow) -> f64| -> Vec<Series> {
            runs.iter()
                .map(|r| Series {
                    label: r.label.clone(),
                    points: r.trace.rows.iter().map(|row| (row.iteration as f64, value(row))).collect(),
                    mark: Mark::Line,
                })
                .collect()
        };
        let loss_chart = Chart {
            title: "Generalization error".into(),
            x_label: "iteration".into(),
            y_label: "test cross-entropy (nats)".into(),
            series: curves(|row| row.gen_error),
            references: references.iter().map(|&r| ("Bayes classifier".to_string(), r)).collect(),
            note: None,
        };
        write_file(out_dir.join("learning_curves.svg"), &loss_chart.render(), &mut summary.files)?;
        let acc_chart = Chart {
            title: "Test accuracy".into(),
            x_label: "iteration".into(),
            y_label: "accuracy".into(),
            series: curves(|row| row.accuracy),
            references: Vec::new(),
            note: None,
        };
        write_file(out_dir.join("accuracy.svg"), &acc_chart.render(), &mut summary.files)?;

        md.push_str("## Runs\n\n| run | final gen. error | final gap | final accuracy |\n|---|---|---|---|\n");
        for r in &runs {
            let last = r.trace.last().expect("non-empty trace");
            let gap = r.reference.map(|v| fmt_f64(last.gen_error - v)).unwrap_or_default();
            let _ = writeln!(
                md,
                "| {} | {} | {} | {} |",
                r.label,
                fmt_f64(last.gen_error),
                gap,
                fmt_f64(last.accuracy)
            );
        }
        md.push('\n');
    }

    for (i, (label, points)) in sweeps.iter().enumerate() {
        if points.iter().all(|p| p.0 == points[0].0) {
            let _ = writeln!(md, "## Sweep {label}\n\nfewer than two distinct epsilon values; no fit.\n");
            continue;
        }
        let fit = fit_inverse_eps(points)?;
        let (lo, hi) = points
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), p| (l.min(p.0), h.max(p.0)));
        let curve: Vec<(f64, f64)> = (0..=100)
            .map(|k| {
                let e = lo + (hi - lo) * k as f64 / 100.0;
                (e, fit.c / (1.0 + e))
            })
            .collect();
        let chart = Chart {
            title: format!("Average gap vs epsilon ({label})"),
            x_label: "epsilon".into(),
            y_label: "avg_gap (nats)".into(),
            series: vec![
                Series {
                    label: "measured".into(),
                    points: points.clone(),
                    mark: Mark::Points,
                },
                Series {
                    label: "c / (1 + eps)".into(),
                    points: curve,
                    mark: Mark::Line,
                },
            ],
            references: Vec::new(),
            note: Some(format!("c = {:.4e}, R^2 = {:.4}", fit.c, fit.r_squared)),
        };
        let name = if sweeps.len() == 1 {
            "epsilon_sweep.svg".to_string()
        } else {
            format!("epsilon_sweep_{i}.svg")
        };
        write_file(out_dir.join(name), &chart.render(), &mut summary.files)?;
        let _ = writeln!(
            md,
            "## Sweep {label}\n\nfit avg_gap = c / (1 + eps): c = {}, R^2 = {}\n",
            fmt_f64(fit.c),
            fmt_f64(fit.r_squared)
        );
        summary.fits.push(SweepFit {
            label: label.clone(),
            points: points.clone(),
            fit,
        });
    }
    write_file(out_dir.join("report.md"), &md, &mut summary.files)?;
    Ok(summary)
}
