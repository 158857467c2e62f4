//! Gradient-noise estimators, trace metrics, the inverse-ε fit and
//! convergence-bound overlays.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::{NetworkParams, P_MIN};
use crate::rng::RngStream;
use crate::supervision::{check_epsilon, next_target_into, Sample, SupervisionSpec};
use crate::synth::Dataset;
use crate::teachers::TeacherRegistry;
use crate::training::TrainingTrace;

#[derive(Debug, Clone, PartialEq)]
pub enum NoiseEstimator {
    OneHotFormula,
    NoisyFormula { nu: f64 },
    DirichletFormula { epsilon: f64 },
    /// Closed form for a one-hot / soft mixture, scaled per component.
    MixtureFormula { lambda: f64 },
    MonteCarlo { spec: SupervisionSpec, draws: usize },
}

/// Expected squared per-sample gradient norm at a parameter point.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientNoiseEstimate {
    pub value: f64,
    pub estimator: NoiseEstimator,
    pub samples_used: usize,
}

/// Sample means of `Σ_k ‖J_k‖² / P_k` and `Σ_k ‖J_k‖² / P_k²`, with `P` the
/// stored posterior clamped at `P_MIN`.
#[derive(Debug, Clone, Copy)]
struct JacobianSums {
    inv_p: f64,
    inv_p2: f64,
    samples: usize,
}

fn jacobian_sums(params: &NetworkParams, dataset: &Dataset) -> Result<JacobianSums> {
    if dataset.is_empty() {
        return Err(invalid("gradient-noise estimates need a non-empty dataset"));
    }
    let mut ws = params.workspace();
    let (mut inv_p, mut inv_p2) = (0.0, 0.0);
    for n in 0..dataset.len() {
        let columns = params.jacobian_columns_with(dataset.input(n), &mut ws)?;
        for (col, &p) in columns.iter().zip(dataset.bcp(n)) {
            let p = p.max(P_MIN);
            let sq: f64 = col.iter().map(|v| v * v).sum();
            inv_p += sq / p;
            inv_p2 += sq / (p * p);
        }
    }
    let n = dataset.len() as f64;
    Ok(JacobianSums {
        inv_p: inv_p / n,
        inv_p2: inv_p2 / n,
        samples: dataset.len(),
    })
}

/// `E_x[Σ_k ‖J_k‖² / P(y_k|x)]`: gradient noise of one-hot supervision.
pub fn grad_noise_onehot_formula(params: &NetworkParams, dataset: &Dataset) -> Result<GradientNoiseEstimate> {
    let sums = jacobian_sums(params, dataset)?;
    Ok(GradientNoiseEstimate {
        value: sums.inv_p,
        estimator: NoiseEstimator::OneHotFormula,
        samples_used: sums.samples,
    })
}

/// `ν · E_x[Σ_k ‖J_k‖² / P(y_k|x)²]`: gradient noise of additive-noise targets.
pub fn grad_noise_additive_formula(
    params: &NetworkParams,
    dataset: &Dataset,
    nu: f64,
) -> Result<GradientNoiseEstimate> {
    if !(nu >= 0.0 && nu.is_finite()) {
        return Err(invalid(format!("noise variance must be >= 0, got {nu}")));
    }
    let sums = jacobian_sums(params, dataset)?;
    Ok(GradientNoiseEstimate {
        value: nu * sums.inv_p2,
        estimator: NoiseEstimator::NoisyFormula { nu },
        samples_used: sums.samples,
    })
}

/// `E_x[Σ_k ‖J_k‖² / P(y_k|x)] / (ε + 1)`: gradient noise of Dirichlet targets.
pub fn grad_noise_dirichlet_formula(
    params: &NetworkParams,
    dataset: &Dataset,
    epsilon: f64,
) -> Result<GradientNoiseEstimate> {
    check_epsilon(epsilon)?;
    let sums = jacobian_sums(params, dataset)?;
    Ok(GradientNoiseEstimate {
        value: sums.inv_p / (epsilon + 1.0),
        estimator: NoiseEstimator::DirichletFormula { epsilon },
        samples_used: sums.samples,
    })
}

/// Closed-form gradient noise at an interpolating point for any supervision
/// whose target is the posterior plus zero-mean noise. A λ-mixture adds the
/// one-hot and soft covariances with weights `(1-λ)²` and `λ²`. Returns
/// `None` for teacher-driven specs, which have no closed form.
pub fn grad_noise_formula(
    spec: &SupervisionSpec,
    params: &NetworkParams,
    dataset: &Dataset,
) -> Result<Option<GradientNoiseEstimate>> {
    spec.validate()?;
    let soft_scale = |soft: &SupervisionSpec, sums: &JacobianSums| -> Option<f64> {
        match soft {
            SupervisionSpec::OneHot => Some(sums.inv_p),
            SupervisionSpec::TrueBcp => Some(0.0),
            SupervisionSpec::AdditiveNoise { nu } => Some(nu * sums.inv_p2),
            SupervisionSpec::Dirichlet { epsilon } => Some(sums.inv_p / (epsilon + 1.0)),
            _ => None,
        }
    };
    let estimate = match spec {
        SupervisionSpec::OneHot => Some(grad_noise_onehot_formula(params, dataset)?),
        SupervisionSpec::TrueBcp => Some(GradientNoiseEstimate {
            value: 0.0,
            estimator: NoiseEstimator::NoisyFormula { nu: 0.0 },
            samples_used: dataset.len(),
        }),
        SupervisionSpec::AdditiveNoise { nu } => Some(grad_noise_additive_formula(params, dataset, *nu)?),
        SupervisionSpec::Dirichlet { epsilon } => Some(grad_noise_dirichlet_formula(params, dataset, *epsilon)?),
        SupervisionSpec::Mixture { lambda, soft } => {
            if soft.teacher_name().is_some() {
                None
            } else {
                let sums = jacobian_sums(params, dataset)?;
                let soft_value = soft_scale(soft, &sums)
                    .ok_or_else(|| invalid("mixture soft component has no closed form"))?;
                let hard = 1.0 - lambda;
                Some(GradientNoiseEstimate {
                    value: hard * hard * sums.inv_p + lambda * lambda * soft_value,
                    estimator: NoiseEstimator::MixtureFormula { lambda: *lambda },
                    samples_used: sums.samples,
                })
            }
        }
        SupervisionSpec::Teacher { .. } => None,
    };
    Ok(estimate)
}

/// Direct estimate of `E‖∇θ ℓ(φ_θ(x), target)‖²`: for every row of `dataset`,
/// `draws` targets are generated and their gradient norms averaged. Labels
/// are redrawn from the stored posterior on each draw so one-hot and mixture
/// targets sample the joint distribution of `(x, y)`.
pub fn grad_noise_mc(
    spec: &SupervisionSpec,
    params: &NetworkParams,
    dataset: &Dataset,
    draws: usize,
    teachers: &TeacherRegistry,
    stream: &mut RngStream,
) -> Result<GradientNoiseEstimate> {
    spec.validate()?;
    if draws == 0 {
        return Err(invalid("Monte-Carlo estimate needs at least one draw"));
    }
    if dataset.is_empty() {
        return Err(invalid("gradient-noise estimates need a non-empty dataset"));
    }
    let k = dataset.spec.num_classes;
    let mut ws = params.workspace();
    let mut grad = vec![0.0; params.len()];
    let mut target = vec![0.0; k];
    let mut total = 0.0;
    for n in 0..dataset.len() {
        let bcp = dataset.bcp(n);
        for _ in 0..draws {
            let sample = Sample {
                x: dataset.input(n),
                label: stream.categorical(bcp),
                bcp,
            };
            next_target_into(spec, sample, teachers, stream, &mut target)?;
            grad.fill(0.0);
            params.accumulate_gradient(sample.x, &target, 1.0, 1.0, &mut ws, &mut grad)?;
            total += grad.iter().map(|g| g * g).sum::<f64>();
        }
    }
    Ok(GradientNoiseEstimate {
        value: total / (dataset.len() * draws) as f64,
        estimator: NoiseEstimator::MonteCarlo {
            spec: spec.clone(),
            draws,
        },
        samples_used: dataset.len(),
    })
}

/// Tail averages and moving-average deviations of a trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailMetrics {
    pub l_avg: f64,
    pub acc_avg: f64,
    pub sigma_l: f64,
    pub sigma_acc: f64,
    pub n_tail: usize,
    pub window: usize,
}

/// Centered moving average with window `w`, truncated at the series ends.
pub fn centered_moving_average(series: &[f64], w: usize) -> Vec<f64> {
    let n = series.len();
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0.0);
    for &v in series {
        prefix.push(prefix.last().copied().unwrap_or(0.0) + v);
    }
    let back = (w - 1) / 2;
    let ahead = w - 1 - back;
    (0..n)
        .map(|t| {
            let lo = t.saturating_sub(back);
            let hi = (t + ahead + 1).min(n);
            (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect()
}

fn tail_deviation(series: &[f64], n_tail: usize, w: usize) -> f64 {
    let smooth = centered_moving_average(series, w);
    let start = series.len() - n_tail;
    let sq: f64 = series[start..]
        .iter()
        .zip(&smooth[start..])
        .map(|(x, m)| (x - m) * (x - m))
        .sum();
    (sq / n_tail as f64).sqrt()
}

/// Averages over the last `n_tail` rows and the RMS deviation of those rows
/// from a centered moving average of window `w`.
pub fn tail_metrics(trace: &TrainingTrace, n_tail: usize, w: usize) -> Result<TailMetrics> {
    if w == 0 || n_tail < w || trace.len() < n_tail {
        return Err(invalid(format!(
            "tail metrics need trace length ({}) >= n_tail ({n_tail}) >= window ({w}) >= 1",
            trace.len()
        )));
    }
    let losses: Vec<f64> = trace.rows.iter().map(|r| r.gen_error).collect();
    let accs: Vec<f64> = trace.rows.iter().map(|r| r.accuracy).collect();
    let start = trace.len() - n_tail;
    let mean = |xs: &[f64]| xs[start..].iter().sum::<f64>() / n_tail as f64;
    Ok(TailMetrics {
        l_avg: mean(&losses),
        acc_avg: mean(&accs),
        sigma_l: tail_deviation(&losses, n_tail, w),
        sigma_acc: tail_deviation(&accs, n_tail, w),
        n_tail,
        window: w,
    })
}

/// Mean of `gen_error - reference` over rows with `iteration >= t0`.
pub fn avg_gap(trace: &TrainingTrace, t0: usize, reference: f64) -> Result<f64> {
    let gaps: Vec<f64> = trace
        .rows
        .iter()
        .filter(|r| r.iteration >= t0)
        .map(|r| r.gen_error - reference)
        .collect();
    if gaps.is_empty() {
        return Err(invalid(format!("trace has no rows at or beyond iteration {t0}")));
    }
    Ok(gaps.iter().sum::<f64>() / gaps.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InverseEpsFit {
    pub c: f64,
    pub r_squared: f64,
}

/// Least-squares fit of `metric ≈ c / (1 + ε)` (no intercept).
pub fn fit_inverse_eps(points: &[(f64, f64)]) -> Result<InverseEpsFit> {
    if points.len() < 2 {
        return Err(invalid("the inverse-epsilon fit needs at least two points"));
    }
    if points.iter().any(|&(e, m)| !(e > -1.0 && e.is_finite() && m.is_finite())) {
        return Err(invalid("fit points need finite metrics and epsilon > -1"));
    }
    let first = points[0].0;
    if points.iter().all(|&(e, _)| e == first) {
        return Err(invalid("the inverse-epsilon fit needs at least two distinct epsilon values"));
    }
    let reg = |e: f64| 1.0 / (1.0 + e);
    let sxy: f64 = points.iter().map(|&(e, m)| reg(e) * m).sum();
    let sxx: f64 = points.iter().map(|&(e, _)| reg(e) * reg(e)).sum();
    let c = sxy / sxx;
    let mean = points.iter().map(|p| p.1).sum::<f64>() / points.len() as f64;
    let ss_res: f64 = points.iter().map(|&(e, m)| (m - c * reg(e)).powi(2)).sum();
    let ss_tot: f64 = points.iter().map(|&(_, m)| (m - mean).powi(2)).sum();
    let r_squared = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else if ss_res == 0.0 {
        1.0
    } else {
        0.0
    };
    Ok(InverseEpsFit { c, r_squared })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstantsProvenance {
    UserSupplied,
    Fitted,
}

/// Strong-convexity, smoothness and expected-smoothness constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundConstants {
    pub mu: f64,
    pub smoothness: f64,
    pub expected_smoothness: f64,
    pub provenance: ConstantsProvenance,
}

impl BoundConstants {
    pub fn new(mu: f64, smoothness: f64, expected_smoothness: f64, provenance: ConstantsProvenance) -> Result<Self> {
        for (name, v) in [("mu", mu), ("L", smoothness), ("expected smoothness", expected_smoothness)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be > 0, got {v}")));
            }
        }
        Ok(BoundConstants {
            mu,
            smoothness,
            expected_smoothness,
            provenance,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundRow {
    pub iteration: usize,
    pub measured: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundOverlay {
    pub rows: Vec<BoundRow>,
    /// Share of rows with `measured <= bound`.
    pub fraction_within: f64,
}

fn distances(trace: &TrainingTrace) -> Result<Vec<(usize, f64)>> {
    if !trace.has_distance() {
        return Err(Error::Format("trace has no sq_dist column".into()));
    }
    Ok(trace
        .rows
        .iter()
        .map(|r| (r.iteration, r.sq_dist.unwrap_or(f64::NAN)))
        .collect())
}

/// Per-row bound `(1 - αμ)^t · d₀ + neighborhood` against the measured squared distance.
pub fn bound_overlay(
    trace: &TrainingTrace,
    learning_rate: f64,
    constants: &BoundConstants,
    neighborhood: f64,
) -> Result<BoundOverlay> {
    let dist = distances(trace)?;
    let contraction = 1.0 - learning_rate * constants.mu;
    if !(contraction > 0.0 && contraction < 1.0) {
        return Err(invalid(format!(
            "need 0 < α·μ < 1, got α·μ = {}",
            learning_rate * constants.mu
        )));
    }
    if neighborhood.is_nan() || neighborhood < 0.0 {
        return Err(invalid("neighborhood must be >= 0"));
    }
    let (t0, d0) = dist[0];
    let rows: Vec<BoundRow> = dist
        .iter()
        .map(|&(t, d)| BoundRow {
            iteration: t,
            measured: d,
            bound: contraction.powf((t - t0) as f64) * d0 + neighborhood,
        })
        .collect();
    let within = rows.iter().filter(|r| r.measured <= r.bound).count();
    Ok(BoundOverlay {
        fraction_within: within as f64 / rows.len() as f64,
        rows,
    })
}

/// Strong-convexity constant read off the measured distance curve.
///
/// Fits `ln d_t` linearly in `t` over the log-linear stretch that starts once
/// the distance has halved and ends where it comes within a factor 10 of the
/// tail plateau (median of the last tenth of rows). The slope `s` gives
/// `μ = (1 - e^s) / α`.
pub fn fit_mu(trace: &TrainingTrace, learning_rate: f64) -> Result<f64> {
    let dist = distances(trace)?;
    let d0 = dist[0].1;
    let mut tail: Vec<f64> = dist[dist.len() - (dist.len() / 10).max(1)..]
        .iter()
        .map(|p| p.1)
        .collect();
    tail.sort_by(f64::total_cmp);
    let plateau = tail[tail.len() / 2];
    let upper = 0.5 * d0;
    let lower = (10.0 * plateau).max(d0 * 1e-12);
    let mut region = Vec::new();
    for &(t, d) in &dist {
        if d < lower {
            break;
        }
        if d <= upper {
            region.push((t as f64, d.ln()));
        }
    }
    if region.len() < 3 {
        return Err(invalid("distance curve has no log-linear region to fit"));
    }
    let n = region.len() as f64;
    let mt = region.iter().map(|p| p.0).sum::<f64>() / n;
    let my = region.iter().map(|p| p.1).sum::<f64>() / n;
    let sty: f64 = region.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum();
    let stt: f64 = region.iter().map(|p| (p.0 - mt).powi(2)).sum();
    let slope = sty / stt;
    if slope.is_nan() || slope >= 0.0 {
        return Err(invalid("distance curve is not decreasing"));
    }
    Ok((1.0 - slope.exp()) / learning_rate)
}

/// Median of the squared distance over the last `fraction` of rows.
pub fn distance_plateau(trace: &TrainingTrace, fraction: f64) -> Result<f64> {
    let dist = distances(trace)?;
    let count = ((dist.len() as f64 * fraction).ceil() as usize).clamp(1, dist.len());
    let mut tail: Vec<f64> = dist[dist.len() - count..].iter().map(|p| p.1).collect();
    tail.sort_by(f64::total_cmp);
    Ok(tail[tail.len() / 2])
}
