//! Self-checks over every module: gradients, simplex identities, sampler
//! moments, the interpolation point, noise estimators and determinism.

use std::fmt;

use crate::analysis::{
    avg_gap, grad_noise_additive_formula, grad_noise_dirichlet_formula, grad_noise_mc, grad_noise_onehot_formula,
    tail_metrics,
};
use crate::error::Result;
use crate::nn::{ce_loss, init_params, Architecture, NetworkParams};
use crate::rng::RngStream;
use crate::supervision::SupervisionSpec;
use crate::synth::{bayes_optimum_linear, generate, oracle_risk, sample_task, split, true_bcp_into, Dataset, TaskSpec};
use crate::teachers::TeacherRegistry;
use crate::training::{train, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Quick,
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub module: &'static str,
    pub invariant: String,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    /// Passes when `measured <= tolerance`.
    fn at_most(module: &'static str, invariant: impl Into<String>, measured: f64, tolerance: f64) -> Self {
        CheckResult {
            module,
            invariant: invariant.into(),
            measured,
            tolerance,
            passed: measured <= tolerance,
        }
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {:<12} {}: measured {:.3e}, tolerance {:.3e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.module,
            self.invariant,
            self.measured,
            self.tolerance
        )
    }
}

/// Gradient of the cross-entropy w.r.t. the flat parameters at `(x, target, T)`.
pub type GradientFn<'a> = dyn Fn(&NetworkParams, &[f64], &[f64], f64) -> Result<Vec<f64>> + 'a;

pub fn backward_gradient(params: &NetworkParams, x: &[f64], target: &[f64], temperature: f64) -> Result<Vec<f64>> {
    params.backward(x, target, temperature)
}

fn loss_at(params: &NetworkParams, x: &[f64], target: &[f64], temperature: f64) -> Result<f64> {
    Ok(ce_loss(&params.forward(x, temperature)?, target))
}

/// Worst relative error `max|g - g_fd| / max|g_fd|` over `configs` random
/// networks, inputs, targets and temperatures, against central differences.
pub fn max_gradient_error(gradient: &GradientFn<'_>, configs: usize, stream: &mut RngStream) -> Result<f64> {
    const H: f64 = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..configs {
        let input_dim = 1 + stream.below(6);
        let hidden: Vec<usize> = (0..stream.below(3)).map(|_| 1 + stream.below(6)).collect();
        let num_classes = 2 + stream.below(4);
        let arch = Architecture::new(input_dim, hidden, num_classes)?;
        let mut params = init_params(&arch, stream);
        for v in params.as_mut_slice() {
            *v += 0.1 * stream.standard_normal();
        }
        let x: Vec<f64> = (0..input_dim).map(|_| stream.standard_normal()).collect();
        let target = if stream.uniform() < 0.5 {
            stream.dirichlet(&vec![1.0; num_classes])?
        } else {
            let mut t = vec![0.0; num_classes];
            t[stream.below(num_classes)] = 1.0;
            t
        };
        let temperature = 0.5 + 2.5 * stream.uniform();

        let analytic = gradient(&params, &x, &target, temperature)?;
        let mut numeric = vec![0.0; params.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = params.as_slice()[i];
            params.as_mut_slice()[i] = orig + H;
            let up = loss_at(&params, &x, &target, temperature)?;
            params.as_mut_slice()[i] = orig - H;
            let down = loss_at(&params, &x, &target, temperature)?;
            params.as_mut_slice()[i] = orig;
            *slot = (up - down) / (2.0 * H);
        }
        let diff = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).abs())
            .fold(0.0, f64::max);
        let scale = numeric.iter().map(|n| n.abs()).fold(1e-8, f64::max);
        worst = worst.max(diff / scale);
    }
    Ok(worst)
}

fn paper_task(seed: u64) -> Result<TaskSpec> {
    sample_task(5, 30, 2.5, &mut RngStream::new(seed).child("task"))
}

fn simplex_checks(stream: &mut RngStream) -> Result<Vec<CheckResult>> {
    let spec = paper_task(11)?;
    let data = generate(&spec, 2_000, stream)?;
    let mut worst_bcp: f64 = 0.0;
    let mut worst_dir: f64 = 0.0;
    let mut worst_softmax: f64 = 0.0;
    let net = init_params(&Architecture::new(30, vec![8], 5)?, stream);
    for n in 0..data.len() {
        worst_bcp = worst_bcp.max((data.bcp(n).iter().sum::<f64>() - 1.0).abs());
        let conc: Vec<f64> = data.bcp(n).iter().map(|p| 0.5 * p.max(crate::nn::P_MIN)).collect();
        let draw = stream.dirichlet(&conc)?;
        worst_dir = worst_dir.max((draw.iter().sum::<f64>() - 1.0).abs());
        let p = net.forward(data.input(n), 1.0 + stream.uniform())?;
        worst_softmax = worst_softmax.max((p.iter().sum::<f64>() - 1.0).abs());
    }
    Ok(vec![
        CheckResult::at_most("synth", "true posteriors sum to one", worst_bcp, 1e-12),
        CheckResult::at_most("rng", "Dirichlet draws sum to one", worst_dir, 1e-12),
        CheckResult::at_most("nn", "softmax outputs sum to one", worst_softmax, 1e-12),
    ])
}

/// Largest standard-error distance of the sample mean and variance of
/// `Dir(epsilon * p)` draws from `p` and `p(1-p)/(epsilon+1)`.
pub fn dirichlet_moment_z(p: &[f64], epsilon: f64, draws: usize, stream: &mut RngStream) -> Result<f64> {
    let conc: Vec<f64> = p.iter().map(|v| epsilon * v).collect();
    let k = p.len();
    let mut samples = vec![0.0; draws * k];
    for row in samples.chunks_mut(k) {
        stream.dirichlet_into(&conc, row)?;
    }
    let n = draws as f64;
    let mut worst: f64 = 0.0;
    for j in 0..k {
        let col: Vec<f64> = samples.chunks(k).map(|r| r[j]).collect();
        let mean = col.iter().sum::<f64>() / n;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let m4 = col.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
        let want_var = p[j] * (1.0 - p[j]) / (epsilon + 1.0);
        let z_mean = (mean - p[j]).abs() / (want_var / n).sqrt();
        let z_var = (var - want_var).abs() / ((m4 - var * var).max(0.0) / n).sqrt();
        worst = worst.max(z_mean).max(z_var);
    }
    Ok(worst)
}

fn dirichlet_moment_check(epsilon: f64, draws: usize, stream: &mut RngStream) -> Result<CheckResult> {
    let worst = dirichlet_moment_z(&[0.5, 0.3, 0.15, 0.05], epsilon, draws, stream)?;
    Ok(CheckResult::at_most(
        "rng",
        format!("Dirichlet(eps={epsilon}) mean and variance (standard errors)"),
        worst,
        5.0,
    ))
}

fn interpolation_checks(inputs: usize, stream: &mut RngStream) -> Result<Vec<CheckResult>> {
    let spec = paper_task(12)?;
    let optimum = bayes_optimum_linear(&spec);
    let data = generate(&spec, inputs, stream)?;
    let mut ws = optimum.workspace();
    let mut bcp = vec![0.0; 5];
    let mut worst_fit: f64 = 0.0;
    let mut worst_grad: f64 = 0.0;
    let mut grad = vec![0.0; optimum.len()];
    for n in 0..data.len() {
        let x = data.input(n);
        true_bcp_into(&spec, x, &mut bcp);
        let out = optimum.forward_with(x, 1.0, &mut ws)?;
        for (a, b) in out.iter().zip(&bcp) {
            worst_fit = worst_fit.max((a - b).abs());
        }
        grad.fill(0.0);
        optimum.accumulate_gradient(x, &bcp, 1.0, 1.0, &mut ws, &mut grad)?;
        worst_grad = worst_grad.max(grad.iter().map(|g| g * g).sum::<f64>().sqrt());
    }
    let mc = grad_noise_mc(
        &SupervisionSpec::TrueBcp,
        &optimum,
        &data.head(inputs.min(500)),
        2,
        &TeacherRegistry::default(),
        stream,
    )?;
    Ok(vec![
        CheckResult::at_most("synth", "linear optimum reproduces the posterior", worst_fit, 1e-12),
        CheckResult::at_most("nn", "per-sample gradient at the optimum", worst_grad, 1e-10),
        CheckResult::at_most("analysis", "Monte-Carlo noise with exact posteriors", mc.value, 1e-18),
    ])
}

fn relative(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

fn estimator_checks(samples: usize, draws: usize, stream: &mut RngStream) -> Result<Vec<CheckResult>> {
    let spec = paper_task(13)?;
    let optimum = bayes_optimum_linear(&spec);
    let data = generate(&spec, samples, stream)?;
    let reg = TeacherRegistry::default();
    let onehot = grad_noise_onehot_formula(&optimum, &data)?.value;
    let mut out = Vec::new();
    let mut worst_identity: f64 = 0.0;
    for epsilon in [0.5, 1.0, 5.0, 20.0] {
        let dir = grad_noise_dirichlet_formula(&optimum, &data, epsilon)?.value;
        worst_identity = worst_identity.max(relative(dir, onehot / (epsilon + 1.0)));
    }
    out.push(CheckResult::at_most(
        "analysis",
        "Dirichlet noise equals one-hot noise / (eps + 1)",
        worst_identity,
        4.0 * f64::EPSILON,
    ));
    let cases = [
        ("one-hot", SupervisionSpec::OneHot, onehot),
        (
            "additive(nu=1e-4)",
            SupervisionSpec::AdditiveNoise { nu: 1e-4 },
            grad_noise_additive_formula(&optimum, &data, 1e-4)?.value,
        ),
        (
            "Dirichlet(eps=2)",
            SupervisionSpec::Dirichlet { epsilon: 2.0 },
            grad_noise_dirichlet_formula(&optimum, &data, 2.0)?.value,
        ),
    ];
    for (name, sup, formula) in cases {
        let mc = grad_noise_mc(&sup, &optimum, &data, draws, &reg, stream)?.value;
        out.push(CheckResult::at_most(
            "analysis",
            format!("{name} closed form vs Monte-Carlo (relative)"),
            relative(formula, mc),
            0.05,
        ));
    }
    Ok(out)
}

fn small_split(seed: u64, n: usize) -> Result<(Dataset, Dataset)> {
    let spec = paper_task(seed)?;
    let root = RngStream::new(seed);
    let data = generate(&spec, n, &mut root.child("data"))?;
    split(&data, 0.5, &mut root.child("split"))
}

fn determinism_check() -> Result<CheckResult> {
    let (train_set, test_set) = small_split(14, 2_000)?;
    let arch = Architecture::new(30, vec![8], 5)?;
    let mut config = TrainConfig::new(1e-2, 2_000, SupervisionSpec::Dirichlet { epsilon: 1.0 }, 3);
    config.eval_interval = 100;
    let mut csv = Vec::new();
    for _ in 0..2 {
        let (_, trace) = train(&train_set, &test_set, &arch, &config, &TeacherRegistry::default())
            .map_err(|f| f.error)?;
        let mut bytes = Vec::new();
        trace.write_csv(&mut bytes)?;
        csv.push(bytes);
    }
    let differing = if csv[0] == csv[1] { 0.0 } else { 1.0 };
    Ok(CheckResult::at_most(
        "training",
        "identical seeds give byte-identical traces",
        differing,
        0.0,
    ))
}

/// Five-seed comparison of exact-posterior and Dirichlet(0.5) supervision on
/// the linear student: the noisier signal must have the larger mean gap and
/// tail deviation.
fn ordering_checks() -> Result<Vec<CheckResult>> {
    let (train_set, test_set) = small_split(15, 20_000)?;
    let reference = oracle_risk(&test_set);
    let arch = Architecture::linear(30, 5)?;
    let mut means = Vec::new();
    for sup in [SupervisionSpec::TrueBcp, SupervisionSpec::Dirichlet { epsilon: 0.5 }] {
        let (mut gap, mut sigma) = (0.0, 0.0);
        for seed in 0..5 {
            let mut config = TrainConfig::new(5e-3, 100_000, sup.clone(), 100 + seed);
            config.eval_interval = 100;
            let (_, trace) = train(&train_set, &test_set, &arch, &config, &TeacherRegistry::default())
                .map_err(|f| f.error)?;
            gap += avg_gap(&trace, 50_000, reference)? / 5.0;
            sigma += tail_metrics(&trace, trace.len() / 5, 50)?.sigma_l / 5.0;
        }
        means.push((gap, sigma));
    }
    let (exact, noisy) = (means[0], means[1]);
    Ok(vec![
        CheckResult::at_most("analysis", "gap(exact posteriors) - gap(eps=0.5)", exact.0 - noisy.0, 0.0),
        CheckResult::at_most(
            "analysis",
            "sigma_L(exact posteriors) - sigma_L(eps=0.5)",
            exact.1 - noisy.1,
            0.0,
        ),
    ])
}

/// Runs the suite; `gradient` stands in for backpropagation in the gradient check.
pub fn run_suite_with(level: Level, gradient: &GradientFn<'_>) -> Result<Vec<CheckResult>> {
    let stream = RngStream::new(2024);
    let mut results = vec![CheckResult::at_most(
        "nn",
        "backward vs central differences (relative)",
        max_gradient_error(gradient, 100, &mut stream.child("gradient"))?,
        1e-4,
    )];
    results.extend(simplex_checks(&mut stream.child("simplex"))?);
    let moment_draws = match level {
        Level::Quick => 20_000,
        Level::Full => 100_000,
    };
    for epsilon in [0.5, 5.0] {
        results.push(dirichlet_moment_check(epsilon, moment_draws, &mut stream.child("dirichlet"))?);
    }
    let inputs = match level {
        Level::Quick => 2_000,
        Level::Full => 10_000,
    };
    results.extend(interpolation_checks(inputs, &mut stream.child("interpolation"))?);
    let (samples, draws) = match level {
        Level::Quick => (1_000, 200),
        Level::Full => (2_000, 200),
    };
    results.extend(estimator_checks(samples, draws, &mut stream.child("estimators"))?);
    results.push(determinism_check()?);
    if level == Level::Full {
        results.extend(ordering_checks()?);
    }
    Ok(results)
}

pub fn run_suite(level: Level) -> Result<Vec<CheckResult>> {
    run_suite_with(level, &backward_gradient)
}
