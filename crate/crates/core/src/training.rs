//! Plain SGD, `θ ← θ - α ∇f_ξ(θ)`, under any supervision spec, with periodic
//! held-out evaluation.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::{argmax, init_params, Architecture, NetworkParams, Workspace, P_MIN};
use crate::rng::RngStream;
use crate::supervision::{next_target_into, Sample, SupervisionSpec};
use crate::synth::Dataset;
use crate::teachers::TeacherRegistry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    #[default]
    He,
    Zero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub eval_interval: usize,
    pub student_temperature: f64,
    pub supervision: SupervisionSpec,
    pub seed: u64,
    /// Record `‖θ_t - θ*‖²` against this point at every evaluation.
    pub track_distance_to: Option<NetworkParams>,
    /// Draw each sample's noisy target once and reuse it on every visit.
    pub freeze_noise: bool,
    pub init: InitScheme,
}

impl TrainConfig {
    pub fn new(learning_rate: f64, iterations: usize, supervision: SupervisionSpec, seed: u64) -> Self {
        TrainConfig {
            learning_rate,
            iterations,
            batch_size: 1,
            eval_interval: iterations.max(1),
            student_temperature: 1.0,
            supervision,
            seed,
            track_distance_to: None,
            freeze_noise: false,
            init: InitScheme::He,
        }
    }

    pub fn validate(&self, train_size: usize) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if self.iterations == 0 {
            return Err(invalid("iterations must be positive"));
        }
        if self.batch_size == 0 || self.batch_size > train_size {
            return Err(invalid(format!(
                "batch size {} must lie in [1, {train_size}]",
                self.batch_size
            )));
        }
        if self.eval_interval == 0 || self.eval_interval > self.iterations {
            return Err(invalid(format!(
                "eval_interval {} must lie in [1, iterations = {}]",
                self.eval_interval, self.iterations
            )));
        }
        if !(self.student_temperature > 0.0 && self.student_temperature.is_finite()) {
            return Err(invalid("student temperature must be > 0"));
        }
        self.supervision.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub train_loss: f64,
    pub gen_error: f64,
    pub accuracy: f64,
    pub sq_dist: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingTrace {
    pub rows: Vec<TraceRow>,
}

impl TrainingTrace {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }

    pub fn has_distance(&self) -> bool {
        !self.rows.is_empty() && self.rows.iter().all(|r| r.sq_dist.is_some())
    }

    /// CSV `iteration,train_loss,gen_error,accuracy[,sq_dist]`, 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let with_dist = self.has_distance();
        if with_dist {
            writeln!(out, "iteration,train_loss,gen_error,accuracy,sq_dist")?;
        } else {
            writeln!(out, "iteration,train_loss,gen_error,accuracy")?;
        }
        for r in &self.rows {
            write!(
                out,
                "{},{},{},{}",
                r.iteration,
                crate::fmt_f64(r.train_loss),
                crate::fmt_f64(r.gen_error),
                crate::fmt_f64(r.accuracy)
            )?;
            match r.sq_dist {
                Some(d) if with_dist => writeln!(out, ",{}", crate::fmt_f64(d))?,
                _ => writeln!(out)?,
            }
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty trace file".into()))??;
        let columns: Vec<&str> = header.trim().split(',').collect();
        let with_dist = match columns.as_slice() {
            ["iteration", "train_loss", "gen_error", "accuracy"] => false,
            ["iteration", "train_loss", "gen_error", "accuracy", "sq_dist"] => true,
            _ => return Err(Error::Format(format!("unexpected trace header `{header}`"))),
        };
        let mut trace = TrainingTrace::default();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |what: &str| Error::Format(format!("trace line {}: {what}", i + 2));
            let fields: Vec<&str> = line.trim().split(',').collect();
            if fields.len() != columns.len() {
                return Err(bad("wrong number of fields"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad("unparseable number"));
            trace.rows.push(TraceRow {
                iteration: fields[0].parse().map_err(|_| bad("unparseable iteration"))?,
                train_loss: num(fields[1])?,
                gen_error: num(fields[2])?,
                accuracy: num(fields[3])?,
                sq_dist: if with_dist { Some(num(fields[4])?) } else { None },
            });
        }
        Ok(trace)
    }
}

/// Mean one-hot cross-entropy and argmax accuracy (ties to the lowest index).
pub fn evaluate(params: &NetworkParams, dataset: &Dataset, temperature: f64) -> Result<(f64, f64)> {
    if dataset.is_empty() {
        return Err(invalid("cannot evaluate on an empty dataset"));
    }
    let mut ws = params.workspace();
    let mut loss = 0.0;
    let mut hits = 0usize;
    for n in 0..dataset.len() {
        let probs = params.forward_with(dataset.input(n), temperature, &mut ws)?;
        let label = dataset.label(n);
        loss -= probs[label].max(P_MIN).ln();
        if argmax(probs) == label {
            hits += 1;
        }
    }
    let n = dataset.len() as f64;
    Ok((loss / n, hits as f64 / n))
}

/// Parameters a run with `config` starts from.
pub fn initial_params(arch: &Architecture, config: &TrainConfig) -> NetworkParams {
    match config.init {
        InitScheme::He => init_params(arch, &mut RngStream::new(config.seed).child("init")),
        InitScheme::Zero => NetworkParams::zeros(arch.clone()),
    }
}

/// Buffers reused across SGD steps.
struct StepScratch {
    ws: Workspace,
    grad: Vec<f64>,
    target: Vec<f64>,
}

impl StepScratch {
    fn new(params: &NetworkParams) -> Self {
        StepScratch {
            ws: params.workspace(),
            grad: vec![0.0; params.len()],
            target: vec![0.0; params.architecture().num_classes],
        }
    }
}

/// Where noisy targets draw their randomness from.
enum NoiseSource<'a> {
    Fresh(&'a mut RngStream),
    /// One fixed stream per training-set index.
    Frozen(&'a RngStream),
}

#[allow(clippy::too_many_arguments)]
fn step_in_place(
    params: &mut NetworkParams,
    batch: &[(usize, Sample<'_>)],
    spec: &SupervisionSpec,
    learning_rate: f64,
    temperature: f64,
    teachers: &TeacherRegistry,
    noise: &mut NoiseSource<'_>,
    iteration: usize,
    scratch: &mut StepScratch,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(invalid("SGD step needs a non-empty batch"));
    }
    scratch.grad.fill(0.0);
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for &(index, sample) in batch {
        match noise {
            NoiseSource::Fresh(stream) => {
                next_target_into(spec, sample, teachers, stream, &mut scratch.target)?
            }
            NoiseSource::Frozen(root) => {
                let mut stream = root.child_indexed("sample", index as u64);
                next_target_into(spec, sample, teachers, &mut stream, &mut scratch.target)?
            }
        }
        loss += scale
            * params.accumulate_gradient(
                sample.x,
                &scratch.target,
                temperature,
                scale,
                &mut scratch.ws,
                &mut scratch.grad,
            )?;
    }
    if !loss.is_finite() || scratch.grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NumericFailure { iteration });
    }
    for (p, g) in params.as_mut_slice().iter_mut().zip(&scratch.grad) {
        *p -= learning_rate * g;
    }
    Ok(loss)
}

/// One update `θ - α · mean_b ∇ℓ(φ_θ(x_b), target_b)`.
pub fn sgd_step(
    params: &NetworkParams,
    batch: &[Sample<'_>],
    spec: &SupervisionSpec,
    learning_rate: f64,
    temperature: f64,
    teachers: &TeacherRegistry,
    stream: &mut RngStream,
) -> Result<NetworkParams> {
    let mut next = params.clone();
    let mut scratch = StepScratch::new(params);
    let indexed: Vec<(usize, Sample<'_>)> = batch.iter().copied().enumerate().collect();
    step_in_place(
        &mut next,
        &indexed,
        spec,
        learning_rate,
        temperature,
        teachers,
        &mut NoiseSource::Fresh(stream),
        0,
        &mut scratch,
    )?;
    Ok(next)
}

/// A run that stopped early, with everything recorded up to the failure.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: Error,
    pub params: NetworkParams,
    pub trace: TrainingTrace,
}

impl std::fmt::Display for TrainFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "training stopped after {} trace rows: {}", self.trace.len(), self.error)
    }
}

impl std::error::Error for TrainFailure {}

fn failure(error: Error, params: &NetworkParams, trace: &TrainingTrace) -> Box<TrainFailure> {
    Box::new(TrainFailure {
        error,
        params: params.clone(),
        trace: trace.clone(),
    })
}

/// Runs `config.iterations` SGD steps on batches drawn with replacement from
/// `train_set`, evaluating on `test_set` (at temperature 1) at iteration 0
/// and every `eval_interval` steps.
///
/// The seed splits into independent `init`, `batches` and `noise` streams.
/// Row 0's `train_loss` is the one-hot loss over the training set; later rows
/// hold the mean batch loss since the previous row.
pub fn train(
    train_set: &Dataset,
    test_set: &Dataset,
    arch: &Architecture,
    config: &TrainConfig,
    teachers: &TeacherRegistry,
) -> std::result::Result<(NetworkParams, TrainingTrace), Box<TrainFailure>> {
    let mut params = initial_params(arch, config);
    let mut trace = TrainingTrace::default();
    let early = |e: Error, p: &NetworkParams, t: &TrainingTrace| failure(e, p, t);

    if let Err(e) = config.validate(train_set.len()) {
        return Err(early(e, &params, &trace));
    }
    if train_set.spec.input_dim != arch.input_dim || train_set.spec.num_classes != arch.num_classes {
        return Err(early(
            invalid("architecture does not match the dataset's input_dim/num_classes"),
            &params,
            &trace,
        ));
    }
    if let Some(name) = config.supervision.teacher_name() {
        if teachers.get(name).is_none() {
            return Err(early(
                Error::Config(format!("supervision references unknown teacher `{name}`")),
                &params,
                &trace,
            ));
        }
    }

    let root = RngStream::new(config.seed);
    let mut batches = root.child("batches");
    let mut fresh_noise = root.child("noise");
    let frozen_noise = root.child("frozen-noise");
    let distance = |p: &NetworkParams| config.track_distance_to.as_ref().map(|t| p.squared_distance(t));

    let (train_loss0, _) = evaluate(&params, train_set, 1.0).map_err(|e| early(e, &params, &trace))?;
    let (gen0, acc0) = evaluate(&params, test_set, 1.0).map_err(|e| early(e, &params, &trace))?;
    trace.rows.push(TraceRow {
        iteration: 0,
        train_loss: train_loss0,
        gen_error: gen0,
        accuracy: acc0,
        sq_dist: distance(&params),
    });

    let mut scratch = StepScratch::new(&params);
    let mut batch: Vec<(usize, Sample<'_>)> = Vec::with_capacity(config.batch_size);
    let mut loss_sum = 0.0;
    let mut loss_count = 0usize;
    for t in 1..=config.iterations {
        batch.clear();
        for _ in 0..config.batch_size {
            let n = batches.below(train_set.len());
            batch.push((
                n,
                Sample {
                    x: train_set.input(n),
                    label: train_set.label(n),
                    bcp: train_set.bcp(n),
                },
            ));
        }
        let mut noise = if config.freeze_noise {
            NoiseSource::Frozen(&frozen_noise)
        } else {
            NoiseSource::Fresh(&mut fresh_noise)
        };
        let loss = step_in_place(
            &mut params,
            &batch,
            &config.supervision,
            config.learning_rate,
            config.student_temperature,
            teachers,
            &mut noise,
            t,
            &mut scratch,
        )
        .map_err(|e| early(e, &params, &trace))?;
        loss_sum += loss;
        loss_count += 1;

        if t % config.eval_interval == 0 {
            let (gen, acc) = evaluate(&params, test_set, 1.0).map_err(|e| early(e, &params, &trace))?;
            if !gen.is_finite() {
                return Err(early(Error::NumericFailure { iteration: t }, &params, &trace));
            }
            trace.rows.push(TraceRow {
                iteration: t,
                train_loss: loss_sum / loss_count as f64,
                gen_error: gen,
                accuracy: acc,
                sq_dist: distance(&params),
            });
            loss_sum = 0.0;
            loss_count = 0;
        }
    }
    Ok((params, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{bayes_optimum_linear, generate, sample_task};

    fn small_task() -> (Dataset, Dataset) {
        let spec = sample_task(3, 4, 1.0, &mut RngStream::new(1)).unwrap();
        let data = generate(&spec, 400, &mut RngStream::new(2)).unwrap();
        crate::synth::split(&data, 0.5, &mut RngStream::new(3)).unwrap()
    }

    #[test]
    fn fixed_point_at_interpolation() {
        let (train_set, _) = small_task();
        let opt = bayes_optimum_linear(&train_set.spec);
        let batch: Vec<Sample> = (0..5)
            .map(|n| Sample {
                x: train_set.input(n),
                label: train_set.label(n),
                bcp: train_set.bcp(n),
            })
            .collect();
        let next = sgd_step(
            &opt,
            &batch,
            &SupervisionSpec::TrueBcp,
            0.1,
            1.0,
            &TeacherRegistry::default(),
            &mut RngStream::new(0),
        )
        .unwrap();
        assert!(next.squared_distance(&opt) < 1e-28);
    }

    #[test]
    fn single_sample_step_is_theta_minus_alpha_g() {
        let (train_set, _) = small_task();
        let arch = Architecture::new(4, vec![3], 3).unwrap();
        let params = init_params(&arch, &mut RngStream::new(5));
        let target = crate::supervision::one_hot(train_set.label(0), 3).unwrap();
        let g = params.backward(train_set.input(0), &target, 1.0).unwrap();
        let sample = Sample {
            x: train_set.input(0),
            label: train_set.label(0),
            bcp: train_set.bcp(0),
        };
        let next = sgd_step(
            &params,
            &[sample],
            &SupervisionSpec::OneHot,
            0.05,
            1.0,
            &TeacherRegistry::default(),
            &mut RngStream::new(0),
        )
        .unwrap();
        for ((a, b), gi) in next.as_slice().iter().zip(params.as_slice()).zip(&g) {
            assert_eq!(*a, b - 0.05 * gi);
        }
    }

    #[test]
    fn empty_batch_rejected() {
        let params = NetworkParams::zeros(Architecture::linear(2, 2).unwrap());
        let r = sgd_step(
            &params,
            &[],
            &SupervisionSpec::OneHot,
            0.1,
            1.0,
            &TeacherRegistry::default(),
            &mut RngStream::new(0),
        );
        assert!(r.is_err());
    }

    #[test]
    fn trace_row_count_and_determinism() {
        let (train_set, test_set) = small_task();
        let arch = Architecture::linear(4, 3).unwrap();
        let mut config = TrainConfig::new(0.01, 1000, SupervisionSpec::Dirichlet { epsilon: 2.0 }, 7);
        config.eval_interval = 300;
        let (p1, t1) = train(&train_set, &test_set, &arch, &config, &TeacherRegistry::default()).unwrap();
        let (p2, t2) = train(&train_set, &test_set, &arch, &config, &TeacherRegistry::default()).unwrap();
        assert_eq!(t1.len(), 1000 / 300 + 1);
        assert_eq!(p1, p2);
        let mut a = Vec::new();
        let mut b = Vec::new();
        t1.write_csv(&mut a).unwrap();
        t2.write_csv(&mut b).unwrap();
        assert_eq!(a, b);
        assert_eq!(TrainingTrace::read_csv(&a[..]).unwrap(), t1);
    }

    #[test]
    fn uniform_predictor_scores() {
        let spec = sample_task(5, 3, 1.0, &mut RngStream::new(1)).unwrap();
        let data = generate(&spec, 5000, &mut RngStream::new(2)).unwrap();
        let params = NetworkParams::zeros(Architecture::linear(3, 5).unwrap());
        let (err, acc) = evaluate(&params, &data, 1.0).unwrap();
        assert!((err - 5f64.ln()).abs() < 1e-12);
        // every output ties, so argmax is class 0
        let zeros = data.labels.iter().filter(|&&l| l == 0).count() as f64 / 5000.0;
        assert_eq!(acc, zeros);
    }

    #[test]
    fn invalid_configs_rejected() {
        let (train_set, test_set) = small_task();
        let arch = Architecture::linear(4, 3).unwrap();
        let reg = TeacherRegistry::default();
        let mut c = TrainConfig::new(0.01, 10, SupervisionSpec::OneHot, 1);
        c.eval_interval = 11;
        assert!(train(&train_set, &test_set, &arch, &c, &reg).is_err());
        let mut c = TrainConfig::new(0.01, 10, SupervisionSpec::OneHot, 1);
        c.batch_size = 10_000;
        assert!(train(&train_set, &test_set, &arch, &c, &reg).is_err());
        let c = TrainConfig::new(0.01, 10, SupervisionSpec::Teacher { name: "t".into(), temperature: 1.0 }, 1);
        let err = train(&train_set, &test_set, &arch, &c, &reg).unwrap_err();
        assert!(matches!(err.error, Error::Config(_)));
    }

    #[test]
    fn divergence_reports_iteration_and_keeps_trace() {
        let (train_set, test_set) = small_task();
        let arch = Architecture::linear(4, 3).unwrap();
        let mut c = TrainConfig::new(1e308, 50, SupervisionSpec::OneHot, 1);
        c.eval_interval = 1;
        let err = train(&train_set, &test_set, &arch, &c, &TeacherRegistry::default()).unwrap_err();
        assert!(matches!(err.error, Error::NumericFailure { .. }));
        assert!(!err.trace.is_empty());
    }
}
