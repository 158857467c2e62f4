//! Gaussian-mixture task with known class posteriors.
//!
//! Labels are uniform over `K` classes and `x | y=k ~ N(μ_k, σ² I)`, so the
//! posterior is a softmax of `-‖x - μ_k‖² / (2σ²)` and a linear-softmax model
//! realizes it exactly.

use std::io::{Read, Write};

use crate::error::{check_dim, invalid, Error, Result};
use crate::nn::{read_f64, read_u64, Architecture, NetworkParams, ProbVector};
use crate::rng::RngStream;

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub num_classes: usize,
    pub input_dim: usize,
    pub noise_variance: f64,
    /// `num_classes` rows of length `input_dim`, entries in {-1, 0, 1}.
    pub class_means: Vec<Vec<f64>>,
}

impl TaskSpec {
    pub fn new(noise_variance: f64, class_means: Vec<Vec<f64>>) -> Result<Self> {
        let num_classes = class_means.len();
        let input_dim = class_means.first().map_or(0, Vec::len);
        let spec = TaskSpec {
            num_classes,
            input_dim,
            noise_variance,
            class_means,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        check_task_dims(self.num_classes, self.input_dim, self.noise_variance)?;
        if self.class_means.len() != self.num_classes
            || self.class_means.iter().any(|m| m.len() != self.input_dim)
        {
            return Err(invalid("class_means must be num_classes rows of input_dim entries"));
        }
        if self
            .class_means
            .iter()
            .flatten()
            .any(|&v| v != -1.0 && v != 0.0 && v != 1.0)
        {
            return Err(invalid("class mean entries must lie in {-1, 0, 1}"));
        }
        Ok(())
    }
}

fn check_task_dims(num_classes: usize, input_dim: usize, noise_variance: f64) -> Result<()> {
    if num_classes < 2 {
        return Err(invalid("num_classes must be at least 2"));
    }
    if input_dim == 0 {
        return Err(invalid("input_dim must be positive"));
    }
    if !(noise_variance > 0.0 && noise_variance.is_finite()) {
        return Err(invalid(format!("noise_variance must be > 0, got {noise_variance}")));
    }
    Ok(())
}

/// Draws `K` mean vectors with entries uniform over {-1, 0, 1}.
pub fn sample_task(
    num_classes: usize,
    input_dim: usize,
    noise_variance: f64,
    stream: &mut RngStream,
) -> Result<TaskSpec> {
    check_task_dims(num_classes, input_dim, noise_variance)?;
    let class_means = (0..num_classes)
        .map(|_| {
            (0..input_dim)
                .map(|_| stream.below(3) as f64 - 1.0)
                .collect()
        })
        .collect();
    TaskSpec::new(noise_variance, class_means)
}

/// Posterior `P(y | x)` written into `out`, computed in log space.
pub fn true_bcp_into(spec: &TaskSpec, x: &[f64], out: &mut [f64]) {
    let scale = 0.5 / spec.noise_variance;
    let mut max = f64::NEG_INFINITY;
    for (o, mean) in out.iter_mut().zip(&spec.class_means) {
        let sq: f64 = x.iter().zip(mean).map(|(a, m)| (a - m) * (a - m)).sum();
        *o = -sq * scale;
        max = max.max(*o);
    }
    let mut total = 0.0;
    for o in out.iter_mut() {
        *o = (*o - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

pub fn true_bcp(spec: &TaskSpec, x: &[f64]) -> Result<ProbVector> {
    check_dim(spec.input_dim, x.len())?;
    let mut out = vec![0.0; spec.num_classes];
    true_bcp_into(spec, x, &mut out);
    ProbVector::from_weights(out)
}

/// Linear-softmax parameters with `W_k = μ_k/σ²`, `b_k = -‖μ_k‖²/(2σ²)`.
pub fn bayes_optimum_linear(spec: &TaskSpec) -> NetworkParams {
    let arch = Architecture::linear(spec.input_dim, spec.num_classes)
        .expect("validated task has a valid linear architecture");
    let mut params = NetworkParams::zeros(arch);
    let (weights, bias) = params.layer_mut(0);
    let d = spec.input_dim;
    for (k, mean) in spec.class_means.iter().enumerate() {
        for (w, &m) in weights[k * d..(k + 1) * d].iter_mut().zip(mean) {
            *w = m / spec.noise_variance;
        }
        bias[k] = -mean.iter().map(|m| m * m).sum::<f64>() / (2.0 * spec.noise_variance);
    }
    params
}

/// Point of the linear-softmax optimal set nearest to `reference`.
///
/// Adding one vector to every class row leaves the softmax unchanged, so the
/// minimizers form an affine family. SGD never moves the class-averaged row
/// when targets sum to one, which makes this the point the iterates approach.
pub fn nearest_linear_optimum(spec: &TaskSpec, reference: &NetworkParams) -> Result<NetworkParams> {
    let mut optimum = bayes_optimum_linear(spec);
    if reference.architecture() != optimum.architecture() {
        return Err(invalid("reference must use the task's linear-softmax architecture"));
    }
    let k = spec.num_classes;
    let d = spec.input_dim;
    let (ref_w, ref_b) = reference.layer(0);
    let mut shift_w = vec![0.0; d];
    let mut shift_b = 0.0;
    {
        let (w, b) = optimum.layer(0);
        for c in 0..k {
            for i in 0..d {
                shift_w[i] += (ref_w[c * d + i] - w[c * d + i]) / k as f64;
            }
            shift_b += (ref_b[c] - b[c]) / k as f64;
        }
    }
    let (w, b) = optimum.layer_mut(0);
    for c in 0..k {
        for i in 0..d {
            w[c * d + i] += shift_w[i];
        }
        b[c] += shift_b;
    }
    Ok(optimum)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: TaskSpec,
    /// Row-major `N x d`.
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
    /// Row-major `N x K`.
    pub bcps: Vec<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input(&self, n: usize) -> &[f64] {
        let d = self.spec.input_dim;
        &self.inputs[n * d..(n + 1) * d]
    }

    pub fn bcp(&self, n: usize) -> &[f64] {
        let k = self.spec.num_classes;
        &self.bcps[n * k..(n + 1) * k]
    }

    pub fn label(&self, n: usize) -> usize {
        self.labels[n]
    }

    /// Rows `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut out = Dataset {
            spec: self.spec.clone(),
            inputs: Vec::with_capacity(indices.len() * self.spec.input_dim),
            labels: Vec::with_capacity(indices.len()),
            bcps: Vec::with_capacity(indices.len() * self.spec.num_classes),
        };
        for &n in indices {
            out.inputs.extend_from_slice(self.input(n));
            out.labels.push(self.labels[n]);
            out.bcps.extend_from_slice(self.bcp(n));
        }
        out
    }

    /// First `n` rows (all rows if `n` exceeds the length).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }
}

/// Draws `n` labelled samples and records their posteriors.
pub fn generate(spec: &TaskSpec, n: usize, stream: &mut RngStream) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(invalid("dataset size must be positive"));
    }
    let (k, d) = (spec.num_classes, spec.input_dim);
    let std = spec.noise_variance.sqrt();
    let mut data = Dataset {
        spec: spec.clone(),
        inputs: Vec::with_capacity(n * d),
        labels: Vec::with_capacity(n),
        bcps: vec![0.0; n * k],
    };
    for row in 0..n {
        let label = stream.below(k);
        data.labels.push(label);
        for &m in &spec.class_means[label] {
            data.inputs.push(m + std * stream.standard_normal());
        }
        let x = &data.inputs[row * d..(row + 1) * d];
        true_bcp_into(spec, x, &mut data.bcps[row * k..(row + 1) * k]);
    }
    Ok(data)
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

/// Monte-Carlo estimate of `H(y | x)`: the mean posterior entropy over rows.
pub fn bayes_risk(dataset: &Dataset) -> f64 {
    let k = dataset.spec.num_classes;
    let total: f64 = dataset.bcps.chunks(k).map(entropy).sum();
    total / dataset.len() as f64
}

/// One-hot cross-entropy of the posterior itself on `dataset`: the loss a
/// perfect Bayes classifier records on this finite sample.
pub fn oracle_risk(dataset: &Dataset) -> f64 {
    let total: f64 = (0..dataset.len())
        .map(|n| -dataset.bcp(n)[dataset.label(n)].max(crate::nn::P_MIN).ln())
        .sum();
    total / dataset.len() as f64
}

/// Random disjoint split; returns `(train, test)`.
pub fn split(dataset: &Dataset, train_fraction: f64, stream: &mut RngStream) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(invalid(format!("train fraction must lie in (0, 1), got {train_fraction}")));
    }
    let n = dataset.len();
    let n_train = (train_fraction * n as f64).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(invalid(format!(
            "train fraction {train_fraction} leaves an empty side for {n} samples"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    // Fisher-Yates
    for i in (1..n).rev() {
        let j = stream.below(i + 1);
        idx.swap(i, j);
    }
    let (train, test) = idx.split_at(n_train);
    Ok((dataset.select(train), dataset.select(test)))
}

const DATASET_MAGIC: &[u8; 8] = b"BCPDATA1";

/// Binary layout (little-endian): `BCPDATA1`, u64 K, u64 d, u64 N, f64 σ²,
/// K·d f64 means, then N rows of `d` inputs, the label as f64 and `K`
/// posterior entries.
pub fn write_dataset<W: Write>(dataset: &Dataset, mut out: W) -> Result<()> {
    let spec = &dataset.spec;
    out.write_all(DATASET_MAGIC)?;
    out.write_all(&(spec.num_classes as u64).to_le_bytes())?;
    out.write_all(&(spec.input_dim as u64).to_le_bytes())?;
    out.write_all(&(dataset.len() as u64).to_le_bytes())?;
    out.write_all(&spec.noise_variance.to_le_bytes())?;
    for v in spec.class_means.iter().flatten() {
        out.write_all(&v.to_le_bytes())?;
    }
    let mut row = Vec::with_capacity(8 * (spec.input_dim + 1 + spec.num_classes));
    for n in 0..dataset.len() {
        row.clear();
        for v in dataset.input(n) {
            row.extend_from_slice(&v.to_le_bytes());
        }
        row.extend_from_slice(&(dataset.label(n) as f64).to_le_bytes());
        for v in dataset.bcp(n) {
            row.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&row)?;
    }
    Ok(())
}

pub fn read_dataset<R: Read>(mut input: R) -> Result<Dataset> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Format("not a dataset file".into()));
    }
    let k = read_u64(&mut input)? as usize;
    let d = read_u64(&mut input)? as usize;
    let n = read_u64(&mut input)? as usize;
    let noise_variance = read_f64(&mut input)?;
    if k > 1 << 20 || d > 1 << 24 {
        return Err(Error::Format(format!("implausible header K={k} d={d}")));
    }
    let class_means = (0..k)
        .map(|_| (0..d).map(|_| read_f64(&mut input)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let spec = TaskSpec::new(noise_variance, class_means)?;
    let mut data = Dataset {
        spec,
        inputs: Vec::with_capacity(n * d),
        labels: Vec::with_capacity(n),
        bcps: Vec::with_capacity(n * k),
    };
    for _ in 0..n {
        for _ in 0..d {
            data.inputs.push(read_f64(&mut input)?);
        }
        let label = read_f64(&mut input)?;
        if !(label >= 0.0 && label < k as f64 && label.fract() == 0.0) {
            return Err(Error::Format(format!("invalid label {label}")));
        }
        data.labels.push(label as usize);
        for _ in 0..k {
            data.bcps.push(read_f64(&mut input)?);
        }
    }
    Ok(data)
}

/// Human-readable export: `label,x_0..x_{d-1},p_0..p_{K-1}` with 17 significant digits.
pub fn write_dataset_csv<W: Write>(dataset: &Dataset, mut out: W) -> Result<()> {
    let mut header = vec!["label".to_string()];
    header.extend((0..dataset.spec.input_dim).map(|i| format!("x_{i}")));
    header.extend((0..dataset.spec.num_classes).map(|k| format!("p_{k}")));
    writeln!(out, "{}", header.join(","))?;
    for n in 0..dataset.len() {
        let mut fields = vec![dataset.label(n).to_string()];
        fields.extend(dataset.input(n).iter().map(|v| crate::fmt_f64(*v)));
        fields.extend(dataset.bcp(n).iter().map(|v| crate::fmt_f64(*v)));
        writeln!(out, "{}", fields.join(","))?;
    }
    Ok(())
}
