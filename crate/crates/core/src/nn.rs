//! Dense ReLU-softmax classifier with hand-written reverse mode.
//!
//! Parameters live in one flat vector. Layer `l` maps `dims[l] -> dims[l + 1]`
//! and stores its weight matrix row-major (`out x in`) followed by its bias.
//! An architecture with no hidden layers is the linear-softmax model.

use std::io::{Read, Write};
use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Error, Result};
use crate::rng::RngStream;

/// Floor applied to every output probability before renormalizing.
pub const P_MIN: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    #[serde(default)]
    pub hidden_layers: Vec<usize>,
    pub num_classes: usize,
}

impl Architecture {
    pub fn new(input_dim: usize, hidden_layers: Vec<usize>, num_classes: usize) -> Result<Self> {
        let arch = Architecture {
            input_dim,
            hidden_layers,
            num_classes,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn linear(input_dim: usize, num_classes: usize) -> Result<Self> {
        Self::new(input_dim, Vec::new(), num_classes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(invalid("input_dim must be positive"));
        }
        if self.num_classes < 2 {
            return Err(invalid("num_classes must be at least 2"));
        }
        if self.hidden_layers.contains(&0) {
            return Err(invalid("hidden layer widths must be positive"));
        }
        Ok(())
    }

    pub fn is_linear(&self) -> bool {
        self.hidden_layers.is_empty()
    }

    /// `[input_dim, hidden..., num_classes]`
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden_layers.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_layers);
        dims.push(self.num_classes);
        dims
    }

    pub fn num_params(&self) -> usize {
        self.layer_dims().windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// Softmax output after the `P_MIN` floor; sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Clamps at `P_MIN` and renormalizes.
    pub fn from_weights(mut values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(invalid("a probability vector needs at least two entries"));
        }
        clamp_renormalize(&mut values);
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("probability vector has non-finite entries"));
        }
        Ok(ProbVector(values))
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

impl Deref for ProbVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// First index of the maximum entry.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = k;
        }
    }
    best
}

pub(crate) fn clamp_renormalize(p: &mut [f64]) {
    let mut total = 0.0;
    for v in p.iter_mut() {
        *v = v.max(P_MIN);
        total += *v;
    }
    for v in p.iter_mut() {
        *v /= total;
    }
}

/// Softmax of `logits / temperature` into `out`, max-subtracted, unclamped.
pub fn softmax_into(logits: &[f64], temperature: f64, out: &mut [f64]) {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &z| m.max(z));
    let mut total = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = ((z - max) / temperature).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// `-sum_k target_k ln probs_k`
pub fn ce_loss(probs: &[f64], target: &[f64]) -> f64 {
    -probs
        .iter()
        .zip(target)
        .map(|(&p, &t)| if t == 0.0 { 0.0 } else { t * p.ln() })
        .sum::<f64>()
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    arch: Architecture,
    values: Vec<f64>,
}

/// Scratch buffers for one forward/backward pass.
#[derive(Debug, Clone)]
pub struct Workspace {
    dims: Vec<usize>,
    /// `acts[0]` is the input, `acts[l]` the post-ReLU output of layer `l`,
    /// the last entry the logits.
    acts: Vec<Vec<f64>>,
    softmax: Vec<f64>,
    probs: Vec<f64>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

impl Workspace {
    pub fn new(arch: &Architecture) -> Self {
        let dims = arch.layer_dims();
        let widest = dims.iter().copied().max().unwrap_or(0);
        Workspace {
            dims: dims.clone(),
            acts: dims.iter().map(|&n| vec![0.0; n]).collect(),
            softmax: vec![0.0; arch.num_classes],
            probs: vec![0.0; arch.num_classes],
            delta: Vec::with_capacity(widest),
            delta_prev: Vec::with_capacity(widest),
        }
    }

    /// Clamped probabilities from the latest forward pass.
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn logits(&self) -> &[f64] {
        self.acts.last().expect("workspace has layers")
    }
}

/// He-scaled Gaussian weights (std `sqrt(2 / fan_in)`), zero biases.
pub fn init_params(arch: &Architecture, stream: &mut RngStream) -> NetworkParams {
    let mut params = NetworkParams::zeros(arch.clone());
    let dims = arch.layer_dims();
    let mut offset = 0;
    for w in dims.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let std = (2.0 / fan_in as f64).sqrt();
        for v in &mut params.values[offset..offset + fan_in * fan_out] {
            *v = std * stream.standard_normal();
        }
        offset += fan_in * fan_out + fan_out;
    }
    params
}

fn check_temperature(temperature: f64) -> Result<()> {
    if temperature > 0.0 && temperature.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("temperature must be > 0, got {temperature}")))
    }
}

impl NetworkParams {
    pub fn zeros(arch: Architecture) -> Self {
        let n = arch.num_params();
        NetworkParams {
            arch,
            values: vec![0.0; n],
        }
    }

    pub fn from_vec(arch: Architecture, values: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        check_dim(arch.num_params(), values.len())?;
        Ok(NetworkParams { arch, values })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `(weights, biases)` slices of layer `layer`.
    pub fn layer(&self, layer: usize) -> (&[f64], &[f64]) {
        let (w, b) = self.layer_offsets(layer);
        (&self.values[w.0..w.1], &self.values[b.0..b.1])
    }

    pub fn layer_mut(&mut self, layer: usize) -> (&mut [f64], &mut [f64]) {
        let (w, b) = self.layer_offsets(layer);
        let (head, tail) = self.values.split_at_mut(b.0);
        (&mut head[w.0..w.1], &mut tail[..b.1 - b.0])
    }

    fn layer_offsets(&self, layer: usize) -> ((usize, usize), (usize, usize)) {
        let dims = self.arch.layer_dims();
        let mut offset = 0;
        for w in dims.windows(2).take(layer) {
            offset += w[0] * w[1] + w[1];
        }
        let (fan_in, fan_out) = (dims[layer], dims[layer + 1]);
        let w_end = offset + fan_in * fan_out;
        ((offset, w_end), (w_end, w_end + fan_out))
    }

    pub fn squared_distance(&self, other: &NetworkParams) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    pub fn workspace(&self) -> Workspace {
        Workspace::new(&self.arch)
    }

    fn forward_logits(&self, x: &[f64], ws: &mut Workspace) {
        debug_assert_eq!(ws.dims, self.arch.layer_dims());
        ws.acts[0].copy_from_slice(x);
        let n_layers = ws.dims.len() - 1;
        let mut offset = 0;
        for l in 0..n_layers {
            let (fan_in, fan_out) = (ws.dims[l], ws.dims[l + 1]);
            let weights = &self.values[offset..offset + fan_in * fan_out];
            let bias = &self.values[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            let (before, after) = ws.acts.split_at_mut(l + 1);
            let input = &before[l];
            let output = &mut after[0];
            for o in 0..fan_out {
                let row = &weights[o * fan_in..(o + 1) * fan_in];
                let z = bias[o] + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
                output[o] = if l + 1 < n_layers { z.max(0.0) } else { z };
            }
            offset += fan_in * fan_out + fan_out;
        }
    }

    /// Forward pass into `ws`; returns the clamped probabilities.
    pub fn forward_with<'a>(
        &self,
        x: &[f64],
        temperature: f64,
        ws: &'a mut Workspace,
    ) -> Result<&'a [f64]> {
        check_dim(self.arch.input_dim, x.len())?;
        check_temperature(temperature)?;
        self.forward_logits(x, ws);
        let logits = ws.acts.last().expect("layers");
        softmax_into(logits, temperature, &mut ws.softmax);
        ws.probs.copy_from_slice(&ws.softmax);
        clamp_renormalize(&mut ws.probs);
        Ok(&ws.probs)
    }

    pub fn forward(&self, x: &[f64], temperature: f64) -> Result<ProbVector> {
        let mut ws = self.workspace();
        self.forward_with(x, temperature, &mut ws)?;
        Ok(ProbVector(ws.probs))
    }

    /// Propagates `ws.delta` (gradient w.r.t. the logits) back through the
    /// network, adding `scale * dL/dθ` into `grad`.
    fn backprop(&self, ws: &mut Workspace, scale: f64, grad: &mut [f64]) {
        let n_layers = ws.dims.len() - 1;
        let mut end = self.values.len();
        for l in (0..n_layers).rev() {
            let (fan_in, fan_out) = (ws.dims[l], ws.dims[l + 1]);
            let w_start = end - fan_out - fan_in * fan_out;
            let b_start = end - fan_out;
            let input = &ws.acts[l];
            for o in 0..fan_out {
                let d = scale * ws.delta[o];
                if d == 0.0 {
                    continue;
                }
                grad[b_start + o] += d;
                let row = &mut grad[w_start + o * fan_in..w_start + (o + 1) * fan_in];
                for (g, &a) in row.iter_mut().zip(input) {
                    *g += d * a;
                }
            }
            if l > 0 {
                let weights = &self.values[w_start..b_start];
                ws.delta_prev.clear();
                ws.delta_prev.resize(fan_in, 0.0);
                for o in 0..fan_out {
                    let d = ws.delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    let row = &weights[o * fan_in..(o + 1) * fan_in];
                    for (dp, &w) in ws.delta_prev.iter_mut().zip(row) {
                        *dp += w * d;
                    }
                }
                for (dp, &a) in ws.delta_prev.iter_mut().zip(input) {
                    if a <= 0.0 {
                        *dp = 0.0;
                    }
                }
                std::mem::swap(&mut ws.delta, &mut ws.delta_prev);
            }
            end = w_start;
        }
    }

    /// Adds `scale * ∇θ ce_loss(forward(x, T), target)` into `grad` and
    /// returns the loss. The softmax derivative uses the unfloored
    /// probabilities, so it is exact whenever no entry sits below `P_MIN`.
    pub fn accumulate_gradient(
        &self,
        x: &[f64],
        target: &[f64],
        temperature: f64,
        scale: f64,
        ws: &mut Workspace,
        grad: &mut [f64],
    ) -> Result<f64> {
        check_dim(self.arch.num_classes, target.len())?;
        check_dim(self.values.len(), grad.len())?;
        self.forward_with(x, temperature, ws)?;
        let loss = ce_loss(&ws.probs, target);
        let mass: f64 = target.iter().sum();
        ws.delta.clear();
        ws.delta.extend(
            ws.softmax
                .iter()
                .zip(target)
                .map(|(&p, &t)| (mass * p - t) / temperature),
        );
        self.backprop(ws, scale, grad);
        Ok(loss)
    }

    pub fn backward(&self, x: &[f64], target: &[f64], temperature: f64) -> Result<Vec<f64>> {
        let mut ws = self.workspace();
        let mut grad = vec![0.0; self.values.len()];
        self.accumulate_gradient(x, target, temperature, 1.0, &mut ws, &mut grad)?;
        Ok(grad)
    }

    /// Column `k` is `∂φ_k(x)/∂θ` at temperature 1, one reverse pass per class.
    pub fn jacobian_columns_with(&self, x: &[f64], ws: &mut Workspace) -> Result<Vec<Vec<f64>>> {
        self.forward_with(x, 1.0, ws)?;
        let phi = ws.softmax.clone();
        let k_classes = self.arch.num_classes;
        let mut columns = Vec::with_capacity(k_classes);
        for k in 0..k_classes {
            ws.delta.clear();
            ws.delta.extend(
                phi.iter()
                    .enumerate()
                    .map(|(j, &pj)| phi[k] * (if j == k { 1.0 } else { 0.0 } - pj)),
            );
            let mut col = vec![0.0; self.values.len()];
            self.backprop(ws, 1.0, &mut col);
            columns.push(col);
        }
        Ok(columns)
    }

    pub fn jacobian_columns(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        let mut ws = self.workspace();
        self.jacobian_columns_with(x, &mut ws)
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"BCPNET01";

/// Writes `BCPNET01`, then little-endian u64 `input_dim`, hidden-layer count,
/// each hidden width, `num_classes`, parameter count, then the parameters as
/// little-endian f64.
pub fn write_checkpoint<W: Write>(params: &NetworkParams, mut out: W) -> Result<()> {
    let arch = params.architecture();
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&(arch.input_dim as u64).to_le_bytes())?;
    out.write_all(&(arch.hidden_layers.len() as u64).to_le_bytes())?;
    for &h in &arch.hidden_layers {
        out.write_all(&(h as u64).to_le_bytes())?;
    }
    out.write_all(&(arch.num_classes as u64).to_le_bytes())?;
    out.write_all(&(params.len() as u64).to_le_bytes())?;
    for v in params.as_slice() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_u64<R: Read>(input: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    input.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

pub(crate) fn read_f64<R: Read>(input: &mut R) -> Result<f64> {
    let mut buf = [0u8; 8];
    input.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<NetworkParams> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a network checkpoint".into()));
    }
    let input_dim = read_u64(&mut input)? as usize;
    let n_hidden = read_u64(&mut input)? as usize;
    if n_hidden > 1024 {
        return Err(Error::Format(format!("implausible hidden layer count {n_hidden}")));
    }
    let hidden = (0..n_hidden)
        .map(|_| read_u64(&mut input).map(|h| h as usize))
        .collect::<Result<Vec<_>>>()?;
    let num_classes = read_u64(&mut input)? as usize;
    let arch = Architecture::new(input_dim, hidden, num_classes)?;
    let n = read_u64(&mut input)? as usize;
    check_dim(arch.num_params(), n)?;
    let values = (0..n).map(|_| read_f64(&mut input)).collect::<Result<Vec<_>>>()?;
    NetworkParams::from_vec(arch, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_from_rows(rows: &[&[f64]], bias: &[f64]) -> NetworkParams {
        let arch = Architecture::linear(rows[0].len(), rows.len()).unwrap();
        let mut values = Vec::new();
        for r in rows {
            values.extend_from_slice(r);
        }
        values.extend_from_slice(bias);
        NetworkParams::from_vec(arch, values).unwrap()
    }

    #[test]
    fn parameter_count_paper_mlp() {
        let arch = Architecture::new(30, vec![128, 128], 5).unwrap();
        let expected = (30 * 128 + 128) + (128 * 128 + 128) + (128 * 5 + 5);
        assert_eq!(arch.num_params(), expected);
        assert_eq!(arch.num_params(), 21_125);
    }

    #[test]
    fn rejects_bad_architectures() {
        assert!(Architecture::new(0, vec![], 3).is_err());
        assert!(Architecture::new(3, vec![], 1).is_err());
        assert!(Architecture::new(3, vec![4, 0], 2).is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let arch = Architecture::new(4, vec![8], 3).unwrap();
        let a = init_params(&arch, &mut RngStream::new(9));
        let b = init_params(&arch, &mut RngStream::new(9));
        assert_eq!(a, b);
        let (_, bias) = a.layer(0);
        assert!(bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_params_give_uniform() {
        let arch = Architecture::new(4, vec![6], 3).unwrap();
        let p = NetworkParams::zeros(arch).forward(&[1.0, -2.0, 0.5, 3.0], 1.0).unwrap();
        for &v in p.iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn equal_logits_ignore_temperature() {
        let mut out = [0.0; 3];
        for t in [0.1, 1.0, 7.0] {
            softmax_into(&[0.0, 0.0, 0.0], t, &mut out);
            assert!(out.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        }
    }

    #[test]
    fn two_class_bayes_weights() {
        // W_k = μ_k/σ², b_k = -μ_k²/(2σ²) with μ = ±1, σ² = 2.5
        let params = linear_from_rows(&[&[0.4], &[-0.4]], &[-0.2, -0.2]);
        let p = params.forward(&[1.0], 1.0).unwrap();
        let expected = 1.0 / (1.0 + (-0.8f64).exp());
        assert!((p[0] - expected).abs() < 1e-12);
        assert!((p[0] - 0.68997).abs() < 1e-5);
    }

    #[test]
    fn forward_rejects_bad_input() {
        let params = NetworkParams::zeros(Architecture::linear(2, 2).unwrap());
        assert!(matches!(params.forward(&[1.0], 1.0), Err(Error::Shape { .. })));
        assert!(params.forward(&[1.0, 2.0], 0.0).is_err());
    }

    #[test]
    fn ce_loss_values() {
        assert!((ce_loss(&[0.5, 0.5], &[0.5, 0.5]) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((ce_loss(&[0.9, 0.1], &[1.0, 0.0]) - 0.105_360_515_657_826_3).abs() < 1e-12);
        let q = [0.2, 0.5, 0.3];
        let t1 = [1.0, 0.0, 0.0];
        let t2 = [0.1, 0.3, 0.6];
        let mix: Vec<f64> = t1.iter().zip(&t2).map(|(a, b)| 0.3 * a + 0.7 * b).collect();
        let lhs = ce_loss(&q, &mix);
        let rhs = 0.3 * ce_loss(&q, &t1) + 0.7 * ce_loss(&q, &t2);
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn linear_gradient_rows_are_residual_times_input() {
        let params = linear_from_rows(&[&[0.3, -0.1], &[0.2, 0.5], &[-0.4, 0.1]], &[0.1, 0.0, -0.2]);
        let x = [0.7, -1.3];
        let t = [0.2, 0.5, 0.3];
        let phi = params.forward(&x, 1.0).unwrap();
        let g = params.backward(&x, &t, 1.0).unwrap();
        for k in 0..3 {
            for i in 0..2 {
                assert!((g[k * 2 + i] - (phi[k] - t[k]) * x[i]).abs() < 1e-14);
            }
            assert!((g[6 + k] - (phi[k] - t[k])).abs() < 1e-14);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let arch = Architecture::new(3, vec![5, 4], 2).unwrap();
        let params = init_params(&arch, &mut RngStream::new(1));
        let mut buf = Vec::new();
        write_checkpoint(&params, &mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 8 * 6 + 8 * params.len());
        let back = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back, params);
        assert!(read_checkpoint(&b"NOTACKPT"[..]).is_err());
    }
}
