//! Teacher models: the posterior oracle, a single trained network, and a
//! prediction-averaged ensemble standing in for a stochastic teacher.

use std::collections::BTreeMap;

use crate::error::{check_dim, invalid, Result};
use crate::nn::{clamp_renormalize, Architecture, NetworkParams, ProbVector};
use crate::rng::RngStream;
use crate::supervision::{Sample, SupervisionSpec};
use crate::synth::{true_bcp_into, Dataset, TaskSpec};
use crate::training::{train, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub enum TeacherKind {
    /// Returns the true posterior; temperature is ignored.
    Oracle,
    Deterministic(NetworkParams),
    /// Softmax outputs averaged over members (after the softmax).
    Ensemble(Vec<NetworkParams>),
}

impl TeacherKind {
    pub fn ensemble(members: Vec<NetworkParams>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| invalid("an ensemble needs at least one member"))?;
        if members.iter().any(|m| m.architecture() != first.architecture()) {
            return Err(invalid("ensemble members must share one architecture"));
        }
        Ok(TeacherKind::Ensemble(members))
    }

    pub fn size(&self) -> usize {
        match self {
            TeacherKind::Ensemble(m) => m.len(),
            _ => 1,
        }
    }

    fn predict_network(&self, x: &[f64], temperature: f64, out: &mut [f64]) -> Result<()> {
        match self {
            TeacherKind::Oracle => unreachable!("oracle handled by callers"),
            TeacherKind::Deterministic(params) => {
                let mut ws = params.workspace();
                out.copy_from_slice(params.forward_with(x, temperature, &mut ws)?);
            }
            TeacherKind::Ensemble(members) => {
                out.fill(0.0);
                let mut ws = members[0].workspace();
                for m in members {
                    let p = m.forward_with(x, temperature, &mut ws)?;
                    for (o, &v) in out.iter_mut().zip(p) {
                        *o += v;
                    }
                }
                let s = members.len() as f64;
                for o in out.iter_mut() {
                    *o /= s;
                }
                clamp_renormalize(out);
            }
        }
        Ok(())
    }

    /// Teacher output for a training sample; the oracle returns the stored posterior.
    pub(crate) fn predict_sample(&self, sample: Sample<'_>, temperature: f64, out: &mut [f64]) -> Result<()> {
        match self {
            TeacherKind::Oracle => {
                check_dim(out.len(), sample.bcp.len())?;
                out.copy_from_slice(sample.bcp);
                Ok(())
            }
            _ => self.predict_network(sample.x, temperature, out),
        }
    }
}

pub fn predict(kind: &TeacherKind, spec: &TaskSpec, x: &[f64], temperature: f64) -> Result<ProbVector> {
    check_dim(spec.input_dim, x.len())?;
    let mut out = vec![0.0; spec.num_classes];
    match kind {
        TeacherKind::Oracle => true_bcp_into(spec, x, &mut out),
        _ => kind.predict_network(x, temperature, &mut out)?,
    }
    ProbVector::from_weights(out)
}

/// Mean squared ℓ₂ distance between teacher outputs (T = 1) and the true posteriors.
pub fn teacher_quality(kind: &TeacherKind, dataset: &Dataset) -> Result<f64> {
    let k = dataset.spec.num_classes;
    let mut out = vec![0.0; k];
    let mut total = 0.0;
    for n in 0..dataset.len() {
        let bcp = dataset.bcp(n);
        match kind {
            TeacherKind::Oracle => out.copy_from_slice(bcp),
            _ => kind.predict_network(dataset.input(n), 1.0, &mut out)?,
        }
        total += out.iter().zip(bcp).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(total / dataset.len() as f64)
}

/// Trains a network on one-hot labels. Zero iterations returns the initialization.
pub fn train_teacher(
    dataset: &Dataset,
    arch: &Architecture,
    config: &TrainConfig,
    stream: &RngStream,
) -> Result<NetworkParams> {
    let mut config = config.clone();
    config.supervision = SupervisionSpec::OneHot;
    config.seed = stream.seed();
    config.track_distance_to = None;
    if config.iterations == 0 {
        return Ok(crate::training::initial_params(arch, &config));
    }
    config.eval_interval = config.iterations;
    let (params, _) = train(dataset, dataset, arch, &config, &TeacherRegistry::default())
        .map_err(|failure| failure.error)?;
    Ok(params)
}

/// `members` networks trained from independent child streams of `stream`.
pub fn train_ensemble(
    dataset: &Dataset,
    arch: &Architecture,
    config: &TrainConfig,
    members: usize,
    stream: &RngStream,
) -> Result<TeacherKind> {
    let nets = (0..members)
        .map(|i| train_teacher(dataset, arch, config, &stream.child_indexed("member", i as u64)))
        .collect::<Result<Vec<_>>>()?;
    TeacherKind::ensemble(nets)
}

/// Named teachers available to `SupervisionSpec::Teacher`.
#[derive(Debug, Clone, Default)]
pub struct TeacherRegistry {
    teachers: BTreeMap<String, TeacherKind>,
}

impl TeacherRegistry {
    pub fn insert(&mut self, name: impl Into<String>, teacher: TeacherKind) {
        self.teachers.insert(name.into(), teacher);
    }

    pub fn with(mut self, name: impl Into<String>, teacher: TeacherKind) -> Self {
        self.insert(name, teacher);
        self
    }

    pub fn get(&self, name: &str) -> Option<&TeacherKind> {
        self.teachers.get(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_params;
    use crate::synth::sample_task;

    fn spec() -> TaskSpec {
        sample_task(3, 4, 1.0, &mut RngStream::new(2)).unwrap()
    }

    #[test]
    fn ensemble_of_copies_matches_single() {
        let arch = Architecture::new(4, vec![6], 3).unwrap();
        let net = init_params(&arch, &mut RngStream::new(4));
        let single = TeacherKind::Deterministic(net.clone());
        let ens = TeacherKind::ensemble(vec![net.clone(), net.clone(), net]).unwrap();
        let x = [0.5, -0.2, 1.0, 0.3];
        let a = predict(&single, &spec(), &x, 2.0).unwrap();
        let b = predict(&ens, &spec(), &x, 2.0).unwrap();
        for k in 0..3 {
            assert!((a[k] - b[k]).abs() < 1e-15);
        }
        assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ensemble_is_mean_after_softmax() {
        let arch = Architecture::new(4, vec![5], 3).unwrap();
        let members: Vec<_> = (0..4).map(|i| init_params(&arch, &mut RngStream::new(i))).collect();
        let x = [1.0, 2.0, -1.0, 0.0];
        let mut mean = [0.0; 3];
        for m in &members {
            let p = m.forward(&x, 1.0).unwrap();
            for k in 0..3 {
                mean[k] += p[k] / 4.0;
            }
        }
        let ens = predict(&TeacherKind::ensemble(members).unwrap(), &spec(), &x, 1.0).unwrap();
        for k in 0..3 {
            assert!((ens[k] - mean[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn oracle_quality_is_zero_and_symmetric_point_uniform() {
        let spec = TaskSpec::new(1.0, vec![vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        let p = predict(&TeacherKind::Oracle, &spec, &[0.0, 3.0], 5.0).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-15);
        let data = crate::synth::generate(&spec, 100, &mut RngStream::new(1)).unwrap();
        assert_eq!(teacher_quality(&TeacherKind::Oracle, &data).unwrap(), 0.0);
    }

    #[test]
    fn quality_ignores_member_order() {
        let spec = spec();
        let data = crate::synth::generate(&spec, 200, &mut RngStream::new(3)).unwrap();
        let arch = Architecture::new(4, vec![5], 3).unwrap();
        let members: Vec<_> = (0..3).map(|i| init_params(&arch, &mut RngStream::new(10 + i))).collect();
        let mut reversed = members.clone();
        reversed.reverse();
        let a = teacher_quality(&TeacherKind::ensemble(members).unwrap(), &data).unwrap();
        let b = teacher_quality(&TeacherKind::ensemble(reversed).unwrap(), &data).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn ensemble_rejects_mixed_or_empty() {
        assert!(TeacherKind::ensemble(vec![]).is_err());
        let a = NetworkParams::zeros(Architecture::linear(4, 3).unwrap());
        let b = NetworkParams::zeros(Architecture::new(4, vec![2], 3).unwrap());
        assert!(TeacherKind::ensemble(vec![a, b]).is_err());
    }
}
