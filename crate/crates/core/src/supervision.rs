//! Target providers: every supervisory signal a student can be trained on.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::P_MIN;
use crate::rng::RngStream;
use crate::teachers::TeacherRegistry;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SupervisionSpec {
    OneHot,
    TrueBcp,
    /// Posterior plus i.i.d. `N(0, nu)` noise per entry.
    AdditiveNoise { nu: f64 },
    /// A draw from `Dir(epsilon * posterior)`.
    Dirichlet { epsilon: f64 },
    /// `(1 - lambda) * one_hot + lambda * soft`.
    Mixture {
        lambda: f64,
        soft: Box<SupervisionSpec>,
    },
    /// Soft labels from a registered teacher at the given temperature.
    Teacher {
        #[serde(default = "default_teacher_name")]
        name: String,
        #[serde(default = "one")]
        temperature: f64,
    },
}

fn default_teacher_name() -> String {
    "teacher".to_string()
}

fn one() -> f64 {
    1.0
}

impl SupervisionSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            SupervisionSpec::OneHot | SupervisionSpec::TrueBcp => Ok(()),
            SupervisionSpec::AdditiveNoise { nu } => {
                if *nu >= 0.0 && nu.is_finite() {
                    Ok(())
                } else {
                    Err(invalid(format!("additive noise variance must be >= 0, got {nu}")))
                }
            }
            SupervisionSpec::Dirichlet { epsilon } => check_epsilon(*epsilon),
            SupervisionSpec::Mixture { lambda, soft } => {
                check_lambda(*lambda)?;
                match soft.as_ref() {
                    SupervisionSpec::OneHot => {
                        Err(invalid("a mixture's soft component cannot be one_hot"))
                    }
                    SupervisionSpec::Mixture { .. } => {
                        Err(invalid("a mixture nests exactly one soft source, not another mixture"))
                    }
                    other => other.validate(),
                }
            }
            SupervisionSpec::Teacher { temperature, .. } => {
                if *temperature > 0.0 && temperature.is_finite() {
                    Ok(())
                } else {
                    Err(invalid(format!("teacher temperature must be > 0, got {temperature}")))
                }
            }
        }
    }

    /// True when repeated calls on one sample can return different targets.
    pub fn is_stochastic(&self) -> bool {
        match self {
            SupervisionSpec::AdditiveNoise { nu } => *nu > 0.0,
            SupervisionSpec::Dirichlet { .. } => true,
            SupervisionSpec::Mixture { soft, .. } => soft.is_stochastic(),
            _ => false,
        }
    }

    /// Names of the teachers this spec reads from.
    pub fn teacher_name(&self) -> Option<&str> {
        match self {
            SupervisionSpec::Teacher { name, .. } => Some(name),
            SupervisionSpec::Mixture { soft, .. } => soft.teacher_name(),
            _ => None,
        }
    }
}

pub(crate) fn check_epsilon(epsilon: f64) -> Result<()> {
    if epsilon > 0.0 && epsilon.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("dirichlet epsilon must be > 0, got {epsilon}")))
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(invalid(format!("lambda must lie in [0, 1], got {lambda}")))
    }
}

/// One training example as seen by a target provider.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub x: &'a [f64],
    pub label: usize,
    pub bcp: &'a [f64],
}

pub fn one_hot(label: usize, num_classes: usize) -> Result<Vec<f64>> {
    if num_classes < 2 {
        return Err(invalid("one-hot targets need at least two classes"));
    }
    if label >= num_classes {
        return Err(invalid(format!("label {label} out of range for {num_classes} classes")));
    }
    let mut t = vec![0.0; num_classes];
    t[label] = 1.0;
    Ok(t)
}

pub fn additive_noise_target(bcp: &[f64], nu: f64, stream: &mut RngStream) -> Result<Vec<f64>> {
    let mut out = bcp.to_vec();
    add_gaussian_noise(&mut out, nu, stream)?;
    Ok(out)
}

fn add_gaussian_noise(target: &mut [f64], nu: f64, stream: &mut RngStream) -> Result<()> {
    let std = nu.sqrt();
    for t in target.iter_mut() {
        *t = stream.gaussian(*t, std)?;
    }
    Ok(())
}

pub fn dirichlet_target(bcp: &[f64], epsilon: f64, stream: &mut RngStream) -> Result<Vec<f64>> {
    let mut out = vec![0.0; bcp.len()];
    dirichlet_target_into(bcp, epsilon, stream, &mut out)?;
    Ok(out)
}

fn dirichlet_target_into(
    bcp: &[f64],
    epsilon: f64,
    stream: &mut RngStream,
    out: &mut [f64],
) -> Result<()> {
    check_epsilon(epsilon)?;
    let concentration: Vec<f64> = bcp.iter().map(|&p| epsilon * p.max(P_MIN)).collect();
    stream.dirichlet_into(&concentration, out)
}

pub fn mixture_target(label: usize, soft: &[f64], lambda: f64) -> Result<Vec<f64>> {
    check_lambda(lambda)?;
    let mut out = one_hot(label, soft.len())?;
    blend(&mut out, label, lambda, soft);
    Ok(out)
}

/// Rewrites `out` as `(1 - lambda) * e_label + lambda * soft`.
fn blend(out: &mut [f64], label: usize, lambda: f64, soft: &[f64]) {
    for (k, (o, &s)) in out.iter_mut().zip(soft).enumerate() {
        let hard = if k == label { 1.0 } else { 0.0 };
        *o = (1.0 - lambda) * hard + lambda * s;
    }
}

/// Writes the next target for `sample` into `out`. Noisy variants draw fresh
/// noise from `stream` on every call.
pub fn next_target_into(
    spec: &SupervisionSpec,
    sample: Sample<'_>,
    teachers: &TeacherRegistry,
    stream: &mut RngStream,
    out: &mut [f64],
) -> Result<()> {
    let k = out.len();
    if sample.label >= k {
        return Err(invalid(format!("label {} out of range for {k} classes", sample.label)));
    }
    match spec {
        SupervisionSpec::OneHot => {
            out.fill(0.0);
            out[sample.label] = 1.0;
        }
        SupervisionSpec::TrueBcp => out.copy_from_slice(sample.bcp),
        SupervisionSpec::AdditiveNoise { nu } => {
            out.copy_from_slice(sample.bcp);
            add_gaussian_noise(out, *nu, stream)?;
        }
        SupervisionSpec::Dirichlet { epsilon } => {
            dirichlet_target_into(sample.bcp, *epsilon, stream, out)?
        }
        SupervisionSpec::Mixture { lambda, soft } => {
            check_lambda(*lambda)?;
            let mut soft_target = vec![0.0; k];
            next_target_into(soft, sample, teachers, stream, &mut soft_target)?;
            blend(out, sample.label, *lambda, &soft_target);
        }
        SupervisionSpec::Teacher { name, temperature } => {
            let teacher = teachers
                .get(name)
                .ok_or_else(|| Error::Config(format!("supervision references unknown teacher `{name}`")))?;
            teacher.predict_sample(sample, *temperature, out)?;
        }
    }
    Ok(())
}

pub fn next_target(
    spec: &SupervisionSpec,
    sample: Sample<'_>,
    teachers: &TeacherRegistry,
    stream: &mut RngStream,
) -> Result<Vec<f64>> {
    let mut out = vec![0.0; sample.bcp.len()];
    next_target_into(spec, sample, teachers, stream, &mut out)?;
    Ok(out)
}
