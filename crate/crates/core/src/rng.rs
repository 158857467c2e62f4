//! Seedable random streams and every sampler the experiments draw from.
//!
//! A stream wraps ChaCha8 (a counter-based generator whose output is fixed by
//! its published specification), so a seed reproduces the same variates on any
//! platform. Child streams are derived from the *seed* and a text label, never
//! from the parent's current position: `child("noise")` is the same stream no
//! matter how many numbers the parent has already produced.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Open01, StandardNormal};

use crate::error::{invalid, Result};

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    rng: ChaCha8Rng,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream keyed by `(seed, label)`.
    pub fn child(&self, label: &str) -> RngStream {
        RngStream::new(mix64(self.seed ^ mix64(fnv1a(label.as_bytes()))))
    }

    /// Independent stream keyed by `(seed, label, index)`.
    pub fn child_indexed(&self, label: &str, index: u64) -> RngStream {
        let base = self.child(label).seed;
        RngStream::new(mix64(base ^ mix64(index.wrapping_add(1))))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform on `(0, 1)`.
    pub fn uniform_open(&mut self) -> f64 {
        self.rng.sample(Open01)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.rng.random_range(0..n)
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn gaussian(&mut self, mean: f64, std: f64) -> Result<f64> {
        if !std.is_finite() || std < 0.0 {
            return Err(invalid(format!("gaussian std must be >= 0, got {std}")));
        }
        if std == 0.0 {
            return Ok(mean);
        }
        Ok(mean + std * self.standard_normal())
    }

    /// Index drawn with probabilities proportional to `weights`.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let u = self.uniform() * total;
        let mut acc = 0.0;
        for (k, &w) in weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return k;
            }
        }
        // u landed in the rounding gap at the top; return the last positive entry
        weights.iter().rposition(|&w| w > 0.0).unwrap_or(weights.len() - 1)
    }

    /// Gamma(shape, 1) variate.
    pub fn gamma(&mut self, shape: f64) -> Result<f64> {
        check_shape(shape)?;
        Ok(self.ln_gamma_variate(shape).exp())
    }

    /// Logarithm of a Gamma(shape, 1) variate.
    ///
    /// Marsaglia and Tsang's squeeze method for shape >= 1. Smaller shapes use
    /// `G(shape + 1) * U^(1/shape)`, kept in log space because the boost factor
    /// underflows for shapes near zero.
    fn ln_gamma_variate(&mut self, shape: f64) -> f64 {
        if shape < 1.0 {
            let boost = self.uniform_open().ln() / shape;
            return self.ln_gamma_variate(shape + 1.0) + boost;
        }
        let d = shape - 1.0 / 3.0;
        let c = 1.0 / (9.0 * d).sqrt();
        loop {
            let x = self.standard_normal();
            let v = 1.0 + c * x;
            if v <= 0.0 {
                continue;
            }
            let v = v * v * v;
            let u = self.uniform_open();
            let x2 = x * x;
            if u < 1.0 - 0.0331 * x2 * x2 || u.ln() < 0.5 * x2 + d * (1.0 - v + v.ln()) {
                return (d * v).ln();
            }
        }
    }

    pub fn dirichlet(&mut self, concentration: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; concentration.len()];
        self.dirichlet_into(concentration, &mut out)?;
        Ok(out)
    }

    /// One Dirichlet draw written into `out`, normalized from log-Gamma variates.
    pub fn dirichlet_into(&mut self, concentration: &[f64], out: &mut [f64]) -> Result<()> {
        if concentration.len() < 2 {
            return Err(invalid("dirichlet needs at least two concentration entries"));
        }
        assert_eq!(out.len(), concentration.len());
        for &a in concentration {
            check_shape(a)?;
        }
        let mut max = f64::NEG_INFINITY;
        for (o, &a) in out.iter_mut().zip(concentration) {
            *o = self.ln_gamma_variate(a);
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
        Ok(())
    }
}

fn check_shape(shape: f64) -> Result<()> {
    if shape > 0.0 && shape.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!(
            "gamma/dirichlet parameters must be finite and > 0, got {shape}"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_var(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, v)
    }

    #[test]
    fn same_seed_same_uniforms() {
        let mut a = RngStream::new(42);
        let mut b = RngStream::new(42);
        let ta: Vec<f64> = (0..3).map(|_| a.uniform()).collect();
        let tb: Vec<f64> = (0..3).map(|_| b.uniform()).collect();
        assert_eq!(ta, tb);
    }

    #[test]
    fn neighbouring_seeds_differ() {
        let mut a = RngStream::new(42);
        let mut b = RngStream::new(43);
        let differ = (0..64).any(|_| a.uniform() != b.uniform());
        assert!(differ);
    }

    #[test]
    fn children_are_distinct_and_position_independent() {
        let parent = RngStream::new(7);
        let mut data = parent.child("data");
        let mut noise = parent.child("noise");
        assert_ne!(data.next_u64(), noise.next_u64());

        let mut advanced = RngStream::new(7);
        for _ in 0..100 {
            advanced.next_u64();
        }
        assert_eq!(
            advanced.child("data").next_u64(),
            parent.child("data").next_u64()
        );
        assert_ne!(
            parent.child_indexed("run", 0).next_u64(),
            parent.child_indexed("run", 1).next_u64()
        );
    }

    #[test]
    fn gaussian_degenerate_and_invalid() {
        let mut s = RngStream::new(1);
        assert_eq!(s.gaussian(3.25, 0.0).unwrap(), 3.25);
        assert!(s.gaussian(0.0, -1.0).is_err());
    }

    #[test]
    fn standard_normal_moments() {
        let mut s = RngStream::new(2024);
        let xs: Vec<f64> = (0..1_000_000).map(|_| s.gaussian(0.0, 1.0).unwrap()).collect();
        let (m, v) = mean_var(&xs);
        assert!(m.abs() < 0.005, "mean {m}");
        assert!((v - 1.0).abs() < 0.01, "var {v}");
    }

    #[test]
    fn gamma_moments_cover_both_branches() {
        for &shape in &[0.05, 0.7, 1.0, 3.5] {
            let mut s = RngStream::new(99);
            let n = 200_000;
            let xs: Vec<f64> = (0..n).map(|_| s.gamma(shape).unwrap()).collect();
            let (m, v) = mean_var(&xs);
            // mean = var = shape; sd of the sample mean is sqrt(shape/n)
            let se = (shape / n as f64).sqrt();
            assert!((m - shape).abs() < 5.0 * se, "shape {shape}: mean {m}");
            assert!((v - shape).abs() < 0.05 * shape.max(0.2), "shape {shape}: var {v}");
        }
        assert!(RngStream::new(0).gamma(0.0).is_err());
    }

    #[test]
    fn dirichlet_concentrated_limit() {
        let mut s = RngStream::new(5);
        let p = s.dirichlet(&[1e9, 1e9]).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-3 && (p[1] - 0.5).abs() < 1e-3);
    }

    #[test]
    fn dirichlet_moments_eps5() {
        let mut s = RngStream::new(11);
        let eps = 5.0;
        let conc = [eps * 0.6, eps * 0.4];
        let draws: Vec<Vec<f64>> = (0..100_000).map(|_| s.dirichlet(&conc).unwrap()).collect();
        let first: Vec<f64> = draws.iter().map(|d| d[0]).collect();
        let second: Vec<f64> = draws.iter().map(|d| d[1]).collect();
        let (m0, v0) = mean_var(&first);
        let (m1, _) = mean_var(&second);
        assert!((m0 - 0.6).abs() < 0.01 && (m1 - 0.4).abs() < 0.01);
        assert!((v0 - 0.04).abs() < 0.005, "var {v0}");
    }

    #[test]
    fn dirichlet_tiny_concentrations_stay_on_simplex() {
        let mut s = RngStream::new(3);
        for _ in 0..1000 {
            let p = s.dirichlet(&[5e-13, 0.3, 1e-6, 2.0]).unwrap();
            let sum: f64 = p.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(p.iter().all(|&v| v >= 0.0 && v.is_finite()));
        }
    }

    #[test]
    fn dirichlet_rejects_nonpositive() {
        let mut s = RngStream::new(3);
        assert!(s.dirichlet(&[1.0, 0.0]).is_err());
        assert!(s.dirichlet(&[1.0, -2.0]).is_err());
    }

    #[test]
    fn categorical_frequencies() {
        let mut s = RngStream::new(8);
        let w = [0.1, 0.0, 0.6, 0.3];
        let mut counts = [0usize; 4];
        for _ in 0..100_000 {
            counts[s.categorical(&w)] += 1;
        }
        assert_eq!(counts[1], 0);
        assert!((counts[2] as f64 / 1e5 - 0.6).abs() < 0.01);
    }
}
