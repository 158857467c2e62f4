//! Training with noisy or soft supervision on synthetic Gaussian-mixture
//! tasks, with tools to measure gradient noise and convergence.

pub mod analysis;
pub mod error;
pub mod nn;
pub mod rng;
pub mod supervision;
pub mod synth;
pub mod teachers;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
pub use nn::{Architecture, NetworkParams, ProbVector};
pub use rng::RngStream;
pub use supervision::SupervisionSpec;
pub use synth::{Dataset, TaskSpec};
pub use teachers::{TeacherKind, TeacherRegistry};
pub use training::{train, TrainConfig, TrainingTrace};

/// Shortest-exact-enough text form of a float: 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}
