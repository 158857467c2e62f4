//! Experiment configuration: one TOML file per experiment.

use serde::{Deserialize, Serialize};

use bcp_distill::{Architecture, SupervisionSpec, TrainConfig};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskConfig,
    #[serde(default)]
    pub student: StudentConfig,
    pub training: TrainingConfig,
    pub supervision: SupervisionSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teachers: Option<TeacherConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub analysis: AnalysisConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub num_classes: usize,
    pub input_dim: usize,
    pub noise_variance: f64,
    pub num_samples: usize,
    pub train_fraction: f64,
    pub data_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentConfig {
    pub hidden_layers: Vec<usize>,
}

impl Default for StudentConfig {
    fn default() -> Self {
        StudentConfig {
            hidden_layers: vec![128, 128],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    #[serde(default = "one_usize")]
    pub batch_size: usize,
    pub eval_interval: usize,
    #[serde(default = "one_f64")]
    pub temperature: f64,
    pub seed: u64,
    /// Record the squared distance to the nearest linear optimum (linear students only).
    #[serde(default)]
    pub track_distance: bool,
    #[serde(default)]
    pub freeze_noise: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherModel {
    Oracle,
    Single,
    Ensemble,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    #[serde(default = "teacher_name")]
    pub name: String,
    pub kind: TeacherModel,
    #[serde(default)]
    pub hidden_layers: Vec<usize>,
    #[serde(default = "five")]
    pub members: usize,
    /// Teachers see only the first `train_samples` training rows; unset means all.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_samples: Option<usize>,
    pub learning_rate: f64,
    pub iterations: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    Epsilon,
    Lambda,
    Members,
    LearningRate,
}

impl SweepParameter {
    pub fn label(self) -> &'static str {
        match self {
            SweepParameter::Epsilon => "epsilon",
            SweepParameter::Lambda => "lambda",
            SweepParameter::Members => "members",
            SweepParameter::LearningRate => "learning_rate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
    /// Point `j` of each value trains with seed `training.seed + j`.
    pub seeds_per_point: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub t0: usize,
    pub tail_fraction: f64,
    pub window: usize,
    pub noise_samples: usize,
    pub noise_draws: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            t0: 20_000,
            tail_fraction: 0.2,
            window: 500,
            noise_samples: 2_000,
            noise_draws: 200,
        }
    }
}

fn one_usize() -> usize {
    1
}

fn one_f64() -> f64 {
    1.0
}

fn five() -> usize {
    5
}

fn teacher_name() -> String {
    "teacher".to_string()
}

fn reject(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl ExperimentConfig {
    /// The synthetic study: K=5, d=30, σ²=2.5, 50,000 samples split in half,
    /// a 2x128 ReLU student trained for 45,000 steps at α = 5e-4.
    pub fn paper_defaults() -> Self {
        ExperimentConfig {
            task: TaskConfig {
                num_classes: 5,
                input_dim: 30,
                noise_variance: 2.5,
                num_samples: 50_000,
                train_fraction: 0.5,
                data_seed: 1,
            },
            student: StudentConfig::default(),
            training: TrainingConfig {
                learning_rate: 5e-4,
                iterations: 45_000,
                batch_size: 1,
                eval_interval: 100,
                temperature: 1.0,
                seed: 1,
                track_distance: false,
                freeze_noise: false,
            },
            supervision: SupervisionSpec::OneHot,
            teachers: None,
            sweep: None,
            analysis: AnalysisConfig::default(),
        }
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let config: ExperimentConfig = toml::from_str(text).map_err(|e| reject(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| reject(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(msg) => reject(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let t = &self.task;
        if t.num_classes < 2 || t.input_dim == 0 {
            return Err(reject("task.num_classes must be >= 2 and task.input_dim >= 1"));
        }
        if !(t.noise_variance > 0.0 && t.noise_variance.is_finite()) {
            return Err(reject("task.noise_variance must be > 0"));
        }
        if !(t.train_fraction > 0.0 && t.train_fraction < 1.0) {
            return Err(reject("task.train_fraction must lie in (0, 1)"));
        }
        let train_rows = (t.num_samples as f64 * t.train_fraction).round() as usize;
        if train_rows == 0 || train_rows >= t.num_samples {
            return Err(reject("task.num_samples too small to give both splits a row"));
        }
        self.student_architecture()?;
        self.train_config()?.validate(train_rows)?;
        if self.training.track_distance && !self.student.hidden_layers.is_empty() {
            return Err(reject("training.track_distance needs a linear student (student.hidden_layers = [])"));
        }
        if let Some(name) = self.supervision.teacher_name() {
            match &self.teachers {
                Some(tc) if tc.name == name => {}
                _ => {
                    return Err(reject(format!(
                        "supervision reads teacher `{name}` but no [teachers] block defines it"
                    )))
                }
            }
        }
        if let Some(tc) = &self.teachers {
            if tc.kind != TeacherModel::Oracle {
                Architecture::new(t.input_dim, tc.hidden_layers.clone(), t.num_classes)?;
                if tc.iterations == 0 || !(tc.learning_rate > 0.0 && tc.learning_rate.is_finite()) {
                    return Err(reject("teachers need iterations >= 1 and learning_rate > 0"));
                }
            }
            if tc.kind == TeacherModel::Ensemble && tc.members == 0 {
                return Err(reject("teachers.members must be >= 1"));
            }
            if tc.train_samples == Some(0) {
                return Err(reject("teachers.train_samples must be >= 1"));
            }
        }
        if let Some(sweep) = &self.sweep {
            self.validate_sweep(sweep)?;
        }
        let a = &self.analysis;
        if !(a.tail_fraction > 0.0 && a.tail_fraction <= 1.0) || a.window == 0 {
            return Err(reject("analysis.tail_fraction must lie in (0, 1] and analysis.window >= 1"));
        }
        if a.noise_samples == 0 || a.noise_draws == 0 {
            return Err(reject("analysis.noise_samples and analysis.noise_draws must be >= 1"));
        }
        Ok(())
    }

    fn validate_sweep(&self, sweep: &SweepConfig) -> Result<(), CliError> {
        if sweep.values.is_empty() || sweep.seeds_per_point == 0 {
            return Err(reject("sweep needs at least one value and seeds_per_point >= 1"));
        }
        for &value in &sweep.values {
            self.at_point(sweep.parameter, value)?;
        }
        Ok(())
    }

    /// This configuration with the swept parameter set to `value`.
    pub fn at_point(&self, parameter: SweepParameter, value: f64) -> Result<Self, CliError> {
        let mut config = self.clone();
        config.sweep = None;
        match parameter {
            SweepParameter::Epsilon => match &mut config.supervision {
                SupervisionSpec::Dirichlet { epsilon } => *epsilon = value,
                SupervisionSpec::Mixture { soft, .. } => match soft.as_mut() {
                    SupervisionSpec::Dirichlet { epsilon } => *epsilon = value,
                    _ => return Err(reject("an epsilon sweep needs Dirichlet supervision")),
                },
                _ => return Err(reject("an epsilon sweep needs Dirichlet supervision")),
            },
            SweepParameter::Lambda => match &mut config.supervision {
                SupervisionSpec::Mixture { lambda, .. } => *lambda = value,
                _ => return Err(reject("a lambda sweep needs mixture supervision")),
            },
            SweepParameter::Members => {
                let tc = config
                    .teachers
                    .as_mut()
                    .filter(|tc| tc.kind == TeacherModel::Ensemble)
                    .ok_or_else(|| reject("a members sweep needs an ensemble [teachers] block"))?;
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(reject(format!("ensemble size must be a positive integer, got {value}")));
                }
                tc.members = value as usize;
            }
            SweepParameter::LearningRate => config.training.learning_rate = value,
        }
        config.supervision.validate()?;
        if !(config.training.learning_rate > 0.0 && config.training.learning_rate.is_finite()) {
            return Err(reject(format!("learning rate must be > 0, got {value}")));
        }
        Ok(config)
    }

    pub fn student_architecture(&self) -> Result<Architecture, CliError> {
        Ok(Architecture::new(
            self.task.input_dim,
            self.student.hidden_layers.clone(),
            self.task.num_classes,
        )?)
    }

    /// Training settings for seed `seed` (distance tracking is attached by the runner).
    pub fn train_config_with_seed(&self, seed: u64) -> Result<TrainConfig, CliError> {
        let t = &self.training;
        let mut config = TrainConfig::new(t.learning_rate, t.iterations, self.supervision.clone(), seed);
        config.batch_size = t.batch_size;
        config.eval_interval = t.eval_interval;
        config.student_temperature = t.temperature;
        config.freeze_noise = t.freeze_noise;
        Ok(config)
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        self.train_config_with_seed(self.training.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[task]
num_classes = 5
input_dim = 30
noise_variance = 2.5
num_samples = 1000
train_fraction = 0.5
data_seed = 3

[student]
hidden_layers = []

[training]
learning_rate = 0.01
iterations = 100
eval_interval = 10
seed = 4

[supervision]
kind = "dirichlet"
epsilon = 5.0
"#;

    #[test]
    fn defaults_round_trip_through_toml() {
        let config = ExperimentConfig::paper_defaults();
        assert_eq!(ExperimentConfig::parse(&config.to_toml()).unwrap(), config);
    }

    #[test]
    fn minimal_config_fills_defaults() {
        let c = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.training.batch_size, 1);
        assert_eq!(c.analysis.window, 500);
        assert_eq!(c.supervision, SupervisionSpec::Dirichlet { epsilon: 5.0 });
    }

    #[test]
    fn missing_field_is_named_with_location() {
        let text = MINIMAL.replace("noise_variance = 2.5\n", "");
        let err = ExperimentConfig::parse(&text).unwrap_err().to_string();
        assert!(err.contains("noise_variance"), "{err}");
        assert!(err.contains("line"), "{err}");
    }

    #[test]
    fn seeds_are_required() {
        let err = ExperimentConfig::parse(&MINIMAL.replace("seed = 4\n", "")).unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");
        let err = ExperimentConfig::parse(&MINIMAL.replace("data_seed = 3\n", "")).unwrap_err();
        assert!(err.to_string().contains("data_seed"), "{err}");
    }

    #[test]
    fn sweep_points_override_the_right_field() {
        let mut c = ExperimentConfig::parse(MINIMAL).unwrap();
        let p = c.at_point(SweepParameter::Epsilon, 0.5).unwrap();
        assert_eq!(p.supervision, SupervisionSpec::Dirichlet { epsilon: 0.5 });
        assert!(c.at_point(SweepParameter::Lambda, 0.5).is_err());
        c.supervision = SupervisionSpec::Mixture {
            lambda: 0.3,
            soft: Box::new(SupervisionSpec::Dirichlet { epsilon: 1.0 }),
        };
        let p = c.at_point(SweepParameter::Lambda, 0.9).unwrap();
        assert!(matches!(p.supervision, SupervisionSpec::Mixture { lambda, .. } if lambda == 0.9));
        assert!(c.at_point(SweepParameter::Lambda, 1.5).is_err());
        assert!(c.at_point(SweepParameter::Members, 3.0).is_err());
    }

    #[test]
    fn teacher_supervision_needs_teacher_block() {
        let text = MINIMAL.replace("kind = \"dirichlet\"\nepsilon = 5.0", "kind = \"teacher\"");
        assert!(ExperimentConfig::parse(&text).is_err());
        let with_block = format!(
            "{text}\n[teachers]\nkind = \"ensemble\"\nhidden_layers = [8]\nlearning_rate = 0.01\niterations = 50\nseed = 9\n"
        );
        let c = ExperimentConfig::parse(&with_block).unwrap();
        assert_eq!(c.teachers.unwrap().members, 5);
    }
}
