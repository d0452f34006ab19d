//! Run configuration: one TOML file, every key optional, unknown keys
//! rejected. See `examples/desk.toml` in this crate for an annotated copy of
//! the defaults.

use std::path::PathBuf;

use factorial_flow::evaluation::ClassifierConfig;
use factorial_flow::priors::Regime;
use factorial_flow::synthetic::{FactorShape, SyntheticSpec};
use factorial_flow::{FlowConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub obs_dim: usize,
    pub factors: Vec<FactorEntry>,
    pub class_mean_std: f64,
    pub noise_min: f64,
    pub noise_max: f64,
    pub train_per_cell: usize,
    pub test_per_cell: usize,
    /// Use existing dataset files instead of `<out>/train.txt` / `test.txt`.
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorEntry {
    pub name: String,
    pub classes: usize,
    pub latent_width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// `standard`, `discriminative` or `factorial`.
    pub regime: String,
    pub blocks: usize,
    pub hidden: usize,
    /// Partial-code widths for the factorial regime, in factor order.
    /// Empty means an equal split.
    pub partition: Vec<usize>,
    /// Factor a discriminative prior is conditioned on.
    pub factor: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub checkpoint_every: usize,
    /// Non-positive disables clipping.
    pub grad_clip: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub validation_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            out: PathBuf::from("runs/desk"),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            obs_dim: 16,
            factors: vec![
                FactorEntry {
                    name: "phone".into(),
                    classes: 5,
                    latent_width: 4,
                },
                FactorEntry {
                    name: "speaker".into(),
                    classes: 5,
                    latent_width: 4,
                },
            ],
            class_mean_std: 2.0,
            noise_min: 0.1,
            noise_max: 0.5,
            train_per_cell: 200,
            test_per_cell: 50,
            train_path: None,
            test_path: None,
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            regime: "factorial".into(),
            blocks: 6,
            hidden: 32,
            partition: Vec::new(),
            factor: None,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_epsilon: t.adam_epsilon,
            batch_size: t.batch_size,
            epochs: 150,
            checkpoint_every: 10,
            grad_clip: t.grad_clip.unwrap_or(0.0),
        }
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        let c = ClassifierConfig::default();
        Self {
            hidden: c.hidden,
            epochs: c.epochs,
            batch_size: c.batch_size,
            learning_rate: c.learning_rate,
            validation_fraction: c.validation_fraction,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// SHA-256 of the canonical TOML rendering, hex encoded. The output
    /// directory is left out: it does not change any result.
    pub fn hash(&self) -> String {
        let canonical = Self {
            out: PathBuf::new(),
            ..self.clone()
        };
        let digest = Sha256::digest(canonical.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn regime(&self) -> Result<Regime, CliError> {
        Regime::parse(&self.model.regime)
            .ok_or_else(|| CliError::Validation(format!("unknown regime `{}`", self.model.regime)))
    }

    pub fn flow_config(&self) -> FlowConfig {
        FlowConfig::new(self.data.obs_dim, self.model.blocks, self.model.hidden)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.train.learning_rate,
            beta1: self.train.beta1,
            beta2: self.train.beta2,
            adam_epsilon: self.train.adam_epsilon,
            batch_size: self.train.batch_size,
            epochs: self.train.epochs,
            seed: self.seed,
            checkpoint_every: self.train.checkpoint_every,
            grad_clip: (self.train.grad_clip > 0.0).then_some(self.train.grad_clip),
        }
    }

    pub fn classifier_config(&self, salt: u64) -> ClassifierConfig {
        ClassifierConfig {
            hidden: self.eval.hidden,
            epochs: self.eval.epochs,
            batch_size: self.eval.batch_size,
            learning_rate: self.eval.learning_rate,
            validation_fraction: self.eval.validation_fraction,
            seed: self.seed.wrapping_add(salt),
        }
    }

    pub fn synthetic_spec(&self) -> Result<SyntheticSpec, CliError> {
        let shapes: Vec<FactorShape> = self
            .data
            .factors
            .iter()
            .map(|f| FactorShape::new(f.name.clone(), f.classes, f.latent_width))
            .collect();
        SyntheticSpec::random(
            self.data.obs_dim,
            &shapes,
            self.data.class_mean_std,
            (self.data.noise_min, self.data.noise_max),
            self.seed,
        )
        .map_err(|e| CliError::Validation(e.to_string()))
    }

    /// Partition widths for the factorial regime.
    pub fn partition_widths(&self) -> Vec<usize> {
        if !self.model.partition.is_empty() {
            return self.model.partition.clone();
        }
        let n = self.data.factors.len().max(1);
        let d = self.data.obs_dim;
        (0..self.data.factors.len())
            .map(|i| d / n + usize::from(i < d % n))
            .collect()
    }

    /// Checks every field; nothing is read or written.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Validation(m));
        let d = &self.data;
        if d.obs_dim < 2 {
            return bad(format!("data.obs_dim must be at least 2, got {}", d.obs_dim));
        }
        if d.factors.is_empty() {
            return bad("data.factors must name at least one factor".into());
        }
        for f in &d.factors {
            if f.classes == 0 {
                return bad(format!("factor `{}`: classes must be positive (K=0)", f.name));
            }
            if f.latent_width == 0 {
                return bad(format!("factor `{}`: latent_width must be positive", f.name));
            }
            if f.name.is_empty() || f.name.contains([',', ':', ';', '=']) {
                return bad(format!("factor name `{}` is empty or contains a separator", f.name));
            }
        }
        if d.train_per_cell == 0 || d.test_per_cell == 0 {
            return bad("data.train_per_cell and data.test_per_cell must be positive".into());
        }
        if !(d.class_mean_std > 0.0) || !(d.noise_min > 0.0) || d.noise_max < d.noise_min {
            return bad("data.class_mean_std and the noise range must be positive".into());
        }
        self.flow_config()
            .validate()
            .or_else(|e| bad(format!("model: {e}")))?;
        let regime = self.regime()?;
        match regime {
            Regime::Factorial => {
                let widths = self.partition_widths();
                if widths.len() != d.factors.len() {
                    return bad(format!(
                        "model.partition has {} widths for {} factors",
                        widths.len(),
                        d.factors.len()
                    ));
                }
                if widths.iter().sum::<usize>() != d.obs_dim || widths.contains(&0) {
                    return bad(format!(
                        "model.partition {:?} must consist of positive widths summing to D = {}",
                        widths, d.obs_dim
                    ));
                }
            }
            Regime::Discriminative => {
                let f = self.model.factor.as_deref().unwrap_or(&d.factors[0].name);
                if !d.factors.iter().any(|e| e.name == f) {
                    return bad(format!("model.factor `{f}` is not a data factor"));
                }
            }
            Regime::Standard => {}
        }
        self.train_config()
            .validate()
            .or_else(|e| bad(format!("train: {e}")))?;
        if self.eval.hidden == 0
            || self.eval.batch_size == 0
            || !(self.eval.learning_rate > 0.0)
            || !(0.0..1.0).contains(&self.eval.validation_fraction)
        {
            return bad("eval: hidden, batch_size and learning_rate must be positive, validation_fraction in [0, 1)".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_eq!(c.hash().len(), 64);
        let moved = RunConfig {
            out: PathBuf::from("elsewhere"),
            ..c.clone()
        };
        assert_eq!(moved.hash(), c.hash());
        let reseeded = RunConfig { seed: 8, ..c.clone() };
        assert_ne!(reseeded.hash(), c.hash());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("seed = 1\nbogus = 2\n").is_err());
        assert!(RunConfig::from_toml("[model]\nlayers = 3\n").is_err());
    }

    #[test]
    fn validation_failures() {
        let mut c = RunConfig::default();
        c.data.factors[0].classes = 0;
        assert!(matches!(c.validate(), Err(CliError::Validation(m)) if m.contains("K=0")));

        let mut c = RunConfig::default();
        c.model.partition = vec![8, 7];
        assert!(c.validate().is_err());

        let mut c = RunConfig::default();
        c.model.regime = "vae".into();
        assert!(c.validate().is_err());

        let mut c = RunConfig::default();
        c.model.regime = "discriminative".into();
        c.model.factor = Some("accent".into());
        assert!(c.validate().is_err());
    }

    #[test]
    fn shipped_example_matches_defaults() {
        let text = include_str!("../examples/desk.toml");
        assert_eq!(RunConfig::from_toml(text).unwrap(), RunConfig::default());
    }
}
