use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::NeedleTaskSpec;
use crate::error::{Result, StamError};
use crate::heads::LossWeights;
use crate::init::InitializerKind;
use crate::model::ModelSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// Classifier on the mean clip feature, no attention at all.
    AvgConsensus,
    /// Plain self-attention layers stacked over the clips.
    VanillaStack,
}

impl Baseline {
    pub fn as_str(self) -> &'static str {
        match self {
            Baseline::AvgConsensus => "avg_consensus",
            Baseline::VanillaStack => "vanilla_stack",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSpec {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// One weight per stage; all ones when absent.
    pub lambdas: Option<Vec<f64>>,
    pub seed: u64,
}

impl Default for TrainSpec {
    fn default() -> Self {
        TrainSpec {
            epochs: 30,
            learning_rate: 1e-3,
            batch_size: 32,
            lambdas: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSpec {
    pub metrics_path: PathBuf,
    pub trace_path: PathBuf,
}

impl Default for OutputSpec {
    fn default() -> Self {
        OutputSpec {
            metrics_path: PathBuf::from("metrics.csv"),
            trace_path: PathBuf::from("trace.json"),
        }
    }
}

impl OutputSpec {
    /// Both files placed under `dir`.
    pub fn in_dir(dir: &Path) -> Self {
        OutputSpec {
            metrics_path: dir.join("metrics.csv"),
            trace_path: dir.join("trace.json"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: NeedleTaskSpec,
    pub model: ModelSpec,
    pub baseline: Option<Baseline>,
    pub train: TrainSpec,
    pub output: OutputSpec,
}

/// The part of a config that affects results; output paths are excluded.
#[derive(Serialize)]
struct HashedFields<'a> {
    task: &'a NeedleTaskSpec,
    model: &'a ModelSpec,
    baseline: &'a Option<Baseline>,
    train: &'a TrainSpec,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: ExperimentConfig = serde_json::from_str(text)
            .map_err(|e| StamError::config(format!("invalid config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| StamError::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        if self.train.batch_size == 0 {
            return Err(StamError::config("batch_size must be positive"));
        }
        if !(self.train.learning_rate.is_finite() && self.train.learning_rate > 0.0) {
            return Err(StamError::config(format!(
                "learning_rate must be positive, got {}",
                self.train.learning_rate
            )));
        }
        if self.model.hidden_dim == Some(0) {
            return Err(StamError::config("hidden_dim must be positive"));
        }
        if let Some(l) = &self.train.lambdas {
            let w = LossWeights::new(l.clone())?;
            if w.len() != self.stages() {
                return Err(StamError::config(format!(
                    "{} loss weights given for a model with {} stages",
                    w.len(),
                    self.stages()
                )));
            }
        }
        Ok(())
    }

    /// Number of classifier heads the configured model carries.
    pub fn stages(&self) -> usize {
        match self.baseline {
            None => self.model.layers + 1,
            Some(Baseline::AvgConsensus) => 1,
            Some(Baseline::VanillaStack) => self.vanilla_depth(),
        }
    }

    /// Self-attention layers in the vanilla baseline: as many attention
    /// layers as the self-attention-initialized model with `model.layers`.
    pub fn vanilla_depth(&self) -> usize {
        self.model.layers + 1
    }

    /// Short name of the variant, e.g. `stam-selfatt-m2`.
    pub fn variant(&self) -> String {
        match self.baseline {
            None => format!("stam-{}-m{}", self.model.initializer, self.model.layers),
            Some(Baseline::AvgConsensus) => "avg_consensus".to_string(),
            Some(Baseline::VanillaStack) => format!("vanilla_stack-{}", self.vanilla_depth()),
        }
    }

    /// Hex SHA-256 of the canonical JSON of everything but the output paths.
    pub fn hash(&self) -> String {
        let fields = HashedFields {
            task: &self.task,
            model: &self.model,
            baseline: &self.baseline,
            train: &self.train,
        };
        let json = serde_json::to_vec(&fields).expect("config serializes");
        hex::encode(Sha256::digest(&json))[..16].to_string()
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.train.seed = seed;
        c
    }

    pub fn with_layers(&self, layers: usize) -> Self {
        let mut c = self.clone();
        c.model.layers = layers;
        c.train.lambdas = None;
        c
    }

    pub fn with_baseline(&self, baseline: Option<Baseline>) -> Self {
        let mut c = self.clone();
        c.baseline = baseline;
        if baseline == Some(Baseline::AvgConsensus) {
            c.model.initializer = InitializerKind::AvgPool;
            c.model.layers = 0;
        }
        c.train.lambdas = match (&self.train.lambdas, baseline) {
            (Some(l), None) => Some(l.clone()),
            _ => None,
        };
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = ExperimentConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), c);
        assert_eq!(ExperimentConfig::from_json("{}").unwrap(), c);
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"modle": {}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"train": {"epoch": 3}}"#).is_err());
    }

    #[test]
    fn hash_ignores_output_paths() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.output = OutputSpec::in_dir(Path::new("/tmp/x"));
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), a.with_seed(1).hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn lambda_count_checked() {
        let mut c = ExperimentConfig::default();
        c.train.lambdas = Some(vec![1.0, 1.0]);
        assert!(c.validate().is_err());
        c.train.lambdas = Some(vec![0.0, 0.0, 1.0]);
        assert!(c.validate().is_ok());
        assert_eq!(
            c.with_baseline(Some(Baseline::VanillaStack)).train.lambdas,
            None
        );
    }

    #[test]
    fn baseline_shapes() {
        let c = ExperimentConfig::default();
        let avg = c.with_baseline(Some(Baseline::AvgConsensus));
        assert_eq!(avg.stages(), 1);
        assert_eq!(avg.model.initializer, InitializerKind::AvgPool);
        assert_eq!(c.with_baseline(Some(Baseline::VanillaStack)).stages(), 3);
        assert_eq!(c.variant(), "stam-selfatt-m2");
    }
}
