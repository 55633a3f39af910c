//! Needle-clip classification tasks.
//!
//! Each sample has N clip features of which only `s` (placed uniformly at
//! random) carry class evidence `μ·prototype[label] + N(0, σ²)`; the rest are
//! background `N(0, σ_d²)`. The clip position carries no class information.

mod binary;
mod oracle;

pub use binary::{read_dataset, read_dataset_file, write_dataset, write_dataset_file, MAGIC};
pub use oracle::{
    oracle_avg_accuracy, oracle_signal_accuracy, OracleEstimate, DEFAULT_ORACLE_DRAWS,
};

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attention::ClipFeatures;
use crate::error::{Result, StamError};
use crate::rng::{self, StreamRng};
use crate::tensor::Tensor;

/// Largest allowed pairwise dot product between class prototypes.
pub const MAX_PROTOTYPE_DOT: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NeedleTaskSpec {
    pub num_classes: usize,
    pub clip_count: usize,
    pub feature_dim: usize,
    pub signal_clips: usize,
    pub signal_strength: f64,
    pub noise_std: f64,
    pub distractor_std: f64,
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl Default for NeedleTaskSpec {
    fn default() -> Self {
        NeedleTaskSpec {
            num_classes: 4,
            clip_count: 6,
            feature_dim: 32,
            signal_clips: 1,
            signal_strength: 1.25,
            noise_std: 0.5,
            distractor_std: 0.5,
            train_size: 4000,
            test_size: 2000,
            seed: 0,
        }
    }
}

impl NeedleTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(StamError::config("num_classes must be at least 2"));
        }
        if self.clip_count == 0 || self.feature_dim == 0 {
            return Err(StamError::config(
                "clip_count and feature_dim must be positive",
            ));
        }
        if self.signal_clips == 0 || self.signal_clips > self.clip_count {
            return Err(StamError::config(format!(
                "signal_clips must be in 1..={} (clip_count), got {}",
                self.clip_count, self.signal_clips
            )));
        }
        for (name, v) in [
            ("signal_strength", self.signal_strength),
            ("noise_std", self.noise_std),
            ("distractor_std", self.distractor_std),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(StamError::config(format!(
                    "{name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        if self.train_size == 0 || self.test_size == 0 {
            return Err(StamError::config(
                "train_size and test_size must be positive",
            ));
        }
        Ok(())
    }

    /// Unit-norm class prototypes with pairwise dot product below
    /// [`MAX_PROTOTYPE_DOT`]. Orthonormal whenever `C ≤ D_f`.
    pub fn prototypes(&self) -> Result<Vec<Vec<f64>>> {
        self.validate()?;
        let mut rng = rng::stream(self.seed, "task/prototypes");
        let d = self.feature_dim;
        let mut protos: Vec<Vec<f64>> = Vec::with_capacity(self.num_classes);
        let orthogonalize = self.num_classes <= d;
        let mut attempts = 0usize;
        while protos.len() < self.num_classes {
            attempts += 1;
            if attempts > 10_000 * self.num_classes {
                return Err(StamError::config(format!(
                    "cannot place {} separated prototypes in {d} dimensions",
                    self.num_classes
                )));
            }
            let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            if orthogonalize {
                for p in &protos {
                    let dot: f64 = v.iter().zip(p).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(p).for_each(|(a, b)| *a -= dot * b);
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-6 {
                continue;
            }
            v.iter_mut().for_each(|x| *x /= norm);
            let separated = protos
                .iter()
                .all(|p| p.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() < MAX_PROTOTYPE_DOT);
            if separated {
                protos.push(v);
            }
        }
        Ok(protos)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub clips: ClipFeatures,
    pub label: usize,
    /// Ground-truth needle positions; for metrics only.
    pub signal_mask: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: NeedleTaskSpec,
    pub prototypes: Vec<Vec<f64>>,
    pub train: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
}

fn generate_split(
    spec: &NeedleTaskSpec,
    prototypes: &[Vec<f64>],
    size: usize,
    rng: &mut StreamRng,
) -> Result<Vec<LabeledSample>> {
    let (n, d) = (spec.clip_count, spec.feature_dim);
    let mut labels: Vec<usize> = (0..size).map(|i| i % spec.num_classes).collect();
    labels.shuffle(rng);
    labels
        .into_iter()
        .map(|label| {
            let mut mask = vec![false; n];
            for i in index::sample(rng, n, spec.signal_clips) {
                mask[i] = true;
            }
            let mut values = Vec::with_capacity(n * d);
            for &is_signal in &mask {
                if is_signal {
                    let proto = &prototypes[label];
                    for &p in proto {
                        let z: f64 = rng.sample(StandardNormal);
                        values.push(spec.signal_strength * p + spec.noise_std * z);
                    }
                } else {
                    for _ in 0..d {
                        let z: f64 = rng.sample(StandardNormal);
                        values.push(spec.distractor_std * z);
                    }
                }
            }
            Ok(LabeledSample {
                clips: ClipFeatures::new(Tensor::matrix(n, d, values)?)?,
                label,
                signal_mask: mask,
            })
        })
        .collect()
}

/// Deterministic train/test split for `spec`. The two splits come from
/// separate streams.
pub fn generate(spec: &NeedleTaskSpec) -> Result<Dataset> {
    let prototypes = spec.prototypes()?;
    let train = generate_split(
        spec,
        &prototypes,
        spec.train_size,
        &mut rng::stream(spec.seed, "task/train"),
    )?;
    let test = generate_split(
        spec,
        &prototypes,
        spec.test_size,
        &mut rng::stream(spec.seed, "task/test"),
    )?;
    Ok(Dataset {
        spec: spec.clone(),
        prototypes,
        train,
        test,
    })
}
