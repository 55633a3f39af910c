//! Monte-Carlo Bayes-accuracy bounds for a needle task.
//!
//! Both oracles know the prototypes and the noise model. The signal oracle
//! sees the true needle clip alone; the average oracle sees only the mean of
//! all clips, where the needle is diluted by `s/N`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::NeedleTaskSpec;
use crate::error::Result;
use crate::rng;

pub const DEFAULT_ORACLE_DRAWS: usize = 200_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleEstimate {
    pub accuracy: f64,
    pub std_error: f64,
    pub draws: usize,
}

impl OracleEstimate {
    fn from_credit(credit: f64, draws: usize) -> Self {
        let accuracy = credit / draws as f64;
        OracleEstimate {
            accuracy,
            std_error: (accuracy * (1.0 - accuracy) / draws as f64).sqrt(),
            draws,
        }
    }
}

/// Expected 0/1 credit of the Bayes decision for an observation
/// `x ~ N(amplitude·p_c, τ² I)` under a uniform class prior. Exact ties
/// (e.g. zero amplitude) split the credit evenly among the tied classes.
fn bayes_credit(prototypes: &[Vec<f64>], amplitude: f64, x: &[f64], label: usize) -> f64 {
    let scores: Vec<f64> = prototypes
        .iter()
        .map(|p| {
            let dot: f64 = p.iter().zip(x).map(|(a, b)| a * b).sum();
            let sq: f64 = p.iter().map(|a| a * a).sum();
            amplitude * dot - 0.5 * amplitude * amplitude * sq
        })
        .collect();
    let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tied = scores.iter().filter(|s| **s == best).count();
    if scores[label] == best {
        1.0 / tied as f64
    } else {
        0.0
    }
}

pub fn oracle_signal_accuracy(spec: &NeedleTaskSpec, draws: usize) -> Result<OracleEstimate> {
    let protos = spec.prototypes()?;
    let mut rng = rng::stream(spec.seed, "oracle/signal");
    let mut credit = 0.0;
    let mut x = vec![0.0; spec.feature_dim];
    for _ in 0..draws {
        let label = rng.random_range(0..spec.num_classes);
        for (xi, p) in x.iter_mut().zip(&protos[label]) {
            let z: f64 = rng.sample(StandardNormal);
            *xi = spec.signal_strength * p + spec.noise_std * z;
        }
        credit += bayes_credit(&protos, spec.signal_strength, &x, label);
    }
    Ok(OracleEstimate::from_credit(credit, draws))
}

/// Draws every clip and averages them, so the estimate shares the generator's
/// noise model exactly. Draw order is independent of `σ_d`, so two specs that
/// differ only in `σ_d` use common random numbers.
pub fn oracle_avg_accuracy(spec: &NeedleTaskSpec, draws: usize) -> Result<OracleEstimate> {
    let protos = spec.prototypes()?;
    let mut rng = rng::stream(spec.seed, "oracle/avg");
    let n = spec.clip_count as f64;
    let amplitude = spec.signal_strength * spec.signal_clips as f64 / n;
    let mut credit = 0.0;
    let mut mean = vec![0.0; spec.feature_dim];
    for _ in 0..draws {
        let label = rng.random_range(0..spec.num_classes);
        mean.iter_mut().for_each(|m| *m = 0.0);
        for clip in 0..spec.clip_count {
            let signal = clip < spec.signal_clips;
            for (m, p) in mean.iter_mut().zip(&protos[label]) {
                let z: f64 = rng.sample(StandardNormal);
                *m += if signal {
                    spec.signal_strength * p + spec.noise_std * z
                } else {
                    spec.distractor_std * z
                };
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        credit += bayes_credit(&protos, amplitude, &mean, label);
    }
    Ok(OracleEstimate::from_credit(credit, draws))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> NeedleTaskSpec {
        NeedleTaskSpec::default()
    }

    #[test]
    fn noiseless_signal_is_perfect() {
        let s = NeedleTaskSpec {
            noise_std: 0.0,
            ..spec()
        };
        assert_eq!(oracle_signal_accuracy(&s, 2000).unwrap().accuracy, 1.0);
    }

    #[test]
    fn invisible_prototype_is_chance() {
        let s = NeedleTaskSpec {
            signal_strength: 0.0,
            ..spec()
        };
        assert_eq!(oracle_signal_accuracy(&s, 2000).unwrap().accuracy, 0.25);
        assert_eq!(oracle_avg_accuracy(&s, 2000).unwrap().accuracy, 0.25);
    }

    #[test]
    fn credit_splits_ties() {
        let protos = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(bayes_credit(&protos, 1.0, &[1.0, 1.0], 1), 0.5);
        assert_eq!(bayes_credit(&protos, 1.0, &[2.0, 1.0], 0), 1.0);
        assert_eq!(bayes_credit(&protos, 1.0, &[2.0, 1.0], 1), 0.0);
    }
}
