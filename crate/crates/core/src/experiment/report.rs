use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub variant: String,
    pub config_hash: String,
    pub seed: u64,
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
    /// Accuracy of the final head, which is the model's prediction.
    pub test_accuracy: f64,
    /// Accuracy of every stage's head, stage 0 first.
    pub head_accuracies: Vec<f64>,
    /// Mean over test samples of the attention mass on signal clips, per
    /// stage; `None` where the stage has no clip weights.
    pub signal_mass: Vec<Option<f64>>,
    /// Median over test samples of the same quantity.
    pub signal_mass_median: Vec<Option<f64>>,
    /// Mean entropy (nats) of the attention vector, per stage.
    pub attention_entropy: Vec<Option<f64>>,
    /// Not part of reproducible output; left out of `metrics.csv`.
    pub wall_clock_seconds: f64,
}

impl RunReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }

    /// Equality on every field except wall-clock time, bit for bit.
    pub fn same_results(&self, other: &RunReport) -> bool {
        let mut a = self.clone();
        a.wall_clock_seconds = other.wall_clock_seconds;
        a == *other && bits(&self.epoch_losses) == bits(&other.epoch_losses)
    }
}

fn bits(xs: &[f64]) -> Vec<u64> {
    xs.iter().map(|x| x.to_bits()).collect()
}

/// Per-sample quantities gathered during evaluation.
#[derive(Debug, Clone, Default)]
pub(crate) struct EvalTally {
    pub correct: Vec<usize>,
    pub masses: Vec<Vec<f64>>,
    pub entropies: Vec<Vec<f64>>,
    pub samples: usize,
}

impl EvalTally {
    pub fn new(stages: usize) -> Self {
        EvalTally {
            correct: vec![0; stages],
            masses: vec![Vec::new(); stages],
            entropies: vec![Vec::new(); stages],
            samples: 0,
        }
    }
}

pub fn signal_mass(weights: &[f64], mask: &[bool]) -> f64 {
    weights
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(w, _)| w)
        .sum()
}

pub fn entropy(weights: &[f64]) -> f64 {
    -weights
        .iter()
        .filter(|&&w| w > 0.0)
        .map(|w| w * w.ln())
        .sum::<f64>()
}

pub fn mean(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        None
    } else {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

/// Middle value; the mean of the two middle values for even lengths.
pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

fn join(xs: impl IntoIterator<Item = Option<f64>>) -> String {
    xs.into_iter()
        .map(|x| x.map_or_else(|| "na".to_string(), |v| v.to_string()))
        .collect::<Vec<_>>()
        .join(";")
}

#[derive(Serialize)]
struct MetricsRow<'a> {
    config_hash: &'a str,
    variant: &'a str,
    seed: u64,
    test_accuracy: f64,
    head_accuracies: String,
    signal_mass: String,
    signal_mass_median: String,
    attention_entropy: String,
    epochs: usize,
    first_loss: String,
    final_loss: String,
    min_loss: String,
}

/// One row per run. Lists are `;`-joined and missing values read `na`.
pub fn metrics_csv(reports: &[RunReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in reports {
        let min = r.epoch_losses.iter().copied().reduce(f64::min);
        w.serialize(MetricsRow {
            config_hash: &r.config_hash,
            variant: &r.variant,
            seed: r.seed,
            test_accuracy: r.test_accuracy,
            head_accuracies: join(r.head_accuracies.iter().map(|&a| Some(a))),
            signal_mass: join(r.signal_mass.iter().copied()),
            signal_mass_median: join(r.signal_mass_median.iter().copied()),
            attention_entropy: join(r.attention_entropy.iter().copied()),
            epochs: r.epoch_losses.len(),
            first_loss: join([r.epoch_losses.first().copied()]),
            final_loss: join([r.final_loss()]),
            min_loss: join([min]),
        })?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_metrics_csv(path: &Path, reports: &[RunReport]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, metrics_csv(reports)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> RunReport {
        RunReport {
            variant: "stam-selfatt-m1".into(),
            config_hash: "abc".into(),
            seed: 7,
            epoch_losses: vec![1.5, 0.1 + 0.2, 0.25],
            test_accuracy: 0.75,
            head_accuracies: vec![0.5, 0.75],
            signal_mass: vec![None, Some(1.0 / 3.0)],
            signal_mass_median: vec![None, Some(0.25)],
            attention_entropy: vec![None, Some(1.2)],
            wall_clock_seconds: 0.5,
        }
    }

    #[test]
    fn json_round_trip_is_lossless() {
        let r = report();
        let back: RunReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert!(r.same_results(&back));
        assert_eq!(back.wall_clock_seconds, r.wall_clock_seconds);
    }

    #[test]
    fn csv_layout() {
        let text = metrics_csv(&[report()]).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "config_hash,variant,seed,test_accuracy,head_accuracies,signal_mass,signal_mass_median,\
             attention_entropy,epochs,first_loss,final_loss,min_loss"
        );
        assert_eq!(
            lines.next().unwrap(),
            "abc,stam-selfatt-m1,7,0.75,0.5;0.75,na;0.3333333333333333,na;0.25,na;1.2,3,1.5,0.25,0.25"
        );
    }

    #[test]
    fn stats() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0]), Some(2.5));
        assert_eq!(median(&[]), None);
        assert_eq!(signal_mass(&[0.2, 0.3, 0.5], &[true, false, true]), 0.7);
        assert!((entropy(&[0.25; 4]) - 4f64.ln()).abs() < 1e-15);
        assert_eq!(entropy(&[1.0, 0.0]), 0.0);
    }
}
