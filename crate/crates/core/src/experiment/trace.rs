use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::report::signal_mass;
use super::runner::{inspect, TrainedModel};
use crate::data::{
    oracle_avg_accuracy, oracle_signal_accuracy, LabeledSample, NeedleTaskSpec, OracleEstimate,
};
use crate::error::{Result, StamError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTrace {
    /// Stage index: 0 is the initializer, `l ≥ 1` the l-th stacked layer.
    pub layer: usize,
    pub weights: Vec<f64>,
    pub signal_mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleTrace {
    pub sample_id: usize,
    pub label: usize,
    pub predicted: usize,
    pub signal_mask: Vec<bool>,
    pub layers: Vec<LayerTrace>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceFile {
    pub config_hash: String,
    pub variant: String,
    pub seed: u64,
    pub samples: Vec<SampleTrace>,
}

/// Per-layer attention of `trained` on the given test samples. Ids index
/// `samples`; stages without clip weights are skipped.
pub fn export_attention_trace(
    trained: &TrainedModel,
    samples: &[LabeledSample],
    sample_ids: &[usize],
) -> Result<TraceFile> {
    let mut out = Vec::with_capacity(sample_ids.len());
    for &id in sample_ids {
        let sample = samples.get(id).ok_or(StamError::UnknownSample(id))?;
        let view = inspect(&trained.model, &trained.params, sample)?;
        let layers = view
            .weights
            .iter()
            .enumerate()
            .filter_map(|(layer, w)| {
                w.as_ref().map(|w| LayerTrace {
                    layer,
                    signal_mass: signal_mass(w, &sample.signal_mask),
                    weights: w.clone(),
                })
            })
            .collect();
        out.push(SampleTrace {
            sample_id: id,
            label: sample.label,
            predicted: view.prediction(),
            signal_mask: sample.signal_mask.clone(),
            layers,
        });
    }
    Ok(TraceFile {
        config_hash: trained.report.config_hash.clone(),
        variant: trained.report.variant.clone(),
        seed: trained.report.seed,
        samples: out,
    })
}

pub fn trace_json(trace: &TraceFile) -> Result<String> {
    let mut s = serde_json::to_string_pretty(trace)?;
    s.push('\n');
    Ok(s)
}

pub fn write_trace_json(path: &Path, trace: &TraceFile) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, trace_json(trace)?)?;
    Ok(())
}

/// Oracle bounds for a task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub task: NeedleTaskSpec,
    pub signal: OracleEstimate,
    pub average: OracleEstimate,
    pub gap: f64,
}

impl Calibration {
    pub fn compute(task: &NeedleTaskSpec, draws: usize) -> Result<Self> {
        let signal = oracle_signal_accuracy(task, draws)?;
        let average = oracle_avg_accuracy(task, draws)?;
        Ok(Calibration {
            task: task.clone(),
            signal,
            average,
            gap: signal.accuracy - average.accuracy,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        fs::write(path, s)?;
        Ok(())
    }
}
