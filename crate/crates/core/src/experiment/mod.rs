//! Training, evaluation and export for the needle-task experiments.

mod config;
mod report;
mod runner;
mod trace;

pub use config::{Baseline, ExperimentConfig, OutputSpec, TrainSpec};
pub use report::{entropy, mean, median, metrics_csv, signal_mass, write_metrics_csv, RunReport};
pub use runner::{
    batch_loss, build_model, check_model_gradients, compare_baselines, dims_of, inspect,
    median_accuracy, run_avg_consensus, run_vanilla_stack, seed_range, sweep_layers, train,
    train_all, train_on, Comparison, FdPrecision, SampleView, TrainedModel,
};
pub use trace::{
    export_attention_trace, trace_json, write_trace_json, Calibration, LayerTrace, SampleTrace,
    TraceFile,
};
