use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::config::{Baseline, ExperimentConfig};
use super::report::{entropy, mean, median, signal_mass, EvalTally, RunReport};
use crate::data::{generate, Dataset, LabeledSample};
use crate::error::{Result, StamError};
use crate::gradcheck::{check_gradients, GradCheckReport, DEFAULT_STEP};
use crate::graph::{Graph, Var};
use crate::heads::predict;
use crate::model::{Dims, Model};
use crate::optim::{adam_step, AdamState};
use crate::params::ParamStore;
use crate::reference::check_gradients_extended;
use crate::rng;

/// Result of a training run, kept around for trace export.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub config: ExperimentConfig,
    pub model: Model,
    pub params: ParamStore,
    pub report: RunReport,
}

/// What one forward pass says about a sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleView {
    /// Prediction of each stage's head.
    pub predictions: Vec<usize>,
    /// Clip weights of each stage, where the stage has them.
    pub weights: Vec<Option<Vec<f64>>>,
}

impl SampleView {
    pub fn prediction(&self) -> usize {
        *self.predictions.last().expect("at least one stage")
    }
}

pub fn dims_of(config: &ExperimentConfig) -> Dims {
    Dims {
        feature_dim: config.task.feature_dim,
        clip_count: config.task.clip_count,
        num_classes: config.task.num_classes,
    }
}

/// Registers the configured model's parameters in `store`.
pub fn build_model(config: &ExperimentConfig, store: &mut ParamStore) -> Result<Model> {
    let dims = dims_of(config);
    let lambdas = config.train.lambdas.clone();
    match config.baseline {
        None => Model::stam(store, &config.model, dims, lambdas),
        Some(Baseline::AvgConsensus) => {
            let c = config.with_baseline(Some(Baseline::AvgConsensus));
            Model::stam(store, &c.model, dims, None)
        }
        Some(Baseline::VanillaStack) => Model::vanilla(
            store,
            config.vanilla_depth(),
            config.model.hidden_dim_for(dims.feature_dim),
            dims,
            None,
        ),
    }
}

/// Mean combined loss over `samples`, as one graph.
pub fn batch_loss(
    model: &Model,
    graph: &mut Graph,
    store: &ParamStore,
    samples: &[&LabeledSample],
) -> Result<Var> {
    if samples.is_empty() {
        return Err(StamError::config("empty batch"));
    }
    let mut total: Option<Var> = None;
    for s in samples {
        let trace = model.forward(graph, store, &s.clips)?;
        let loss = model.loss(graph, store, &trace, s.label)?;
        total = Some(match total {
            Some(acc) => graph.add(acc, loss)?,
            None => loss,
        });
    }
    graph.scale(total.expect("non-empty batch"), 1.0 / samples.len() as f64)
}

pub fn inspect(model: &Model, store: &ParamStore, sample: &LabeledSample) -> Result<SampleView> {
    let mut graph = Graph::new();
    let trace = model.forward(&mut graph, store, &sample.clips)?;
    let logits = model.stage_logits(&mut graph, store, &trace)?;
    Ok(SampleView {
        predictions: logits.iter().map(|&z| predict(graph.values(z))).collect(),
        weights: trace.snapshot(&graph).weights,
    })
}

fn evaluate(model: &Model, store: &ParamStore, samples: &[LabeledSample]) -> Result<EvalTally> {
    let mut tally = EvalTally::new(model.stages());
    for s in samples {
        let view = inspect(model, store, s)?;
        for (stage, &p) in view.predictions.iter().enumerate() {
            if p == s.label {
                tally.correct[stage] += 1;
            }
        }
        for (stage, w) in view.weights.iter().enumerate() {
            if let Some(w) = w {
                tally.masses[stage].push(signal_mass(w, &s.signal_mask));
                tally.entropies[stage].push(entropy(w));
            }
        }
        tally.samples += 1;
    }
    Ok(tally)
}

fn check_dataset(config: &ExperimentConfig, data: &Dataset) -> Result<()> {
    if data.spec != config.task {
        return Err(StamError::config(
            "dataset was generated from a different task spec",
        ));
    }
    if data.test.is_empty() {
        return Err(StamError::config("test split is empty"));
    }
    Ok(())
}

/// Trains the configured model on `data` and evaluates it on the test split.
pub fn train_on(config: &ExperimentConfig, data: &Dataset) -> Result<TrainedModel> {
    config.validate()?;
    check_dataset(config, data)?;
    let started = Instant::now();
    let mut store = ParamStore::new(config.train.seed);
    let model = build_model(config, &mut store)?;
    let mut adam = AdamState::new(config.train.learning_rate);
    let mut shuffle = rng::stream(config.train.seed, "train/shuffle");
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.train.epochs);

    for epoch in 0..config.train.epochs {
        order.shuffle(&mut shuffle);
        let mut sum = 0.0;
        for (batch, chunk) in order.chunks(config.train.batch_size).enumerate() {
            let samples: Vec<&LabeledSample> = chunk.iter().map(|&i| &data.train[i]).collect();
            store.zero_grads();
            let mut graph = Graph::new();
            let loss = match batch_loss(&model, &mut graph, &store, &samples) {
                Err(StamError::NonFinite { .. }) => {
                    return Err(StamError::NonFiniteLoss {
                        epoch,
                        batch,
                        value: f64::NAN,
                    })
                }
                other => other?,
            };
            let value = graph.value(loss).item();
            if !value.is_finite() {
                return Err(StamError::NonFiniteLoss {
                    epoch,
                    batch,
                    value,
                });
            }
            graph.backward(loss, &mut store)?;
            adam_step(&mut store, &mut adam)?;
            sum += value * chunk.len() as f64;
        }
        epoch_losses.push(sum / data.train.len() as f64);
    }

    let tally = evaluate(&model, &store, &data.test)?;
    let n = tally.samples as f64;
    let head_accuracies: Vec<f64> = tally.correct.iter().map(|&c| c as f64 / n).collect();
    let report = RunReport {
        variant: config.variant(),
        config_hash: config.hash(),
        seed: config.train.seed,
        epoch_losses,
        test_accuracy: *head_accuracies.last().expect("at least one stage"),
        head_accuracies,
        signal_mass: tally.masses.iter().map(|m| mean(m)).collect(),
        signal_mass_median: tally.masses.iter().map(|m| median(m)).collect(),
        attention_entropy: tally.entropies.iter().map(|e| mean(e)).collect(),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    Ok(TrainedModel {
        config: config.clone(),
        model,
        params: store,
        report,
    })
}

pub fn train(config: &ExperimentConfig) -> Result<RunReport> {
    config.validate()?;
    let data = generate(&config.task)?;
    Ok(train_on(config, &data)?.report)
}

pub fn run_vanilla_stack(config: &ExperimentConfig) -> Result<RunReport> {
    train(&config.with_baseline(Some(Baseline::VanillaStack)))
}

pub fn run_avg_consensus(config: &ExperimentConfig) -> Result<RunReport> {
    train(&config.with_baseline(Some(Baseline::AvgConsensus)))
}

/// Trains every config on the same dataset, in parallel; results keep the
/// order of `configs`.
pub fn train_all(configs: &[ExperimentConfig], data: &Dataset) -> Result<Vec<TrainedModel>> {
    configs.par_iter().map(|c| train_on(c, data)).collect()
}

/// One model per entry of `layer_counts`, all on the same data.
pub fn sweep_layers(config: &ExperimentConfig, layer_counts: &[usize]) -> Result<Vec<RunReport>> {
    config.validate()?;
    let data = generate(&config.task)?;
    let configs: Vec<ExperimentConfig> = layer_counts
        .iter()
        .map(|&m| config.with_layers(m))
        .collect();
    Ok(train_all(&configs, &data)?
        .into_iter()
        .map(|t| t.report)
        .collect())
}

/// `count` consecutive training seeds starting at `config.train.seed`.
pub fn seed_range(config: &ExperimentConfig, count: usize) -> Vec<u64> {
    (0..count as u64)
        .map(|i| config.train.seed.wrapping_add(i))
        .collect()
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub stam: Vec<RunReport>,
    pub avg_consensus: Vec<RunReport>,
    pub vanilla_stack: Vec<RunReport>,
}

impl Comparison {
    pub fn all(&self) -> impl Iterator<Item = &RunReport> {
        self.stam
            .iter()
            .chain(&self.avg_consensus)
            .chain(&self.vanilla_stack)
    }
}

/// The configured model against both baselines, over `seeds`, on one dataset.
pub fn compare_baselines(config: &ExperimentConfig, seeds: &[u64]) -> Result<Comparison> {
    config.validate()?;
    let data = generate(&config.task)?;
    let stam = config.with_baseline(None);
    let variants = [
        stam.clone(),
        stam.with_baseline(Some(Baseline::AvgConsensus)),
        stam.with_baseline(Some(Baseline::VanillaStack)),
    ];
    let configs: Vec<ExperimentConfig> = variants
        .iter()
        .flat_map(|v| seeds.iter().map(|&s| v.with_seed(s)))
        .collect();
    let mut reports = train_all(&configs, &data)?.into_iter().map(|t| t.report);
    let mut take = || reports.by_ref().take(seeds.len()).collect::<Vec<_>>();
    Ok(Comparison {
        stam: take(),
        avg_consensus: take(),
        vanilla_stack: take(),
    })
}

/// Median test accuracy of a group of runs.
pub fn median_accuracy(reports: &[RunReport]) -> Option<f64> {
    median(&reports.iter().map(|r| r.test_accuracy).collect::<Vec<_>>())
}

/// Arithmetic used for the loss in the finite-difference side of a check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FdPrecision {
    /// Graph forward pass in f64. Coordinates with gradients below about
    /// `ε·|loss|/h` are not resolvable this way.
    Double,
    /// Independent forward pass in double-double arithmetic.
    #[default]
    DoubleDouble,
}

/// Finite-difference check of the configured model's mean combined loss
/// over the first `samples` training samples, at initialization.
pub fn check_model_gradients(
    config: &ExperimentConfig,
    samples: usize,
    precision: FdPrecision,
) -> Result<GradCheckReport> {
    config.validate()?;
    let mut task = config.task.clone();
    task.train_size = samples.max(1);
    task.test_size = 1;
    let data = generate(&task)?;
    let mut store = ParamStore::new(config.train.seed);
    let model = build_model(config, &mut store)?;
    let batch: Vec<&LabeledSample> = data.train.iter().collect();
    match precision {
        FdPrecision::Double => check_gradients(&store, DEFAULT_STEP, |g, p| {
            batch_loss(&model, g, p, &batch)
        }),
        FdPrecision::DoubleDouble => check_gradients_extended(&model, &store, &batch, DEFAULT_STEP),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::NeedleTaskSpec;

    fn tiny() -> ExperimentConfig {
        let mut c = ExperimentConfig {
            task: NeedleTaskSpec {
                feature_dim: 8,
                train_size: 64,
                test_size: 40,
                ..NeedleTaskSpec::default()
            },
            ..ExperimentConfig::default()
        };
        c.model.layers = 1;
        c.train.epochs = 2;
        c.train.batch_size = 16;
        c
    }

    #[test]
    fn report_shapes_and_ranges() {
        let r = train(&tiny()).unwrap();
        assert_eq!(r.epoch_losses.len(), 2);
        assert_eq!(r.head_accuracies.len(), 2);
        assert_eq!(r.test_accuracy, r.head_accuracies[1]);
        assert!(r.head_accuracies.iter().all(|a| (0.0..=1.0).contains(a)));
        assert!(r
            .signal_mass
            .iter()
            .flatten()
            .all(|m| (0.0..=1.0).contains(m)));
        assert!(r.signal_mass.iter().all(Option::is_some));
        // Accuracies are counts over the test size.
        for a in &r.head_accuracies {
            assert_eq!((a * 40.0).round() / 40.0, *a);
        }
    }

    #[test]
    fn repeat_runs_match() {
        let a = train(&tiny()).unwrap();
        let b = train(&tiny()).unwrap();
        assert!(a.same_results(&b));
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let mut c = tiny();
        c.task.signal_strength = 1e300;
        c.task.noise_std = 0.0;
        match train(&c) {
            Err(StamError::NonFiniteLoss { epoch, batch, .. }) => {
                assert_eq!((epoch, batch), (0, 0))
            }
            other => panic!("expected a non-finite loss, got {other:?}"),
        }
    }

    #[test]
    fn sweep_single_entry_equals_train() {
        let c = tiny();
        let rows = sweep_layers(&c, &[1, 1]).unwrap();
        let direct = train(&c).unwrap();
        assert!(rows[0].same_results(&direct));
        assert!(rows[1].same_results(&direct));
    }

    #[test]
    fn avg_consensus_has_one_stage() {
        let r = run_avg_consensus(&tiny()).unwrap();
        assert_eq!(r.head_accuracies.len(), 1);
        assert_eq!(r.variant, "avg_consensus");
    }
}
