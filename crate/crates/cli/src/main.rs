use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use stam::data::{generate, write_dataset_file, DEFAULT_ORACLE_DRAWS};
use stam::experiment::{
    compare_baselines, export_attention_trace, median, median_accuracy, seed_range, train_all,
    train_on, write_metrics_csv, write_trace_json, Calibration, ExperimentConfig, FdPrecision,
    OutputSpec, RunReport,
};
use stam::gradcheck::DEFAULT_STEP;
use stam::{InitializerKind, StamError};

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_CHECK_FAILED: u8 = 4;

#[derive(Parser)]
#[command(
    name = "stam",
    version,
    about = "Stacked temporal attention on synthetic needle-clip tasks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON experiment config; defaults apply for missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training seed (parameter init and shuffling).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config's output paths.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of stacked global attention layers.
    #[arg(long)]
    layers: Option<usize>,
    /// Initializer: avg, max, bigru, tconv or selfatt.
    #[arg(long)]
    init: Option<InitializerKind>,
    /// Clips per sample.
    #[arg(long)]
    clips: Option<usize>,
    /// Per-stage loss weights, e.g. `1,1,1`.
    #[arg(long, value_delimiter = ',')]
    lambda: Option<Vec<f64>>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write metrics.csv and trace.json.
    Train {
        #[command(flatten)]
        common: Common,
        /// Test samples to include in the trace.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3")]
        samples: Vec<usize>,
    },
    /// Train one model per layer count on shared data.
    SweepLayers {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        counts: Vec<usize>,
        /// Seeds per layer count, starting at the configured seed.
        #[arg(long, default_value_t = 3)]
        seeds: usize,
    },
    /// The configured model against average consensus and a vanilla stack.
    CompareBaselines {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
    },
    /// Train, then export per-layer attention for chosen test samples.
    ExportTrace {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', required = true)]
        samples: Vec<usize>,
    },
    /// Finite-difference check of the configured model's gradients.
    CheckGrads {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Evaluate the finite differences in plain f64.
        #[arg(long)]
        plain: bool,
    },
    /// Write the task's train/test splits to dataset.bin.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Monte-Carlo Bayes bounds for the task, written to calibration.json.
    Oracle {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = DEFAULT_ORACLE_DRAWS)]
        draws: usize,
    },
}

fn load_config(common: &Common) -> stam::Result<ExperimentConfig> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.train.seed = seed;
    }
    if let Some(layers) = common.layers {
        config.model.layers = layers;
    }
    if let Some(init) = common.init {
        config.model.initializer = init;
    }
    if let Some(clips) = common.clips {
        config.task.clip_count = clips;
    }
    if let Some(lambda) = &common.lambda {
        config.train.lambdas = Some(lambda.clone());
    }
    if let Some(out) = &common.out {
        config.output = OutputSpec::in_dir(out);
    }
    config.validate()?;
    Ok(config)
}

fn out_dir(common: &Common, config: &ExperimentConfig) -> PathBuf {
    match &common.out {
        Some(dir) => dir.clone(),
        None => config
            .output
            .metrics_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default(),
    }
}

fn print_reports(reports: &[RunReport]) {
    println!("{:<22} {:>6} {:>9}  heads", "variant", "seed", "accuracy");
    for r in reports {
        let heads: Vec<String> = r
            .head_accuracies
            .iter()
            .map(|a| format!("{a:.4}"))
            .collect();
        println!(
            "{:<22} {:>6} {:>9.4}  {}",
            r.variant,
            r.seed,
            r.test_accuracy,
            heads.join(" ")
        );
    }
}

fn print_median(label: &str, reports: &[RunReport]) {
    if let Some(acc) = median_accuracy(reports) {
        let mass: Vec<f64> = reports
            .iter()
            .filter_map(|r| r.signal_mass.last().copied().flatten())
            .collect();
        match median(&mass) {
            Some(m) => {
                println!("{label:<22} median accuracy {acc:.4}, final-layer signal mass {m:.4}")
            }
            None => println!("{label:<22} median accuracy {acc:.4}"),
        }
    }
}

/// Outcome of a subcommand that ran to completion.
enum Outcome {
    Done,
    CheckFailed,
}

fn run(command: Command) -> stam::Result<Outcome> {
    match command {
        Command::Train { common, samples } | Command::ExportTrace { common, samples } => {
            let config = load_config(&common)?;
            let data = generate(&config.task)?;
            let trained = train_on(&config, &data)?;
            let trace = export_attention_trace(&trained, &data.test, &samples)?;
            write_metrics_csv(
                &config.output.metrics_path,
                std::slice::from_ref(&trained.report),
            )?;
            write_trace_json(&config.output.trace_path, &trace)?;
            print_reports(std::slice::from_ref(&trained.report));
            Ok(Outcome::Done)
        }
        Command::SweepLayers {
            common,
            counts,
            seeds,
        } => {
            let config = load_config(&common)?;
            let data = generate(&config.task)?;
            let configs: Vec<ExperimentConfig> = counts
                .iter()
                .flat_map(|&m| {
                    let c = config.with_layers(m);
                    seed_range(&config, seeds)
                        .into_iter()
                        .map(move |s| c.with_seed(s))
                })
                .collect();
            let reports: Vec<RunReport> = train_all(&configs, &data)?
                .into_iter()
                .map(|t| t.report)
                .collect();
            write_metrics_csv(&config.output.metrics_path, &reports)?;
            print_reports(&reports);
            for (m, group) in counts.iter().zip(reports.chunks(seeds.max(1))) {
                print_median(&format!("M={m}"), group);
            }
            Ok(Outcome::Done)
        }
        Command::CompareBaselines { common, seeds } => {
            let config = load_config(&common)?;
            let cmp = compare_baselines(&config, &seed_range(&config, seeds))?;
            let reports: Vec<RunReport> = cmp.all().cloned().collect();
            write_metrics_csv(&config.output.metrics_path, &reports)?;
            print_reports(&reports);
            print_median(&config.variant(), &cmp.stam);
            print_median("avg_consensus", &cmp.avg_consensus);
            print_median("vanilla_stack", &cmp.vanilla_stack);
            Ok(Outcome::Done)
        }
        Command::CheckGrads {
            common,
            batch,
            tolerance,
            plain,
        } => {
            let config = load_config(&common)?;
            let precision = if plain {
                FdPrecision::Double
            } else {
                FdPrecision::DoubleDouble
            };
            let report = stam::experiment::check_model_gradients(&config, batch, precision)?;
            println!("loss {:.12}, step {DEFAULT_STEP:e}", report.loss);
            for (name, p) in &report.params {
                println!(
                    "{name:<20} max rel error {:.3e} at {} (analytic {:.6e}, numeric {:.6e})",
                    p.max_rel_error, p.worst_index, p.analytic, p.numeric
                );
            }
            let ok = report.passes(tolerance);
            println!(
                "{}: max relative error {:.3e}, tolerance {tolerance:e}",
                if ok { "PASS" } else { "FAIL" },
                report.max_rel_error()
            );
            Ok(if ok {
                Outcome::Done
            } else {
                Outcome::CheckFailed
            })
        }
        Command::GenData { common } => {
            let config = load_config(&common)?;
            let data = generate(&config.task)?;
            let path = out_dir(&common, &config).join("dataset.bin");
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir)?;
            }
            write_dataset_file(&path, &data)?;
            println!(
                "wrote {} ({} train, {} test samples)",
                path.display(),
                data.train.len(),
                data.test.len()
            );
            Ok(Outcome::Done)
        }
        Command::Oracle { common, draws } => {
            let config = load_config(&common)?;
            let cal = Calibration::compute(&config.task, draws)?;
            let path = out_dir(&common, &config).join("calibration.json");
            cal.write(&path)?;
            println!(
                "signal oracle {:.4} ± {:.4}, average oracle {:.4} ± {:.4}, gap {:.4}",
                cal.signal.accuracy,
                cal.signal.std_error,
                cal.average.accuracy,
                cal.average.std_error,
                cal.gap
            );
            Ok(Outcome::Done)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::CheckFailed) => ExitCode::from(EXIT_CHECK_FAILED),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                StamError::Config(_) => EXIT_CONFIG,
                StamError::NonFiniteLoss { .. } | StamError::NonFinite { .. } => EXIT_NUMERIC,
                _ => 1,
            })
        }
    }
}
