use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mta_core::datagen::{generate, SynthSpec};
use mta_core::ingest::{self, LoadOptions};
use mta_core::pipeline::{self, AttributionJob, BenchInstances, BenchSpec};
use mta_core::response::{
    load_checkpoint, save_checkpoint, train, AnyModel, BiRecurrentModel, InitSpec, LogisticModel,
    ModelShape, RecurrentShape, TrainConfig, TrainLog,
};
use mta_core::{ResponseModel, ShapleyConfig, Strategy};

#[derive(Debug, Parser)]
#[command(name = "mta", version, about = "Shapley-value multi-touch attribution")]
struct Cli {
    /// More log output (repeat for more).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Only log errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its ground-truth model.
    Synth(SynthArgs),
    /// Fit a response model to a dataset.
    Train(TrainArgs),
    /// Attribute one day's orders to ad positions.
    Attribute(AttributeArgs),
    /// Compare exact, sampled and mixed Shapley computation.
    Bench(BenchArgs),
    /// Validate an attribution run and write plot data.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 10_000)]
    users: usize,
    #[arg(long, default_value_t = 3)]
    brands: u32,
    #[arg(long, default_value_t = 10)]
    positions: u32,
    #[arg(long, default_value_t = 15)]
    days: u32,
    #[arg(long, default_value_t = 3)]
    features: usize,
    #[arg(long, default_value_t = 0.7)]
    decay: f64,
    #[arg(long, default_value_t = 0.03)]
    exposure_rate: f64,
    #[arg(long, default_value_t = 0.0)]
    targeting_bias: f64,
    #[arg(long, default_value_t = -4.0, allow_hyphen_values = true)]
    base_logit: f64,
    #[arg(long, default_value_t = 0.4, allow_hyphen_values = true)]
    own_weight_mean: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    workers: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModelKind {
    Birnn,
    Logistic,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = ModelKind::Birnn)]
    kind: ModelKind,
    /// LSTM hidden units per direction.
    #[arg(long, default_value_t = 32)]
    hidden: usize,
    /// Width of the user-feature layer.
    #[arg(long, default_value_t = 8)]
    feature_hidden: usize,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-2)]
    learning_rate: f64,
    /// Dropout keep probability.
    #[arg(long, default_value_t = 0.75)]
    keep_prob: f64,
    #[arg(long, default_value_t = 50)]
    eval_every: usize,
    #[arg(long, default_value_t = 10)]
    patience: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    strict: bool,
    /// Output directory for `model.json` and `train_log.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ShapleyArgs {
    /// Largest exposure set handled exactly by the mixed method.
    #[arg(long, default_value_t = 12)]
    exact_cutoff: usize,
    /// Permutations per order for sampled credits.
    #[arg(long, default_value_t = 1000)]
    mc_samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    workers: u64,
}

impl ShapleyArgs {
    fn config(&self, strategy: Strategy) -> ShapleyConfig {
        ShapleyConfig {
            exact_cutoff: self.exact_cutoff,
            mc_permutations: self.mc_samples,
            seed: self.seed,
            strategy,
            ..Default::default()
        }
    }
}

#[derive(Debug, Args)]
struct AttributeArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Attribution day (0-based); defaults to the last day of the window.
    #[arg(long)]
    day: Option<u32>,
    #[command(flatten)]
    shapley: ShapleyArgs,
    #[arg(long, value_enum, default_value_t = MethodArg::Mixed)]
    method: MethodArg,
    #[arg(long)]
    strict: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Exact,
    Mc,
    Mixed,
}

impl From<MethodArg> for Strategy {
    fn from(m: MethodArg) -> Strategy {
        match m {
            MethodArg::Exact => Strategy::Exact,
            MethodArg::Mc => Strategy::MonteCarlo,
            MethodArg::Mixed => Strategy::Mixed,
        }
    }
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Methods to time; exact enumeration is always run as the reference.
    #[arg(long, value_enum, num_args = 1.., default_values_t = [MethodArg::Exact, MethodArg::Mc, MethodArg::Mixed])]
    method: Vec<MethodArg>,
    /// Checkpoint to benchmark; a synthetic ground truth is used otherwise.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 6000)]
    orders: usize,
    /// Fraction of orders with exposure sets above the cutoff.
    #[arg(long, default_value_t = 0.4)]
    large_fraction: f64,
    #[arg(long, default_value_t = 1)]
    min_small: usize,
    #[arg(long, default_value_t = 10)]
    max_small: usize,
    #[arg(long, default_value_t = 13)]
    min_large: usize,
    #[arg(long, default_value_t = 17)]
    max_large: usize,
    #[arg(long, default_value_t = 5)]
    repetitions: usize,
    #[arg(long, default_value_t = 3)]
    brands: u32,
    #[arg(long, default_value_t = 10)]
    positions: u32,
    #[arg(long, default_value_t = 15)]
    days: u32,
    #[command(flatten)]
    shapley: ShapleyArgs,
    /// Directory for `bench.json`; printed only when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Output directory of an `attribute` run.
    #[arg(long)]
    run: PathBuf,
    /// Dataset directory, for the last-click comparison.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Where plot files go; defaults to the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
struct Failure(String);

impl<E: std::error::Error> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure(e.to_string())
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Failure(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure(format!("{}: {e}", dir.display())))
}

fn synth(a: &SynthArgs) -> Result<(), Failure> {
    let spec = SynthSpec {
        users: a.users,
        brands: a.brands,
        positions: a.positions,
        days: a.days,
        features: a.features,
        decay: a.decay,
        exposure_rate: a.exposure_rate,
        targeting_bias: a.targeting_bias,
        base_logit: a.base_logit,
        own_weight_mean: a.own_weight_mean,
        seed: a.seed,
        ..Default::default()
    };
    let syn = generate(&spec, a.workers as usize)?;
    ingest::write_dataset(&syn.dataset, &a.out)?;
    save_checkpoint(
        &AnyModel::GroundTruth(syn.truth),
        &a.out.join("ground_truth.json"),
    )?;
    write_json(&a.out.join("synth_spec.json"), &spec)?;
    log::info!(
        "wrote {} users and {} orders to {}",
        syn.dataset.users.len(),
        syn.dataset.orders.len(),
        a.out.display()
    );
    Ok(())
}

fn train_cmd(a: &TrainArgs) -> Result<(), Failure> {
    let data = ingest::load(&a.data, LoadOptions { strict: a.strict })?;
    let shape = ModelShape::new(data.dims, data.feature_len);
    let labels = data.label_matrix();
    let examples = data.examples(&labels);
    let config = TrainConfig {
        learning_rate: a.learning_rate,
        batch_size: a.batch_size,
        max_steps: a.steps,
        keep_prob: a.keep_prob,
        eval_every: a.eval_every,
        patience: a.patience,
        seed: a.seed,
        ..Default::default()
    };
    let (model, log): (AnyModel, TrainLog) = match a.kind {
        ModelKind::Logistic => {
            let (m, log) = train(LogisticModel::new(shape), &examples, &data.prices, &config)?;
            (AnyModel::Logistic(m), log)
        }
        ModelKind::Birnn => {
            let init = BiRecurrentModel::new(
                shape,
                RecurrentShape {
                    hidden: a.hidden,
                    feature_hidden: a.feature_hidden,
                },
                InitSpec {
                    seed: a.seed,
                    ..Default::default()
                },
            );
            let (m, log) = train(init, &examples, &data.prices, &config)?;
            (AnyModel::BiRecurrent(m), log)
        }
    };
    create_dir(&a.out)?;
    save_checkpoint(&model, &a.out.join("model.json"))?;
    write_json(&a.out.join("train_log.json"), &log)?;
    log::info!(
        "trained {} steps, best validation loss {:?} at step {}",
        log.steps.len(),
        log.best_validation_loss,
        log.best_step
    );
    Ok(())
}

fn attribute(a: &AttributeArgs) -> Result<(), Failure> {
    let model = load_checkpoint(&a.model)?;
    let data = ingest::load(&a.data, LoadOptions { strict: a.strict })?;
    let run = pipeline::run_attribution(&AttributionJob {
        dataset: &data,
        model: &model,
        shapley: a.shapley.config(a.method.into()),
        workers: a.shapley.workers as usize,
        day: a.day,
    })?;
    pipeline::write_run(&run, &a.out)?;
    let s = &run.summary;
    log::info!(
        "day {}: {} orders ({} exact, {} sampled, {} without exposure, {} skipped)",
        s.day,
        s.orders,
        s.exact_orders,
        s.approximate_orders,
        s.no_exposure,
        s.skipped
    );
    Ok(())
}

fn bench(a: &BenchArgs) -> Result<(), Failure> {
    let (model, dims, features, prices) = match &a.model {
        Some(path) => {
            let model = load_checkpoint(path)?;
            let shape = model.shape();
            let dims = shape.dims();
            let prices = mta_core::PriceSeries::constant(dims.brands, dims.days, 1.0);
            (model, dims, shape.features as usize, prices)
        }
        None => {
            let syn = generate(
                &SynthSpec {
                    users: 1,
                    brands: a.brands,
                    positions: a.positions,
                    days: a.days,
                    seed: a.shapley.seed,
                    ..Default::default()
                },
                1,
            )?;
            let features = syn.dataset.feature_len;
            (
                AnyModel::GroundTruth(syn.truth),
                syn.dataset.dims,
                features,
                syn.dataset.prices,
            )
        }
    };
    let spec = BenchSpec {
        orders: a.orders,
        large_fraction: a.large_fraction,
        small: (a.min_small, a.max_small),
        large: (a.min_large, a.max_large),
        repetitions: a.repetitions,
        seed: a.shapley.seed,
    };
    let instances = BenchInstances::generate(&spec, dims, features, prices)?;
    let mut methods: Vec<Strategy> = a.method.iter().map(|&m| m.into()).collect();
    methods.dedup();
    let base = a.shapley.config(Strategy::Mixed);
    let rows = pipeline::run_bench(
        &model,
        &instances,
        &base,
        &methods,
        a.repetitions,
        a.shapley.workers as usize,
    )?;
    println!("method,orders_per_minute,err,total_err");
    for r in &rows {
        println!(
            "{},{:.2},{},{}",
            r.method, r.orders_per_minute, r.err, r.total_err
        );
    }
    if let Some(out) = &a.out {
        create_dir(out)?;
        let result = serde_json::json!({
            "spec": spec,
            "shapley": base,
            "large_fraction_observed": instances.large_fraction(base.exact_cutoff),
            "rows": rows,
        });
        write_json(&out.join("bench.json"), &result)?;
    }
    Ok(())
}

fn report(a: &ReportArgs) -> Result<(), Failure> {
    let stored = pipeline::read_run(&a.run)?;
    let check = pipeline::validate_run(&stored)
        .map_err(|e| Failure(format!("{}: {e}", a.run.display())))?;
    if check.max_share_error > 1e-9 || check.conservation_error > 1e-6 {
        return Err(Failure(format!(
            "{}: invariants violated (share error {:e}, conservation error {:e})",
            a.run.display(),
            check.max_share_error,
            check.conservation_error
        )));
    }
    let clicks = match &a.data {
        Some(dir) => ingest::load(dir, LoadOptions::default())?.clicks,
        None => None,
    };
    let plots = pipeline::plot_data(&stored, clicks.as_deref());
    let out = a.out.as_deref().unwrap_or(&a.run);
    pipeline::write_plot_data(&plots, out)?;
    println!(
        "ok: {} rows, {} credited brands, share error {:e}, conservation error {:e}",
        stored.rows.len(),
        check.credited_brands,
        check.max_share_error,
        check.conservation_error
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = if cli.quiet {
        log::LevelFilter::Error
    } else {
        match cli.verbose {
            0 => log::LevelFilter::Info,
            1 => log::LevelFilter::Debug,
            _ => log::LevelFilter::Trace,
        }
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_env("MTA_LOG")
        .target(env_logger::Target::Stderr)
        .init();
    let result = match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Attribute(a) => attribute(a),
        Command::Bench(a) => bench(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
