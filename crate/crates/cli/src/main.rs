//! `conjtta` command-line driver. Files in the output directory are the
//! contract; stdout is a short summary whose numbers all appear in
//! `report.json`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use conjtta::datagen::{load_csv, save_csv, Dataset, DatasetRole, GaussianShiftSpec, ShiftBenchmark};
use conjtta::experiments::{run_meta_experiment, run_toy, MetaExperimentConfig, ToyConfig};
use conjtta::losses::{LossKind, LossParams, LossSpec};
use conjtta::meta::{slice_csv, slice_export, MetaLossNet};
use conjtta::models::{train_source, Architecture, BnStats, Model, TrainConfig};
use conjtta::tta::{adapt_online, grid_search, stream_from_dataset, unadapted_error, Batch, Method, TTAConfig};
use conjtta::Error;

/// Environment variable naming the default output directory.
const OUT_DIR_ENV: &str = "CONJTTA_OUT_DIR";
const DEFAULT_OUT_DIR: &str = "conjtta-out";

#[derive(Parser, Debug)]
#[command(name = "conjtta", version, about = "Test-time adaptation with conjugate pseudo-labels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config and the environment).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug, Clone)]
enum Command {
    /// Write source-train, source-val and test-stream CSVs.
    GenData,
    /// Train the source model and save it as model.json.
    TrainSource,
    /// Run online adaptation over the test stream.
    Adapt {
        /// Saved source model; trained from the config when absent.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Grid search over learning rate and temperature on validation shifts.
    Grid {
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Meta-learn an adaptation loss and export its slice.
    MetaTrain,
    /// Export a 1-D slice of a conjugate loss or of a saved meta loss net.
    Slice {
        #[arg(long)]
        net: Option<PathBuf>,
    },
    /// Run the invariant suite; exit 0 iff every check passes.
    Check,
    /// Exponential-loss toy comparison over three shift levels.
    ReproduceA1 {
        /// Comma-separated seed list.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainSource => "train-source",
            Command::Adapt { .. } => "adapt",
            Command::Grid { .. } => "grid",
            Command::MetaTrain => "meta-train",
            Command::Slice { .. } => "slice",
            Command::Check => "check",
            Command::ReproduceA1 { .. } => "reproduce-a1",
        }
    }
}

// ---- configuration ----

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DataConfig {
    #[serde(default)]
    shift: GaussianShiftSpec,
    #[serde(default = "d_n_train")]
    n_train_per_class: usize,
    #[serde(default = "d_n_val")]
    n_val_per_class: usize,
    #[serde(default = "d_n_test")]
    n_test_per_class: usize,
    /// Shift of the adaptation test stream.
    #[serde(default = "d_test_lambda")]
    test_lambda: f64,
    /// Shifts of the grid-search validation streams.
    #[serde(default = "d_val_lambdas")]
    val_lambdas: Vec<f64>,
    #[serde(default)]
    train_csv: Option<PathBuf>,
    #[serde(default)]
    test_csv: Option<PathBuf>,
}

fn d_n_train() -> usize {
    500
}
fn d_n_val() -> usize {
    500
}
fn d_n_test() -> usize {
    1000
}
fn d_test_lambda() -> f64 {
    0.7
}
fn d_val_lambdas() -> Vec<f64> {
    vec![0.6, 0.65]
}

impl Default for DataConfig {
    fn default() -> Self {
        serde_json::from_value(json!({})).expect("defaults")
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LossConfig {
    #[serde(default = "d_loss_kind")]
    kind: LossKind,
    #[serde(default)]
    params: LossParams,
    /// Ignored by the exponential loss, which has one output.
    #[serde(default = "d_classes")]
    num_classes: usize,
}

fn d_loss_kind() -> LossKind {
    LossKind::Exponential
}
fn d_classes() -> usize {
    2
}

impl Default for LossConfig {
    fn default() -> Self {
        serde_json::from_value(json!({})).expect("defaults")
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridConfig {
    #[serde(default = "d_grid_lr")]
    lr: Vec<f64>,
    #[serde(default = "d_grid_t")]
    temperature: Vec<f64>,
}

fn d_grid_lr() -> Vec<f64> {
    vec![1e-3, 1e-2, 1e-1]
}
fn d_grid_t() -> Vec<f64> {
    vec![1.0, 2.0, 5.0]
}

impl Default for GridConfig {
    fn default() -> Self {
        serde_json::from_value(json!({})).expect("defaults")
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetaSection {
    #[serde(default = "d_meta_source")]
    source_loss: LossKind,
    #[serde(default)]
    experiment: MetaExperimentConfig,
}

fn d_meta_source() -> LossKind {
    LossKind::CrossEntropy
}

impl Default for MetaSection {
    fn default() -> Self {
        serde_json::from_value(json!({})).expect("defaults")
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SliceConfig {
    /// Empty means the origin of the sliced loss's logit space.
    #[serde(default)]
    base: Vec<f64>,
    #[serde(default)]
    dim: usize,
    #[serde(default = "d_slice_range")]
    range: (f64, f64),
    #[serde(default = "d_slice_steps")]
    steps: usize,
}

fn d_slice_range() -> (f64, f64) {
    (-3.0, 3.0)
}
fn d_slice_steps() -> usize {
    41
}

impl Default for SliceConfig {
    fn default() -> Self {
        serde_json::from_value(json!({})).expect("defaults")
    }
}

/// Full run configuration. The top-level `seed` is copied into every
/// component seed before the run; the report echoes the effective values.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    output_dir: Option<PathBuf>,
    #[serde(default)]
    data: DataConfig,
    /// Defaults to a linear model sized from the data and loss.
    #[serde(default)]
    model: Option<Architecture>,
    #[serde(default)]
    loss: LossConfig,
    #[serde(default = "d_train")]
    train: TrainConfig,
    #[serde(default = "d_tta")]
    tta: TTAConfig,
    #[serde(default)]
    grid: GridConfig,
    #[serde(default)]
    meta: MetaSection,
    #[serde(default)]
    slice: SliceConfig,
    #[serde(default)]
    toy: ToyConfig,
}

fn d_train() -> TrainConfig {
    ToyConfig::default().train
}
fn d_tta() -> TTAConfig {
    TTAConfig::new(Method::ConjugatePl, 0.1, 1.0)
}

impl RunConfig {
    fn finalize(&mut self, seed: Option<u64>) -> Result<(), CliError> {
        if let Some(s) = seed {
            self.seed = s;
        }
        let s = self.seed;
        self.data.shift.seed = s;
        self.train.seed = s;
        self.tta.seed = s;
        self.toy.train.seed = s;
        self.tta.fill_method_defaults();
        self.data.shift.validate()?;
        self.tta.validate()?;
        if self.model.is_none() {
            self.model = Some(Architecture::Linear {
                input_dim: self.data.shift.dim,
                outputs: self.spec()?.output_dim(),
            });
        }
        Ok(())
    }

    fn spec(&self) -> Result<LossSpec<f64>, CliError> {
        Ok(LossSpec::new(self.loss.kind, self.loss.params, self.loss.num_classes)?)
    }

    fn architecture(&self) -> &Architecture {
        self.model.as_ref().expect("finalized")
    }
}

// ---- errors and exit codes ----

#[derive(Debug)]
enum CliError {
    Config(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(Error::Json(e))
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) => match e {
                Error::Config(_) | Error::Dimension(_) | Error::Contract(_) | Error::Domain(_) => 2,
                Error::Numerical(_) | Error::Divergence { .. } => 3,
                Error::Io(_) | Error::Parse { .. } | Error::Json(_) => 1,
            },
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Config(m) => format!("configuration error: {m}"),
            CliError::Core(e) => e.to_string(),
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p)?,
        None => "{}".to_string(),
    };
    serde_json::from_str(&text).map_err(|e| CliError::Config(e.to_string()))
}

// ---- run context ----

#[derive(Serialize)]
struct RunReport<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    config: &'a RunConfig,
    wall_clock_seconds: f64,
    results: Value,
    files: Vec<String>,
}

struct Run {
    out: PathBuf,
    files: Vec<String>,
}

impl Run {
    fn write(&mut self, name: &str, contents: &str) -> Result<(), CliError> {
        let path = self.out.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, contents)?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn dataset(&mut self, name: &str, data: &Dataset) -> Result<(), CliError> {
        save_csv(&self.out.join(name), data)?;
        self.files.push(name.to_string());
        Ok(())
    }
}

fn benchmark(cfg: &RunConfig) -> Result<ShiftBenchmark, CliError> {
    Ok(ShiftBenchmark::new(&cfg.data.shift)?)
}

fn train_set(cfg: &RunConfig, bench: &ShiftBenchmark) -> Result<Dataset, CliError> {
    Ok(match &cfg.data.train_csv {
        Some(p) => load_csv(p, DatasetRole::SourceTrain)?,
        None => bench.source_train(cfg.data.n_train_per_class)?,
    })
}

fn test_set(cfg: &RunConfig, bench: &ShiftBenchmark) -> Result<Dataset, CliError> {
    Ok(match &cfg.data.test_csv {
        Some(p) => load_csv(p, DatasetRole::TestStream)?,
        None => bench.test_stream(cfg.data.test_lambda, cfg.data.n_test_per_class, 0)?,
    })
}

fn source_model(cfg: &RunConfig, bench: &ShiftBenchmark, saved: Option<&Path>) -> Result<Model<f64>, CliError> {
    if let Some(p) = saved {
        return Ok(Model::load(p)?);
    }
    let train = train_set(cfg, bench)?;
    let init = Model::from_architecture(cfg.architecture(), cfg.seed);
    let (m, _) = train_source(&init, &train.inputs, &train.classes()?, &cfg.spec()?, &cfg.train)?;
    Ok(m)
}

fn execute(command: &Command, cfg: &RunConfig, run: &mut Run) -> Result<Value, CliError> {
    match command {
        Command::GenData => {
            let bench = benchmark(cfg)?;
            let train = bench.source_train(cfg.data.n_train_per_class)?;
            let val = bench.source_val(cfg.data.n_val_per_class)?;
            let test = bench.test_stream(cfg.data.test_lambda, cfg.data.n_test_per_class, 0)?;
            run.dataset("source_train.csv", &train)?;
            run.dataset("source_val.csv", &val)?;
            run.dataset("test_stream.csv", &test)?;
            println!("wrote {} source-train, {} source-val, {} test rows", train.len(), val.len(), test.len());
            Ok(json!({ "source_train_rows": train.len(), "source_val_rows": val.len(), "test_rows": test.len() }))
        }
        Command::TrainSource => {
            let bench = benchmark(cfg)?;
            let train = train_set(cfg, &bench)?;
            let spec = cfg.spec()?;
            let init = Model::from_architecture(cfg.architecture(), cfg.seed);
            let (model, history) = train_source(&init, &train.inputs, &train.classes()?, &spec, &cfg.train)?;
            let val = bench.source_val(cfg.data.n_val_per_class)?;
            let source_accuracy = 1.0 - model.error_rate(&val.inputs, &val.classes()?, &spec, BnStats::UseBatch)?;
            let stream = stream_from_dataset::<f64>(&test_set(cfg, &bench)?, cfg.tta.batch_size)?;
            let test_error = unadapted_error(&model, &stream, &spec)?;
            run.write("model.json", &model.to_json()?)?;
            println!("source accuracy {source_accuracy}, unadapted test error {test_error}");
            Ok(json!({
                "source_accuracy": source_accuracy,
                "test_error": test_error,
                "epoch_loss": history.epoch_loss,
                "model_checksum": model.checksum(),
            }))
        }
        Command::Adapt { model } => {
            let bench = benchmark(cfg)?;
            let spec = cfg.spec()?;
            let source = source_model(cfg, &bench, model.as_deref())?;
            let stream = stream_from_dataset::<f64>(&test_set(cfg, &bench)?, cfg.tta.batch_size)?;
            let (adapted, report) = adapt_online(&source, &stream, &spec, &cfg.tta)?;
            run.write("adapted_model.json", &adapted.to_json()?)?;
            run.write("trajectory.csv", &report.trajectory_csv())?;
            println!(
                "{}: mean online error {} over {} batches",
                cfg.tta.method,
                report.mean_online_error,
                report.per_batch.len()
            );
            Ok(serde_json::to_value(&report)?)
        }
        Command::Grid { model } => {
            let bench = benchmark(cfg)?;
            let spec = cfg.spec()?;
            let source = source_model(cfg, &bench, model.as_deref())?;
            let streams = cfg
                .data
                .val_lambdas
                .iter()
                .enumerate()
                .map(|(i, &l)| {
                    let d = bench.test_stream(l, cfg.data.n_val_per_class, 1000 + i as u64)?;
                    stream_from_dataset::<f64>(&d, cfg.tta.batch_size)
                })
                .collect::<conjtta::Result<Vec<Vec<Batch<f64>>>>>()?;
            let result = grid_search(&source, &spec, &streams, &cfg.grid.lr, &cfg.grid.temperature, &cfg.tta)?;
            let mut csv = String::from("lr,temperature,error,diverged\n");
            for c in &result.table {
                csv.push_str(&format!("{:?},{:?},{:?},{}\n", c.lr, c.temperature, c.error, c.diverged));
            }
            run.write("grid.csv", &csv)?;
            println!(
                "best lr {} T {} (validation error {})",
                result.best_lr, result.best_temperature, result.best_error
            );
            Ok(serde_json::to_value(&result)?)
        }
        Command::MetaTrain => {
            let exp = &cfg.meta.experiment;
            let r = run_meta_experiment(exp, cfg.seed, cfg.meta.source_loss, exp.meta.task_loss)?;
            let mut traj = String::from("iteration,outer_loss\n");
            for (i, v) in r.trajectory.iter().enumerate() {
                traj.push_str(&format!("{i},{v:?}\n"));
            }
            run.write("meta_trajectory.csv", &traj)?;
            run.write("meta_slice.csv", &slice_csv(&r.slice))?;
            println!(
                "held-out task loss {} -> {}; template residuals: entropy {} quadratic {}",
                r.heldout_before, r.heldout_after, r.entropy_fit.residual, r.quadratic_fit.residual
            );
            Ok(serde_json::to_value(&r)?)
        }
        Command::Slice { net } => {
            let s = &cfg.slice;
            let origin = |k: usize| if s.base.is_empty() { vec![0.0; k] } else { s.base.clone() };
            let (source, curve) = match net {
                Some(p) => {
                    let n = MetaLossNet::load(p)?;
                    let base = origin(cfg.loss.num_classes);
                    let curve = slice_export(|h| n.eval(h), &base, s.dim, s.range, s.steps)?;
                    (p.display().to_string(), curve)
                }
                None => {
                    let spec = cfg.spec()?;
                    let base = origin(spec.output_dim());
                    let curve = slice_export(|h| spec.conjugate_loss(h), &base, s.dim, s.range, s.steps)?;
                    (format!("conjugate {}", cfg.loss.kind), curve)
                }
            };
            run.write("slice.csv", &slice_csv(&curve))?;
            println!("slice of {source}: {} points", curve.len());
            Ok(json!({ "source": source, "points": curve.len(), "curve": curve }))
        }
        Command::Check => {
            let outcomes = conjtta::checks::run_all();
            for o in &outcomes {
                println!("{} {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
            }
            Ok(serde_json::to_value(&outcomes)?)
        }
        Command::ReproduceA1 { seeds } => {
            let lambdas = [0.6, 0.65, 0.7];
            let methods = [Method::None, Method::Entropy, Method::HardPl, Method::ConjugatePl];
            let res = run_toy(&cfg.toy, seeds, &lambdas, &methods)?;
            run.write("a1_summary.csv", &res.summary_csv())?;
            for &l in &lambdas {
                for &m in &methods {
                    run.write(&format!("curves/lambda_{l}_{m}.csv"), &res.curve_csv(l, m))?;
                }
            }
            for row in &res.summary {
                println!("λ={} {}: {}", row.lambda, row.method, row.mean_accuracy);
            }
            Ok(serde_json::to_value(&res)?)
        }
    }
}

fn run_cli(cli: Cli) -> Result<bool, CliError> {
    let started = Instant::now();
    let mut cfg = load_config(cli.config.as_deref())?;
    cfg.finalize(cli.seed)?;
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
    std::fs::create_dir_all(&out)?;
    let mut run = Run { out, files: Vec::new() };
    let results = execute(&cli.command, &cfg, &mut run)?;
    let all_passed = match &cli.command {
        Command::Check => results
            .as_array()
            .map(|a| a.iter().all(|o| o["passed"] == Value::Bool(true)))
            .unwrap_or(false),
        _ => true,
    };
    run.files.push("report.json".into());
    let report = RunReport {
        tool: "conjtta",
        version: env!("CARGO_PKG_VERSION"),
        command: cli.command.name(),
        config: &cfg,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        results,
        files: run.files.clone(),
    };
    std::fs::write(run.out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(all_passed)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run_cli(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("{}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
