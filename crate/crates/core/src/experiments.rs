//! End-to-end experiment pipelines on the Gaussian-shift benchmark: the
//! exponential-loss adaptation comparison and the learnt-loss experiment.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{GaussianShiftSpec, ShiftBenchmark};
use crate::error::Result;
use crate::losses::{LossKind, LossParams, LossSpec};
use crate::meta::{
    fit_quadratic, fit_scaled_entropy, meta_train, outer_objective, slice_export, FittedEntropyParams, FittedQuadratic,
    MetaConfig, MetaLossNet, ShiftPair,
};
use crate::models::{train_source, MaskMode, Model, TrainConfig};
use crate::tta::{adapt_online, stream_from_dataset, unadapted_error, Batch, Method, TTAConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyConfig {
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_n_train")]
    pub n_train_per_class: usize,
    #[serde(default = "default_n_test")]
    pub n_test_per_class: usize,
    #[serde(default = "default_train")]
    pub train: TrainConfig,
    #[serde(default = "default_tta_lr")]
    pub tta_lr: f64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_mask")]
    pub mask: MaskMode,
}

fn default_dim() -> usize {
    100
}
fn default_n_train() -> usize {
    500
}
fn default_n_test() -> usize {
    1000
}
fn default_train() -> TrainConfig {
    TrainConfig {
        lr: 0.01,
        epochs: 50,
        batch_size: 64,
        momentum: 0.0,
        seed: 0,
    }
}
fn default_tta_lr() -> f64 {
    0.1
}
fn default_temperature() -> f64 {
    1.0
}
fn default_batch() -> usize {
    200
}
fn default_mask() -> MaskMode {
    MaskMode::All
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            dim: default_dim(),
            n_train_per_class: default_n_train(),
            n_test_per_class: default_n_test(),
            train: default_train(),
            tta_lr: default_tta_lr(),
            temperature: default_temperature(),
            batch_size: default_batch(),
            mask: default_mask(),
        }
    }
}

/// One (seed, λ, method) run: mean online accuracy plus the per-batch
/// accuracy curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyRun {
    pub seed: u64,
    pub lambda: f64,
    pub method: Method,
    pub accuracy: f64,
    pub curve: Vec<f64>,
}

/// 5-seed (or however many) mean per (λ, method).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToySummaryRow {
    pub lambda: f64,
    pub method: Method,
    pub mean_accuracy: f64,
    pub seeds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyResult {
    pub config: ToyConfig,
    pub runs: Vec<ToyRun>,
    pub summary: Vec<ToySummaryRow>,
}

impl ToyResult {
    pub fn mean(&self, lambda: f64, method: Method) -> Option<f64> {
        self.summary
            .iter()
            .find(|r| r.lambda == lambda && r.method == method)
            .map(|r| r.mean_accuracy)
    }

    /// `lambda,method,mean_accuracy,seeds` rows.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("lambda,method,mean_accuracy,seeds\n");
        for r in &self.summary {
            s.push_str(&format!("{},{},{:?},{}\n", r.lambda, r.method, r.mean_accuracy, r.seeds));
        }
        s
    }

    /// `step,seed,accuracy` rows for one cell.
    pub fn curve_csv(&self, lambda: f64, method: Method) -> String {
        let mut s = String::from("step,seed,accuracy\n");
        for r in self.runs.iter().filter(|r| r.lambda == lambda && r.method == method) {
            for (i, a) in r.curve.iter().enumerate() {
                s.push_str(&format!("{i},{},{a:?}\n", r.seed));
            }
        }
        s
    }
}

/// Source model trained with the exponential loss on the seed's source
/// clusters.
pub fn toy_source_model(cfg: &ToyConfig, bench: &ShiftBenchmark) -> Result<Model<f64>> {
    let spec = LossSpec::<f64>::exponential()?;
    let train = bench.source_train(cfg.n_train_per_class)?;
    let tcfg = TrainConfig {
        seed: bench.spec.seed,
        ..cfg.train.clone()
    };
    let (m, _) = train_source(&Model::linear(cfg.dim, 1), &train.inputs, &train.classes()?, &spec, &tcfg)?;
    Ok(m)
}

fn run_seed(cfg: &ToyConfig, seed: u64, lambdas: &[f64], methods: &[Method]) -> Result<Vec<ToyRun>> {
    let spec = LossSpec::<f64>::exponential()?;
    let bench = ShiftBenchmark::new(&GaussianShiftSpec {
        dim: cfg.dim,
        seed,
        ..Default::default()
    })?;
    let model = toy_source_model(cfg, &bench)?;
    let mut out = Vec::new();
    for &lambda in lambdas {
        let test = bench.test_stream(lambda, cfg.n_test_per_class, 0)?;
        let stream = stream_from_dataset::<f64>(&test, cfg.batch_size)?;
        for &method in methods {
            let (accuracy, curve) = if method == Method::None {
                let err = unadapted_error(&model, &stream, &spec)?;
                let curve = stream
                    .iter()
                    .map(|b| unadapted_error(&model, std::slice::from_ref(b), &spec).map(|e| 1.0 - e))
                    .collect::<Result<Vec<_>>>()?;
                (1.0 - err, curve)
            } else {
                let mut tcfg = TTAConfig::new(method, cfg.tta_lr, cfg.temperature).with_mask(cfg.mask);
                tcfg.batch_size = cfg.batch_size;
                tcfg.seed = seed;
                let (_, report) = adapt_online(&model, &stream, &spec, &tcfg)?;
                let curve = report.per_batch.iter().map(|r| 1.0 - r.error).collect();
                (report.mean_online_accuracy(), curve)
            };
            out.push(ToyRun {
                seed,
                lambda,
                method,
                accuracy,
                curve,
            });
        }
    }
    Ok(out)
}

/// Runs every (seed, λ, method) cell; seeds run in parallel, output order is
/// seed-major regardless of scheduling.
pub fn run_toy(cfg: &ToyConfig, seeds: &[u64], lambdas: &[f64], methods: &[Method]) -> Result<ToyResult> {
    if seeds.is_empty() {
        return Err(crate::error::Error::Config("at least one seed is required".into()));
    }
    let per_seed: Vec<Vec<ToyRun>> = seeds
        .par_iter()
        .map(|&s| run_seed(cfg, s, lambdas, methods))
        .collect::<Result<_>>()?;
    let runs: Vec<ToyRun> = per_seed.into_iter().flatten().collect();
    let mut summary = Vec::new();
    for &lambda in lambdas {
        for &method in methods {
            let accs: Vec<f64> = runs
                .iter()
                .filter(|r| r.lambda == lambda && r.method == method)
                .map(|r| r.accuracy)
                .collect();
            summary.push(ToySummaryRow {
                lambda,
                method,
                mean_accuracy: accs.iter().sum::<f64>() / accs.len() as f64,
                seeds: accs.len(),
            });
        }
    }
    Ok(ToyResult {
        config: cfg.clone(),
        runs,
        summary,
    })
}

// ---- learnt-loss experiment ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaExperimentConfig {
    #[serde(default = "default_meta_dim")]
    pub dim: usize,
    #[serde(default = "default_meta_n_train")]
    pub n_train_per_class: usize,
    #[serde(default = "default_meta_train")]
    pub train: TrainConfig,
    #[serde(default = "default_pool")]
    pub pool_per_class: usize,
    #[serde(default = "default_val_lambdas")]
    pub val_lambdas: Vec<f64>,
    #[serde(default = "default_heldout_lambda")]
    pub heldout_lambda: f64,
    #[serde(default = "default_meta_cfg")]
    pub meta: MetaConfig,
    #[serde(default = "default_slice_range")]
    pub slice_range: (f64, f64),
    #[serde(default = "default_slice_steps")]
    pub slice_steps: usize,
}

fn default_meta_dim() -> usize {
    20
}
fn default_meta_n_train() -> usize {
    200
}
fn default_meta_train() -> TrainConfig {
    TrainConfig {
        lr: 0.01,
        epochs: 20,
        batch_size: 64,
        momentum: 0.0,
        seed: 0,
    }
}
fn default_pool() -> usize {
    500
}
fn default_val_lambdas() -> Vec<f64> {
    vec![0.6, 0.7]
}
fn default_heldout_lambda() -> f64 {
    0.65
}
fn default_meta_cfg() -> MetaConfig {
    MetaConfig {
        alpha: 1.0,
        beta: 0.3,
        iterations: 200,
        batch_size: Some(100),
        ..MetaConfig::default()
    }
}
fn default_slice_range() -> (f64, f64) {
    (-3.0, 3.0)
}
fn default_slice_steps() -> usize {
    41
}

impl Default for MetaExperimentConfig {
    fn default() -> Self {
        Self {
            dim: default_meta_dim(),
            n_train_per_class: default_meta_n_train(),
            train: default_meta_train(),
            pool_per_class: default_pool(),
            val_lambdas: default_val_lambdas(),
            heldout_lambda: default_heldout_lambda(),
            meta: default_meta_cfg(),
            slice_range: default_slice_range(),
            slice_steps: default_slice_steps(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaExperimentResult {
    pub seed: u64,
    pub source_loss: LossKind,
    pub task_loss: LossKind,
    pub heldout_before: f64,
    pub heldout_after: f64,
    pub trajectory: Vec<f64>,
    pub flag: Option<String>,
    pub slice: Vec<(f64, f64)>,
    pub entropy_fit: FittedEntropyParams,
    pub quadratic_fit: FittedQuadratic,
}

impl MetaExperimentResult {
    pub fn relative_reduction(&self) -> f64 {
        (self.heldout_before - self.heldout_after) / self.heldout_before
    }

    pub fn entropy_fits_better(&self) -> bool {
        self.entropy_fit.residual < self.quadratic_fit.residual
    }
}

/// Unlabeled and labeled pools at shift `lambda`, drawn independently.
pub fn shift_pair(bench: &ShiftBenchmark, lambda: f64, n_per_class: usize, replicate: u64) -> Result<ShiftPair> {
    let u = bench.test_stream(lambda, n_per_class, replicate)?;
    let l = bench.test_stream(lambda, n_per_class, replicate + 1)?;
    Ok(ShiftPair {
        unlabeled: u.inputs,
        labeled: Batch::new(l.inputs.clone(), l.classes()?)?,
    })
}

/// Trains a two-output linear source model with `source_loss`, meta-trains
/// a fresh loss net on the validation shifts and scores it on the held-out
/// shift.
pub fn run_meta_experiment(
    cfg: &MetaExperimentConfig,
    seed: u64,
    source_loss: LossKind,
    task_loss: LossKind,
) -> Result<MetaExperimentResult> {
    let bench = ShiftBenchmark::new(&GaussianShiftSpec {
        dim: cfg.dim,
        seed,
        ..Default::default()
    })?;
    let spec = LossSpec::<f64>::new(source_loss, LossParams::default(), 2)?;
    let train = bench.source_train(cfg.n_train_per_class)?;
    let tcfg = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let (model, _) = train_source(&Model::linear(cfg.dim, 2), &train.inputs, &train.classes()?, &spec, &tcfg)?;
    let pairs = cfg
        .val_lambdas
        .iter()
        .enumerate()
        .map(|(i, &l)| shift_pair(&bench, l, cfg.pool_per_class, 10 + 2 * i as u64))
        .collect::<Result<Vec<_>>>()?;
    let heldout = vec![shift_pair(&bench, cfg.heldout_lambda, cfg.pool_per_class, 50)?];
    let mcfg = MetaConfig {
        task_loss,
        seed,
        ..cfg.meta.clone()
    };
    let net = MetaLossNet::new(mcfg.hidden, seed)?;
    let heldout_before = outer_objective(&net, &model, &heldout, &mcfg)?;
    let (trained, res) = meta_train(&net, &model, &pairs, &mcfg)?;
    let heldout_after = outer_objective(&trained, &model, &heldout, &mcfg)?;
    let base = [0.0, 0.0];
    let slice = slice_export(|h| trained.eval(h), &base, 0, cfg.slice_range, cfg.slice_steps)?;
    Ok(MetaExperimentResult {
        seed,
        source_loss,
        task_loss,
        heldout_before,
        heldout_after,
        trajectory: res.trajectory,
        flag: res.flag,
        entropy_fit: fit_scaled_entropy(&slice, &base, 0)?,
        quadratic_fit: fit_quadratic(&slice)?,
        slice,
    })
}
