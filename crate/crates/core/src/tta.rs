//! Online test-time adaptation: per-batch objective, one optimizer step on
//! the masked parameters, then prediction on the same batch with the updated
//! model.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::losses::{LossKind, LossSpec};
use crate::models::{BnStats, MaskMode, Model, ParamId};
use crate::optim::{Optimizer, OptimizerKind};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_CONFIDENCE_THRESHOLD: f64 = 0.9;
pub const DEFAULT_ROBUST_Q: f64 = 0.8;
pub const DEFAULT_BATCH_SIZE: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    ConjugatePl,
    Entropy,
    HardPl,
    SoftPl,
    RobustPl,
    None,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::ConjugatePl,
        Method::Entropy,
        Method::HardPl,
        Method::SoftPl,
        Method::RobustPl,
        Method::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::ConjugatePl => "conjugate_pl",
            Method::Entropy => "entropy",
            Method::HardPl => "hard_pl",
            Method::SoftPl => "soft_pl",
            Method::RobustPl => "robust_pl",
            Method::None => "none",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown tta method `{s}`")))
    }
}

/// Where pseudo-labels come from at each step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// Recomputed from the current parameters (labels differentiable for
    /// `conjugate_pl`).
    #[default]
    Instantaneous,
    /// Computed once per batch from the source model and held constant.
    Precomputed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TTAConfig {
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_mask")]
    pub mask: MaskMode,
    /// Required by `hard_pl` only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence_threshold: Option<f64>,
    /// Required by `robust_pl` only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<f64>,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub label_mode: LabelMode,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_method() -> Method {
    Method::ConjugatePl
}
fn default_lr() -> f64 {
    1e-3
}
fn default_temperature() -> f64 {
    1.0
}
fn default_mask() -> MaskMode {
    MaskMode::All
}
fn default_batch_size() -> usize {
    DEFAULT_BATCH_SIZE
}

impl Default for TTAConfig {
    fn default() -> Self {
        Self::new(default_method(), default_lr(), default_temperature())
    }
}

impl TTAConfig {
    /// Config with the method's own parameters filled with their defaults.
    pub fn new(method: Method, lr: f64, temperature: f64) -> Self {
        let mut c = Self {
            method,
            lr,
            temperature,
            mask: default_mask(),
            confidence_threshold: None,
            q: None,
            optimizer: OptimizerKind::default(),
            label_mode: LabelMode::default(),
            batch_size: default_batch_size(),
            seed: 0,
        };
        c.fill_method_defaults();
        c
    }

    pub fn with_mask(mut self, mask: MaskMode) -> Self {
        self.mask = mask;
        self
    }

    pub fn with_method(mut self, method: Method) -> Self {
        self.method = method;
        self.confidence_threshold = None;
        self.q = None;
        self.fill_method_defaults();
        self
    }

    /// Supplies `confidence_threshold` / `q` when the method needs them and
    /// they are absent.
    pub fn fill_method_defaults(&mut self) {
        if self.method == Method::HardPl && self.confidence_threshold.is_none() {
            self.confidence_threshold = Some(DEFAULT_CONFIDENCE_THRESHOLD);
        }
        if self.method == Method::RobustPl && self.q.is_none() {
            self.q = Some(DEFAULT_ROBUST_Q);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("tta.lr must be finite and >= 0, got {}", self.lr)));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!("tta.temperature must be > 0, got {}", self.temperature)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("tta.batch_size must be >= 2".into()));
        }
        match (self.method, self.confidence_threshold) {
            (Method::HardPl, Some(t)) if !(0.0..=1.0).contains(&t) => {
                return Err(Error::Config(format!("tta.confidence_threshold must lie in [0, 1], got {t}")))
            }
            (Method::HardPl, None) => return Err(Error::Config("tta.confidence_threshold is required by hard_pl".into())),
            (m, Some(_)) if m != Method::HardPl => {
                return Err(Error::Config(format!("tta.confidence_threshold is only used by hard_pl, not {m}")))
            }
            _ => {}
        }
        match (self.method, self.q) {
            (Method::RobustPl, Some(q)) if !(q > 0.0 && q <= 1.0) => {
                return Err(Error::Config(format!("tta.q must lie in (0, 1], got {q}")))
            }
            (Method::RobustPl, None) => return Err(Error::Config("tta.q is required by robust_pl".into())),
            (m, Some(_)) if m != Method::RobustPl => {
                return Err(Error::Config(format!("tta.q is only used by robust_pl, not {m}")))
            }
            _ => {}
        }
        Ok(())
    }
}

/// One test batch: inputs plus ground-truth classes used only for scoring.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<S> {
    pub x: Tensor<S>,
    pub classes: Vec<usize>,
}

impl<S: Scalar> Batch<S> {
    pub fn new(x: Tensor<S>, classes: Vec<usize>) -> Result<Self> {
        if x.rows() != classes.len() {
            return crate::error::dim_err(format!("{} rows but {} labels", x.rows(), classes.len()));
        }
        Ok(Self { x, classes })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

/// Splits a dataset into consecutive batches of `batch_size` (a tail smaller
/// than 2 is merged into the previous batch).
pub fn stream_from_dataset<S: Scalar>(data: &crate::datagen::Dataset, batch_size: usize) -> Result<Vec<Batch<S>>> {
    data.batches(batch_size, 2)
        .into_iter()
        .map(|b| Batch::new(b.inputs.cast(), b.classes()?))
        .collect()
}

/// Per-row confidence and hard pseudo-label (predicted class) under the
/// spec's decision rule.
pub fn hard_pseudolabels<S: Scalar>(spec: &LossSpec<S>, h: &Tensor<S>) -> Result<Vec<(S, usize)>> {
    (0..h.rows())
        .map(|i| {
            let row = h.row_slice(i);
            if spec.kind() == LossKind::Exponential {
                let z = row[0];
                Ok((crate::autodiff::sigmoid(z.abs()), usize::from(z > S::zero())))
            } else {
                let p = crate::tensor::softmax(row)?;
                let c = crate::tensor::argmax(&p);
                Ok((p[c], c))
            }
        })
        .collect()
}

/// Per-row Shannon entropy of the predictive distribution (softmax, or the
/// sigmoid of the score for the binary exponential spec).
fn entropy_rows<S: Scalar>(g: &mut Graph<S>, spec: &LossSpec<S>, h: Var) -> Result<Var> {
    if spec.kind() == LossKind::Exponential {
        let sp = g.softplus(h);
        let s = g.sigmoid(h);
        let sz = g.mul(s, h);
        return Ok(g.sub(sp, sz));
    }
    // lse(h) − Σ softmax(h)·h, built in the same order as the cross-entropy
    // conjugate loss so the two graphs coincide
    let p = g.row_softmax(h)?;
    let lse = g.row_logsumexp(h)?;
    let ph = g.mul(p, h);
    let dot = g.row_sum(ph);
    Ok(g.sub(lse, dot))
}

/// Per-row cross-entropy of `h` against a constant label matrix (sigmoid
/// cross-entropy with `p(+1)` labels for the exponential spec).
fn cross_entropy_rows<S: Scalar>(g: &mut Graph<S>, spec: &LossSpec<S>, h: Var, labels: Var) -> Result<Var> {
    if spec.kind() == LossKind::Exponential {
        // softplus(z) − p·z
        let sp = g.softplus(h);
        let pz = g.mul(labels, h);
        return Ok(g.sub(sp, pz));
    }
    let lse = g.row_logsumexp(h)?;
    let yh = g.mul(labels, h);
    let dot = g.row_sum(yh);
    Ok(g.sub(lse, dot))
}

/// Builds the mean per-sample adaptation objective over `h_bar` (logits
/// already divided by the temperature). `label_logits` supplies the logits
/// pseudo-labels are read from when they are held constant; `None` means the
/// current values of `h_bar`.
pub fn objective_graph<S: Scalar>(
    g: &mut Graph<S>,
    spec: &LossSpec<S>,
    cfg: &TTAConfig,
    h_bar: Var,
    label_logits: Option<&Tensor<S>>,
) -> Result<Var> {
    let n = g.value(h_bar).rows();
    if n == 0 {
        return Err(Error::Contract("empty batch".into()));
    }
    let k = g.value(h_bar).cols();
    let reference = label_logits.cloned().unwrap_or_else(|| g.value(h_bar).clone());
    if reference.rows() != n || reference.cols() != k {
        return crate::error::dim_err("label logits do not match the batch");
    }
    let per_row = match cfg.method {
        Method::None => {
            let z = g.constant(Tensor::zeros(&[n, 1]));
            return Ok(g.mean_all(z));
        }
        Method::ConjugatePl => match label_logits {
            None => spec.conjugate_graph(g, h_bar)?,
            Some(r) => {
                let mut labels = Vec::with_capacity(n * k);
                for i in 0..n {
                    labels.extend(spec.conjugate_pseudolabel(r.row_slice(i))?.0);
                }
                let y = g.constant(Tensor::matrix(n, k, labels)?);
                spec.supervised_graph(g, h_bar, y)?
            }
        },
        Method::Entropy => entropy_rows(g, spec, h_bar)?,
        Method::SoftPl => {
            let labels = if spec.kind() == LossKind::Exponential {
                reference.map(crate::autodiff::sigmoid)
            } else {
                let mut p = Vec::with_capacity(n * k);
                for i in 0..n {
                    p.extend(crate::tensor::softmax(reference.row_slice(i))?);
                }
                Tensor::matrix(n, k, p)?
            };
            let y = g.constant(labels);
            cross_entropy_rows(g, spec, h_bar, y)?
        }
        Method::HardPl => {
            let thr = S::of(cfg.confidence_threshold.unwrap_or(DEFAULT_CONFIDENCE_THRESHOLD));
            let conf = hard_pseudolabels(spec, &reference)?;
            let keep: Vec<S> = conf
                .iter()
                .map(|&(c, _)| if c >= thr { S::one() } else { S::zero() })
                .collect();
            let kept = keep.iter().filter(|&&v| v > S::zero()).count();
            if kept == 0 {
                let z = g.constant(Tensor::zeros(&[1, 1]));
                return Ok(g.sum_all(z));
            }
            let classes: Vec<usize> = conf.iter().map(|&(_, c)| c).collect();
            let rows = if spec.kind() == LossKind::Exponential {
                // the spec's own loss exp(−y·z) with y = sign(z)
                let y = g.constant(spec.encode_labels(&classes)?);
                spec.supervised_graph(g, h_bar, y)?
            } else {
                let mut onehot = vec![S::zero(); n * k];
                for (i, &c) in classes.iter().enumerate() {
                    onehot[i * k + c] = S::one();
                }
                let y = g.constant(Tensor::matrix(n, k, onehot)?);
                cross_entropy_rows(g, spec, h_bar, y)?
            };
            let m = g.constant(Tensor::column(&keep));
            let masked = g.mul(rows, m);
            let total = g.sum_all(masked);
            return Ok(g.scale(total, S::one() / S::of(kept as f64)));
        }
        Method::RobustPl => {
            let q = S::of(cfg.q.unwrap_or(DEFAULT_ROBUST_Q));
            let conf = hard_pseudolabels(spec, &reference)?;
            let p_top = if spec.kind() == LossKind::Exponential {
                // probability of the predicted side: σ(s·z) with s = ±1 constant
                let signs: Vec<S> = conf.iter().map(|&(_, c)| if c == 1 { S::one() } else { -S::one() }).collect();
                let s = g.constant(Tensor::column(&signs));
                let sz = g.mul(s, h_bar);
                g.sigmoid(sz)
            } else {
                let mut onehot = vec![S::zero(); n * k];
                for (i, &(_, c)) in conf.iter().enumerate() {
                    onehot[i * k + c] = S::one();
                }
                let sel = g.constant(Tensor::matrix(n, k, onehot)?);
                let p = g.row_softmax(h_bar)?;
                let picked = g.mul(p, sel);
                g.row_sum(picked)
            };
            let pq = g.powf(p_top, q);
            let npq = g.neg(pq);
            let one_minus = g.add_scalar(npq, S::one());
            g.scale(one_minus, S::one() / q)
        }
    };
    Ok(g.mean_all(per_row))
}

/// Value of the adaptation objective on a logit batch already divided by T.
pub fn tta_objective<S: Scalar>(spec: &LossSpec<S>, cfg: &TTAConfig, h_bar: &Tensor<S>) -> Result<S> {
    let mut g = Graph::new();
    let h = g.constant(h_bar.clone());
    let out = objective_graph(&mut g, spec, cfg, h, None)?;
    Ok(g.value(out).item())
}

fn non_finite(location: String, detail: &str) -> Error {
    Error::Divergence {
        location,
        detail: detail.to_string(),
    }
}

/// Mutable adaptation state: current model, optimizer slots and, in
/// precomputed-label mode, the frozen source model.
#[derive(Clone, Debug)]
pub struct Adapter<S> {
    model: Model<S>,
    source: Option<Model<S>>,
    spec: LossSpec<S>,
    cfg: TTAConfig,
    trainable: Vec<ParamId>,
    opt: Optimizer<S>,
    steps: usize,
}

impl<S: Scalar> Adapter<S> {
    pub fn new(model: Model<S>, spec: LossSpec<S>, cfg: TTAConfig) -> Result<Self> {
        cfg.validate()?;
        if model.outputs() != spec.output_dim() {
            return Err(Error::Config(format!(
                "model has {} outputs but the {} loss expects {}",
                model.outputs(),
                spec.kind(),
                spec.output_dim()
            )));
        }
        let trainable = model.mask(cfg.mask)?.selected;
        let source = (cfg.label_mode == LabelMode::Precomputed).then(|| model.clone());
        let opt = Optimizer::new(cfg.optimizer, cfg.lr);
        Ok(Self {
            model,
            source,
            spec,
            cfg,
            trainable,
            opt,
            steps: 0,
        })
    }

    pub fn model(&self) -> &Model<S> {
        &self.model
    }

    pub fn into_model(self) -> Model<S> {
        self.model
    }

    pub fn config(&self) -> &TTAConfig {
        &self.cfg
    }

    /// Gradient of the objective w.r.t. each trainable parameter at the
    /// current state, with the objective value and observed BN statistics.
    pub fn objective_gradient(
        &self,
        x: &Tensor<S>,
    ) -> Result<(S, Vec<(ParamId, Tensor<S>)>, Vec<crate::models::ObservedStats<S>>)> {
        if x.rows() < 2 {
            return Err(Error::Contract("adaptation batches need at least 2 rows".into()));
        }
        let mut g = Graph::new();
        let binding = self.model.bind(&mut g, &self.trainable);
        let xv = g.constant(x.clone());
        let (h, observed) = self.model.forward_graph(&mut g, &binding, xv, BnStats::UseBatch)?;
        let inv_t = S::one() / S::of(self.cfg.temperature);
        let h_bar = g.scale(h, inv_t);
        let reference = match &self.source {
            Some(src) => Some(src.forward(x, BnStats::UseBatch)?.map(|v| v * inv_t)),
            None => None,
        };
        let obj = objective_graph(&mut g, &self.spec, &self.cfg, h_bar, reference.as_ref())?;
        let value = g.value(obj).item();
        let grads = g.backward(obj)?;
        let out = self
            .trainable
            .iter()
            .map(|&id| (id, grads.get(binding.var(id))))
            .collect();
        Ok((value, out, observed))
    }

    /// One optimizer step on `x`; returns the pre-update objective value.
    pub fn step(&mut self, x: &Tensor<S>) -> Result<S> {
        let index = self.steps;
        self.steps += 1;
        let (value, grads, observed) = self.objective_gradient(x)?;
        let loc = || format!("batch {index}");
        if !value.is_finite() {
            return Err(non_finite(loc(), "objective is not finite"));
        }
        if grads.iter().any(|(_, t)| !t.all_finite()) {
            return Err(non_finite(loc(), "gradient is not finite"));
        }
        if self.cfg.method == Method::None || self.cfg.lr == 0.0 {
            return Ok(value);
        }
        self.model.set_running_stats(&observed);
        self.opt.step(&mut self.model, &grads);
        if !self.model.all_finite() {
            return Err(non_finite(loc(), "parameters became non-finite"));
        }
        Ok(value)
    }
}

/// Single adaptation step from a fresh optimizer state.
pub fn tta_step<S: Scalar>(model: &Model<S>, x: &Tensor<S>, spec: &LossSpec<S>, cfg: &TTAConfig) -> Result<Model<S>> {
    let mut a = Adapter::new(model.clone(), *spec, cfg.clone())?;
    a.step(x)?;
    Ok(a.into_model())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub index: usize,
    pub size: usize,
    pub loss: f64,
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OnlineReport {
    pub per_batch: Vec<BatchRecord>,
    pub mean_online_error: f64,
    pub config: TTAConfig,
    pub model_checksum: String,
}

impl OnlineReport {
    pub fn mean_online_accuracy(&self) -> f64 {
        1.0 - self.mean_online_error
    }

    /// Size-weighted mean of the per-batch errors.
    pub fn recompute_mean_error(&self) -> f64 {
        weighted_error(&self.per_batch)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `step,loss,error` rows.
    pub fn trajectory_csv(&self) -> String {
        let mut s = String::from("step,loss,error\n");
        for r in &self.per_batch {
            s.push_str(&format!("{},{:?},{:?}\n", r.index, r.loss, r.error));
        }
        s
    }
}

fn weighted_error(records: &[BatchRecord]) -> f64 {
    let total: usize = records.iter().map(|r| r.size).sum();
    if total == 0 {
        return 0.0;
    }
    records.iter().map(|r| r.error * r.size as f64).sum::<f64>() / total as f64
}

/// One pass over `stream`: adapt on each batch, then score the same batch
/// with the updated model.
pub fn adapt_online<S: Scalar>(
    model: &Model<S>,
    stream: &[Batch<S>],
    spec: &LossSpec<S>,
    cfg: &TTAConfig,
) -> Result<(Model<S>, OnlineReport)> {
    let mut adapter = Adapter::new(model.clone(), *spec, cfg.clone())?;
    let mut per_batch = Vec::with_capacity(stream.len());
    for (index, b) in stream.iter().enumerate() {
        let loss = adapter.step(&b.x)?;
        let error = adapter.model().error_rate(&b.x, &b.classes, spec, BnStats::UseBatch)?;
        per_batch.push(BatchRecord {
            index,
            size: b.len(),
            loss: loss.to_f64_lossy(),
            error,
        });
    }
    let model = adapter.into_model();
    let report = OnlineReport {
        mean_online_error: weighted_error(&per_batch),
        per_batch,
        config: cfg.clone(),
        model_checksum: model.checksum(),
    };
    Ok((model, report))
}

/// Error of the unadapted model over a stream, scored batch by batch.
pub fn unadapted_error<S: Scalar>(model: &Model<S>, stream: &[Batch<S>], spec: &LossSpec<S>) -> Result<f64> {
    let mut records = Vec::with_capacity(stream.len());
    for (index, b) in stream.iter().enumerate() {
        records.push(BatchRecord {
            index,
            size: b.len(),
            loss: 0.0,
            error: model.error_rate(&b.x, &b.classes, spec, BnStats::UseBatch)?,
        });
    }
    Ok(weighted_error(&records))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub lr: f64,
    pub temperature: f64,
    /// Mean online error over the validation streams (1.0 when diverged).
    pub error: f64,
    pub diverged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub best_lr: f64,
    pub best_temperature: f64,
    pub best_error: f64,
    pub table: Vec<GridCell>,
}

/// Exhaustive search over `lr_grid × t_grid`. Cells run in parallel on
/// independent model copies; the table is in grid order. Ties go to the
/// smaller lr, then the smaller T.
pub fn grid_search<S: Scalar>(
    model: &Model<S>,
    spec: &LossSpec<S>,
    val_streams: &[Vec<Batch<S>>],
    lr_grid: &[f64],
    t_grid: &[f64],
    base: &TTAConfig,
) -> Result<GridResult> {
    if lr_grid.is_empty() || t_grid.is_empty() {
        return Err(Error::Config("grid_search needs nonempty lr and temperature grids".into()));
    }
    if val_streams.is_empty() {
        return Err(Error::Config("grid_search needs at least one validation stream".into()));
    }
    let cells: Vec<(f64, f64)> = lr_grid
        .iter()
        .flat_map(|&lr| t_grid.iter().map(move |&t| (lr, t)))
        .collect();
    let table: Vec<GridCell> = cells
        .par_iter()
        .map(|&(lr, t)| {
            let cfg = TTAConfig {
                lr,
                temperature: t,
                ..base.clone()
            };
            let mut sum = 0.0;
            for stream in val_streams {
                match adapt_online(model, stream, spec, &cfg) {
                    Ok((_, r)) => sum += r.mean_online_error,
                    Err(Error::Divergence { .. } | Error::Numerical(_)) => {
                        return Ok(GridCell {
                            lr,
                            temperature: t,
                            error: 1.0,
                            diverged: true,
                        })
                    }
                    Err(e) => return Err(e),
                }
            }
            Ok(GridCell {
                lr,
                temperature: t,
                error: sum / val_streams.len() as f64,
                diverged: false,
            })
        })
        .collect::<Result<_>>()?;
    let best = table
        .iter()
        .min_by(|a, b| {
            a.error
                .total_cmp(&b.error)
                .then(a.lr.total_cmp(&b.lr))
                .then(a.temperature.total_cmp(&b.temperature))
        })
        .expect("nonempty grid");
    Ok(GridResult {
        best_lr: best.lr,
        best_temperature: best.temperature,
        best_error: best.error,
        table,
    })
}
