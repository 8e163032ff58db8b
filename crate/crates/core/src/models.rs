//! Source classifiers: a linear model and an MLP with batch normalization,
//! plus source training and the adaptable-parameter view used at test time.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Var};
use crate::error::{dim_err, Error, Result};
use crate::losses::LossSpec;
use crate::optim::{Optimizer, OptimizerKind};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct Affine<S> {
    /// `in × out`.
    pub weight: Tensor<S>,
    /// `1 × out`.
    pub bias: Tensor<S>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct BatchNormLayer<S> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
    pub running_mean: Tensor<S>,
    pub running_var: Tensor<S>,
    pub eps: S,
}

impl<S: Scalar> BatchNormLayer<S> {
    pub fn new(width: usize) -> Self {
        Self {
            gamma: Tensor::full(&[1, width], S::one()),
            beta: Tensor::zeros(&[1, width]),
            running_mean: Tensor::zeros(&[1, width]),
            running_var: Tensor::full(&[1, width], S::one()),
            eps: S::of(BN_EPS),
        }
    }

    pub fn width(&self) -> usize {
        self.gamma.cols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<S> {
    Affine(Affine<S>),
    BatchNorm(BatchNormLayer<S>),
    Relu,
}

/// Structural description of a model, persisted alongside its parameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Architecture {
    /// Single affine map `x W + b`.
    Linear { input_dim: usize, outputs: usize },
    /// `input → [width → BN → ReLU]* → outputs`.
    Mlp {
        input_dim: usize,
        hidden: Vec<usize>,
        outputs: usize,
    },
}

impl Architecture {
    pub fn input_dim(&self) -> usize {
        match self {
            Architecture::Linear { input_dim, .. } | Architecture::Mlp { input_dim, .. } => *input_dim,
        }
    }

    pub fn outputs(&self) -> usize {
        match self {
            Architecture::Linear { outputs, .. } | Architecture::Mlp { outputs, .. } => *outputs,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnStats {
    /// Normalize with the current batch's statistics.
    UseBatch,
    /// Normalize with the stored running statistics.
    UseRunning,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
}

/// Identifies one parameter tensor: layer index plus role.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId {
    pub layer: usize,
    pub kind: ParamKind,
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let k = match self.kind {
            ParamKind::Weight => "weight",
            ParamKind::Bias => "bias",
            ParamKind::Gamma => "gamma",
            ParamKind::Beta => "beta",
        };
        write!(f, "layer{}.{k}", self.layer)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Only the scale and shift of batch-norm layers.
    BnOnly,
    /// Only affine-layer biases.
    BiasOnly,
    All,
}

/// Which parameters an adaptation step may touch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamMask {
    pub mode: MaskMode,
    pub selected: Vec<ParamId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<S> {
    arch: Architecture,
    layers: Vec<Layer<S>>,
}

/// Batch statistics observed by each BN layer during a forward pass.
#[derive(Clone, Debug)]
pub struct ObservedStats<S> {
    pub layer: usize,
    pub mean: Tensor<S>,
    pub var: Tensor<S>,
}

/// Graph handles for a model's parameters, produced by [`Model::bind`].
#[derive(Clone, Debug, Default)]
pub struct Binding {
    vars: BTreeMap<ParamId, Var>,
    trainable: Vec<ParamId>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[&id]
    }

    pub fn trainable(&self) -> &[ParamId] {
        &self.trainable
    }
}

impl<S: Scalar> Model<S> {
    /// Linear model initialised at zero (the convex problem does not need
    /// symmetry breaking).
    pub fn linear(input_dim: usize, outputs: usize) -> Self {
        Self {
            arch: Architecture::Linear { input_dim, outputs },
            layers: vec![Layer::Affine(Affine {
                weight: Tensor::zeros(&[input_dim, outputs]),
                bias: Tensor::zeros(&[1, outputs]),
            })],
        }
    }

    /// MLP with He-style normal initialisation drawn from `seed`.
    pub fn mlp(input_dim: usize, hidden: &[usize], outputs: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut width = input_dim;
        let affine = |rng: &mut ChaCha8Rng, i: usize, o: usize| {
            let sd = (2.0 / i as f64).sqrt();
            let w: Vec<S> = (0..i * o)
                .map(|_| { let z: f64 = StandardNormal.sample(rng); S::of(sd * z) })
                .collect();
            Layer::Affine(Affine {
                weight: Tensor::matrix(i, o, w).expect("sized"),
                bias: Tensor::zeros(&[1, o]),
            })
        };
        for &h in hidden {
            layers.push(affine(&mut rng, width, h));
            layers.push(Layer::BatchNorm(BatchNormLayer::new(h)));
            layers.push(Layer::Relu);
            width = h;
        }
        layers.push(affine(&mut rng, width, outputs));
        Self {
            arch: Architecture::Mlp {
                input_dim,
                hidden: hidden.to_vec(),
                outputs,
            },
            layers,
        }
    }

    pub fn from_architecture(arch: &Architecture, seed: u64) -> Self {
        match arch {
            Architecture::Linear { input_dim, outputs } => Self::linear(*input_dim, *outputs),
            Architecture::Mlp {
                input_dim,
                hidden,
                outputs,
            } => Self::mlp(*input_dim, hidden, *outputs, seed),
        }
    }

    /// Assembles a model from explicit layers, validating dimensions.
    pub fn from_layers(arch: Architecture, layers: Vec<Layer<S>>) -> Result<Self> {
        let m = Self { arch, layers };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        let mut width = self.arch.input_dim();
        for (i, l) in self.layers.iter().enumerate() {
            match l {
                Layer::Affine(a) => {
                    if a.weight.rows() != width || a.bias.cols() != a.weight.cols() || a.bias.rows() != 1 {
                        return dim_err(format!("layer {i}: affine shape mismatch"));
                    }
                    width = a.weight.cols();
                }
                Layer::BatchNorm(b) => {
                    let ok = [&b.gamma, &b.beta, &b.running_mean, &b.running_var]
                        .iter()
                        .all(|t| t.rows() == 1 && t.cols() == width);
                    if !ok {
                        return dim_err(format!("layer {i}: batch-norm width mismatch"));
                    }
                    if b.running_var.data().iter().any(|&v| v < S::zero()) {
                        return Err(Error::Numerical(format!("layer {i}: negative running variance")));
                    }
                }
                Layer::Relu => {}
            }
        }
        if width != self.arch.outputs() {
            return dim_err("final width does not match declared outputs");
        }
        Ok(())
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn layers(&self) -> &[Layer<S>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<S>] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input_dim()
    }

    pub fn outputs(&self) -> usize {
        self.arch.outputs()
    }

    pub fn has_batch_norm(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, Layer::BatchNorm(_)))
    }

    /// Every parameter tensor in layer order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for (layer, l) in self.layers.iter().enumerate() {
            match l {
                Layer::Affine(_) => {
                    ids.push(ParamId { layer, kind: ParamKind::Weight });
                    ids.push(ParamId { layer, kind: ParamKind::Bias });
                }
                Layer::BatchNorm(_) => {
                    ids.push(ParamId { layer, kind: ParamKind::Gamma });
                    ids.push(ParamId { layer, kind: ParamKind::Beta });
                }
                Layer::Relu => {}
            }
        }
        ids
    }

    pub fn param(&self, id: ParamId) -> &Tensor<S> {
        match (&self.layers[id.layer], id.kind) {
            (Layer::Affine(a), ParamKind::Weight) => &a.weight,
            (Layer::Affine(a), ParamKind::Bias) => &a.bias,
            (Layer::BatchNorm(b), ParamKind::Gamma) => &b.gamma,
            (Layer::BatchNorm(b), ParamKind::Beta) => &b.beta,
            _ => panic!("no parameter {id}"),
        }
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        match (&mut self.layers[id.layer], id.kind) {
            (Layer::Affine(a), ParamKind::Weight) => &mut a.weight,
            (Layer::Affine(a), ParamKind::Bias) => &mut a.bias,
            (Layer::BatchNorm(b), ParamKind::Gamma) => &mut b.gamma,
            (Layer::BatchNorm(b), ParamKind::Beta) => &mut b.beta,
            _ => panic!("no parameter {id}"),
        }
    }

    pub fn num_params(&self) -> usize {
        self.param_ids().iter().map(|&id| self.param(id).len()).sum()
    }

    pub fn mask(&self, mode: MaskMode) -> Result<ParamMask> {
        let ids = self.param_ids();
        let selected: Vec<ParamId> = match mode {
            MaskMode::All => ids,
            MaskMode::BnOnly => ids
                .into_iter()
                .filter(|id| matches!(id.kind, ParamKind::Gamma | ParamKind::Beta))
                .collect(),
            MaskMode::BiasOnly => ids.into_iter().filter(|id| id.kind == ParamKind::Bias).collect(),
        };
        if selected.is_empty() {
            return Err(Error::Config(match mode {
                MaskMode::BnOnly => "bn_only adaptation requested but the model has no batch-norm layers".into(),
                MaskMode::BiasOnly => "bias_only adaptation requested but the model has no affine layers".into(),
                MaskMode::All => "model has no parameters".into(),
            }));
        }
        Ok(ParamMask { mode, selected })
    }

    /// Identifiers and current values of exactly the masked parameters.
    pub fn adaptable_params(&self, mask: &ParamMask) -> Result<Vec<(ParamId, &Tensor<S>)>> {
        let all = self.param_ids();
        if mask.selected.is_empty() {
            return Err(Error::Config("empty parameter mask".into()));
        }
        mask.selected
            .iter()
            .map(|&id| {
                if all.contains(&id) {
                    Ok((id, self.param(id)))
                } else {
                    Err(Error::Config(format!("mask names unknown parameter {id}")))
                }
            })
            .collect()
    }

    /// Registers parameters on `g`: ids in `trainable` become differentiable
    /// leaves, the rest constants.
    pub fn bind(&self, g: &mut Graph<S>, trainable: &[ParamId]) -> Binding {
        let mut b = Binding::default();
        for id in self.param_ids() {
            let t = self.param(id).clone();
            let v = if trainable.contains(&id) {
                b.trainable.push(id);
                g.param(t)
            } else {
                g.constant(t)
            };
            b.vars.insert(id, v);
        }
        b
    }

    /// Builds the forward pass on `g`. Returns the logits node and the batch
    /// statistics each BN layer saw (empty under `UseRunning`).
    pub fn forward_graph(
        &self,
        g: &mut Graph<S>,
        binding: &Binding,
        x: Var,
        stats: BnStats,
    ) -> Result<(Var, Vec<ObservedStats<S>>)> {
        let (n, d) = (g.value(x).rows(), g.value(x).cols());
        if n == 0 {
            return Err(Error::Contract("empty batch".into()));
        }
        if d != self.input_dim() {
            return dim_err(format!("input width {d}, model expects {}", self.input_dim()));
        }
        if stats == BnStats::UseBatch && n < 2 && self.has_batch_norm() {
            return Err(Error::Contract(
                "batch statistics need at least 2 rows (variance undefined for 1)".into(),
            ));
        }
        let mut h = x;
        let mut observed = Vec::new();
        for (layer, l) in self.layers.iter().enumerate() {
            h = match l {
                Layer::Affine(_) => {
                    let w = binding.var(ParamId { layer, kind: ParamKind::Weight });
                    let b = binding.var(ParamId { layer, kind: ParamKind::Bias });
                    let xw = g.matmul(h, w);
                    g.add_row(xw, b)
                }
                Layer::BatchNorm(bn) => {
                    let gamma = binding.var(ParamId { layer, kind: ParamKind::Gamma });
                    let beta = binding.var(ParamId { layer, kind: ParamKind::Beta });
                    let normed = match stats {
                        BnStats::UseBatch => {
                            let mean = g.col_mean(h);
                            let centered = g.sub_row(h, mean);
                            let sq = g.square(centered);
                            let var = g.col_mean(sq);
                            observed.push(ObservedStats {
                                layer,
                                mean: g.value(mean).clone(),
                                var: g.value(var).clone(),
                            });
                            let var_eps = g.add_scalar(var, bn.eps);
                            let sd = g.sqrt(var_eps);
                            g.div_row(centered, sd)
                        }
                        BnStats::UseRunning => {
                            let mean = g.constant(bn.running_mean.clone());
                            let sd = g.constant(bn.running_var.map(|v| (v + bn.eps).sqrt()));
                            let centered = g.sub_row(h, mean);
                            g.div_row(centered, sd)
                        }
                    };
                    let scaled = g.mul_row(normed, gamma);
                    g.add_row(scaled, beta)
                }
                Layer::Relu => g.relu(h),
            };
        }
        Ok((h, observed))
    }

    /// Logits for a batch without recording gradients.
    pub fn forward(&self, x: &Tensor<S>, stats: BnStats) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let binding = self.bind(&mut g, &[]);
        let xv = g.constant(x.clone());
        let (out, _) = self.forward_graph(&mut g, &binding, xv, stats)?;
        Ok(g.value(out).clone())
    }

    /// Overwrites BN running statistics with observed batch statistics.
    pub fn set_running_stats(&mut self, observed: &[ObservedStats<S>]) {
        for o in observed {
            if let Layer::BatchNorm(bn) = &mut self.layers[o.layer] {
                bn.running_mean = o.mean.clone();
                bn.running_var = o.var.clone();
            }
        }
    }

    /// Exponential moving average of BN running statistics.
    pub fn blend_running_stats(&mut self, observed: &[ObservedStats<S>], momentum: S) {
        for o in observed {
            if let Layer::BatchNorm(bn) = &mut self.layers[o.layer] {
                let keep = S::one() - momentum;
                bn.running_mean = bn
                    .running_mean
                    .zip_map(&o.mean, |r, m| keep * r + momentum * m)
                    .expect("same width");
                bn.running_var = bn
                    .running_var
                    .zip_map(&o.var, |r, v| keep * r + momentum * v)
                    .expect("same width");
            }
        }
    }

    /// Predicted class per row under `spec`'s decision rule.
    pub fn predict(&self, x: &Tensor<S>, spec: &LossSpec<S>, stats: BnStats) -> Result<Vec<usize>> {
        let logits = self.forward(x, stats)?;
        Ok((0..logits.rows()).map(|i| spec.predict(logits.row_slice(i))).collect())
    }

    /// Fraction of rows classified incorrectly.
    pub fn error_rate(&self, x: &Tensor<S>, classes: &[usize], spec: &LossSpec<S>, stats: BnStats) -> Result<f64> {
        if x.rows() != classes.len() {
            return dim_err("inputs and labels differ in length");
        }
        let pred = self.predict(x, spec, stats)?;
        let wrong = pred.iter().zip(classes).filter(|(p, c)| p != c).count();
        Ok(wrong as f64 / classes.len() as f64)
    }

    /// SHA-256 over every parameter and running statistic, as hex.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for l in &self.layers {
            let tensors: Vec<&Tensor<S>> = match l {
                Layer::Affine(a) => vec![&a.weight, &a.bias],
                Layer::BatchNorm(b) => vec![&b.gamma, &b.beta, &b.running_mean, &b.running_var],
                Layer::Relu => vec![],
            };
            for t in tensors {
                for v in t.data() {
                    h.update(v.to_f64_lossy().to_bits().to_le_bytes());
                }
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.param_ids().iter().all(|&id| self.param(id).all_finite())
    }
}

/// Mini-batch training settings for [`train_source`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            epochs: 50,
            batch_size: 64,
            momentum: 0.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean mini-batch loss per epoch.
    pub epoch_loss: Vec<f64>,
}

/// BN running-statistics momentum during source training.
const TRAIN_BN_MOMENTUM: f64 = 0.1;

/// Mini-batch SGD on the supervised loss. Deterministic given `cfg.seed`.
pub fn train_source<S: Scalar>(
    model: &Model<S>,
    x: &Tensor<S>,
    classes: &[usize],
    spec: &LossSpec<S>,
    cfg: &TrainConfig,
) -> Result<(Model<S>, TrainHistory)> {
    if x.rows() != classes.len() {
        return dim_err("inputs and labels differ in length");
    }
    if model.outputs() != spec.output_dim() {
        return Err(Error::Config(format!(
            "model has {} outputs, {} loss needs {}",
            model.outputs(),
            spec.kind(),
            spec.output_dim()
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let labels = spec.encode_labels(classes)?;
    let mut model = model.clone();
    let mut history = TrainHistory::default();
    if cfg.epochs == 0 {
        return Ok((model, history));
    }
    let ids = model.param_ids();
    let mut opt = Optimizer::new(OptimizerKind::Sgd { momentum: cfg.momentum }, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..x.rows()).collect();
    let min_batch = if model.has_batch_norm() { 2 } else { 1 };

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < min_batch {
                continue;
            }
            let xb = x.select_rows(chunk);
            let yb = labels.select_rows(chunk);
            let mut g = Graph::new();
            let binding = model.bind(&mut g, &ids);
            let xv = g.constant(xb);
            let (h, observed) = model.forward_graph(&mut g, &binding, xv, BnStats::UseBatch)?;
            let yv = g.constant(yb);
            let per = spec.supervised_graph(&mut g, h, yv)?;
            let loss = g.mean_all(per);
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::Divergence {
                    location: format!("epoch {epoch}, batch {bi}"),
                    detail: format!("non-finite training loss {lv}"),
                });
            }
            let grads = g.backward(loss)?;
            let grads: Vec<(ParamId, Tensor<S>)> =
                ids.iter().map(|&id| (id, grads.get(binding.var(id)))).collect();
            opt.step(&mut model, &grads);
            model.blend_running_stats(&observed, S::of(TRAIN_BN_MOMENTUM));
            if !model.all_finite() {
                return Err(Error::Divergence {
                    location: format!("epoch {epoch}, batch {bi}"),
                    detail: "non-finite parameter after update".into(),
                });
            }
            total += lv.to_f64_lossy();
            batches += 1;
        }
        history.epoch_loss.push(total / batches.max(1) as f64);
    }
    Ok((model, history))
}

// ---- persistence ----

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum LayerDoc {
    Affine {
        weight: Vec<Vec<f64>>,
        bias: Vec<f64>,
    },
    BatchNorm {
        gamma: Vec<f64>,
        beta: Vec<f64>,
        running_mean: Vec<f64>,
        running_var: Vec<f64>,
        eps: f64,
    },
    Relu,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDoc {
    format_version: u32,
    architecture: Architecture,
    layers: Vec<LayerDoc>,
}

fn rows_of<S: Scalar>(t: &Tensor<S>) -> Vec<Vec<f64>> {
    (0..t.rows())
        .map(|r| t.row_slice(r).iter().map(|v| v.to_f64_lossy()).collect())
        .collect()
}

fn flat<S: Scalar>(t: &Tensor<S>) -> Vec<f64> {
    t.data().iter().map(|v| v.to_f64_lossy()).collect()
}

fn from_rows<S: Scalar>(rows: &[Vec<f64>]) -> Result<Tensor<S>> {
    let rows: Vec<Vec<S>> = rows.iter().map(|r| r.iter().map(|&v| S::of(v)).collect()).collect();
    Tensor::from_rows(&rows)
}

fn row_of<S: Scalar>(v: &[f64]) -> Tensor<S> {
    Tensor::row(&v.iter().map(|&x| S::of(x)).collect::<Vec<_>>())
}

impl<S: Scalar> Model<S> {
    /// Versioned JSON document with parameters as nested arrays.
    pub fn to_json(&self) -> Result<String> {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Affine(a) => LayerDoc::Affine {
                    weight: rows_of(&a.weight),
                    bias: flat(&a.bias),
                },
                Layer::BatchNorm(b) => LayerDoc::BatchNorm {
                    gamma: flat(&b.gamma),
                    beta: flat(&b.beta),
                    running_mean: flat(&b.running_mean),
                    running_var: flat(&b.running_var),
                    eps: b.eps.to_f64_lossy(),
                },
                Layer::Relu => LayerDoc::Relu,
            })
            .collect();
        let doc = ModelDoc {
            format_version: MODEL_FORMAT_VERSION,
            architecture: self.arch.clone(),
            layers,
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: ModelDoc = serde_json::from_str(s)?;
        if doc.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported model format_version {} (expected {MODEL_FORMAT_VERSION})",
                doc.format_version
            )));
        }
        let layers = doc
            .layers
            .iter()
            .map(|l| {
                Ok(match l {
                    LayerDoc::Affine { weight, bias } => {
                        let w = if weight.is_empty() {
                            Tensor::zeros(&[0, bias.len()])
                        } else {
                            from_rows(weight)?
                        };
                        Layer::Affine(Affine { weight: w, bias: row_of(bias) })
                    }
                    LayerDoc::BatchNorm {
                        gamma,
                        beta,
                        running_mean,
                        running_var,
                        eps,
                    } => Layer::BatchNorm(BatchNormLayer {
                        gamma: row_of(gamma),
                        beta: row_of(beta),
                        running_mean: row_of(running_mean),
                        running_var: row_of(running_var),
                        eps: S::of(*eps),
                    }),
                    LayerDoc::Relu => Layer::Relu,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(doc.architecture, layers)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Uniform random perturbation of every parameter, for tests and probes.
pub fn jitter<S: Scalar>(model: &mut Model<S>, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in model.param_ids() {
        for v in model.param_mut(id).data_mut() {
            *v = *v + S::of(rng.gen_range(-scale..scale));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bits(m: &Model<f64>) -> Vec<u64> {
        m.param_ids()
            .iter()
            .flat_map(|&id| m.param(id).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
            .collect()
    }

    #[test]
    fn linear_identity_forward() {
        let mut m = Model::<f64>::linear(2, 2);
        *m.param_mut(ParamId { layer: 0, kind: ParamKind::Weight }) = Tensor::identity(2);
        let out = m.forward(&Tensor::row(&[1.0, 2.0]), BnStats::UseRunning).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0]);
    }

    fn bn_only_model(width: usize) -> Model<f64> {
        let arch = Architecture::Mlp { input_dim: width, hidden: vec![], outputs: width };
        // identity affine followed by BN is not a standard MLP layout; build by hand
        let mut layers = vec![Layer::BatchNorm(BatchNormLayer::new(width))];
        layers.push(Layer::Affine(Affine { weight: Tensor::identity(width), bias: Tensor::zeros(&[1, width]) }));
        Model::from_layers(arch, layers).unwrap()
    }

    #[test]
    fn batch_norm_normalizes_with_batch_stats() {
        let m = bn_only_model(3);
        let x = Tensor::from_rows(&[
            vec![1.0, 10.0, -3.0],
            vec![2.0, 20.0, 5.0],
            vec![4.0, 25.0, 0.5],
            vec![7.0, 11.0, 1.5],
        ])
        .unwrap()
        .map(|v| 10.0 * v);
        // normalized variance is v/(v + eps), so keep v well above eps·1e6
        let out = m.forward(&x, BnStats::UseBatch).unwrap();
        for c in 0..3 {
            let col: Vec<f64> = (0..4).map(|r| out.at(r, c)).collect();
            let mean = col.iter().sum::<f64>() / 4.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-6, "{mean} {var}");
        }
    }

    #[test]
    fn zero_gamma_outputs_beta() {
        let mut m = bn_only_model(2);
        if let Layer::BatchNorm(bn) = &mut m.layers_mut()[0] {
            bn.gamma = Tensor::zeros(&[1, 2]);
            bn.beta = Tensor::row(&[0.5, -2.0]);
        }
        let x = Tensor::from_rows(&[vec![1.0, 9.0], vec![-4.0, 3.0], vec![0.0, 1.0]]).unwrap();
        let out = m.forward(&x, BnStats::UseBatch).unwrap();
        for r in 0..3 {
            assert_eq!(out.row_slice(r), &[0.5, -2.0]);
        }
    }

    #[test]
    fn batch_stats_need_two_rows() {
        let m = Model::<f64>::mlp(3, &[4], 2, 0);
        let err = m.forward(&Tensor::row(&[1.0, 2.0, 3.0]), BnStats::UseBatch).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
        assert!(m.forward(&Tensor::row(&[1.0, 2.0, 3.0]), BnStats::UseRunning).is_ok());
        assert!(matches!(
            m.forward(&Tensor::row(&[1.0, 2.0]), BnStats::UseRunning),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn adaptable_params_examples() {
        let m = Model::<f64>::mlp(5, &[8, 8], 3, 1);
        let mask = m.mask(MaskMode::BnOnly).unwrap();
        let view = m.adaptable_params(&mask).unwrap();
        assert_eq!(view.len(), 4);
        assert_eq!(view.iter().map(|(_, t)| t.len()).sum::<usize>(), 32);
        assert!(view.iter().all(|(id, _)| matches!(id.kind, ParamKind::Gamma | ParamKind::Beta)));

        let all = m.mask(MaskMode::All).unwrap();
        assert_eq!(m.adaptable_params(&all).unwrap().len(), m.param_ids().len());

        let lin = Model::<f64>::linear(3, 2);
        assert!(matches!(lin.mask(MaskMode::BnOnly), Err(Error::Config(_))));
    }

    fn blobs() -> (Tensor<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut rows = Vec::new();
        let mut cls = Vec::new();
        for i in 0..80 {
            let c = i % 2;
            let cx = if c == 0 { -2.0 } else { 2.0 };
            rows.push(vec![cx + rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]);
            cls.push(c);
        }
        (Tensor::from_rows(&rows).unwrap(), cls)
    }

    #[test]
    fn separable_blobs_reach_full_accuracy() {
        let (x, y) = blobs();
        let spec = LossSpec::cross_entropy(2).unwrap();
        let cfg = TrainConfig { lr: 0.1, epochs: 50, batch_size: 16, momentum: 0.0, seed: 7 };
        let (m, hist) = train_source(&Model::linear(2, 2), &x, &y, &spec, &cfg).unwrap();
        assert_eq!(m.error_rate(&x, &y, &spec, BnStats::UseRunning).unwrap(), 0.0);
        assert!(hist.epoch_loss.last().unwrap() <= hist.epoch_loss.first().unwrap());
    }

    #[test]
    fn zero_epochs_is_identity_and_training_is_deterministic() {
        let (x, y) = blobs();
        let spec = LossSpec::cross_entropy(2).unwrap();
        let m0 = Model::mlp(2, &[8], 2, 4);
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let (m, _) = train_source(&m0, &x, &y, &spec, &cfg).unwrap();
        assert_eq!(bits(&m), bits(&m0));

        let cfg = TrainConfig { epochs: 5, batch_size: 10, seed: 9, ..TrainConfig::default() };
        let (a, _) = train_source(&m0, &x, &y, &spec, &cfg).unwrap();
        let (b, _) = train_source(&m0, &x, &y, &spec, &cfg).unwrap();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), m0.checksum());
    }

    #[test]
    fn divergence_is_reported_with_location() {
        let (x, y) = blobs();
        let spec = LossSpec::exponential().unwrap();
        let x = x.map(|v| v * 1e3);
        let cfg = TrainConfig { lr: 1e6, epochs: 3, batch_size: 16, momentum: 0.0, seed: 0 };
        let err = train_source(&Model::linear(2, 1), &x, &y, &spec, &cfg).unwrap_err();
        match err {
            Error::Divergence { location, .. } => assert!(location.contains("epoch")),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn json_round_trip_is_exact() {
        let mut m = Model::<f64>::mlp(3, &[4, 4], 2, 5);
        jitter(&mut m, 1.0, 2);
        if let Layer::BatchNorm(bn) = &mut m.layers_mut()[1] {
            bn.running_mean = Tensor::row(&[0.1, 1.0 / 3.0, -7e-300, 5e300]);
        }
        let back = Model::<f64>::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
        assert!(Model::<f64>::from_json(&m.to_json().unwrap().replace("\"format_version\": 1", "\"format_version\": 9")).is_err());
    }
}
