//! Learnt adaptation losses over logits.
//!
//! `m_φ(h) = Σ_k MLP_φ([h_k, logsumexp(h)])` with one shared two-hidden-layer
//! tanh MLP, so the loss is permutation invariant in the classes. The outer
//! gradient is taken by central finite differences over `φ`, which keeps the
//! parameter count small.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::datagen::rng_for;
use crate::error::{dim_err, Error, Result};
use crate::linalg;
use crate::losses::{LossKind, LossParams, LossSpec};
use crate::models::{BnStats, MaskMode, Model};
use crate::tensor::{self, Tensor};
use crate::tta::Batch;

pub const MAX_HIDDEN: usize = 16;
pub const MAX_META_PARAMS: usize = 512;
pub const META_FORMAT_VERSION: u32 = 1;
const META_BATCH_STREAM: u64 = 1 << 40;

/// Parameters of the shared per-class MLP, stored flat in the order
/// `w1 (2×H), b1 (1×H), w2 (H×H), b2 (1×H), w3 (H×1), b3 (1×1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaLossNet {
    hidden: usize,
    params: Vec<f64>,
}

pub fn meta_param_count(hidden: usize) -> usize {
    2 * hidden + hidden + hidden * hidden + hidden + hidden + 1
}

impl MetaLossNet {
    /// Scaled-normal hidden layers and a zero output layer, so the initial
    /// loss is identically 0.
    pub fn new(hidden: usize, seed: u64) -> Result<Self> {
        if hidden == 0 || hidden > MAX_HIDDEN {
            return Err(Error::Config(format!("meta hidden width must be in 1..={MAX_HIDDEN}, got {hidden}")));
        }
        let mut rng = rng_for(seed, 0x6d657461);
        let mut net = Self::zeros(hidden)?;
        let normal = |scale: f64, rng: &mut rand_chacha::ChaCha8Rng| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        };
        let (w1, b1, w2, b2) = (net.range(0), net.range(1), net.range(2), net.range(3));
        for i in w1 {
            net.params[i] = normal(1.0, &mut rng);
        }
        for i in b1 {
            net.params[i] = normal(0.5, &mut rng);
        }
        let s2 = 1.0 / (hidden as f64).sqrt();
        for i in w2 {
            net.params[i] = normal(s2, &mut rng);
        }
        for i in b2 {
            net.params[i] = normal(0.5, &mut rng);
        }
        Ok(net)
    }

    pub fn zeros(hidden: usize) -> Result<Self> {
        if hidden == 0 || hidden > MAX_HIDDEN {
            return Err(Error::Config(format!("meta hidden width must be in 1..={MAX_HIDDEN}, got {hidden}")));
        }
        Ok(Self {
            hidden,
            params: vec![0.0; meta_param_count(hidden)],
        })
    }

    pub fn from_params(hidden: usize, params: Vec<f64>) -> Result<Self> {
        let mut net = Self::zeros(hidden)?;
        if params.len() != net.params.len() {
            return dim_err(format!("{} meta parameters for hidden width {hidden}, expected {}", params.len(), net.params.len()));
        }
        net.params = params;
        Ok(net)
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Index range of block `b` (0..6) in the flat parameter vector.
    fn range(&self, b: usize) -> std::ops::Range<usize> {
        let h = self.hidden;
        let sizes = [2 * h, h, h * h, h, h, 1];
        let start: usize = sizes[..b].iter().sum();
        start..start + sizes[b]
    }

    fn block(&self, b: usize, rows: usize, cols: usize) -> Tensor<f64> {
        Tensor::matrix(rows, cols, self.params[self.range(b)].to_vec()).expect("block shape")
    }

    /// Output layer `(w3, b3)`.
    pub fn set_output_layer(&mut self, w3: &[f64], b3: f64) -> Result<()> {
        let r = self.range(4);
        if w3.len() != r.len() {
            return dim_err("output weights must have one entry per hidden unit");
        }
        self.params[r].copy_from_slice(w3);
        let b = self.range(5).start;
        self.params[b] = b3;
        Ok(())
    }

    /// Second hidden layer activations for per-class inputs `n×2`.
    fn features_graph(&self, g: &mut Graph<f64>, inputs: Var) -> Var {
        let h = self.hidden;
        let w1 = g.constant(self.block(0, 2, h));
        let b1 = g.constant(self.block(1, 1, h));
        let w2 = g.constant(self.block(2, h, h));
        let b2 = g.constant(self.block(3, 1, h));
        let a1 = g.matmul(inputs, w1);
        let a1 = g.add_row(a1, b1);
        let z1 = g.tanh(a1);
        let a2 = g.matmul(z1, w2);
        let a2 = g.add_row(a2, b2);
        g.tanh(a2)
    }

    /// Per-row `m_φ(h)` for a logit batch `n×K`: `n×1`.
    pub fn graph(&self, g: &mut Graph<f64>, h: Var) -> Result<Var> {
        let (n, k) = (g.value(h).rows(), g.value(h).cols());
        if n == 0 || k == 0 {
            return dim_err("meta loss needs a nonempty logit batch");
        }
        let lse = g.row_logsumexp(h)?;
        let ones = g.constant(Tensor::full(&[1, k], 1.0));
        let lse_rep = g.matmul(lse, ones);
        let hf = g.reshape(h, n * k, 1);
        let lf = g.reshape(lse_rep, n * k, 1);
        let inputs = g.concat_cols(hf, lf);
        let z2 = self.features_graph(g, inputs);
        let w3 = g.constant(self.block(4, self.hidden, 1));
        let b3 = g.constant(self.block(5, 1, 1));
        let out = g.matmul(z2, w3);
        let out = g.add_row(out, b3);
        let per_class = g.reshape(out, n, k);
        Ok(g.row_sum(per_class))
    }

    /// `m_φ(h)` for one logit vector.
    pub fn eval(&self, h: &[f64]) -> Result<f64> {
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("meta loss input is not finite".into()));
        }
        let mut g = Graph::new();
        let hv = g.constant(Tensor::row(h));
        let out = self.graph(&mut g, hv)?;
        Ok(g.value(out).item())
    }

    /// Hidden features and their partial derivatives w.r.t. `(h_k, lse)` at
    /// one per-class input; used to fit the output layer to a target.
    pub fn feature_jets(&self, a: f64, lse: f64) -> Result<(Vec<f64>, Vec<[f64; 2]>)> {
        let mut values = Vec::with_capacity(self.hidden);
        let mut grads = Vec::with_capacity(self.hidden);
        for j in 0..self.hidden {
            let mut g = Graph::new();
            let x = g.param(Tensor::row(&[a, lse]));
            let z = self.features_graph(&mut g, x);
            let mut sel = vec![0.0; self.hidden];
            sel[j] = 1.0;
            let s = g.constant(Tensor::column(&sel));
            let out = g.matmul(z, s);
            let out = g.sum_all(out);
            values.push(g.value(out).item());
            let d = g.backward(out)?.get(x);
            grads.push([d.data()[0], d.data()[1]]);
        }
        Ok((values, grads))
    }

    pub fn to_json(&self) -> Result<String> {
        let h = self.hidden;
        let doc = MetaNetDoc {
            format_version: META_FORMAT_VERSION,
            kind: "shared_mlp_logit_lse".into(),
            hidden: h,
            w1: nested(&self.block(0, 2, h)),
            b1: self.params[self.range(1)].to_vec(),
            w2: nested(&self.block(2, h, h)),
            b2: self.params[self.range(3)].to_vec(),
            w3: self.params[self.range(4)].to_vec(),
            b3: self.params[self.range(5).start],
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: MetaNetDoc = serde_json::from_str(text)?;
        if doc.format_version != META_FORMAT_VERSION {
            return Err(Error::Config(format!("unsupported meta net format_version {}", doc.format_version)));
        }
        let mut p = Vec::new();
        for r in &doc.w1 {
            p.extend(r);
        }
        p.extend(&doc.b1);
        for r in &doc.w2 {
            p.extend(r);
        }
        p.extend(&doc.b2);
        p.extend(&doc.w3);
        p.push(doc.b3);
        let net = Self::from_params(doc.hidden, p)?;
        if doc.w1.len() != 2 || doc.w2.len() != doc.hidden {
            return dim_err("meta net block shapes do not match the hidden width");
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn nested(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row_slice(i).to_vec()).collect()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetaNetDoc {
    format_version: u32,
    kind: String,
    hidden: usize,
    w1: Vec<Vec<f64>>,
    b1: Vec<f64>,
    w2: Vec<Vec<f64>>,
    b2: Vec<f64>,
    w3: Vec<f64>,
    b3: f64,
}

/// `m_φ(h)` for one logit vector.
pub fn meta_loss_eval(net: &MetaLossNet, h: &[f64]) -> Result<f64> {
    net.eval(h)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaConfig {
    /// Inner (adaptation) learning rate.
    pub alpha: f64,
    /// Outer (meta) learning rate.
    pub beta: f64,
    pub iterations: usize,
    #[serde(default = "default_task_loss")]
    pub task_loss: LossKind,
    #[serde(default)]
    pub task_loss_params: LossParams,
    #[serde(default = "default_fd_step")]
    pub fd_step: f64,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_meta_mask")]
    pub mask: MaskMode,
    /// Rows drawn per pool each outer iteration; `None` uses whole pools.
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

fn default_task_loss() -> LossKind {
    LossKind::CrossEntropy
}
fn default_fd_step() -> f64 {
    1e-3
}
fn default_hidden() -> usize {
    8
}
fn default_meta_mask() -> MaskMode {
    MaskMode::All
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            iterations: 200,
            task_loss: default_task_loss(),
            task_loss_params: LossParams::default(),
            fd_step: default_fd_step(),
            hidden: default_hidden(),
            mask: default_meta_mask(),
            batch_size: None,
            seed: 0,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("meta.alpha", self.alpha), ("meta.beta", self.beta), ("meta.fd_step", self.fd_step)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        if self.hidden == 0 || self.hidden > MAX_HIDDEN {
            return Err(Error::Config(format!("meta.hidden must be in 1..={MAX_HIDDEN}")));
        }
        if self.batch_size.is_some_and(|b| b < 2) {
            return Err(Error::Config("meta.batch_size must be >= 2".into()));
        }
        Ok(())
    }

    pub fn task_spec(&self, num_classes: usize) -> Result<LossSpec<f64>> {
        LossSpec::new(self.task_loss, self.task_loss_params, num_classes)
    }
}

/// One gradient step of the mean meta loss over `x` on the masked
/// parameters.
pub fn inner_update(model: &Model<f64>, x: &Tensor<f64>, net: &MetaLossNet, alpha: f64, mask: MaskMode) -> Result<Model<f64>> {
    if alpha == 0.0 {
        return Ok(model.clone());
    }
    let trainable = model.mask(mask)?.selected;
    let mut g = Graph::new();
    let binding = model.bind(&mut g, &trainable);
    let xv = g.constant(x.clone());
    let (h, observed) = model.forward_graph(&mut g, &binding, xv, BnStats::UseBatch)?;
    let rows = net.graph(&mut g, h)?;
    let obj = g.mean_all(rows);
    let grads = g.backward(obj)?;
    let mut out = model.clone();
    out.set_running_stats(&observed);
    for id in trainable {
        let d = grads.get(binding.var(id));
        if !d.all_finite() {
            return Err(Error::Divergence {
                location: format!("inner update, parameter {id}"),
                detail: "gradient is not finite".into(),
            });
        }
        for (w, dv) in out.param_mut(id).data_mut().iter_mut().zip(d.data()) {
            *w -= alpha * dv;
        }
    }
    Ok(out)
}

/// Unlabeled adaptation batch paired with a labeled batch from the same
/// shift, used to score the adapted model.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftPair {
    pub unlabeled: Tensor<f64>,
    pub labeled: Batch<f64>,
}

impl ShiftPair {
    /// Independent random subsets of `n` rows from each side (without
    /// replacement; whole pools when smaller than `n`).
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Result<ShiftPair> {
        let pick = |rows: usize, rng: &mut dyn rand::RngCore| -> Vec<usize> {
            if rows <= n {
                (0..rows).collect()
            } else {
                rand::seq::index::sample(rng, rows, n).into_vec()
            }
        };
        let u = pick(self.unlabeled.rows(), rng);
        let l = pick(self.labeled.len(), rng);
        Ok(ShiftPair {
            unlabeled: self.unlabeled.select_rows(&u),
            labeled: Batch::new(
                self.labeled.x.select_rows(&l),
                l.iter().map(|&i| self.labeled.classes[i]).collect(),
            )?,
        })
    }
}

/// Mean task loss after one inner step, averaged over `pairs`.
pub fn outer_objective(net: &MetaLossNet, model: &Model<f64>, pairs: &[ShiftPair], cfg: &MetaConfig) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Config("meta training needs at least one validation pair".into()));
    }
    let task = cfg.task_spec(model.outputs())?;
    let mut total = 0.0;
    for p in pairs {
        let adapted = inner_update(model, &p.unlabeled, net, cfg.alpha, cfg.mask)?;
        let logits = adapted.forward(&p.labeled.x, BnStats::UseBatch)?;
        let n = logits.rows();
        let mut s = 0.0;
        for i in 0..n {
            let y = task.encode_label(p.labeled.classes[i])?;
            s += task.supervised_loss(logits.row_slice(i), &y)?;
        }
        total += s / n as f64;
    }
    Ok(total / pairs.len() as f64)
}

/// Central finite-difference gradient of [`outer_objective`] w.r.t. every
/// meta parameter. Probes run in parallel on their own copies; the result
/// does not depend on scheduling.
pub fn outer_gradient(net: &MetaLossNet, model: &Model<f64>, pairs: &[ShiftPair], cfg: &MetaConfig) -> Result<Vec<f64>> {
    if net.num_params() > MAX_META_PARAMS {
        return Err(Error::Config(format!(
            "meta net has {} parameters; finite differences are limited to {MAX_META_PARAMS}",
            net.num_params()
        )));
    }
    let step = cfg.fd_step;
    (0..net.num_params())
        .into_par_iter()
        .map(|i| {
            let probe = |delta: f64| -> Result<f64> {
                let mut p = net.clone();
                p.params[i] += delta;
                let v = outer_objective(&p, model, pairs, cfg)?;
                if !v.is_finite() {
                    return Err(Error::Divergence {
                        location: format!("meta parameter {i}"),
                        detail: "outer objective probe is not finite".into(),
                    });
                }
                Ok(v)
            };
            let up = probe(step)?;
            let down = probe(-step)?;
            Ok((up - down) / (2.0 * step))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaTrainResult {
    /// Outer objective at the start of each iteration, then after the last.
    pub trajectory: Vec<f64>,
    pub improved: bool,
    /// `"NOT_IMPROVED"` when the final objective exceeds the initial one.
    pub flag: Option<String>,
}

/// Alternates inner adaptation (from the unmodified source model each
/// iteration) and an outer finite-difference step on `φ`. With
/// `cfg.batch_size` set, each iteration draws fresh sub-batches from the
/// pools; the recorded trajectory is always over the whole pools.
pub fn meta_train(
    net: &MetaLossNet,
    model: &Model<f64>,
    pairs: &[ShiftPair],
    cfg: &MetaConfig,
) -> Result<(MetaLossNet, MetaTrainResult)> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Config("meta training needs at least one validation pair".into()));
    }
    let mut net = net.clone();
    let mut trajectory = Vec::with_capacity(cfg.iterations + 1);
    for it in 0..cfg.iterations {
        trajectory.push(outer_objective(&net, model, pairs, cfg)?);
        // batches depend only on (seed, iteration), so every probe sees the same data
        let drawn;
        let batch_pairs = match cfg.batch_size {
            Some(n) => {
                let mut rng = rng_for(cfg.seed, META_BATCH_STREAM + it as u64);
                drawn = pairs.iter().map(|p| p.sample(n, &mut rng)).collect::<Result<Vec<_>>>()?;
                &drawn[..]
            }
            None => pairs,
        };
        let grad = outer_gradient(&net, model, batch_pairs, cfg)?;
        for (p, g) in net.params.iter_mut().zip(&grad) {
            *p -= cfg.beta * g;
        }
        if net.params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                location: format!("meta iteration {}", trajectory.len() - 1),
                detail: "meta parameters became non-finite".into(),
            });
        }
    }
    trajectory.push(outer_objective(&net, model, pairs, cfg)?);
    let improved = trajectory.last() <= trajectory.first();
    Ok((
        net,
        MetaTrainResult {
            trajectory,
            improved,
            flag: (!improved).then(|| "NOT_IMPROVED".to_string()),
        },
    ))
}

// ---- slices and template fits ----

/// Sweeps coordinate `dim` of `base` linearly over `[lo, hi]`.
pub fn slice_export(
    loss: impl Fn(&[f64]) -> Result<f64>,
    base: &[f64],
    dim: usize,
    range: (f64, f64),
    steps: usize,
) -> Result<Vec<(f64, f64)>> {
    if steps < 2 {
        return Err(Error::Config("slice needs at least 2 steps".into()));
    }
    if dim >= base.len() {
        return dim_err(format!("slice dimension {dim} out of bounds for {} logits", base.len()));
    }
    let (lo, hi) = range;
    (0..steps)
        .map(|i| {
            let x = lo + (hi - lo) * i as f64 / (steps - 1) as f64;
            let mut h = base.to_vec();
            h[dim] = x;
            Ok((x, loss(&h)?))
        })
        .collect()
}

pub fn slice_csv(curve: &[(f64, f64)]) -> String {
    let mut s = String::from("x,loss\n");
    for (x, l) in curve {
        s.push_str(&format!("{x:?},{l:?}\n"));
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedEntropyParams {
    pub alpha_mag: f64,
    pub temperature: f64,
    pub offset: f64,
    pub residual: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedQuadratic {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub residual: f64,
}

/// Least squares `y ≈ α·x + c`; returns `(α, c, residual)`.
fn affine_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let alpha = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let c = my - alpha * mx;
    let res = x.iter().zip(y).map(|(a, b)| (alpha * a + c - b).powi(2)).sum();
    (alpha, c, res)
}

/// Fits `α·H(softmax(h/T)) + c` along the slice. `T` is searched on a log
/// grid over `[0.1, 10]` and refined by golden section; `(α, c)` are closed
/// form for each `T`.
pub fn fit_scaled_entropy(curve: &[(f64, f64)], base: &[f64], dim: usize) -> Result<FittedEntropyParams> {
    if curve.len() < 10 {
        return Err(Error::Config("template fit needs at least 10 slice points".into()));
    }
    if dim >= base.len() {
        return dim_err("slice dimension out of bounds");
    }
    let ys: Vec<f64> = curve.iter().map(|p| p.1).collect();
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    if ys.iter().all(|&y| (y - mean).abs() <= 1e-15 * mean.abs().max(1.0)) {
        return Ok(FittedEntropyParams {
            alpha_mag: 0.0,
            temperature: 1.0,
            offset: mean,
            residual: 0.0,
        });
    }
    let eval = |t: f64| -> Result<(f64, f64, f64)> {
        let feats = curve
            .iter()
            .map(|&(x, _)| {
                let mut h = base.to_vec();
                h[dim] = x;
                let scaled: Vec<f64> = h.iter().map(|v| v / t).collect();
                Ok(tensor::entropy(&tensor::softmax(&scaled)?))
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(affine_fit(&feats, &ys))
    };
    let (lo, hi) = (0.1f64.ln(), 10f64.ln());
    let grid = 200;
    let mut best = (f64::INFINITY, 0usize);
    for i in 0..=grid {
        let t = (lo + (hi - lo) * i as f64 / grid as f64).exp();
        let r = eval(t)?.2;
        if r < best.0 {
            best = (r, i);
        }
    }
    let cell = (hi - lo) / grid as f64;
    let mut a = (lo + cell * (best.1 as f64 - 1.0)).max(lo);
    let mut b = (lo + cell * (best.1 as f64 + 1.0)).min(hi);
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..60 {
        let c = b - phi * (b - a);
        let d = a + phi * (b - a);
        if eval(c.exp())?.2 <= eval(d.exp())?.2 {
            b = d;
        } else {
            a = c;
        }
    }
    let mut t = (0.5 * (a + b)).exp();
    let mut fit = eval(t)?;
    let grid_t = (lo + cell * best.1 as f64).exp();
    let grid_fit = eval(grid_t)?;
    if grid_fit.2 < fit.2 {
        t = grid_t;
        fit = grid_fit;
    }
    Ok(FittedEntropyParams {
        alpha_mag: fit.0,
        temperature: t,
        offset: fit.1,
        residual: fit.2,
    })
}

/// Least squares `a·x² + b·x + c` along the slice.
pub fn fit_quadratic(curve: &[(f64, f64)]) -> Result<FittedQuadratic> {
    if curve.len() < 3 {
        return Err(Error::Config("quadratic fit needs at least 3 points".into()));
    }
    let mut ata = [0.0; 9];
    let mut aty = [0.0; 3];
    for &(x, y) in curve {
        let row = [x * x, x, 1.0];
        for i in 0..3 {
            aty[i] += row[i] * y;
            for j in 0..3 {
                ata[i * 3 + j] += row[i] * row[j];
            }
        }
    }
    let sol = linalg::solve(&ata, &aty)?;
    let residual = curve
        .iter()
        .map(|&(x, y)| (sol[0] * x * x + sol[1] * x + sol[2] - y).powi(2))
        .sum();
    Ok(FittedQuadratic {
        a: sol[0],
        b: sol[1],
        c: sol[2],
        residual,
    })
}

/// Pearson correlation of two equally long series (0 when either is flat).
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len()) as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

/// Random logit batch helper for tests and checks.
pub fn random_logits(rng: &mut impl Rng, n: usize, k: usize, scale: f64) -> Tensor<f64> {
    let data = (0..n * k)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect();
    Tensor::matrix(n, k, data).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_output_layer_gives_zero() {
        let net = MetaLossNet::new(8, 1).unwrap();
        assert_eq!(net.num_params(), 105);
        assert_eq!(net.eval(&[0.3, -2.0, 5.0]).unwrap(), 0.0);
        assert!(meta_param_count(MAX_HIDDEN) <= MAX_META_PARAMS);
        assert!(MetaLossNet::new(17, 0).is_err());
    }

    #[test]
    fn permutation_invariant() {
        let mut net = MetaLossNet::new(8, 2).unwrap();
        net.set_output_layer(&[0.5, -1.0, 0.2, 0.3, 0.7, -0.1, 0.9, 0.05], 0.1).unwrap();
        let a = net.eval(&[1.0, -0.5, 2.0]).unwrap();
        let b = net.eval(&[2.0, 1.0, -0.5]).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(net.eval(&[f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn json_round_trip() {
        let mut net = MetaLossNet::new(4, 3).unwrap();
        net.set_output_layer(&[0.1, 0.2, 0.3, 1.0 / 3.0], -0.7).unwrap();
        assert_eq!(MetaLossNet::from_json(&net.to_json().unwrap()).unwrap(), net);
    }

    #[test]
    fn quadratic_fit_exact() {
        let curve: Vec<(f64, f64)> = (0..21).map(|i| {
            let x = -5.0 + 0.5 * i as f64;
            (x, -0.5 * x * x + 3.0)
        }).collect();
        let q = fit_quadratic(&curve).unwrap();
        assert!((q.a + 0.5).abs() < 1e-10 && q.b.abs() < 1e-10 && (q.c - 3.0).abs() < 1e-10);
    }
}
