//! Training losses in (expanded) conjugate form `ℓ(h, y) = f(h) − yᵀg(h)` and
//! the conjugate pseudo-labels / adaptation losses derived from them.
//!
//! Every quantity is available twice: as plain functions of one logit vector
//! and as batched graph builders (one sample per row) for gradient-based
//! adaptation. The two routes share no code past the scalar kernels, so the
//! tests use each as the other's oracle.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{dim_err, Error, Result};
use crate::linalg;
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Squared,
    Polyloss,
    Exponential,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [
        LossKind::CrossEntropy,
        LossKind::Squared,
        LossKind::Polyloss,
        LossKind::Exponential,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::CrossEntropy => "cross_entropy",
            LossKind::Squared => "squared",
            LossKind::Polyloss => "polyloss",
            LossKind::Exponential => "exponential",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss kind `{s}`")))
    }
}

/// Loss-specific scalars.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossParams {
    /// PolyLoss ε.
    #[serde(default)]
    pub epsilon: f64,
}

/// Per-class target weights: one-hot for hard labels, soft for pseudo-labels,
/// a single `±1`-ish score for the exponential loss.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVector<S>(pub Vec<S>);

impl<S: Scalar> LabelVector<S> {
    pub fn one_hot(class: usize, k: usize) -> Self {
        let mut v = vec![S::zero(); k];
        v[class] = S::one();
        Self(v)
    }

    pub fn values(&self) -> &[S] {
        &self.0
    }
}

/// A training loss `f(h) − yᵀg(h)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSpec<S> {
    kind: LossKind,
    epsilon: S,
    num_classes: usize,
}

pub fn make_loss<S: Scalar>(kind: LossKind, params: LossParams, num_classes: usize) -> Result<LossSpec<S>> {
    LossSpec::new(kind, params, num_classes)
}

impl<S: Scalar> LossSpec<S> {
    pub fn new(kind: LossKind, params: LossParams, num_classes: usize) -> Result<Self> {
        if !(params.epsilon >= 0.0) || !params.epsilon.is_finite() {
            return Err(Error::Config(format!(
                "polyloss epsilon must be a finite value >= 0, got {}",
                params.epsilon
            )));
        }
        match kind {
            LossKind::Exponential if num_classes != 2 => {
                return Err(Error::Config(
                    "exponential loss is defined for binary scalar-score models only (num_classes = 2)".into(),
                ))
            }
            _ if num_classes < 2 => {
                return Err(Error::Config(format!("num_classes must be >= 2, got {num_classes}")))
            }
            _ => {}
        }
        Ok(Self {
            kind,
            epsilon: S::of(params.epsilon),
            num_classes,
        })
    }

    pub fn cross_entropy(num_classes: usize) -> Result<Self> {
        Self::new(LossKind::CrossEntropy, LossParams::default(), num_classes)
    }

    pub fn squared(num_classes: usize) -> Result<Self> {
        Self::new(LossKind::Squared, LossParams::default(), num_classes)
    }

    pub fn polyloss(epsilon: f64, num_classes: usize) -> Result<Self> {
        Self::new(LossKind::Polyloss, LossParams { epsilon }, num_classes)
    }

    pub fn exponential() -> Result<Self> {
        Self::new(LossKind::Exponential, LossParams::default(), 2)
    }

    pub fn kind(&self) -> LossKind {
        self.kind
    }

    pub fn epsilon(&self) -> S {
        self.epsilon
    }

    pub fn params(&self) -> LossParams {
        LossParams {
            epsilon: self.epsilon.to_f64_lossy(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Width of the logit vector the loss consumes: 1 for the exponential
    /// loss (a single real score), `num_classes` otherwise.
    pub fn output_dim(&self) -> usize {
        match self.kind {
            LossKind::Exponential => 1,
            _ => self.num_classes,
        }
    }

    /// `g` is the identity.
    pub fn is_simple(&self) -> bool {
        matches!(self.kind, LossKind::CrossEntropy | LossKind::Squared)
    }

    /// Target encoding of a class index (`0..num_classes`). For the
    /// exponential loss class 0 maps to `−1` and class 1 to `+1`.
    pub fn encode_label(&self, class: usize) -> Result<LabelVector<S>> {
        if class >= self.num_classes {
            return Err(Error::Config(format!(
                "label {class} out of range for {} classes",
                self.num_classes
            )));
        }
        Ok(match self.kind {
            LossKind::Exponential => LabelVector(vec![if class == 1 { S::one() } else { -S::one() }]),
            _ => LabelVector::one_hot(class, self.num_classes),
        })
    }

    /// Predicted class of a logit vector.
    pub fn predict(&self, h: &[S]) -> usize {
        match self.kind {
            LossKind::Exponential => usize::from(h[0] > S::zero()),
            _ => tensor::argmax(h),
        }
    }

    fn check_dim(&self, h: &[S]) -> Result<()> {
        if h.len() != self.output_dim() {
            return dim_err(format!(
                "{} expects {} logits, got {}",
                self.kind,
                self.output_dim(),
                h.len()
            ));
        }
        Ok(())
    }

    pub fn f(&self, h: &[S]) -> Result<S> {
        self.check_dim(h)?;
        match self.kind {
            LossKind::CrossEntropy | LossKind::Polyloss => tensor::logsumexp(h),
            LossKind::Squared => Ok(S::of(0.5) * tensor::dot(h, h)),
            LossKind::Exponential => Ok(h[0].cosh()),
        }
    }

    pub fn grad_f(&self, h: &[S]) -> Result<Vec<S>> {
        self.check_dim(h)?;
        match self.kind {
            LossKind::CrossEntropy | LossKind::Polyloss => tensor::softmax(h),
            LossKind::Squared => Ok(h.to_vec()),
            LossKind::Exponential => Ok(vec![h[0].sinh()]),
        }
    }

    /// Target-coupling map.
    pub fn g(&self, h: &[S]) -> Result<Vec<S>> {
        self.check_dim(h)?;
        match self.kind {
            LossKind::CrossEntropy | LossKind::Squared => Ok(h.to_vec()),
            LossKind::Polyloss => {
                let z = tensor::softmax(h)?;
                Ok(h.iter()
                    .zip(z)
                    .map(|(&x, p)| x - self.epsilon * (S::one() - p))
                    .collect())
            }
            LossKind::Exponential => Ok(vec![h[0].sinh()]),
        }
    }

    /// Jacobian of `g`, row-major `(∂gᵢ/∂hⱼ)`.
    pub fn jac_g(&self, h: &[S]) -> Result<Vec<S>> {
        self.check_dim(h)?;
        let k = h.len();
        match self.kind {
            LossKind::CrossEntropy | LossKind::Squared => Ok(Tensor::<S>::identity(k).into_data()),
            LossKind::Polyloss => Ok(crate::autodiff::poly_system(&tensor::softmax(h)?, self.epsilon)),
            LossKind::Exponential => Ok(vec![h[0].cosh()]),
        }
    }

    /// `f(h) − yᵀg(h)`.
    pub fn supervised_loss(&self, h: &[S], y: &LabelVector<S>) -> Result<S> {
        self.check_dim(h)?;
        if y.0.len() != h.len() {
            return dim_err(format!("label has {} entries, logits {}", y.0.len(), h.len()));
        }
        match self.kind {
            LossKind::Exponential => {
                // ½eᶻ(1−y) + ½e⁻ᶻ(1+y): exactly e^{−yz} for y = ±1
                let (z, y) = (h[0], y.0[0]);
                let half = S::of(0.5);
                Ok(half * z.exp() * (S::one() - y) + half * (-z).exp() * (S::one() + y))
            }
            _ => Ok(self.f(h)? - tensor::dot(&y.0, &self.g(h)?)),
        }
    }

    /// The label `y` at which `h` is a stationary point of `ℓ(·, y)`:
    /// `∇f(h)` when `g` is the identity, otherwise the solution of
    /// `Dg(h)ᵀ y = ∇f(h)`.
    pub fn conjugate_pseudolabel(&self, h: &[S]) -> Result<LabelVector<S>> {
        self.check_dim(h)?;
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite logits".into()));
        }
        match self.kind {
            LossKind::CrossEntropy | LossKind::Squared => Ok(LabelVector(self.grad_f(h)?)),
            LossKind::Exponential => Ok(LabelVector(vec![h[0].tanh()])),
            LossKind::Polyloss => {
                let jac = self.jac_g(h)?;
                let k = h.len();
                let mut jt = vec![S::zero(); k * k];
                for i in 0..k {
                    for j in 0..k {
                        jt[j * k + i] = jac[i * k + j];
                    }
                }
                Ok(LabelVector(linalg::solve(&jt, &self.grad_f(h)?)?))
            }
        }
    }

    /// Conjugate adaptation loss `ℓ(h, y_cpl(h))`.
    pub fn conjugate_loss(&self, h: &[S]) -> Result<S> {
        let y = self.conjugate_pseudolabel(h)?;
        self.supervised_loss(h, &y)
    }

    /// `f(h) − hᵀ∇f(h)`, i.e. `−f*(∇f(h))`; only meaningful for `g = id`.
    pub fn conjugate_loss_direct(&self, h: &[S]) -> Result<S> {
        if !self.is_simple() {
            return Err(Error::Config(format!(
                "{} has a non-identity target map; use conjugate_loss",
                self.kind
            )));
        }
        Ok(self.f(h)? - tensor::dot(h, &self.grad_f(h)?))
    }

    /// Closed-form convex conjugate `f*(y)` for the simple-form losses.
    ///
    /// For cross-entropy `f*` is the negative entropy on the probability
    /// simplex; inputs farther than 1e-9 from it are a domain error.
    pub fn conjugate_f(&self, y: &[S]) -> Result<S> {
        match self.kind {
            LossKind::CrossEntropy => {
                let tol = S::of(1e-9);
                let total: S = y.iter().copied().sum();
                if (total - S::one()).abs() > tol || y.iter().any(|&v| v < -tol) {
                    return Err(Error::Domain(format!(
                        "negative entropy needs a point on the simplex (sum {total})"
                    )));
                }
                Ok(-tensor::entropy(y))
            }
            LossKind::Squared => Ok(S::of(0.5) * tensor::dot(y, y)),
            _ => Err(Error::Config(format!("no closed-form conjugate for {}", self.kind))),
        }
    }

    /// Fenchel-Young residual at `y = ∇f(h)` for simple-form losses; the
    /// stationarity residual `‖∇f(h) − Dg(h)ᵀ y_cpl‖∞` otherwise.
    pub fn fenchel_gap(&self, h: &[S]) -> Result<S> {
        if self.is_simple() {
            let y = self.grad_f(h)?;
            let lhs = self.f(h)? - tensor::dot(h, &y);
            return Ok((lhs + self.conjugate_f(&y)?).abs());
        }
        let y = self.conjugate_pseudolabel(h)?;
        let jt_y = linalg::mat_t_vec(&self.jac_g(h)?, &y.0);
        Ok(self
            .grad_f(h)?
            .iter()
            .zip(jt_y)
            .map(|(a, b)| (*a - b).abs())
            .fold(S::zero(), S::max))
    }

    // ---- batched graph builders; rows are samples ----

    fn check_graph_dim(&self, g: &Graph<S>, h: Var) -> Result<()> {
        let cols = g.value(h).cols();
        if cols != self.output_dim() {
            return dim_err(format!("{} expects {} logit columns, got {cols}", self.kind, self.output_dim()));
        }
        Ok(())
    }

    /// `f` per row: `n×k → n×1`.
    pub fn f_graph(&self, g: &mut Graph<S>, h: Var) -> Result<Var> {
        self.check_graph_dim(g, h)?;
        match self.kind {
            LossKind::CrossEntropy | LossKind::Polyloss => g.row_logsumexp(h),
            LossKind::Squared => {
                let sq = g.square(h);
                let s = g.row_sum(sq);
                Ok(g.scale(s, S::of(0.5)))
            }
            LossKind::Exponential => {
                let (ep, em) = exp_pair(g, h);
                let s = g.add(ep, em);
                Ok(g.scale(s, S::of(0.5)))
            }
        }
    }

    /// `∇f` per row: `n×k → n×k`.
    pub fn grad_f_graph(&self, g: &mut Graph<S>, h: Var) -> Result<Var> {
        self.check_graph_dim(g, h)?;
        match self.kind {
            LossKind::CrossEntropy | LossKind::Polyloss => g.row_softmax(h),
            LossKind::Squared => Ok(h),
            LossKind::Exponential => {
                let (ep, em) = exp_pair(g, h);
                let s = g.sub(ep, em);
                Ok(g.scale(s, S::of(0.5)))
            }
        }
    }

    pub fn g_graph(&self, g: &mut Graph<S>, h: Var) -> Result<Var> {
        self.check_graph_dim(g, h)?;
        match self.kind {
            LossKind::CrossEntropy | LossKind::Squared => Ok(h),
            LossKind::Polyloss => {
                let z = g.row_softmax(h)?;
                let nz = g.neg(z);
                let one_minus = g.add_scalar(nz, S::one());
                let pen = g.scale(one_minus, self.epsilon);
                Ok(g.sub(h, pen))
            }
            LossKind::Exponential => self.grad_f_graph(g, h),
        }
    }

    /// Per-row supervised loss against a label matrix `y` (`n×k`): `n×1`.
    pub fn supervised_graph(&self, g: &mut Graph<S>, h: Var, y: Var) -> Result<Var> {
        self.check_graph_dim(g, h)?;
        if self.kind == LossKind::Exponential {
            let (ep, em) = exp_pair(g, h);
            let ny = g.neg(y);
            let one_minus = g.add_scalar(ny, S::one());
            let one_plus = g.add_scalar(y, S::one());
            let a = g.mul(ep, one_minus);
            let b = g.mul(em, one_plus);
            let s = g.add(a, b);
            return Ok(g.scale(s, S::of(0.5)));
        }
        let fv = self.f_graph(g, h)?;
        let gv = self.g_graph(g, h)?;
        let yg = g.mul(y, gv);
        let dot = g.row_sum(yg);
        Ok(g.sub(fv, dot))
    }

    /// Per-row conjugate pseudo-labels, differentiable w.r.t. `h`.
    pub fn pseudolabel_graph(&self, g: &mut Graph<S>, h: Var) -> Result<Var> {
        self.check_graph_dim(g, h)?;
        match self.kind {
            LossKind::CrossEntropy | LossKind::Squared => self.grad_f_graph(g, h),
            LossKind::Exponential => Ok(g.tanh(h)),
            LossKind::Polyloss => g.poly_pseudolabel(h, self.epsilon),
        }
    }

    /// Per-row conjugate loss `ℓ(h, y_cpl(h))` with the label inside the graph.
    pub fn conjugate_graph(&self, g: &mut Graph<S>, h: Var) -> Result<Var> {
        let y = self.pseudolabel_graph(g, h)?;
        self.supervised_graph(g, h, y)
    }

    /// Per-row `f(h) − hᵀ∇f(h)` (simple-form losses only).
    pub fn conjugate_direct_graph(&self, g: &mut Graph<S>, h: Var) -> Result<Var> {
        if !self.is_simple() {
            return Err(Error::Config(format!(
                "{} has a non-identity target map; use conjugate_graph",
                self.kind
            )));
        }
        let fv = self.f_graph(g, h)?;
        let gf = self.grad_f_graph(g, h)?;
        let hy = g.mul(h, gf);
        let dot = g.row_sum(hy);
        Ok(g.sub(fv, dot))
    }

    /// Label matrix for a batch of class indices.
    pub fn encode_labels(&self, classes: &[usize]) -> Result<Tensor<S>> {
        let k = self.output_dim();
        let mut data = Vec::with_capacity(classes.len() * k);
        for &c in classes {
            data.extend(self.encode_label(c)?.0);
        }
        Tensor::matrix(classes.len(), k, data)
    }
}

fn exp_pair<S: Scalar>(g: &mut Graph<S>, h: Var) -> (Var, Var) {
    let ep = g.exp(h);
    let nh = g.neg(h);
    let em = g.exp(nh);
    (ep, em)
}
