//! Tape-based reverse-mode automatic differentiation over rank-2 tensors.
//!
//! A [`Graph`] records every primitive as it is applied, so node order is a
//! topological order by construction. [`Graph::backward`] walks the tape once
//! in reverse. Shape mismatches inside the tape are programming errors and
//! panic with the offending shapes; numerical failures surface as [`Error`].

use crate::error::{Error, Result};
use crate::linalg;
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    SubRow(Var, Var),
    MulRow(Var, Var),
    DivRow(Var, Var),
    SubCol(Var, Var),
    MulCol(Var, Var),
    MatMul(Var, Var),
    Scale(Var, S),
    AddScalar(Var, S),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    Powf(Var, S),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    SumAll(Var),
    MeanAll(Var),
    ColSum(Var),
    ColMean(Var),
    RowSum(Var),
    RowLogSumExp(Var),
    RowSoftmax(Var),
    Reshape(Var),
    ConcatCols(Var, Var),
    /// Row-wise PolyLoss conjugate pseudo-label; carries ε.
    PolyLabel(Var, S),
}

#[derive(Clone, Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Computation tape.
#[derive(Clone, Debug, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

/// Result of [`Graph::backward`]: one gradient per node.
#[derive(Clone, Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
    shapes: Vec<Vec<usize>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the output w.r.t. `v`; a zero tensor when `v` did not
    /// influence the output.
    pub fn get(&self, v: Var) -> Tensor<S> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn same_shape<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, what: &str) {
    assert_eq!(
        (a.rows(), a.cols()),
        (b.rows(), b.cols()),
        "{what}: shape mismatch"
    );
}

fn shape2<S: Scalar>(t: &Tensor<S>) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Differentiable leaf (a parameter or an input we want gradients for).
    pub fn param(&mut self, t: Tensor<S>) -> Var {
        let t = if t.shape().len() == 2 {
            t
        } else {
            let (r, c) = (t.rows(), t.cols());
            t.reshape(&[r, c]).expect("same size")
        };
        self.push(t, Op::Leaf, true)
    }

    /// Constant leaf; gradient flow stops here.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        let t = if t.shape().len() == 2 {
            t
        } else {
            let (r, c) = (t.rows(), t.cols());
            t.reshape(&[r, c]).expect("same size")
        };
        self.push(t, Op::Leaf, false)
    }

    /// Copies the current value of `v` into a fresh constant.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<S>, f: impl Fn(S, S) -> S, what: &str) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(va, vb, what);
        let out = va.zip_map(vb, f).expect("checked");
        let ng = self.ng(&[a, b]);
        self.push(out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y, "div")
    }

    fn row_bcast(&mut self, a: Var, r: Var, op: Op<S>, f: impl Fn(S, S) -> S) -> Var {
        let (va, vr) = (self.value(a), self.value(r));
        let (n, m) = shape2(va);
        assert_eq!(shape2(vr), (1, m), "row broadcast: {n}x{m} with {:?}", vr.shape());
        let mut out = va.clone();
        for i in 0..n {
            for (o, &x) in out.row_slice_mut(i).iter_mut().zip(vr.data()) {
                *o = f(*o, x);
            }
        }
        let ng = self.ng(&[a, r]);
        self.push(out, op, ng)
    }

    /// `a[i, j] + r[0, j]`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Var {
        self.row_bcast(a, r, Op::AddRow(a, r), |x, y| x + y)
    }

    pub fn sub_row(&mut self, a: Var, r: Var) -> Var {
        self.row_bcast(a, r, Op::SubRow(a, r), |x, y| x - y)
    }

    pub fn mul_row(&mut self, a: Var, r: Var) -> Var {
        self.row_bcast(a, r, Op::MulRow(a, r), |x, y| x * y)
    }

    pub fn div_row(&mut self, a: Var, r: Var) -> Var {
        self.row_bcast(a, r, Op::DivRow(a, r), |x, y| x / y)
    }

    fn col_bcast(&mut self, a: Var, c: Var, op: Op<S>, f: impl Fn(S, S) -> S) -> Var {
        let (va, vc) = (self.value(a), self.value(c));
        let (n, m) = shape2(va);
        assert_eq!(shape2(vc), (n, 1), "column broadcast: {n}x{m} with {:?}", vc.shape());
        let mut out = va.clone();
        for i in 0..n {
            let s = vc.data()[i];
            for o in out.row_slice_mut(i) {
                *o = f(*o, s);
            }
        }
        let ng = self.ng(&[a, c]);
        self.push(out, op, ng)
    }

    /// `a[i, j] - c[i, 0]`.
    pub fn sub_col(&mut self, a: Var, c: Var) -> Var {
        self.col_bcast(a, c, Op::SubCol(a, c), |x, y| x - y)
    }

    pub fn mul_col(&mut self, a: Var, c: Var) -> Var {
        self.col_bcast(a, c, Op::MulCol(a, c), |x, y| x * y)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self
            .value(a)
            .matmul(self.value(b))
            .unwrap_or_else(|e| panic!("matmul: {e}"));
        let ng = self.ng(&[a, b]);
        self.push(out, Op::MatMul(a, b), ng)
    }

    fn unary(&mut self, a: Var, op: Op<S>, f: impl Fn(S) -> S) -> Var {
        let out = self.value(a).map(f);
        let ng = self.ng(&[a]);
        self.push(out, op, ng)
    }

    pub fn scale(&mut self, a: Var, s: S) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -S::one())
    }

    pub fn add_scalar(&mut self, a: Var, s: S) -> Var {
        self.unary(a, Op::AddScalar(a, s), |x| x + s)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), S::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), S::ln)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), S::sqrt)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn powf(&mut self, a: Var, p: S) -> Var {
        self.unary(a, Op::Powf(a, p), |x| x.powf(p))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(S::zero()))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), S::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    /// `log(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    fn reduce(&mut self, a: Var, op: Op<S>, out: Tensor<S>) -> Var {
        let ng = self.ng(&[a]);
        self.push(out, op, ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.reduce(a, Op::SumAll(a), out)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Tensor::scalar(v.sum() / S::of(v.len() as f64));
        self.reduce(a, Op::MeanAll(a), out)
    }

    /// Sums each column over the rows: `n×m → 1×m`.
    pub fn col_sum(&mut self, a: Var) -> Var {
        let out = col_sum(self.value(a));
        self.reduce(a, Op::ColSum(a), out)
    }

    pub fn col_mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let n = S::of(v.rows() as f64);
        let out = col_sum(v).map(|x| x / n);
        self.reduce(a, Op::ColMean(a), out)
    }

    /// Sums each row: `n×m → n×1`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let sums: Vec<S> = (0..v.rows()).map(|i| v.row_slice(i).iter().copied().sum()).collect();
        let out = Tensor::column(&sums);
        self.reduce(a, Op::RowSum(a), out)
    }

    /// Row-wise stabilized log-sum-exp: `n×m → n×1`.
    pub fn row_logsumexp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let vals = (0..v.rows())
            .map(|i| tensor::logsumexp(v.row_slice(i)))
            .collect::<Result<Vec<S>>>()?;
        let out = Tensor::column(&vals);
        Ok(self.reduce(a, Op::RowLogSumExp(a), out))
    }

    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let mut data = Vec::with_capacity(v.len());
        for i in 0..v.rows() {
            data.extend(tensor::softmax(v.row_slice(i))?);
        }
        let out = Tensor::matrix(v.rows(), v.cols(), data)?;
        Ok(self.reduce(a, Op::RowSoftmax(a), out))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let out = self
            .value(a)
            .reshape(&[rows, cols])
            .unwrap_or_else(|e| panic!("reshape: {e}"));
        self.reduce(a, Op::Reshape(a), out)
    }

    /// Places `b`'s columns after `a`'s.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (n, ma) = shape2(va);
        let (nb, mb) = shape2(vb);
        assert_eq!(n, nb, "concat_cols: row mismatch");
        let mut data = Vec::with_capacity(n * (ma + mb));
        for i in 0..n {
            data.extend_from_slice(va.row_slice(i));
            data.extend_from_slice(vb.row_slice(i));
        }
        let out = Tensor::matrix(n, ma + mb, data).expect("sized");
        let ng = self.ng(&[a, b]);
        self.push(out, Op::ConcatCols(a, b), ng)
    }

    /// Row-wise PolyLoss conjugate pseudo-label: for each row `h`, the solution
    /// `y` of `(I + ε·diag(z) − ε·z zᵀ) y = z` with `z = softmax(h)`.
    /// Differentiable through the solve.
    pub fn poly_pseudolabel(&mut self, a: Var, eps: S) -> Result<Var> {
        let v = self.value(a);
        let mut data = Vec::with_capacity(v.len());
        for i in 0..v.rows() {
            let z = tensor::softmax(v.row_slice(i))?;
            data.extend(linalg::solve(&poly_system(&z, eps), &z)?);
        }
        let out = Tensor::matrix(v.rows(), v.cols(), data)?;
        Ok(self.reduce(a, Op::PolyLabel(a, eps), out))
    }

    /// Reverse sweep from the scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients<S>> {
        if !self.value(output).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(output).shape()
            )));
        }
        let n = output.0 + 1;
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::scalar(S::one()));

        for idx in (0..n).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, idx: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let out = &self.nodes[idx].value;
        let mut acc = |v: Var, d: Tensor<S>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(t) => {
                    for (x, y) in t.data_mut().iter_mut().zip(d.data()) {
                        *x = *x + *y;
                    }
                }
                slot @ None => *slot = Some(d),
            }
        };
        let zip = |a: &Tensor<S>, f: &dyn Fn(S, S) -> S| a.zip_map(g, f).expect("same shape");

        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                acc(*a, zip(val(*b), &|y, gg| y * gg));
                acc(*b, zip(val(*a), &|x, gg| x * gg));
            }
            Op::Div(a, b) => {
                let vb = val(*b);
                acc(*a, zip(vb, &|y, gg| gg / y));
                let t = out.zip_map(vb, |o, y| o / y).expect("same shape");
                acc(*b, zip(&t, &|q, gg| -gg * q));
            }
            Op::AddRow(a, r) => {
                acc(*a, g.clone());
                acc(*r, col_sum(g));
            }
            Op::SubRow(a, r) => {
                acc(*a, g.clone());
                acc(*r, col_sum(g).map(|x| -x));
            }
            Op::MulRow(a, r) => {
                let (va, vr) = (val(*a), val(*r));
                acc(*a, row_apply(g, vr, |gg, y| gg * y));
                acc(*r, col_sum(&g.zip_map(va, |gg, x| gg * x).expect("same shape")));
            }
            Op::DivRow(a, r) => {
                let vr = val(*r);
                acc(*a, row_apply(g, vr, |gg, y| gg / y));
                let t = row_apply(&g.zip_map(out, |gg, o| gg * o).expect("same"), vr, |x, y| -x / y);
                acc(*r, col_sum(&t));
            }
            Op::SubCol(a, c) => {
                acc(*a, g.clone());
                acc(*c, row_sums(g).map(|x| -x));
            }
            Op::MulCol(a, c) => {
                let (va, vc) = (val(*a), val(*c));
                acc(*a, col_apply(g, vc, |gg, s| gg * s));
                acc(*c, row_sums(&g.zip_map(va, |gg, x| gg * x).expect("same shape")));
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if self.nodes[a.0].needs_grad {
                    acc(*a, g.matmul(&vb.transpose()).expect("shapes"));
                }
                if self.nodes[b.0].needs_grad {
                    acc(*b, va.transpose().matmul(g).expect("shapes"));
                }
            }
            Op::Scale(a, s) => acc(*a, g.map(|x| x * *s)),
            Op::AddScalar(a, _) => acc(*a, g.clone()),
            Op::Exp(a) => acc(*a, zip(out, &|o, gg| o * gg)),
            Op::Log(a) => acc(*a, zip(val(*a), &|x, gg| gg / x)),
            Op::Sqrt(a) => acc(*a, zip(out, &|o, gg| gg / (o + o))),
            Op::Square(a) => acc(*a, zip(val(*a), &|x, gg| (x + x) * gg)),
            Op::Powf(a, p) => {
                let p = *p;
                acc(*a, zip(val(*a), &|x, gg| gg * p * x.powf(p - S::one())))
            }
            Op::Relu(a) => acc(*a, zip(val(*a), &|x, gg| if x > S::zero() { gg } else { S::zero() })),
            Op::Tanh(a) => acc(*a, zip(out, &|o, gg| gg * (S::one() - o * o))),
            Op::Sigmoid(a) => acc(*a, zip(out, &|o, gg| gg * o * (S::one() - o))),
            Op::Softplus(a) => acc(*a, zip(val(*a), &|x, gg| gg * sigmoid(x))),
            Op::SumAll(a) => {
                let gs = g.item();
                acc(*a, Tensor::full(val(*a).shape(), gs));
            }
            Op::MeanAll(a) => {
                let va = val(*a);
                let gs = g.item() / S::of(va.len() as f64);
                acc(*a, Tensor::full(va.shape(), gs));
            }
            Op::ColSum(a) => {
                let va = val(*a);
                acc(*a, row_apply(&Tensor::zeros(va.shape()), g, |_, gg| gg));
            }
            Op::ColMean(a) => {
                let va = val(*a);
                let n = S::of(va.rows() as f64);
                acc(*a, row_apply(&Tensor::zeros(va.shape()), g, |_, gg| gg / n));
            }
            Op::RowSum(a) => {
                let va = val(*a);
                acc(*a, col_apply(&Tensor::zeros(va.shape()), g, |_, gg| gg));
            }
            Op::RowLogSumExp(a) => {
                // d lse / d h = softmax(h) = exp(h - lse)
                let va = val(*a);
                let mut d = va.clone();
                for i in 0..va.rows() {
                    let (l, gi) = (out.data()[i], g.data()[i]);
                    for x in d.row_slice_mut(i) {
                        *x = (*x - l).exp() * gi;
                    }
                }
                acc(*a, d);
            }
            Op::RowSoftmax(a) => {
                let mut d = out.clone();
                for i in 0..out.rows() {
                    let (p, gr) = (out.row_slice(i), g.row_slice(i));
                    let inner = tensor::dot(p, gr);
                    for (j, x) in d.row_slice_mut(i).iter_mut().enumerate() {
                        *x = p[j] * (gr[j] - inner);
                    }
                }
                acc(*a, d);
            }
            Op::Reshape(a) => {
                let va = val(*a);
                acc(*a, g.reshape(va.shape()).expect("same size"));
            }
            Op::ConcatCols(a, b) => {
                let ma = val(*a).cols();
                let mb = val(*b).cols();
                let n = g.rows();
                let mut da = Vec::with_capacity(n * ma);
                let mut db = Vec::with_capacity(n * mb);
                for i in 0..n {
                    let r = g.row_slice(i);
                    da.extend_from_slice(&r[..ma]);
                    db.extend_from_slice(&r[ma..]);
                }
                acc(*a, Tensor::matrix(n, ma, da).expect("sized"));
                acc(*b, Tensor::matrix(n, mb, db).expect("sized"));
            }
            Op::PolyLabel(a, eps) => {
                let va = val(*a);
                let eps = *eps;
                let mut d = va.clone();
                for i in 0..va.rows() {
                    let z = tensor::softmax(va.row_slice(i)).expect("finite at forward");
                    let y = out.row_slice(i);
                    let sys = poly_system(&z, eps);
                    // the system matrix is symmetric, so Aᵀu = ȳ is the same solve
                    let u = linalg::solve(&sys, g.row_slice(i)).expect("nonsingular at forward");
                    let (yz, uz) = (tensor::dot(y, &z), tensor::dot(&u, &z));
                    let zbar: Vec<S> = (0..z.len())
                        .map(|k| u[k] - eps * u[k] * y[k] + eps * (u[k] * yz + y[k] * uz))
                        .collect();
                    let inner = tensor::dot(&z, &zbar);
                    for (k, x) in d.row_slice_mut(i).iter_mut().enumerate() {
                        *x = z[k] * (zbar[k] - inner);
                    }
                }
                acc(*a, d);
            }
        }
    }
}

/// `I + ε·diag(z) − ε·z zᵀ`, the PolyLoss target-map Jacobian, row-major.
pub(crate) fn poly_system<S: Scalar>(z: &[S], eps: S) -> Vec<S> {
    let k = z.len();
    let mut a = vec![S::zero(); k * k];
    for i in 0..k {
        for j in 0..k {
            let mut v = -eps * z[i] * z[j];
            if i == j {
                v = v + S::one() + eps * z[i];
            }
            a[i * k + j] = v;
        }
    }
    a
}

pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

pub fn softplus<S: Scalar>(x: S) -> S {
    x.max(S::zero()) + (-x.abs()).exp().ln_1p()
}

fn col_sum<S: Scalar>(t: &Tensor<S>) -> Tensor<S> {
    let (n, m) = (t.rows(), t.cols());
    let mut out = vec![S::zero(); m];
    for i in 0..n {
        for (o, &x) in out.iter_mut().zip(t.row_slice(i)) {
            *o = *o + x;
        }
    }
    Tensor::row(&out)
}

fn row_sums<S: Scalar>(t: &Tensor<S>) -> Tensor<S> {
    let v: Vec<S> = (0..t.rows()).map(|i| t.row_slice(i).iter().copied().sum()).collect();
    Tensor::column(&v)
}

fn row_apply<S: Scalar>(a: &Tensor<S>, r: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    let mut out = a.clone();
    for i in 0..a.rows() {
        for (o, &y) in out.row_slice_mut(i).iter_mut().zip(r.data()) {
            *o = f(*o, y);
        }
    }
    out
}

fn col_apply<S: Scalar>(a: &Tensor<S>, c: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    let mut out = a.clone();
    for i in 0..a.rows() {
        let s = c.data()[i];
        for o in out.row_slice_mut(i) {
            *o = f(*o, s);
        }
    }
    out
}

/// Compares reverse-mode gradients of `f` at `point` against central finite
/// differences `(f(x+s·eᵢ) − f(x−s·eᵢ)) / 2s`.
///
/// `f` receives a graph and a `1×n` parameter node and must return a scalar
/// node. Returns the maximum over coordinates of
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<S, F>(f: F, point: &[S], step: S) -> Result<S>
where
    S: Scalar,
    F: Fn(&mut Graph<S>, Var) -> Result<Var>,
{
    if !(step > S::zero()) {
        return Err(Error::Config(format!("grad_check step must be > 0, got {step}")));
    }
    let eval = |x: &[S]| -> Result<S> {
        let mut g = Graph::new();
        let v = g.constant(Tensor::row(x));
        let out = f(&mut g, v)?;
        let y = g.value(out).item();
        if !y.is_finite() {
            return Err(Error::Numerical(format!("non-finite function value {y}")));
        }
        Ok(y)
    };
    let mut g = Graph::new();
    let v = g.param(Tensor::row(point));
    let out = f(&mut g, v)?;
    let analytic = g.backward(out)?.get(v);
    let floor = S::of(1e-8);
    let mut worst = S::zero();
    let mut x = point.to_vec();
    for i in 0..point.len() {
        x[i] = point[i] + step;
        let fp = eval(&x)?;
        x[i] = point[i] - step;
        let fm = eval(&x)?;
        x[i] = point[i];
        let numeric = (fp - fm) / (step + step);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(floor);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
