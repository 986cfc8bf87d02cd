use std::fmt;

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Pointwise nonlinearity. `LeakyRelu` carries its negative-side slope.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
    Silu,
}

impl Activation {
    pub fn validate(self) -> Result<Self> {
        match self {
            Activation::LeakyRelu(s) if !(s > 0.0 && s < 1.0) => Err(Error::Spec(format!(
                "leaky_relu slope must lie in (0, 1), got {s}"
            ))),
            a => Ok(a),
        }
    }

    /// True for activations that are piecewise linear (kinked at 0).
    pub fn is_piecewise_linear(self) -> bool {
        matches!(self, Activation::Relu | Activation::LeakyRelu(_))
    }

    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::LeakyRelu(s) => {
                if x > T::zero() {
                    x
                } else {
                    T::lit(s) * x
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
            Activation::Silu => x * sigmoid(x),
        }
    }

    /// Derivative at `x`. ReLU's subgradient at 0 is taken as 0.
    pub fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::LeakyRelu(s) => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::lit(s)
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                T::one() - t * t
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (T::one() - s)
            }
            Activation::Silu => {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            }
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::Relu => write!(f, "relu"),
            Activation::LeakyRelu(s) => write!(f, "leaky_relu({s})"),
            Activation::Tanh => write!(f, "tanh"),
            Activation::Sigmoid => write!(f, "sigmoid"),
            Activation::Silu => write!(f, "silu"),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let act = match s {
            "relu" => Activation::Relu,
            "tanh" => Activation::Tanh,
            "sigmoid" => Activation::Sigmoid,
            "silu" => Activation::Silu,
            "leaky_relu" => Activation::LeakyRelu(0.01),
            _ => {
                let slope = s
                    .strip_prefix("leaky_relu(")
                    .and_then(|r| r.strip_suffix(')'))
                    .and_then(|v| v.parse::<f64>().ok())
                    .ok_or_else(|| Error::Spec(format!("unknown activation `{s}`")))?;
                Activation::LeakyRelu(slope)
            }
        };
        act.validate()
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log(1 + e^x)` without overflow.
pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    /// `x · wᵀ + b` with `x: [n×in]`, `w: [out×in]`, `b: [out]`.
    Linear(Var, Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `[n×m] + [m]` broadcast along rows.
    AddRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Act(Var, Activation),
    Exp(Var),
    Square(Var),
    Softplus(Var),
    Clamp(Var, T, T),
    /// Sum over all but the leading axis: `[n×m] -> [n]`.
    SumCols(Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Reverse-mode gradient tape over tensor-valued primitives.
///
/// Nodes are appended in evaluation order, so every node's parents precede
/// it and the reverse sweep is a plain backwards scan.
#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to every recorded node.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`; zeros when `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn is_reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

fn gemm_into<T: Scalar>(
    out: &mut [T],
    a: &Tensor<T>,
    trans_a: bool,
    b: &Tensor<T>,
    trans_b: bool,
    beta: T,
) {
    let (ar, ac) = (a.rows(), a.cols());
    let (br, bc) = (b.rows(), b.cols());
    let (m, k, a_rs, a_cs) = if trans_a {
        (ac, ar, 1, ac as isize)
    } else {
        (ar, ac, ac as isize, 1)
    };
    let (n, b_rs, b_cs) = if trans_b {
        (br, 1, bc as isize)
    } else {
        (bc, bc as isize, 1)
    };
    T::gemm(
        m,
        k,
        n,
        T::one(),
        (a.data(), a_rs, a_cs),
        (b.data(), b_rs, b_cs),
        beta,
        (out, n as isize, 1),
    );
}

fn col_sums<T: Scalar>(t: &Tensor<T>) -> Vec<T> {
    let c = t.cols();
    let mut out = vec![T::zero(); c];
    for row in t.data().chunks(c) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o = *o + v;
        }
    }
    out
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a differentiable input.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records an input that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// Affine layer `x · wᵀ + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] || sb != [sw[0]] {
            return Err(Error::shape("linear", sx, sw));
        }
        let (n, out_dim) = (sx[0], sw[0]);
        let bias = self.value(b).data();
        let mut out = Vec::with_capacity(n * out_dim);
        for _ in 0..n {
            out.extend_from_slice(bias);
        }
        gemm_into(&mut out, self.value(x), false, self.value(w), true, T::one());
        let out = Tensor::new(&[n, out_dim], out)?;
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(out, Op::Linear(x, w, b), ng))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), name, f)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sa.len() != 2 || sr != [sa[1]] {
            return Err(Error::shape("add_row", sa, sr));
        }
        let mut out = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for chunk in out.data_mut().chunks_mut(r.len()) {
            for (o, &v) in chunk.iter_mut().zip(&r) {
                *o = *o + v;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(out, Op::AddRow(a, row), ng))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(out, op, ng)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Var {
        self.unary(a, |x| kind.apply(x), Op::Act(a, kind))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    /// Clamp to `[lo, hi]`; gradient passes where the input lies inside.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        self.unary(a, |x| x.max(lo).min(hi), Op::Clamp(a, lo, hi))
    }

    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let c = v.cols();
        let out: Vec<T> = v.data().chunks(c).map(|r| r.iter().copied().sum()).collect();
        let rows = out.len();
        let out = Tensor::new(&[rows], out).expect("rows >= 1");
        let ng = self.ng(a);
        self.push(out, Op::SumCols(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let s = self.value(a).mean();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    /// Reverse sweep from a scalar `loss`, seeded with gradient 1.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        grads.resize(self.nodes.len(), None);
        // Only leaves that asked for gradients report them.
        for (i, n) in self.nodes.iter().enumerate() {
            if !n.needs_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(
        &self,
        op: &Op<T>,
        out: &Tensor<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        match *op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                if self.ng(a) {
                    let mut da = vec![T::zero(); va.len()];
                    gemm_into(&mut da, g, false, vb, true, T::zero());
                    self.accumulate(grads, a, Tensor::new(va.shape(), da)?);
                }
                if self.ng(b) {
                    let mut db = vec![T::zero(); vb.len()];
                    gemm_into(&mut db, va, true, g, false, T::zero());
                    self.accumulate(grads, b, Tensor::new(vb.shape(), db)?);
                }
            }
            Op::Linear(x, w, b) => {
                let (vx, vw) = (self.value(x), self.value(w));
                if self.ng(x) {
                    let mut dx = vec![T::zero(); vx.len()];
                    gemm_into(&mut dx, g, false, vw, false, T::zero());
                    self.accumulate(grads, x, Tensor::new(vx.shape(), dx)?);
                }
                if self.ng(w) {
                    let mut dw = vec![T::zero(); vw.len()];
                    gemm_into(&mut dw, g, true, vx, false, T::zero());
                    self.accumulate(grads, w, Tensor::new(vw.shape(), dw)?);
                }
                if self.ng(b) {
                    self.accumulate(grads, b, Tensor::from_vec(col_sums(g)));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                if self.ng(b) {
                    self.accumulate(grads, b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.ng(a) {
                    self.accumulate(grads, a, g.zip_map(self.value(b), "mul", |x, y| x * y)?);
                }
                if self.ng(b) {
                    self.accumulate(grads, b, g.zip_map(self.value(a), "mul", |x, y| x * y)?);
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, a, g.clone());
                if self.ng(row) {
                    self.accumulate(grads, row, Tensor::from_vec(col_sums(g)));
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, a, g.map(|v| v * c)),
            Op::AddScalar(a) => self.accumulate(grads, a, g.clone()),
            Op::Act(a, kind) => {
                let d = g.zip_map(self.value(a), "activation", |gv, x| gv * kind.derivative(x))?;
                self.accumulate(grads, a, d);
            }
            Op::Exp(a) => self.accumulate(grads, a, g.zip_map(out, "exp", |gv, y| gv * y)?),
            Op::Square(a) => {
                let d = g.zip_map(self.value(a), "square", |gv, x| gv * (x + x))?;
                self.accumulate(grads, a, d);
            }
            Op::Softplus(a) => {
                let d = g.zip_map(self.value(a), "softplus", |gv, x| gv * sigmoid(x))?;
                self.accumulate(grads, a, d);
            }
            Op::Clamp(a, lo, hi) => {
                let d = g.zip_map(self.value(a), "clamp", |gv, x| {
                    if x >= lo && x <= hi {
                        gv
                    } else {
                        T::zero()
                    }
                })?;
                self.accumulate(grads, a, d);
            }
            Op::SumCols(a) => {
                let va = self.value(a);
                let c = va.cols();
                let mut d = Vec::with_capacity(va.len());
                for &gv in g.data() {
                    d.extend(std::iter::repeat_n(gv, c));
                }
                self.accumulate(grads, a, Tensor::new(va.shape(), d)?);
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                self.accumulate(grads, a, Tensor::full(self.shape(a), gv));
            }
            Op::Mean(a) => {
                let n = T::from_usize(self.value(a).len()).unwrap();
                let gv = g.data()[0] / n;
                self.accumulate(grads, a, Tensor::full(self.shape(a), gv));
            }
        }
        Ok(())
    }
}
