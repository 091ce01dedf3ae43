use super::conv::{self, ConvGeom};
use super::norm;
use super::{same_shape, Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(super) usize);

pub(super) enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    LogClamped(Var),
    Square(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    ConcatCols(Var, Var),
    AddBias(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match *self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | ConcatCols(a, b) | AddBias(a, b) => {
                vec![a, b]
            }
            Scale(a, _) | AddScalar(a) | Relu(a) | LeakyRelu(a, _) | Tanh(a) | Sigmoid(a)
            | LogClamped(a) | Square(a) | Abs(a) | Sum(a) | Mean(a) | Reshape(a) => vec![a],
            Conv2d { x, w, b, .. } | ConvTranspose2d { x, w, b, .. } => vec![x, w, b],
            BatchNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
        }
    }
}

pub(super) struct Node<T> {
    pub(super) value: Tensor<T>,
    pub(super) op: Op<T>,
    pub(super) requires_grad: bool,
    /// Accumulated gradient; only leaves keep one across `backward` calls.
    pub(super) grad: Option<Tensor<T>>,
}

/// Records operations in execution order so gradients can be replayed in
/// reverse. Inputs always precede the operations that consume them.
pub struct Tape<T = f32> {
    pub(super) nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn acc<T: Element>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(s) => {
            for (a, b) in s.data_mut().iter_mut().zip(g.data()) {
                *a = *a + *b;
            }
        }
        None => *slot = Some(g),
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(super) fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers an input. Gradients are collected for it when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// A constant copy of `v`; no gradient flows back through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn binary_same(&self, a: Var, b: Var) -> Result<()> {
        same_shape(self.value(a), self.value(b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.value(a).map(f);
        self.push(value, op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension(format!("matmul of {sa:?} by {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, T::zero(), &mut out);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let k = T::lit(k);
        self.unary(a, |x| x * k, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let k = T::lit(k);
        self.unary(a, |x| x + k, Op::AddScalar(a))
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(T::zero()), Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, alpha: f64) -> Var {
        let al = T::lit(alpha);
        self.unary(a, |x| if x > T::zero() { x } else { x * al }, Op::LeakyRelu(a, al))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// `ln(max(a, eps))`. Below `eps` the gradient is taken from the
    /// unclamped logarithm so saturated probabilities still pass a signal.
    pub fn log_clamped(&mut self, a: Var, eps: f64) -> Var {
        let e = T::lit(eps);
        self.unary(a, |x| x.max(e).ln(), Op::LogClamped(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.abs(), Op::Abs(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let s = self.value(a).mean();
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    /// Collapses everything after the leading axis.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        let b = s[0];
        let rest = s[1..].iter().product();
        self.reshape(a, &[b, rest])
    }

    /// Joins `[B, p]` and `[B, q]` into `[B, p + q]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::Dimension(format!("cannot concatenate columns of {sa:?} and {sb:?}")));
        }
        let (rows, p, q) = (sa[0], sa[1], sb[1]);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(rows * (p + q));
        for r in 0..rows {
            out.extend_from_slice(&va[r * p..(r + 1) * p]);
            out.extend_from_slice(&vb[r * q..(r + 1) * q]);
        }
        Ok(self.push(Tensor::from_parts(vec![rows, p + q], out), Op::ConcatCols(a, b)))
    }

    /// Adds a `[N]` bias to every row of `[B, N]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sx.len() != 2 || sb != [sx[1]] {
            return Err(Error::Dimension(format!("bias {sb:?} does not fit {sx:?}")));
        }
        let n = sx[1];
        let bias = self.value(b).data().to_vec();
        let mut v = self.value(x).clone();
        for (i, e) in v.data_mut().iter_mut().enumerate() {
            *e = *e + bias[i % n];
        }
        Ok(self.push(v, Op::AddBias(x, b)))
    }

    /// Fully-connected layer: `x · w + b` with `w` shaped `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.backward_impl(loss, None)
    }

    /// Like [`Tape::backward`] but only populates gradients of `wrt`, and
    /// skips every operation that does not lie on a path to one of them.
    pub fn backward_wrt(&mut self, loss: Var, wrt: &[Var]) -> Result<()> {
        self.backward_impl(loss, Some(wrt))
    }

    fn backward_impl(&mut self, loss: Var, wrt: Option<&[Var]>) -> Result<()> {
        let root = &self.nodes[loss.0].value;
        if root.numel() != 1 {
            return Err(Error::Argument(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape()
            )));
        }
        let n = loss.0 + 1;
        let mut relevant = vec![false; n];
        for i in 0..n {
            let node = &self.nodes[i];
            relevant[i] = match (&node.op, wrt) {
                (Op::Leaf, None) => node.requires_grad,
                (Op::Leaf, Some(w)) => node.requires_grad && w.contains(&Var(i)),
                (op, _) => op.inputs().iter().any(|v| relevant[v.0]),
            };
        }
        if !relevant[loss.0] {
            return Ok(());
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.shape(), T::one()));
        let mut leaf_grads = Vec::new();
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !relevant[i] {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                leaf_grads.push((i, g));
                continue;
            }
            self.backprop(i, g, &relevant, &mut grads)?;
        }
        for (i, g) in leaf_grads {
            acc(&mut self.nodes[i].grad, g);
        }
        Ok(())
    }

    fn backprop(
        &self,
        i: usize,
        g: Tensor<T>,
        relevant: &[bool],
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let want = |v: Var| relevant[v.0];
        let zero = T::zero();
        let one = T::one();
        match node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (val(a), val(b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if want(a) {
                    let mut ga = vec![zero; m * k];
                    T::gemm(m, n, k, g.data(), false, vb.data(), true, zero, &mut ga);
                    acc(&mut grads[a.0], Tensor::from_parts(vec![m, k], ga));
                }
                if want(b) {
                    let mut gb = vec![zero; k * n];
                    T::gemm(k, m, n, va.data(), true, g.data(), false, zero, &mut gb);
                    acc(&mut grads[b.0], Tensor::from_parts(vec![k, n], gb));
                }
            }
            Op::Add(a, b) => {
                if want(a) {
                    acc(&mut grads[a.0], g.clone());
                }
                if want(b) {
                    acc(&mut grads[b.0], g);
                }
            }
            Op::Sub(a, b) => {
                if want(a) {
                    acc(&mut grads[a.0], g.clone());
                }
                if want(b) {
                    acc(&mut grads[b.0], g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if want(a) {
                    acc(&mut grads[a.0], g.zip_map(val(b), |x, y| x * y)?);
                }
                if want(b) {
                    acc(&mut grads[b.0], g.zip_map(val(a), |x, y| x * y)?);
                }
            }
            Op::Scale(a, k) => acc(&mut grads[a.0], g.map(|x| x * k)),
            Op::AddScalar(a) => acc(&mut grads[a.0], g),
            Op::Relu(a) => {
                let ga = g.zip_map(val(a), |gx, x| if x > zero { gx } else { zero })?;
                acc(&mut grads[a.0], ga);
            }
            Op::LeakyRelu(a, al) => {
                let ga = g.zip_map(val(a), |gx, x| if x > zero { gx } else { gx * al })?;
                acc(&mut grads[a.0], ga);
            }
            Op::Tanh(a) => {
                let ga = g.zip_map(&node.value, |gx, y| gx * (one - y * y))?;
                acc(&mut grads[a.0], ga);
            }
            Op::Sigmoid(a) => {
                let ga = g.zip_map(&node.value, |gx, y| gx * y * (one - y))?;
                acc(&mut grads[a.0], ga);
            }
            Op::LogClamped(a) => {
                let ga = g.zip_map(val(a), |gx, x| if x > zero { gx / x } else { zero })?;
                acc(&mut grads[a.0], ga);
            }
            Op::Square(a) => {
                let two = T::lit(2.0);
                acc(&mut grads[a.0], g.zip_map(val(a), |gx, x| two * x * gx)?);
            }
            Op::Abs(a) => {
                let ga = g.zip_map(val(a), |gx, x| {
                    if x > zero {
                        gx
                    } else if x < zero {
                        -gx
                    } else {
                        zero
                    }
                })?;
                acc(&mut grads[a.0], ga);
            }
            Op::Sum(a) => acc(&mut grads[a.0], Tensor::full(val(a).shape(), g.item())),
            Op::Mean(a) => {
                let n = T::from_usize(val(a).numel()).unwrap();
                acc(&mut grads[a.0], Tensor::full(val(a).shape(), g.item() / n));
            }
            Op::Reshape(a) => acc(&mut grads[a.0], g.reshape(val(a).shape())?),
            Op::ConcatCols(a, b) => {
                let (rows, p, q) = (val(a).shape()[0], val(a).shape()[1], val(b).shape()[1]);
                let gd = g.data();
                if want(a) {
                    let ga = (0..rows)
                        .flat_map(|r| gd[r * (p + q)..r * (p + q) + p].iter().copied())
                        .collect();
                    acc(&mut grads[a.0], Tensor::from_parts(vec![rows, p], ga));
                }
                if want(b) {
                    let gb = (0..rows)
                        .flat_map(|r| gd[r * (p + q) + p..(r + 1) * (p + q)].iter().copied())
                        .collect();
                    acc(&mut grads[b.0], Tensor::from_parts(vec![rows, q], gb));
                }
            }
            Op::AddBias(x, b) => {
                if want(b) {
                    let n = val(b).numel();
                    let mut gb = vec![zero; n];
                    for (j, v) in g.data().iter().enumerate() {
                        gb[j % n] = gb[j % n] + *v;
                    }
                    acc(&mut grads[b.0], Tensor::from_parts(vec![n], gb));
                }
                if want(x) {
                    acc(&mut grads[x.0], g);
                }
            }
            Op::Conv2d { x, w, b, ref geom } => {
                let (gx, gw, gb) = conv::conv2d_backward(
                    geom,
                    val(x).data(),
                    val(w).data(),
                    g.data(),
                    want(x),
                    want(w),
                    want(b),
                );
                if let Some(gx) = gx {
                    acc(&mut grads[x.0], Tensor::from_parts(val(x).shape().to_vec(), gx));
                }
                if let Some(gw) = gw {
                    acc(&mut grads[w.0], Tensor::from_parts(val(w).shape().to_vec(), gw));
                }
                if let Some(gb) = gb {
                    acc(&mut grads[b.0], Tensor::from_parts(val(b).shape().to_vec(), gb));
                }
            }
            Op::ConvTranspose2d { x, w, b, ref geom } => {
                let (gx, gw, gb) = conv::conv_transpose2d_backward(
                    geom,
                    val(x).data(),
                    val(w).data(),
                    g.data(),
                    want(x),
                    want(w),
                    want(b),
                );
                if let Some(gx) = gx {
                    acc(&mut grads[x.0], Tensor::from_parts(val(x).shape().to_vec(), gx));
                }
                if let Some(gw) = gw {
                    acc(&mut grads[w.0], Tensor::from_parts(val(w).shape().to_vec(), gw));
                }
                if let Some(gb) = gb {
                    acc(&mut grads[b.0], Tensor::from_parts(val(b).shape().to_vec(), gb));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                ref xhat,
                ref inv_std,
                train,
            } => {
                let (gx, gg, gb) = norm::batchnorm_backward(
                    val(x).shape(),
                    val(gamma).data(),
                    xhat,
                    inv_std,
                    train,
                    g.data(),
                );
                if want(x) {
                    acc(&mut grads[x.0], Tensor::from_parts(val(x).shape().to_vec(), gx));
                }
                if want(gamma) {
                    acc(&mut grads[gamma.0], Tensor::from_parts(val(gamma).shape().to_vec(), gg));
                }
                if want(beta) {
                    acc(&mut grads[beta.0], Tensor::from_parts(val(beta).shape().to_vec(), gb));
                }
            }
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn sigmoid<T: Element>(x: T) -> T {
    let one = T::one();
    if x >= T::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}
