//! Eager reverse-mode autodiff.
//!
//! Every op executes immediately and appends a node holding its output and
//! the inputs its backward rule needs. [`Tape::backward`] walks the nodes in
//! exact reverse order of execution.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dim_err, Error, Result};
use crate::kernels::{self, MatmulPlan};
use crate::real::Real;
use crate::tensor::{numel, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: T },
    MatMul { a: Var, b: Var, plan: MatmulPlan },
    Reshape { a: Var },
    Permute { a: Var, perm: Vec<usize> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Softmax { a: Var },
    Gelu { a: Var },
    DepthwiseConv { x: Var, k: Var, dims: [usize; 4] },
    MeanAxis { a: Var, outer: usize, len: usize, inner: usize },
    Sum { a: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Ordered record of executed ops.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    consumed: bool,
    check_finite: bool,
    corrupt_matmul_rhs: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
            check_finite: cfg!(debug_assertions),
            corrupt_matmul_rhs: false,
        }
    }

    /// Enables the per-op NaN/Inf scan (on by default in debug builds).
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    /// Test fixture: scales every matmul right-operand gradient by 1.5 so
    /// gradient checks have a known-bad backward rule to catch.
    #[doc(hidden)]
    pub fn corrupt_matmul_backward(&mut self) {
        self.corrupt_matmul_rhs = true;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape nodes hold consistent shapes")
    }

    /// Gradient of the last backward pass wrt a leaf.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, value: Vec<T>, requires_grad: bool, op: Op<T>) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len());
        if self.check_finite && !value.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, t: &Tensor<T>) -> Result<Var> {
        self.push("leaf", t.shape().to_vec(), t.data().to_vec(), t.requires_grad, Op::Leaf)
    }

    pub fn input(&mut self, shape: impl Into<Vec<usize>>, data: Vec<T>, requires_grad: bool) -> Result<Var> {
        let shape = shape.into();
        if numel(&shape) != data.len() {
            return dim_err("input", &shape, &[data.len()]);
        }
        self.push("input", shape, data, requires_grad, Op::Leaf)
    }

    /// Elementwise sum. The smaller operand may be broadcast when its shape is
    /// a trailing suffix of the larger one's (leading 1s ignored) or a single
    /// element.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.order_for_broadcast(a, b);
        self.check_trailing("add", a, b)?;
        let x = &self.nodes[a.0].value;
        let y = &self.nodes[b.0].value;
        let nb = y.len();
        let mut out = x.clone();
        if nb == x.len() {
            out.iter_mut().zip(y).for_each(|(o, &v)| *o += v);
        } else {
            for chunk in out.chunks_exact_mut(nb) {
                chunk.iter_mut().zip(y).for_each(|(o, &v)| *o += v);
            }
        }
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a) || self.rg(b);
        self.push("add", shape, out, rg, Op::Add { a, b })
    }

    /// Elementwise product with the same broadcasting rule as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.order_for_broadcast(a, b);
        self.check_trailing("mul", a, b)?;
        let x = &self.nodes[a.0].value;
        let y = &self.nodes[b.0].value;
        let nb = y.len();
        let mut out = x.clone();
        for chunk in out.chunks_exact_mut(nb) {
            chunk.iter_mut().zip(y).for_each(|(o, &v)| *o *= v);
        }
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a) || self.rg(b);
        self.push("mul", shape, out, rg, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.nodes[a.0].value.iter().map(|&v| v * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a);
        self.push("scale", shape, out, rg, Op::Scale { a, c })
    }

    fn order_for_broadcast(&self, a: Var, b: Var) -> (Var, Var) {
        if self.nodes[b.0].value.len() > self.nodes[a.0].value.len() {
            (b, a)
        } else {
            (a, b)
        }
    }

    fn check_trailing(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let sa = &self.nodes[a.0].shape;
        let sb = &self.nodes[b.0].shape;
        if numel(sb) == 1 {
            return Ok(());
        }
        let lead = sb.iter().take_while(|&&d| d == 1).count();
        let core = &sb[lead..];
        if core.len() <= sa.len() && sa[sa.len() - core.len()..] == *core {
            Ok(())
        } else {
            dim_err(op, sa, sb)
        }
    }

    /// Batched matrix product `[.., m, k] @ [.., k, n]` with broadcast batch axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let plan = kernels::matmul_plan(&self.nodes[a.0].shape, &self.nodes[b.0].shape)?;
        let out = kernels::matmul_forward(&plan, &self.nodes[a.0].value, &self.nodes[b.0].value);
        let shape = plan.out_shape.clone();
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", shape, out, rg, Op::MatMul { a, b, plan })
    }

    /// `x @ w + bias`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add(y, bias)
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if numel(&shape) != self.nodes[a.0].value.len() {
            return dim_err("reshape", &self.nodes[a.0].shape, &shape);
        }
        let out = self.nodes[a.0].value.clone();
        let rg = self.rg(a);
        self.push("reshape", shape, out, rg, Op::Reshape { a })
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = &self.nodes[a.0].shape;
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || core::mem::replace(&mut seen[p], true)) {
            return Err(Error::Usage(format!("invalid permutation {perm:?} for shape {shape:?}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let out = kernels::permute(&self.nodes[a.0].value, shape, perm);
        let rg = self.rg(a);
        self.push("permute", out_shape, out, rg, Op::Permute { a, perm: perm.to_vec() })
    }

    /// LayerNorm over the last axis followed by the `gamma`/`beta` affine map.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        let d = *shape.last().unwrap_or(&0);
        if self.nodes[gamma.0].value.len() != d || self.nodes[beta.0].value.len() != d {
            return dim_err("layer_norm", &shape, &self.nodes[gamma.0].shape);
        }
        if eps <= T::ZERO {
            return Err(Error::Usage(format!("layer_norm eps must be positive, got {eps}")));
        }
        let (y, xhat, rstd) = kernels::layer_norm_forward(
            &self.nodes[x.0].value,
            &self.nodes[gamma.0].value,
            &self.nodes[beta.0].value,
            d,
            eps,
        );
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push("layer_norm", shape, y, rg, Op::LayerNorm { x, gamma, beta, xhat, rstd })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        let n = *shape.last().unwrap_or(&1);
        let out = kernels::softmax_forward(&self.nodes[a.0].value, n);
        let rg = self.rg(a);
        self.push("softmax", shape, out, rg, Op::Softmax { a })
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.nodes[a.0].value.iter().map(|&v| kernels::gelu(v)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(a);
        self.push("gelu", shape, out, rg, Op::Gelu { a })
    }

    /// Per-sample channel-wise convolution: `x: [B, C, H, W]` with
    /// `kernels: [B, C, K, K]`, stride 1, zero "same" padding, no flip.
    pub fn conv2d_depthwise_dynamic(&mut self, x: Var, k: Var) -> Result<Var> {
        let xs = self.nodes[x.0].shape.clone();
        let kshape = self.nodes[k.0].shape.clone();
        if xs.len() != 4 || kshape.len() != 4 {
            return dim_err("conv2d_depthwise_dynamic", &xs, &kshape);
        }
        let ks = kshape[2];
        if kshape[3] != ks || ks % 2 == 0 {
            return Err(Error::Config(format!("depthwise kernel must be square with odd size, got {kshape:?}")));
        }
        if xs[0] != kshape[0] || xs[1] != kshape[1] {
            return dim_err("conv2d_depthwise_dynamic", &xs, &kshape);
        }
        let (bc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let out = kernels::depthwise_conv_forward(&self.nodes[x.0].value, &self.nodes[k.0].value, bc, h, w, ks);
        let rg = self.rg(x) || self.rg(k);
        self.push("conv2d_depthwise_dynamic", xs, out, rg, Op::DepthwiseConv { x, k, dims: [bc, h, w, ks] })
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        if axis >= shape.len() {
            return Err(Error::Usage(format!("axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = &self.nodes[a.0].value;
        let inv = T::ONE / T::from_usize(len);
        let mut out = vec![T::ZERO; outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for l in 0..len {
                let s = &src[(o * len + l) * inner..(o * len + l + 1) * inner];
                dst.iter_mut().zip(s).for_each(|(d, &v)| *d += v);
            }
            dst.iter_mut().for_each(|d| *d *= inv);
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let rg = self.rg(a);
        self.push("mean_axis", out_shape, out, rg, Op::MeanAxis { a, outer, len, inner })
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.nodes[a.0].value.iter().copied().sum();
        let rg = self.rg(a);
        self.push("sum", vec![1], vec![total], rg, Op::Sum { a })
    }

    /// Mean cross-entropy of `logits: [B, classes]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.nodes[logits.0].shape.clone();
        if shape.len() != 2 || shape[0] != labels.len() {
            return dim_err("cross_entropy", &shape, &[labels.len()]);
        }
        let classes = shape[1];
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(Error::Data(format!("label {l} at index {i} is outside [0, {classes})")));
        }
        let (loss, probs) = kernels::cross_entropy_forward(&self.nodes[logits.0].value, labels, classes);
        let rg = self.rg(logits);
        self.push(
            "cross_entropy",
            vec![1],
            vec![loss],
            rg,
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
        )
    }

    /// Accumulates d(loss)/d(node) for every node that requires a gradient.
    ///
    /// Only leaf gradients are retained afterwards. The tape is consumed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Usage("backward called twice on the same tape".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.consumed = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![T::ONE]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.backward_node(i, g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(buf) => buf.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&mut self, i: usize, g: Vec<T>) {
        let nodes = &self.nodes;
        let mut pending: [(Option<Var>, Vec<T>); 3] = Default::default();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                if nodes[b.0].requires_grad {
                    pending[1] = (Some(*b), reduce_broadcast(&g, nodes[b.0].value.len()));
                }
                pending[0] = (Some(*a), g);
            }
            Op::Mul { a, b } => {
                let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
                let nb = y.len();
                if nodes[a.0].requires_grad {
                    let mut ga = g.clone();
                    for chunk in ga.chunks_exact_mut(nb) {
                        chunk.iter_mut().zip(y).for_each(|(o, &v)| *o *= v);
                    }
                    pending[0] = (Some(*a), ga);
                }
                if nodes[b.0].requires_grad {
                    let prod: Vec<T> = g.iter().zip(x).map(|(&gv, &xv)| gv * xv).collect();
                    pending[1] = (Some(*b), reduce_broadcast(&prod, nb));
                }
            }
            Op::Scale { a, c } => {
                pending[0] = (Some(*a), g.iter().map(|&v| v * *c).collect());
            }
            Op::MatMul { a, b, plan } => {
                if nodes[a.0].requires_grad {
                    let da = kernels::matmul_backward_lhs(plan, &g, &nodes[b.0].value, nodes[a.0].value.len());
                    pending[0] = (Some(*a), da);
                }
                if nodes[b.0].requires_grad {
                    let mut db = kernels::matmul_backward_rhs(plan, &g, &nodes[a.0].value, nodes[b.0].value.len());
                    if self.corrupt_matmul_rhs {
                        db.iter_mut().for_each(|v| *v *= T::from_f64(1.5));
                    }
                    pending[1] = (Some(*b), db);
                }
            }
            Op::Reshape { a } => pending[0] = (Some(*a), g),
            Op::Permute { a, perm } => {
                let mut inverse = vec![0usize; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                pending[0] = (Some(*a), kernels::permute(&g, &nodes[i].shape, &inverse));
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = nodes[gamma.0].value.len();
                let (dx, dg, db) = kernels::layer_norm_backward(&g, xhat, rstd, &nodes[gamma.0].value, d);
                pending = [(Some(*x), dx), (Some(*gamma), dg), (Some(*beta), db)];
            }
            Op::Softmax { a } => {
                let n = *nodes[i].shape.last().unwrap_or(&1);
                pending[0] = (Some(*a), kernels::softmax_backward(&g, &nodes[i].value, n));
            }
            Op::Gelu { a } => {
                let dx = g.iter().zip(&nodes[a.0].value).map(|(&gv, &xv)| gv * kernels::gelu_grad(xv)).collect();
                pending[0] = (Some(*a), dx);
            }
            Op::DepthwiseConv { x, k, dims } => {
                let [bc, h, w, ks] = *dims;
                let (dx, dk) =
                    kernels::depthwise_conv_backward(&g, &nodes[x.0].value, &nodes[k.0].value, bc, h, w, ks);
                pending[0] = (Some(*x), dx);
                pending[1] = (Some(*k), dk);
            }
            Op::MeanAxis { a, outer, len, inner } => {
                let (outer, len, inner) = (*outer, *len, *inner);
                let inv = T::ONE / T::from_usize(len);
                let mut da = vec![T::ZERO; outer * len * inner];
                for o in 0..outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for l in 0..len {
                        let dst = &mut da[(o * len + l) * inner..(o * len + l + 1) * inner];
                        dst.iter_mut().zip(src).for_each(|(d, &v)| *d = v * inv);
                    }
                }
                pending[0] = (Some(*a), da);
            }
            Op::Sum { a } => {
                pending[0] = (Some(*a), vec![g[0]; nodes[a.0].value.len()]);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let classes = nodes[logits.0].shape[1];
                let scale = g[0] / T::from_usize(labels.len());
                let mut dl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    dl[r * classes + l] -= scale;
                }
                pending[0] = (Some(*logits), dl);
            }
        }
        for (v, grad) in pending {
            if let Some(v) = v {
                self.accumulate(v, grad);
            }
        }
    }
}

/// Sums `g` over repeated blocks of length `n` (inverse of trailing broadcast).
fn reduce_broadcast<T: Real>(g: &[T], n: usize) -> Vec<T> {
    if g.len() == n {
        return g.to_vec();
    }
    let mut out = vec![T::ZERO; n];
    for chunk in g.chunks_exact(n) {
        out.iter_mut().zip(chunk).for_each(|(o, &v)| *o += v);
    }
    out
}
