//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns every value computed during a forward pass together with
//! the backward rule of the op that produced it. Nodes are appended in
//! execution order, so the tape is always topologically sorted and
//! [`Tape::backward`] is a single reverse sweep. Build a fresh tape for every
//! forward pass; a tape is confined to one thread.
//!
//! ```
//! use saliency_core::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.param(Tensor::scalar(3.0));
//! let y = tape.mul(x, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().item(), Some(6.0));
//! ```

use crate::error::{Error, Result};
use crate::{linalg, Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Everything a backward rule may look at.
pub struct BackwardCtx<'a, S> {
    pub inputs: Vec<&'a Tensor<S>>,
    pub output: &'a Tensor<S>,
    pub grad: &'a Tensor<S>,
    /// Whether each input wants a gradient; rules may skip the others.
    pub needs: Vec<bool>,
}

/// The gradient rule of one recorded op.
pub trait Backward<S: Real> {
    fn name(&self) -> &'static str;

    /// One entry per input, `None` where no gradient is needed.
    fn backward(&self, ctx: &BackwardCtx<'_, S>) -> Vec<Option<Tensor<S>>>;
}

struct Node<S: Real> {
    value: Tensor<S>,
    inputs: Vec<Var>,
    rule: Option<Box<dyn Backward<S>>>,
    requires_grad: bool,
}

/// Every op that records a backward rule, by its registered name.
pub const DIFFERENTIABLE_OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "relu",
    "sigmoid",
    "scale",
    "matmul",
    "softmax",
    "concat",
    "slice",
    "sum",
    "mean",
    "reshape",
    "add_row_bias",
    "conv2d",
    "avg_pool",
    "max_pool",
    "upsample_bilinear",
    "bce_with_logits",
    "global_avg_pool",
    "channel_scale",
    "channel_mix",
    "window_attention",
];

pub struct Tape<S: Real> {
    nodes: Vec<Node<S>>,
    corrupted: Option<String>,
}

impl<S: Real> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Real> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            corrupted: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            rule: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Test hook: scales every gradient produced by the named op by 1.5 so a
    /// gradient check must notice.
    #[doc(hidden)]
    pub fn corrupt_backward(&mut self, op: &str) {
        self.corrupted = Some(op.to_string());
    }

    /// Records the result of an op. Rejects non-finite results.
    pub fn push<B: Backward<S> + 'static>(&mut self, value: Tensor<S>, inputs: Vec<Var>, rule: B) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(rule.name().to_string()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            inputs,
            rule: requires_grad.then(|| Box::new(rule) as Box<dyn Backward<S>>),
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse sweep from a scalar `loss`, seeded with gradient 1.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(loss_value.shape()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let (Some(rule), Some(grad)) = (&node.rule, grads[idx].as_ref()) else {
                continue;
            };
            let ctx = BackwardCtx {
                inputs: node.inputs.iter().map(|v| &self.nodes[v.0].value).collect(),
                output: &node.value,
                grad,
                needs: node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect(),
            };
            let mut input_grads = rule.backward(&ctx);
            if self.corrupted.as_deref() == Some(rule.name()) {
                for g in input_grads.iter_mut().flatten() {
                    *g = g.map(|x| x * S::of(1.5));
                }
            }
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", rule.name());
            for (input, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), self.nodes[input.0].value.shape(), "{}", rule.name());
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Real> Gradients<S> {
    /// `None` when `v` is unreachable from the loss or does not require grad.
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

// ---------------------------------------------------------------------------
// Elementwise ops. Binary ops accept identical shapes or a one-element operand.

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Relu,
    Sigmoid,
    Scale,
}

/// Which side of a binary op, if any, is a broadcast scalar.
#[derive(Clone, Copy)]
enum Operands {
    Same,
    ScalarLeft,
    ScalarRight,
}

fn pair_layout<S: Real>(op: &'static str, a: &Tensor<S>, b: &Tensor<S>) -> Result<Operands> {
    if a.shape() == b.shape() {
        Ok(Operands::Same)
    } else if b.numel() == 1 {
        Ok(Operands::ScalarRight)
    } else if a.numel() == 1 {
        Ok(Operands::ScalarLeft)
    } else {
        Err(Error::shape(op, a.shape(), b.shape()))
    }
}

fn binary_apply<S: Real>(a: &Tensor<S>, b: &Tensor<S>, layout: Operands, f: impl Fn(S, S) -> S) -> Tensor<S> {
    match layout {
        Operands::Same => Tensor::from_parts(
            a.shape().to_vec(),
            a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        ),
        Operands::ScalarRight => {
            let y = b.data()[0];
            Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|&x| f(x, y)).collect())
        }
        Operands::ScalarLeft => {
            let x = a.data()[0];
            Tensor::from_parts(b.shape().to_vec(), b.data().iter().map(|&y| f(x, y)).collect())
        }
    }
}

/// Reduces a full-shape gradient onto an operand that may have been a scalar.
fn reduce_to<S: Real>(g: Tensor<S>, target: &Tensor<S>) -> Tensor<S> {
    if g.shape() == target.shape() {
        g
    } else {
        Tensor::full(target.shape(), g.sum())
    }
}

struct BinaryBackward {
    op: ElementwiseOp,
}

impl<S: Real> Backward<S> for BinaryBackward {
    fn name(&self) -> &'static str {
        match self.op {
            ElementwiseOp::Add => "add",
            ElementwiseOp::Sub => "sub",
            _ => "mul",
        }
    }

    fn backward(&self, ctx: &BackwardCtx<'_, S>) -> Vec<Option<Tensor<S>>> {
        let (a, b, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
        let expand = |t: &Tensor<S>| {
            if t.shape() == g.shape() {
                t.clone()
            } else {
                Tensor::full(g.shape(), t.data()[0])
            }
        };
        let (ga, gb) = match self.op {
            ElementwiseOp::Add => (g.clone(), g.clone()),
            ElementwiseOp::Sub => (g.clone(), g.map(|x| -x)),
            _ => {
                let (ea, eb) = (expand(a), expand(b));
                let ga = g.zip_map(&eb, "mul", |x, y| x * y).expect("same shape");
                let gb = g.zip_map(&ea, "mul", |x, y| x * y).expect("same shape");
                (ga, gb)
            }
        };
        vec![
            ctx.needs[0].then(|| reduce_to(ga, a)),
            ctx.needs[1].then(|| reduce_to(gb, b)),
        ]
    }
}

struct ReluBackward;

impl<S: Real> Backward<S> for ReluBackward {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, S>) -> Vec<Option<Tensor<S>>> {
        let g = ctx
            .grad
            .zip_map(ctx.inputs[0], "relu", |g, x| if x > S::zero() { g } else { S::zero() })
            .expect("same shape");
        vec![Some(g)]
    }
}

struct SigmoidBackward;

impl<S: Real> Backward<S> for SigmoidBackward {
    fn name(&self) -> &'static str {
        "sigmoid"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, S>) -> Vec<Option<Tensor<S>>> {
        let g = ctx
            .grad
            .zip_map(ctx.output, "sigmoid", |g, y| g * y * (S::one() - y))
            .expect("same shape");
        vec![Some(g)]
    }
}

struct ScaleBackward<S> {
    factor: S,
}

impl<S: Real> Backward<S> for ScaleBackward<S> {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, S>) -> Vec<Option<Tensor<S>>> {
        vec![Some(ctx.grad.map(|g| g * self.factor))]
    }
}

/// Numerically stable logistic function.
///
/// The result stays strictly inside `(0, 1)`: where the exact value rounds
/// to 0 or 1 (|x| beyond ~37 in f64) it is clamped to the nearest
/// representable neighbour, which moves it by less than one ulp of 1.
pub fn sigmoid<S: Real>(x: S) -> S {
    let y = if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    };
    y.max(S::min_positive_value()).min(S::one() - S::epsilon() / S::of(2.0))
}

impl<S: Real> Tape<S> {
    pub fn elementwise(&mut self, op: ElementwiseOp, a: Var, b: Option<Var>) -> Result<Var> {
        match (op, b) {
            (ElementwiseOp::Add, Some(b)) => self.add(a, b),
            (ElementwiseOp::Sub, Some(b)) => self.sub(a, b),
            (ElementwiseOp::Mul, Some(b)) => self.mul(a, b),
            (ElementwiseOp::Relu, None) => self.relu(a),
            (ElementwiseOp::Sigmoid, None) => self.sigmoid(a),
            (ElementwiseOp::Scale, Some(b)) => {
                let factor = self
                    .value(b)
                    .item()
                    .ok_or_else(|| Error::invalid("scale", "factor must be a single value"))?;
                self.scale(a, factor)
            }
            (op, _) => Err(Error::invalid("elementwise", format!("wrong operand count for {op:?}"))),
        }
    }

    fn binary(&mut self, op: ElementwiseOp, name: &'static str, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Result<Var> {
        let layout = pair_layout(name, self.value(a), self.value(b))?;
        let out = binary_apply(self.value(a), self.value(b), layout, f);
        self.push(out, vec![a, b], BinaryBackward { op })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseOp::Add, "add", a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseOp::Sub, "sub", a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(ElementwiseOp::Mul, "mul", a, b, |x, y| x * y)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(S::zero()));
        self.push(out, vec![x], ReluBackward)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        self.push(out, vec![x], SigmoidBackward)
    }

    pub fn scale(&mut self, x: Var, factor: S) -> Result<Var> {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, vec![x], ScaleBackward { factor })
    }
}

// ---------------------------------------------------------------------------
// Linear algebra, reductions and shape ops.

struct MatmulBackward;

impl<S: Real> Backward<S> for MatmulBackward {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, S>) -> Vec<Option<Tensor<S>>> {
        let (a, b, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        // grad_a = g · bᵀ, grad_b = aᵀ · g
        let ga = ctx.needs[0].then(|| {
            let bt = linalg::transpose(b.data(), k, n);
            Tensor::from_parts(vec![m, k], linalg::gemm(g.data(), &bt, m, n, k))
        });
        let gb = ctx.needs[1].then(|| {
            let at = linalg::transpose(a.data(), m, k);
            Tensor::from_parts(vec![k, n], linalg::gemm(&at, g.data(), k, m, n))
        });
        vec![ga, gb]
    }
}

/// `(outer, len, inner)` view of a shape around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

struct SoftmaxBackward {
    axis: usize,
}

impl<S: Real> Backward<S> for SoftmaxBackward {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, S>) -> Vec<Option<Tensor<S>>> {
        let (y, g) = (ctx.output, ctx.grad);
        let (outer, len, inner) = axis_split(y.shape(), self.axis);
        let mut dx = vec![S::zero(); y.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let dot: S = (0..len).map(|j| y.data()[base + j * inner] * g.data()[base + j * inner]).sum();
                for j in 0..len {
                    let at = base + j * inner;
                    dx[at] = y.data()[at] * (g.data()[at] - dot);
                }
            }
        }
        vec![Some(Tensor::from_parts(y.shape().to_vec(), dx))]
    }
}

struct ConcatBackward {
    axis: usize,
    sizes: Vec<usize>,
}

impl<S: Real> Backward<S> for ConcatBackward {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, S>) -> Vec<Option<Tensor<S>>> {
        let mut start = 0;
        self.sizes
            .iter()
            .zip(&ctx.needs)
            .map(|(&len, &need)| {
                let piece = need.then(|| slice_tensor(ctx.grad, self.axis, start, len));
                start += len;
                piece
            })
            .collect()
    }
}

fn slice_tensor<S: Real>(t: &Tensor<S>, axis: usize, start: usize, len: usize) -> Tensor<S> {
    let (outer, total, inner) = axis_split(t.shape(), axis);
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let from = (o * total + start) * inner;
        data.extend_from_slice(&t.data()[from..from + len * inner]);
    }
    let mut shape = t.shape().to_vec();
    shape[axis] = len;
    Tensor::from_parts(shape, data)
}

struct SliceBackward {
    axis: usize,
    start: usize,
}

impl<S: Real> Backward<S> for SliceBackward {
    fn name(&self) -> &'static str {
        "slice"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, S>) -> Vec<Option<Tensor<S>>> {
        let input = ctx.inputs[0];
        let (outer, total, inner) = axis_split(input.shape(), self.axis);
        let len = ctx.grad.shape()[self.axis];
        let mut dx = vec![S::zero(); input.numel()];
        for o in 0..outer {
            let to = (o * total + self.start) * inner;
            let from = o * len * inner;
            dx[to..to + len * inner].copy_from_slice(&ctx.grad.data()[from..from + len * inner]);
        }
        vec![Some(Tensor::from_parts(input.shape().to_vec(), dx))]
    }
}

struct SumBackward {
    mean: bool,
}

impl<S: Real> Backward<S> for SumBackward {
    fn name(&self) -> &'static str {
        if self.mean {
            "mean"
        } else {
            "sum"
        }
    }

    fn backward(&self, ctx: &BackwardCtx<'_, S>) -> Vec<Option<Tensor<S>>> {
        let input = ctx.inputs[0];
        let mut g = ctx.grad.data()[0];
        if self.mean {
            g /= S::of(input.numel() as f64);
        }
        vec![Some(Tensor::full(input.shape(), g))]
    }
}

struct ReshapeBackward;

impl<S: Real> Backward<S> for ReshapeBackward {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, S>) -> Vec<Option<Tensor<S>>> {
        let shape = ctx.inputs[0].shape().to_vec();
        vec![Some(Tensor::from_parts(shape, ctx.grad.data().to_vec()))]
    }
}

struct RowBiasBackward;

impl<S: Real> Backward<S> for RowBiasBackward {
    fn name(&self) -> &'static str {
        "add_row_bias"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, S>) -> Vec<Option<Tensor<S>>> {
        let g = ctx.grad;
        let width = ctx.inputs[1].numel();
        let gb = ctx.needs[1].then(|| {
            let mut acc = vec![S::zero(); width];
            for row in g.data().chunks(width) {
                for (a, &v) in acc.iter_mut().zip(row) {
                    *a += v;
                }
            }
            Tensor::from_parts(ctx.inputs[1].shape().to_vec(), acc)
        });
        vec![ctx.needs[0].then(|| g.clone()), gb]
    }
}

impl<S: Real> Tape<S> {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, vec![a, b], MatmulBackward)
    }

    /// Softmax along `axis`, max-subtracted per slice.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let input = self.value(x);
        if axis >= input.ndim() {
            return Err(Error::invalid("softmax", format!("axis {axis} out of range for {:?}", input.shape())));
        }
        let (outer, len, inner) = axis_split(input.shape(), axis);
        let mut out = vec![S::zero(); input.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let at = |j: usize| base + j * inner;
                let max = (0..len).map(|j| input.data()[at(j)]).fold(S::neg_infinity(), S::max);
                let mut total = S::zero();
                for j in 0..len {
                    let e = (input.data()[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        let out = Tensor::from_parts(input.shape().to_vec(), out);
        self.push(out, vec![x], SoftmaxBackward { axis })
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "needs at least one tensor"))?;
        let reference = self.shape(*first).to_vec();
        if axis >= reference.len() {
            return Err(Error::invalid("concat", format!("axis {axis} out of range for {reference:?}")));
        }
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == reference.len()
                && s.iter().zip(&reference).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &reference, s));
            }
            sizes.push(s[axis]);
        }
        let (outer, _, inner) = axis_split(&reference, axis);
        let total: usize = sizes.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &len) in parts.iter().zip(&sizes) {
                let from = o * len * inner;
                data.extend_from_slice(&self.value(p).data()[from..from + len * inner]);
            }
        }
        let mut shape = reference;
        shape[axis] = total;
        self.push(Tensor::from_parts(shape, data), parts.to_vec(), ConcatBackward { axis, sizes })
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let input = self.value(x);
        if axis >= input.ndim() || len == 0 || start + len > input.shape()[axis] {
            return Err(Error::invalid(
                "slice",
                format!("range {start}..{} on axis {axis} of {:?}", start + len, input.shape()),
            ));
        }
        let out = slice_tensor(input, axis, start, len);
        self.push(out, vec![x], SliceBackward { axis, start })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, vec![x], SumBackward { mean: false })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let input = self.value(x);
        let out = Tensor::scalar(input.sum() / S::of(input.numel() as f64));
        self.push(out, vec![x], SumBackward { mean: true })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        self.push(out, vec![x], ReshapeBackward)
    }

    /// Adds `bias [M]` to every row of `x [.., M]`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (input, b) = (self.value(x), self.value(bias));
        if b.ndim() != 1 || input.shape().last() != Some(&b.numel()) {
            return Err(Error::shape("add_row_bias", input.shape(), b.shape()));
        }
        let width = b.numel();
        let mut data = input.data().to_vec();
        for row in data.chunks_mut(width) {
            for (v, &bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
        let out = Tensor::from_parts(input.shape().to_vec(), data);
        self.push(out, vec![x, bias], RowBiasBackward)
    }
}

// ---------------------------------------------------------------------------
// Finite-difference verification.

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval_scalar<S: Real>(f: &impl Fn(&mut Tape<S>, &[Var]) -> Result<Var>, inputs: &[Tensor<S>]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.value(out)
        .item()
        .map(Real::as_f64)
        .ok_or_else(|| Error::NonScalarLoss(tape.shape(out).to_vec()))
}

/// Central-difference check of selected coordinates.
///
/// `coords` holds `(input index, flat element index)` pairs. Returns the
/// largest `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn gradcheck_coords<S: Real>(
    f: impl Fn(&mut Tape<S>, &[Var]) -> Result<Var>,
    inputs: &[Tensor<S>],
    coords: &[(usize, usize)],
    h: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for &(which, at) in coords {
        let analytic = grads.get(vars[which]).map_or(0.0, |g| g.data()[at].as_f64());
        let original = probe[which].data()[at];
        probe[which].data_mut()[at] = original + S::of(h);
        let plus = eval_scalar(&f, &probe)?;
        probe[which].data_mut()[at] = original - S::of(h);
        let minus = eval_scalar(&f, &probe)?;
        probe[which].data_mut()[at] = original;
        let numeric = (plus - minus) / (2.0 * h);
        worst = worst.max(relative_error(analytic, numeric));
    }
    Ok(worst)
}

/// Central-difference check of every coordinate of a single input.
pub fn gradcheck<S: Real>(f: impl Fn(&mut Tape<S>, Var) -> Result<Var>, x: &Tensor<S>, h: f64) -> Result<f64> {
    let coords: Vec<(usize, usize)> = (0..x.numel()).map(|i| (0, i)).collect();
    gradcheck_coords(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), &coords, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn sigmoid_never_reaches_the_endpoints() {
        for x in [40.0, 800.0, f64::MAX] {
            assert!(sigmoid(x) < 1.0 && sigmoid(-x) > 0.0);
        }
        assert!(sigmoid(1e3f32) < 1.0 && sigmoid(-1e3f32) > 0.0);
        assert_eq!(sigmoid(2.0), 1.0 / (1.0 + (-2.0f64).exp()));
    }

    #[test]
    fn elementwise_definitions() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::scalar(0.0));
        let s = tape.sigmoid(z).unwrap();
        assert_eq!(tape.value(s).item(), Some(0.5));
        let n = tape.constant(Tensor::scalar(-3.2));
        let r = tape.relu(n).unwrap();
        assert_eq!(tape.value(r).item(), Some(0.0));
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        let sum = tape.elementwise(ElementwiseOp::Add, a, Some(b)).unwrap();
        assert_eq!(tape.value(sum).data(), &[4.0, 6.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([3, 2]));
        let msg = tape.add(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn scalar_operand_broadcasts() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let s = tape.param(Tensor::scalar(2.0));
        let p = tape.mul(a, s).unwrap();
        assert_eq!(tape.value(p).data(), &[2.0, 4.0, 6.0]);
        let loss = tape.sum(p).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[2.0, 2.0, 2.0]);
        assert_eq!(g.get(s).unwrap().data(), &[6.0]);
    }

    #[test]
    fn matmul_small_cases() {
        let mut tape = Tape::<f64>::new();
        let i = tape.constant(Tensor::identity(2));
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = tape.matmul(i, m).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);
        let r = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let p = tape.matmul(r, c).unwrap();
        assert_eq!(tape.value(p).data(), &[11.0]);
    }

    #[test]
    fn softmax_is_stable() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2], &[1000.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert!((tape.value(y).data()[0] - 1.0).abs() < 1e-12);
        assert!(tape.value(y).data()[1] < 1e-12);
        let u = tape.constant(Tensor::zeros([3]));
        let y = tape.softmax(u, 0).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn concat_of_one_is_identity() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::uniform([2, 3], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1)));
        let c = tape.concat(&[x], 1).unwrap();
        assert_eq!(tape.value(c), tape.value(x));
    }

    #[test]
    fn concat_rejects_incompatible() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros([1, 2, 3]));
        let b = tape.constant(Tensor::zeros([1, 2, 4]));
        assert!(tape.concat(&[a, b], 1).is_err());
        assert!(tape.concat(&[a, b], 2).is_ok());
    }

    #[test]
    fn backward_on_sum_and_square() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::uniform([4], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(2)));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 4]);

        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(3.0));
        let sq = tape.mul(x, x).unwrap();
        assert_eq!(tape.backward(sq).unwrap().get(x).unwrap().item(), Some(6.0));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::zeros([2]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn non_finite_results_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(f64::MAX));
        assert!(matches!(tape.scale(x, 10.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(2.0));
        let c = tape.constant(Tensor::scalar(5.0));
        let y = tape.mul(x, c).unwrap();
        let g = tape.backward(y).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().item(), Some(5.0));
    }

    #[test]
    fn gradcheck_is_exact_for_linear_maps() {
        let x = Tensor::<f64>::uniform([5], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        let err = gradcheck(|tape, v| {
            let y = tape.scale(v, 3.0)?;
            tape.sum(y)
        }, &x, 1e-5)
        .unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn corrupted_rule_is_detected() {
        let x = Tensor::<f64>::uniform([4], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(4));
        let err = gradcheck(|tape, v| {
            tape.corrupt_backward("sigmoid");
            let y = tape.sigmoid(v)?;
            tape.sum(y)
        }, &x, 1e-5)
        .unwrap();
        assert!(err > 0.1, "{err}");
    }
}
