//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a Wengert tape: every operation appends a node holding the
//! forward value, its producing op, and a lazily allocated gradient buffer.
//! [`Tensor`] is a cheap handle (graph + node index). Calling
//! [`Tensor::backward`] on a scalar walks the tape in reverse and accumulates
//! exact gradients into every ancestor that requires them.
//!
//! Values are immutable once written; `backward` only touches gradient
//! buffers. A graph is single-threaded; independent graphs may live on
//! independent threads.
//!
//! Broadcasting is deliberately narrow: operands must have equal shapes, or
//! the right-hand side must be a scalar (one element) or a trailing suffix of
//! the left-hand shape (e.g. `[T, C] + [C]` for a bias or encoding row).

pub mod serial;

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Epsilon inside layer normalization's variance denominator.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Inputs to `exp` are clamped to this value so opacity/scale heads cannot
/// overflow; the derivative is zero beyond the clamp.
pub const EXP_CLAMP: f64 = 30.0;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    ScaleF64(usize, f64),
    Matmul(usize, usize),
    Transpose(usize, Vec<usize>),
    Reshape(usize),
    Concat(Vec<usize>, usize),
    Slice {
        input: usize,
        axis: usize,
        start: usize,
        len: usize,
    },
    SumAll(usize),
    MeanAll(usize),
    Exp(usize),
    Tanh(usize),
    Sigmoid(usize),
    SoftmaxMasked {
        input: usize,
        mask: usize,
    },
    LayerNorm {
        input: usize,
        gamma: usize,
        beta: usize,
    },
    SquaredErr(usize, usize),
    AbsErr(usize, usize),
    External {
        inputs: Vec<usize>,
        ctx: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::ScaleF64(..) => "scale",
            Op::Matmul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::SumAll(..) => "sum",
            Op::MeanAll(..) => "mean",
            Op::Exp(..) => "exp",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::SoftmaxMasked { .. } => "softmax_masked",
            Op::LayerNorm { .. } => "layer_norm",
            Op::SquaredErr(..) => "squared_err",
            Op::AbsErr(..) => "abs_err",
            Op::External { .. } => "external",
        }
    }
}

struct Node<S> {
    shape: Vec<usize>,
    data: Vec<S>,
    grad: Option<Vec<S>>,
    op: Op,
    /// True if gradients must flow through this node (it is a grad leaf or
    /// has a grad-requiring ancestor).
    needs_grad: bool,
    label: Option<Box<str>>,
}

/// An operation whose forward value was computed outside the tape (e.g. the
/// splat renderer) but that participates in reverse mode. `backward` receives
/// the upstream gradient of the output and returns one gradient buffer per
/// recorded input, in input order.
pub trait ExternalOp<S: Scalar> {
    fn name(&self) -> &'static str;
    fn backward(&self, grad_out: &[S]) -> Vec<Vec<S>>;
}

pub struct Graph<S: Scalar> {
    nodes: RefCell<Vec<Node<S>>>,
    externals: RefCell<Vec<Box<dyn ExternalOp<S>>>>,
}

/// Shared handle to a graph. Cloning is cheap.
pub struct GraphRef<S: Scalar>(Rc<Graph<S>>);

impl<S: Scalar> Clone for GraphRef<S> {
    fn clone(&self) -> Self {
        GraphRef(Rc::clone(&self.0))
    }
}

/// Handle to one node of a graph.
pub struct Tensor<S: Scalar> {
    graph: GraphRef<S>,
    id: usize,
}

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor {
            graph: self.graph.clone(),
            id: self.id,
        }
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// How the rhs of an elementwise binary op maps onto the lhs.
#[derive(Clone, Copy, PartialEq)]
enum Broadcast {
    Same,
    /// rhs has one element.
    Scalar,
    /// rhs shape is a strict suffix of lhs shape; rhs index = lhs index % rhs len.
    Suffix,
}

fn broadcast_kind(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<Broadcast> {
    if lhs == rhs {
        return Ok(Broadcast::Same);
    }
    if numel(rhs) == 1 {
        return Ok(Broadcast::Scalar);
    }
    if rhs.len() < lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs {
        return Ok(Broadcast::Suffix);
    }
    Err(Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

impl<S: Scalar> GraphRef<S> {
    pub fn new() -> Self {
        GraphRef(Rc::new(Graph {
            nodes: RefCell::new(Vec::new()),
            externals: RefCell::new(Vec::new()),
        }))
    }

    fn push(&self, shape: Vec<usize>, data: Vec<S>, op: Op, needs_grad: bool) -> Tensor<S> {
        debug_assert_eq!(numel(&shape), data.len());
        let mut nodes = self.0.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            shape,
            data,
            grad: None,
            op,
            needs_grad,
            label: None,
        });
        Tensor {
            graph: self.clone(),
            id,
        }
    }

    /// New leaf tensor. `requires_grad` marks it as a gradient target.
    pub fn leaf(&self, data: Vec<S>, shape: &[usize], requires_grad: bool) -> Tensor<S> {
        assert_eq!(
            numel(shape),
            data.len(),
            "leaf: {} elements for shape {:?}",
            data.len(),
            shape
        );
        self.push(shape.to_vec(), data, Op::Leaf, requires_grad)
    }

    /// Leaf without gradient tracking.
    pub fn constant(&self, data: Vec<S>, shape: &[usize]) -> Tensor<S> {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&self, value: S) -> Tensor<S> {
        self.constant(vec![value], &[1])
    }

    fn needs(&self, id: usize) -> bool {
        self.0.nodes.borrow()[id].needs_grad
    }

    /// Concatenate along `axis`. All inputs must agree on every other extent.
    pub fn concat(&self, parts: &[&Tensor<S>], axis: usize) -> Result<Tensor<S>> {
        assert!(!parts.is_empty(), "concat: no inputs");
        let first_shape = parts[0].shape();
        let rank = first_shape.len();
        if axis >= rank {
            return Err(Error::InvalidArgument {
                op: "concat",
                msg: format!("axis {} out of range for rank {}", axis, rank),
            });
        }
        let mut axis_total = 0usize;
        for p in parts {
            let s = p.shape();
            let mut expect = first_shape.clone();
            if s.len() != rank {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first_shape,
                    rhs: s,
                });
            }
            expect[axis] = s[axis];
            if s != expect {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first_shape,
                    rhs: s,
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first_shape.clone();
        out_shape[axis] = axis_total;

        let outer: usize = first_shape[..axis].iter().product();
        let inner: usize = first_shape[axis + 1..].iter().product();
        let mut data = vec![S::zero(); numel(&out_shape)];
        {
            let nodes = self.0.nodes.borrow();
            let out_row = axis_total * inner;
            let mut col_off = 0usize;
            for p in parts {
                let n = &nodes[p.id];
                let len_axis = n.shape[axis];
                let chunk = len_axis * inner;
                for o in 0..outer {
                    let src = &n.data[o * chunk..(o + 1) * chunk];
                    let dst = o * out_row + col_off;
                    data[dst..dst + chunk].copy_from_slice(src);
                }
                col_off += chunk;
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let needs = ids.iter().any(|&i| self.needs(i));
        Ok(self.push(out_shape, data, Op::Concat(ids, axis), needs))
    }

    /// Record an externally computed op (forward already done by the caller).
    pub fn external(
        &self,
        inputs: &[&Tensor<S>],
        out_data: Vec<S>,
        out_shape: &[usize],
        ctx: Box<dyn ExternalOp<S>>,
    ) -> Tensor<S> {
        let ids: Vec<usize> = inputs.iter().map(|t| t.id).collect();
        let needs = ids.iter().any(|&i| self.needs(i));
        let ctx_idx = {
            let mut ext = self.0.externals.borrow_mut();
            ext.push(ctx);
            ext.len() - 1
        };
        self.push(
            out_shape.to_vec(),
            out_data,
            Op::External {
                inputs: ids,
                ctx: ctx_idx,
            },
            needs,
        )
    }

    pub fn node_count(&self) -> usize {
        self.0.nodes.borrow().len()
    }

    /// Scan nodes in creation order for the first non-finite value.
    /// Returns (node id, name, shape).
    pub fn first_non_finite(&self) -> Option<(usize, String, Vec<usize>)> {
        let nodes = self.0.nodes.borrow();
        for (i, n) in nodes.iter().enumerate() {
            if n.data.iter().any(|v| !v.is_finite()) {
                let name = n
                    .label
                    .as_ref()
                    .map(|l| l.to_string())
                    .unwrap_or_else(|| n.op.name().to_string());
                return Some((i, name, n.shape.clone()));
            }
        }
        None
    }
}

impl<S: Scalar> Default for GraphRef<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tensor<S> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &GraphRef<S> {
        &self.graph
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.0.nodes.borrow()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.graph.0.nodes.borrow()[self.id].data.len()
    }

    /// Copy of the forward value.
    pub fn value(&self) -> Vec<S> {
        self.graph.0.nodes.borrow()[self.id].data.clone()
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> S {
        let nodes = self.graph.0.nodes.borrow();
        let n = &nodes[self.id];
        assert_eq!(n.data.len(), 1, "item() on tensor of shape {:?}", n.shape);
        n.data[0]
    }

    /// Copy of the accumulated gradient, if any was produced.
    pub fn grad(&self) -> Option<Vec<S>> {
        self.graph.0.nodes.borrow()[self.id].grad.clone()
    }

    pub fn set_label(&self, label: &str) -> &Self {
        self.graph.0.nodes.borrow_mut()[self.id].label = Some(label.into());
        self
    }

    fn with_nodes<R>(&self, f: impl FnOnce(&Vec<Node<S>>) -> R) -> R {
        f(&self.graph.0.nodes.borrow())
    }

    fn binary_elementwise(
        &self,
        rhs: &Tensor<S>,
        op_name: &'static str,
        make_op: impl FnOnce(usize, usize) -> Op,
        eval: impl Fn(S, S) -> S,
    ) -> Result<Tensor<S>> {
        let (shape, data) = self.with_nodes(|nodes| {
            let a = &nodes[self.id];
            let b = &nodes[rhs.id];
            let kind = broadcast_kind(op_name, &a.shape, &b.shape)?;
            let blen = b.data.len();
            let data: Vec<S> = match kind {
                Broadcast::Same => a
                    .data
                    .iter()
                    .zip(&b.data)
                    .map(|(&x, &y)| eval(x, y))
                    .collect(),
                Broadcast::Scalar => {
                    let y = b.data[0];
                    a.data.iter().map(|&x| eval(x, y)).collect()
                }
                Broadcast::Suffix => a
                    .data
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| eval(x, b.data[i % blen]))
                    .collect(),
            };
            Ok::<_, Error>((a.shape.clone(), data))
        })?;
        let needs = self.graph.needs(self.id) || self.graph.needs(rhs.id);
        Ok(self
            .graph
            .push(shape, data, make_op(self.id, rhs.id), needs))
    }

    pub fn add(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        self.binary_elementwise(rhs, "add", Op::Add, |x, y| x + y)
    }

    pub fn sub(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        self.binary_elementwise(rhs, "sub", Op::Sub, |x, y| x - y)
    }

    pub fn mul(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        self.binary_elementwise(rhs, "mul", Op::Mul, |x, y| x * y)
    }

    /// Multiply every element by a constant.
    pub fn scale(&self, c: f64) -> Tensor<S> {
        let cs = S::from_f64(c);
        let (shape, data) = self.with_nodes(|nodes| {
            let a = &nodes[self.id];
            (
                a.shape.clone(),
                a.data.iter().map(|&x| x * cs).collect::<Vec<S>>(),
            )
        });
        let needs = self.graph.needs(self.id);
        self.graph
            .push(shape, data, Op::ScaleF64(self.id, c), needs)
    }

    /// 2-D matrix product `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        let (m, k, n, data) = self.with_nodes(|nodes| {
            let a = &nodes[self.id];
            let b = &nodes[rhs.id];
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            Ok((m, k, n, matmul_raw(&a.data, &b.data, m, k, n)))
        })?;
        let _ = (m, k);
        let needs = self.graph.needs(self.id) || self.graph.needs(rhs.id);
        Ok(self
            .graph
            .push(vec![m, n], data, Op::Matmul(self.id, rhs.id), needs))
    }

    /// Permute axes; `axes` must be a permutation of `0..rank`.
    pub fn transpose(&self, axes: &[usize]) -> Result<Tensor<S>> {
        let (out_shape, data) = self.with_nodes(|nodes| {
            let a = &nodes[self.id];
            let rank = a.shape.len();
            let mut seen = vec![false; rank];
            if axes.len() != rank || axes.iter().any(|&ax| ax >= rank || std::mem::replace(&mut seen[ax], true)) {
                return Err(Error::InvalidArgument {
                    op: "transpose",
                    msg: format!("axes {:?} is not a permutation of 0..{}", axes, rank),
                });
            }
            let out_shape: Vec<usize> = axes.iter().map(|&ax| a.shape[ax]).collect();
            let data = permute_raw(&a.data, &a.shape, axes, &out_shape);
            Ok((out_shape, data))
        })?;
        let needs = self.graph.needs(self.id);
        Ok(self
            .graph
            .push(out_shape, data, Op::Transpose(self.id, axes.to_vec()), needs))
    }

    /// 2-D transpose shorthand.
    pub fn t(&self) -> Result<Tensor<S>> {
        self.transpose(&[1, 0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<S>> {
        let data = self.with_nodes(|nodes| {
            let a = &nodes[self.id];
            if numel(shape) != a.data.len() {
                return Err(Error::ShapeMismatch {
                    op: "reshape",
                    lhs: a.shape.clone(),
                    rhs: shape.to_vec(),
                });
            }
            Ok(a.data.clone())
        })?;
        let needs = self.graph.needs(self.id);
        Ok(self
            .graph
            .push(shape.to_vec(), data, Op::Reshape(self.id), needs))
    }

    /// Contiguous range along one axis.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<S>> {
        let (out_shape, data) = self.with_nodes(|nodes| {
            let a = &nodes[self.id];
            let rank = a.shape.len();
            if axis >= rank || start + len > a.shape[axis] {
                return Err(Error::InvalidArgument {
                    op: "slice",
                    msg: format!(
                        "range {}..{} on axis {} of shape {:?}",
                        start,
                        start + len,
                        axis,
                        a.shape
                    ),
                });
            }
            let outer: usize = a.shape[..axis].iter().product();
            let inner: usize = a.shape[axis + 1..].iter().product();
            let mut out_shape = a.shape.clone();
            out_shape[axis] = len;
            let mut data = Vec::with_capacity(outer * len * inner);
            let src_row = a.shape[axis] * inner;
            for o in 0..outer {
                let base = o * src_row + start * inner;
                data.extend_from_slice(&a.data[base..base + len * inner]);
            }
            Ok((out_shape, data))
        })?;
        let needs = self.graph.needs(self.id);
        Ok(self.graph.push(
            out_shape,
            data,
            Op::Slice {
                input: self.id,
                axis,
                start,
                len,
            },
            needs,
        ))
    }

    pub fn sum_all(&self) -> Tensor<S> {
        let total = self.with_nodes(|nodes| nodes[self.id].data.iter().copied().sum::<S>());
        let needs = self.graph.needs(self.id);
        self.graph
            .push(vec![1], vec![total], Op::SumAll(self.id), needs)
    }

    pub fn mean_all(&self) -> Tensor<S> {
        let (total, n) = self.with_nodes(|nodes| {
            let d = &nodes[self.id].data;
            (d.iter().copied().sum::<S>(), d.len())
        });
        let mean = total / S::from_f64(n as f64);
        let needs = self.graph.needs(self.id);
        self.graph
            .push(vec![1], vec![mean], Op::MeanAll(self.id), needs)
    }

    fn unary(
        &self,
        make_op: impl FnOnce(usize) -> Op,
        eval: impl Fn(S) -> S,
    ) -> Tensor<S> {
        let (shape, data) = self.with_nodes(|nodes| {
            let a = &nodes[self.id];
            (
                a.shape.clone(),
                a.data.iter().map(|&x| eval(x)).collect::<Vec<S>>(),
            )
        });
        let needs = self.graph.needs(self.id);
        self.graph.push(shape, data, make_op(self.id), needs)
    }

    /// `exp` with the input clamped to [`EXP_CLAMP`].
    pub fn exp(&self) -> Tensor<S> {
        let clamp = S::from_f64(EXP_CLAMP);
        self.unary(Op::Exp, |x| if x > clamp { clamp.exp() } else { x.exp() })
    }

    pub fn tanh(&self) -> Tensor<S> {
        self.unary(Op::Tanh, |x| x.tanh())
    }

    pub fn sigmoid(&self) -> Tensor<S> {
        self.unary(Op::Sigmoid, sigmoid_scalar)
    }

    /// Row-wise softmax over the last axis after adding `mask` (zeros and
    /// `-inf`). A fully masked row yields all zeros.
    pub fn softmax_masked(&self, mask: &Tensor<S>) -> Result<Tensor<S>> {
        let (shape, data) = self.with_nodes(|nodes| {
            let a = &nodes[self.id];
            let m = &nodes[mask.id];
            if a.shape != m.shape {
                return Err(Error::ShapeMismatch {
                    op: "softmax_masked",
                    lhs: a.shape.clone(),
                    rhs: m.shape.clone(),
                });
            }
            if a.shape.is_empty() {
                return Err(Error::InvalidArgument {
                    op: "softmax_masked",
                    msg: "rank-0 input".into(),
                });
            }
            let cols = *a.shape.last().unwrap();
            let mut data = vec![S::zero(); a.data.len()];
            for (row_out, (row_x, row_m)) in data
                .chunks_mut(cols)
                .zip(a.data.chunks(cols).zip(m.data.chunks(cols)))
            {
                softmax_row(row_x, row_m, row_out);
            }
            Ok((a.shape.clone(), data))
        })?;
        let needs = self.graph.needs(self.id);
        Ok(self.graph.push(
            shape,
            data,
            Op::SoftmaxMasked {
                input: self.id,
                mask: mask.id,
            },
            needs,
        ))
    }

    /// Layer normalization over the last axis with per-channel affine params.
    pub fn layer_norm(&self, gamma: &Tensor<S>, beta: &Tensor<S>) -> Result<Tensor<S>> {
        let (shape, data) = self.with_nodes(|nodes| {
            let a = &nodes[self.id];
            let g = &nodes[gamma.id];
            let b = &nodes[beta.id];
            let cols = *a.shape.last().ok_or_else(|| Error::InvalidArgument {
                op: "layer_norm",
                msg: "rank-0 input".into(),
            })?;
            if g.shape != [cols] || b.shape != [cols] {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    lhs: a.shape.clone(),
                    rhs: g.shape.clone(),
                });
            }
            let eps = S::from_f64(LAYER_NORM_EPS);
            let mut data = vec![S::zero(); a.data.len()];
            for (row_out, row_x) in data.chunks_mut(cols).zip(a.data.chunks(cols)) {
                let (mean, inv_std) = row_moments(row_x, eps);
                for c in 0..cols {
                    row_out[c] = (row_x[c] - mean) * inv_std * g.data[c] + b.data[c];
                }
            }
            Ok((a.shape.clone(), data))
        })?;
        let needs = self.graph.needs(self.id)
            || self.graph.needs(gamma.id)
            || self.graph.needs(beta.id);
        Ok(self.graph.push(
            shape,
            data,
            Op::LayerNorm {
                input: self.id,
                gamma: gamma.id,
                beta: beta.id,
            },
            needs,
        ))
    }

    /// Elementwise squared error `(a - b)^2`; shapes must match exactly.
    pub fn squared_err(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        self.same_shape_binary(rhs, "squared_err", Op::SquaredErr, |x, y| {
            (x - y) * (x - y)
        })
    }

    /// Elementwise absolute error `|a - b|`; shapes must match exactly.
    pub fn abs_err(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        self.same_shape_binary(rhs, "abs_err", Op::AbsErr, |x, y| (x - y).abs())
    }

    fn same_shape_binary(
        &self,
        rhs: &Tensor<S>,
        op_name: &'static str,
        make_op: impl FnOnce(usize, usize) -> Op,
        eval: impl Fn(S, S) -> S,
    ) -> Result<Tensor<S>> {
        let (shape, data) = self.with_nodes(|nodes| {
            let a = &nodes[self.id];
            let b = &nodes[rhs.id];
            if a.shape != b.shape {
                return Err(Error::ShapeMismatch {
                    op: op_name,
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
            Ok((
                a.shape.clone(),
                a.data
                    .iter()
                    .zip(&b.data)
                    .map(|(&x, &y)| eval(x, y))
                    .collect::<Vec<S>>(),
            ))
        })?;
        let needs = self.graph.needs(self.id) || self.graph.needs(rhs.id);
        Ok(self
            .graph
            .push(shape, data, make_op(self.id, rhs.id), needs))
    }

    /// Reverse pass from a one-element tensor. The pass propagates through a
    /// scratch buffer and then adds the result into each node's persistent
    /// gradient, so a second call doubles every gradient exactly.
    pub fn backward(&self) -> Result<()> {
        {
            let nodes = self.graph.0.nodes.borrow();
            let n = &nodes[self.id];
            if n.data.len() != 1 {
                return Err(Error::InvalidArgument {
                    op: "backward",
                    msg: format!("output has shape {:?}; only scalars may seed", n.shape),
                });
            }
        }
        let mut scratch: Vec<Option<Vec<S>>> = {
            let nodes = self.graph.0.nodes.borrow();
            let mut scratch: Vec<Option<Vec<S>>> = vec![None; self.id + 1];
            scratch[self.id] = Some(vec![S::one()]);

            for i in (0..=self.id).rev() {
                if !nodes[i].needs_grad {
                    continue;
                }
                let g = match &scratch[i] {
                    Some(g) => g.clone(),
                    None => continue,
                };
                let op = nodes[i].op.clone();
                match op {
                    Op::Leaf => {}
                    Op::Add(a, b) => {
                        accumulate(&nodes, &mut scratch, a, &g);
                        accumulate_bcast(&nodes, &mut scratch, b, &g, false);
                    }
                    Op::Sub(a, b) => {
                        accumulate(&nodes, &mut scratch, a, &g);
                        accumulate_bcast(&nodes, &mut scratch, b, &g, true);
                    }
                    Op::Mul(a, b) => {
                        if nodes[a].needs_grad {
                            let blen = nodes[b].data.len();
                            let contrib: Vec<S> = g
                                .iter()
                                .enumerate()
                                .map(|(j, &gj)| gj * nodes[b].data[j % blen])
                                .collect();
                            accumulate(&nodes, &mut scratch, a, &contrib);
                        }
                        if nodes[b].needs_grad {
                            let blen = nodes[b].data.len();
                            let mut contrib = vec![S::zero(); blen];
                            for (j, &gj) in g.iter().enumerate() {
                                contrib[j % blen] = contrib[j % blen] + gj * nodes[a].data[j];
                            }
                            accumulate(&nodes, &mut scratch, b, &contrib);
                        }
                    }
                    Op::ScaleF64(a, c) => {
                        let cs = S::from_f64(c);
                        let contrib: Vec<S> = g.iter().map(|&gj| gj * cs).collect();
                        accumulate(&nodes, &mut scratch, a, &contrib);
                    }
                    Op::Matmul(a, b) => {
                        let m = nodes[a].shape[0];
                        let k = nodes[a].shape[1];
                        let n = nodes[b].shape[1];
                        if nodes[a].needs_grad {
                            // dA = g @ B^T
                            let bt = transpose2d(&nodes[b].data, k, n);
                            let da = matmul_raw(&g, &bt, m, n, k);
                            accumulate(&nodes, &mut scratch, a, &da);
                        }
                        if nodes[b].needs_grad {
                            // dB = A^T @ g
                            let at = transpose2d(&nodes[a].data, m, k);
                            let db = matmul_raw(&at, &g, k, m, n);
                            accumulate(&nodes, &mut scratch, b, &db);
                        }
                    }
                    Op::Transpose(a, axes) => {
                        // Invert the permutation and permute the gradient back.
                        let mut inv = vec![0usize; axes.len()];
                        for (d, &ax) in axes.iter().enumerate() {
                            inv[ax] = d;
                        }
                        let out_shape = nodes[i].shape.clone();
                        let in_shape = nodes[a].shape.clone();
                        let contrib = permute_raw(&g, &out_shape, &inv, &in_shape);
                        accumulate(&nodes, &mut scratch, a, &contrib);
                    }
                    Op::Reshape(a) => {
                        accumulate(&nodes, &mut scratch, a, &g);
                    }
                    Op::Concat(ids, axis) => {
                        let out_shape = nodes[i].shape.clone();
                        let outer: usize = out_shape[..axis].iter().product();
                        let inner: usize = out_shape[axis + 1..].iter().product();
                        let out_row = out_shape[axis] * inner;
                        let mut col_off = 0usize;
                        for part in ids {
                            let len_axis = nodes[part].shape[axis];
                            let chunk = len_axis * inner;
                            if nodes[part].needs_grad {
                                let mut contrib = vec![S::zero(); nodes[part].data.len()];
                                for o in 0..outer {
                                    let src = o * out_row + col_off;
                                    contrib[o * chunk..(o + 1) * chunk]
                                        .copy_from_slice(&g[src..src + chunk]);
                                }
                                accumulate(&nodes, &mut scratch, part, &contrib);
                            }
                            col_off += chunk;
                        }
                    }
                    Op::Slice {
                        input,
                        axis,
                        start,
                        len,
                    } => {
                        let in_shape = nodes[input].shape.clone();
                        let outer: usize = in_shape[..axis].iter().product();
                        let inner: usize = in_shape[axis + 1..].iter().product();
                        let src_row = in_shape[axis] * inner;
                        let mut contrib = vec![S::zero(); nodes[input].data.len()];
                        for o in 0..outer {
                            let dst = o * src_row + start * inner;
                            let src = o * len * inner;
                            for j in 0..len * inner {
                                contrib[dst + j] = g[src + j];
                            }
                        }
                        accumulate(&nodes, &mut scratch, input, &contrib);
                    }
                    Op::SumAll(a) => {
                        let contrib = vec![g[0]; nodes[a].data.len()];
                        accumulate(&nodes, &mut scratch, a, &contrib);
                    }
                    Op::MeanAll(a) => {
                        let n = nodes[a].data.len();
                        let gv = g[0] / S::from_f64(n as f64);
                        let contrib = vec![gv; n];
                        accumulate(&nodes, &mut scratch, a, &contrib);
                    }
                    Op::Exp(a) => {
                        let clamp = S::from_f64(EXP_CLAMP);
                        let contrib: Vec<S> = g
                            .iter()
                            .zip(nodes[i].data.iter().zip(&nodes[a].data))
                            .map(|(&gj, (&yj, &xj))| if xj > clamp { S::zero() } else { gj * yj })
                            .collect();
                        accumulate(&nodes, &mut scratch, a, &contrib);
                    }
                    Op::Tanh(a) => {
                        let contrib: Vec<S> = g
                            .iter()
                            .zip(&nodes[i].data)
                            .map(|(&gj, &yj)| gj * (S::one() - yj * yj))
                            .collect();
                        accumulate(&nodes, &mut scratch, a, &contrib);
                    }
                    Op::Sigmoid(a) => {
                        let contrib: Vec<S> = g
                            .iter()
                            .zip(&nodes[i].data)
                            .map(|(&gj, &yj)| gj * yj * (S::one() - yj))
                            .collect();
                        accumulate(&nodes, &mut scratch, a, &contrib);
                    }
                    Op::SoftmaxMasked { input, mask: _ } => {
                        let cols = *nodes[i].shape.last().unwrap();
                        let y = &nodes[i].data;
                        let mut contrib = vec![S::zero(); y.len()];
                        for r in 0..y.len() / cols {
                            let base = r * cols;
                            let mut dot = S::zero();
                            for c in 0..cols {
                                dot = dot + g[base + c] * y[base + c];
                            }
                            for c in 0..cols {
                                contrib[base + c] = y[base + c] * (g[base + c] - dot);
                            }
                        }
                        accumulate(&nodes, &mut scratch, input, &contrib);
                    }
                    Op::LayerNorm { input, gamma, beta } => {
                        let cols = *nodes[i].shape.last().unwrap();
                        let rows = nodes[i].data.len() / cols;
                        let eps = S::from_f64(LAYER_NORM_EPS);
                        let inv_n = S::one() / S::from_f64(cols as f64);
                        let mut gx = vec![S::zero(); nodes[input].data.len()];
                        let mut gg = vec![S::zero(); cols];
                        let mut gb = vec![S::zero(); cols];
                        for r in 0..rows {
                            let base = r * cols;
                            let row_x = &nodes[input].data[base..base + cols];
                            let (mean, inv_std) = row_moments(row_x, eps);
                            let mut mean_h = S::zero();
                            let mut mean_hx = S::zero();
                            let mut xhat = vec![S::zero(); cols];
                            let mut h = vec![S::zero(); cols];
                            for c in 0..cols {
                                xhat[c] = (row_x[c] - mean) * inv_std;
                                h[c] = nodes[gamma].data[c] * g[base + c];
                                mean_h = mean_h + h[c];
                                mean_hx = mean_hx + h[c] * xhat[c];
                            }
                            mean_h = mean_h * inv_n;
                            mean_hx = mean_hx * inv_n;
                            for c in 0..cols {
                                gx[base + c] = inv_std * (h[c] - mean_h - xhat[c] * mean_hx);
                                gg[c] = gg[c] + g[base + c] * xhat[c];
                                gb[c] = gb[c] + g[base + c];
                            }
                        }
                        accumulate(&nodes, &mut scratch, input, &gx);
                        accumulate(&nodes, &mut scratch, gamma, &gg);
                        accumulate(&nodes, &mut scratch, beta, &gb);
                    }
                    Op::SquaredErr(a, b) => {
                        let two = S::from_f64(2.0);
                        if nodes[a].needs_grad || nodes[b].needs_grad {
                            let diff: Vec<S> = nodes[a]
                                .data
                                .iter()
                                .zip(&nodes[b].data)
                                .zip(&g)
                                .map(|((&x, &y), &gj)| two * (x - y) * gj)
                                .collect();
                            if nodes[a].needs_grad {
                                accumulate(&nodes, &mut scratch, a, &diff);
                            }
                            if nodes[b].needs_grad {
                                let neg: Vec<S> = diff.iter().map(|&d| -d).collect();
                                accumulate(&nodes, &mut scratch, b, &neg);
                            }
                        }
                    }
                    Op::AbsErr(a, b) => {
                        if nodes[a].needs_grad || nodes[b].needs_grad {
                            let signs: Vec<S> = nodes[a]
                                .data
                                .iter()
                                .zip(&nodes[b].data)
                                .zip(&g)
                                .map(|((&x, &y), &gj)| {
                                    let d = x - y;
                                    if d > S::zero() {
                                        gj
                                    } else if d < S::zero() {
                                        -gj
                                    } else {
                                        S::zero()
                                    }
                                })
                                .collect();
                            if nodes[a].needs_grad {
                                accumulate(&nodes, &mut scratch, a, &signs);
                            }
                            if nodes[b].needs_grad {
                                let neg: Vec<S> = signs.iter().map(|&d| -d).collect();
                                accumulate(&nodes, &mut scratch, b, &neg);
                            }
                        }
                    }
                    Op::External { inputs, ctx } => {
                        let grads = {
                            let ext = self.graph.0.externals.borrow();
                            ext[ctx].backward(&g)
                        };
                        assert_eq!(
                            grads.len(),
                            inputs.len(),
                            "external op returned {} gradients for {} inputs",
                            grads.len(),
                            inputs.len()
                        );
                        for (inp, gr) in inputs.iter().zip(grads) {
                            assert_eq!(nodes[*inp].data.len(), gr.len());
                            accumulate(&nodes, &mut scratch, *inp, &gr);
                        }
                    }
                }
            }
            scratch
        };

        // Fold the pass result into persistent gradient buffers.
        let mut nodes = self.graph.0.nodes.borrow_mut();
        for (i, slot) in scratch.iter_mut().enumerate() {
            if let Some(sg) = slot.take() {
                if !nodes[i].needs_grad {
                    continue;
                }
                let grad = nodes[i]
                    .grad
                    .get_or_insert_with(|| vec![S::zero(); sg.len()]);
                for (gv, c) in grad.iter_mut().zip(sg) {
                    *gv = *gv + c;
                }
            }
        }
        Ok(())
    }
}

fn accumulate<S: Scalar>(
    nodes: &[Node<S>],
    scratch: &mut [Option<Vec<S>>],
    id: usize,
    contrib: &[S],
) {
    if !nodes[id].needs_grad {
        return;
    }
    let slot = scratch[id].get_or_insert_with(|| vec![S::zero(); nodes[id].data.len()]);
    debug_assert_eq!(slot.len(), contrib.len());
    for (gv, &c) in slot.iter_mut().zip(contrib) {
        *gv = *gv + c;
    }
}

/// Accumulate into the rhs of a broadcasting add/sub, reducing the upstream
/// gradient over broadcast positions.
fn accumulate_bcast<S: Scalar>(
    nodes: &[Node<S>],
    scratch: &mut [Option<Vec<S>>],
    id: usize,
    g: &[S],
    negate: bool,
) {
    if !nodes[id].needs_grad {
        return;
    }
    let blen = nodes[id].data.len();
    let mut contrib = vec![S::zero(); blen];
    for (j, &gj) in g.iter().enumerate() {
        let v = if negate { -gj } else { gj };
        contrib[j % blen] = contrib[j % blen] + v;
    }
    accumulate(nodes, scratch, id, &contrib);
}

#[inline]
fn sigmoid_scalar<S: Scalar>(x: S) -> S {
    // Split on sign so exp never overflows.
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

fn row_moments<S: Scalar>(row: &[S], eps: S) -> (S, S) {
    let n = S::from_f64(row.len() as f64);
    let mean = row.iter().copied().sum::<S>() / n;
    let var = row
        .iter()
        .map(|&x| (x - mean) * (x - mean))
        .sum::<S>()
        / n;
    (mean, S::one() / (var + eps).sqrt())
}

fn softmax_row<S: Scalar>(xs: &[S], mask: &[S], out: &mut [S]) {
    let mut m = S::neg_infinity();
    for (x, mk) in xs.iter().zip(mask) {
        let v = *x + *mk;
        if v > m {
            m = v;
        }
    }
    if m == S::neg_infinity() {
        for o in out.iter_mut() {
            *o = S::zero();
        }
        return;
    }
    let mut sum = S::zero();
    for (o, (x, mk)) in out.iter_mut().zip(xs.iter().zip(mask)) {
        let v = *x + *mk;
        *o = if v == S::neg_infinity() {
            S::zero()
        } else {
            (v - m).exp()
        };
        sum = sum + *o;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

/// Row-major `[m, k] x [k, n]` product with a fixed ikj loop order so
/// accumulation order (and hence bit patterns) is reproducible.
pub(crate) fn matmul_raw<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == S::zero() {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + aik * brow[j];
            }
        }
    }
    c
}

fn transpose2d<S: Scalar>(a: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

fn permute_raw<S: Scalar>(
    data: &[S],
    in_shape: &[usize],
    axes: &[usize],
    out_shape: &[usize],
) -> Vec<S> {
    let in_strides = row_major_strides(in_shape);
    let rank = out_shape.len();
    let mut out = vec![S::zero(); data.len()];
    let mut coord = vec![0usize; rank];
    for (o, slot) in out.iter_mut().enumerate() {
        let mut rem = o;
        for d in 0..rank {
            let inner: usize = out_shape[d + 1..].iter().product();
            coord[d] = rem / inner;
            rem %= inner;
        }
        let mut src = 0usize;
        for d in 0..rank {
            src += coord[d] * in_strides[axes[d]];
        }
        *slot = data[src];
    }
    out
}
