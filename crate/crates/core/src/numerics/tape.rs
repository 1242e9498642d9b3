//! Wengert-style tape over whole arrays.
//!
//! Every recorded node keeps its forward value, which doubles as the saved
//! activation for the backward rules of its consumers. Nodes are appended in
//! evaluation order, so walking the list backwards visits each node after all
//! of its consumers.

use crate::error::{Error, Result};
use crate::numerics::ops::{self, SeparableKernel};
use crate::numerics::{DenseArray, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Affine { input: NodeId, weight: NodeId, bias: NodeId },
    Relu(NodeId),
    Concat { left: NodeId, right: NodeId },
    Reshape(NodeId),
    CropRows { input: NodeId, start: usize },
    Conv { input: NodeId, kernel: SeparableKernel<T> },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, T),
    AddScalar(NodeId),
    Square(NodeId),
    Mean(NodeId),
    Sum(NodeId),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: DenseArray<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &DenseArray<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: DenseArray<T>, op: Op<T>, op_name: &'static str) -> Result<NodeId> {
        let value = value.ensure_finite(op_name)?;
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Affine { input, weight, bias } => self.any_grad(&[*input, *weight, *bias]),
            Op::Concat { left, right } => self.any_grad(&[*left, *right]),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => self.any_grad(&[*a, *b]),
            Op::Relu(x)
            | Op::Reshape(x)
            | Op::CropRows { input: x, .. }
            | Op::Conv { input: x, .. }
            | Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Square(x)
            | Op::Mean(x)
            | Op::Sum(x) => self.nodes[x.0].requires_grad,
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Trainable leaf; receives a gradient from [`Tape::backward`].
    pub fn param(&mut self, value: DenseArray<T>) -> Result<NodeId> {
        let id = self.push(value, Op::Leaf, "param")?;
        self.nodes[id.0].requires_grad = true;
        Ok(id)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: DenseArray<T>) -> Result<NodeId> {
        self.push(value, Op::Leaf, "constant")
    }

    pub fn affine(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = ops::affine_forward(self.value(input), self.value(weight), self.value(bias))?;
        self.push(v, Op::Affine { input, weight, bias }, "affine")
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = ops::relu(self.value(x));
        self.push(v, Op::Relu(x), "relu")
    }

    pub fn concat_cols(&mut self, left: NodeId, right: NodeId) -> Result<NodeId> {
        let v = ops::concat_cols(self.value(left), self.value(right))?;
        self.push(v, Op::Concat { left, right }, "concat")
    }

    pub fn reshape(&mut self, x: NodeId, shape: impl Into<Vec<usize>>) -> Result<NodeId> {
        let v = self.value(x).reshape(shape)?;
        self.push(v, Op::Reshape(x), "reshape")
    }

    pub fn crop_rows(&mut self, x: NodeId, start: usize, count: usize) -> Result<NodeId> {
        let v = ops::crop_rows(self.value(x), start, count)?;
        self.push(v, Op::CropRows { input: x, start }, "crop_rows")
    }

    pub fn conv2d_separable(&mut self, x: NodeId, kernel: &SeparableKernel<T>) -> Result<NodeId> {
        let v = ops::conv2d_separable(self.value(x), kernel)?;
        self.push(
            v,
            Op::Conv {
                input: x,
                kernel: kernel.clone(),
            },
            "conv2d_separable",
        )
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::add(self.value(a), self.value(b))?;
        self.push(v, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::sub(self.value(a), self.value(b))?;
        self.push(v, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::mul(self.value(a), self.value(b))?;
        self.push(v, Op::Mul(a, b), "mul")
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::div(self.value(a), self.value(b))?;
        self.push(v, Op::Div(a, b), "div")
    }

    pub fn scale(&mut self, x: NodeId, factor: T) -> Result<NodeId> {
        let v = ops::scale(self.value(x), factor);
        self.push(v, Op::Scale(x, factor), "scale")
    }

    pub fn add_scalar(&mut self, x: NodeId, offset: T) -> Result<NodeId> {
        let v = ops::add_scalar(self.value(x), offset);
        self.push(v, Op::AddScalar(x), "add_scalar")
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        let v = ops::square(self.value(x));
        self.push(v, Op::Square(x), "square")
    }

    /// Mean over all elements; yields a one-element node.
    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let v = DenseArray::scalar(self.value(x).mean());
        self.push(v, Op::Mean(x), "mean")
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let v = DenseArray::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x), "sum")
    }

    /// `a * x + b * y` for two scalar (or equally shaped) nodes.
    pub fn lerp_pair(&mut self, x: NodeId, a: T, y: NodeId, b: T) -> Result<NodeId> {
        let sx = self.scale(x, a)?;
        let sy = self.scale(y, b)?;
        self.add(sx, sy)
    }

    /// Reverse sweep from a one-element `loss` node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        self.backward_with_seed(loss, T::one())
    }

    /// Reverse sweep seeded with `d(output)/d(loss) = seed`.
    pub fn backward_with_seed(&self, loss: NodeId, seed: T) -> Result<Gradients<T>> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss node, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<DenseArray<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(DenseArray::filled(loss_value.shape().to_vec(), seed));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            let mut send = |id: NodeId, contribution: DenseArray<T>| {
                if !self.nodes[id.0].requires_grad {
                    return;
                }
                match &mut grads[id.0] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contribution.data()) {
                            *a = *a + *c;
                        }
                    }
                    slot @ None => *slot = Some(contribution),
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Affine { input, weight, bias } => {
                    let need_input = self.nodes[input.0].requires_grad;
                    let parts =
                        ops::affine_backward(self.value(*input), self.value(*weight), &g, need_input);
                    if let Some(gx) = parts.input {
                        send(*input, gx);
                    }
                    send(*weight, parts.weight);
                    send(*bias, parts.bias.reshape(self.value(*bias).shape().to_vec())?);
                }
                Op::Relu(x) => send(*x, ops::relu_backward(self.value(*x), &g)),
                Op::Concat { left, right } => {
                    let (gl, gr) = ops::concat_cols_backward(self.value(*left).cols(), &g);
                    send(*left, gl);
                    send(*right, gr);
                }
                Op::Reshape(x) => send(*x, g.reshape(self.value(*x).shape().to_vec())?),
                Op::CropRows { input, start } => {
                    send(*input, ops::crop_rows_backward(self.value(*input).shape(), *start, &g))
                }
                Op::Conv { input, kernel } => send(*input, ops::conv2d_separable_backward(&g, kernel)?),
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    send(*b, ops::scale(&g, -T::one()));
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    send(*a, ops::mul(&g, self.value(*b))?);
                    send(*b, ops::mul(&g, self.value(*a))?);
                }
                Op::Div(a, b) => {
                    let va = self.value(*a);
                    let vb = self.value(*b);
                    send(*a, ops::div(&g, vb)?);
                    let gb_data = g
                        .data()
                        .iter()
                        .zip(va.data())
                        .zip(vb.data())
                        .map(|((&gi, &ai), &bi)| -gi * ai / (bi * bi))
                        .collect();
                    send(*b, DenseArray::new(vb.shape().to_vec(), gb_data)?);
                }
                Op::Scale(x, factor) => send(*x, ops::scale(&g, *factor)),
                Op::AddScalar(x) => send(*x, g),
                Op::Square(x) => {
                    let vx = self.value(*x);
                    send(*x, ops::mul(&g, vx)?.map(|v| v + v));
                }
                Op::Mean(x) => {
                    let n = self.value(*x).len();
                    let each = g.data()[0] / T::lit(n as f64);
                    send(*x, DenseArray::filled(self.value(*x).shape().to_vec(), each));
                }
                Op::Sum(x) => {
                    send(*x, DenseArray::filled(self.value(*x).shape().to_vec(), g.data()[0]));
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of a loss with respect to the tape's parameter leaves.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<DenseArray<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&DenseArray<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<DenseArray<T>> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}
