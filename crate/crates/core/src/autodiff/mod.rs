//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive application in execution order. Each
//! node owns its forward value plus whatever it needs for its adjoint;
//! [`Graph::backward`] walks the tape exactly once in reverse. Graphs are cheap
//! and meant to be rebuilt for every mini-batch.

mod loss_ops;
mod nn;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub use nn::{BatchMoments, BatchNormStats, NormMode};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Sum { x: Var },
    Mean { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: T },
    WeightedSum { terms: Vec<(Var, T)> },
    Pick { x: Var, index: usize },
    Reshape { x: Var },
    Conv2d { x: Var, kernel: Var, stride: usize, pad: usize },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    GlobalAvgPool { x: Var },
    Dense { x: Var, weight: Var, bias: Var },
    LeakyRelu { x: Var, alpha: T },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, batch_stats: bool },
    ChannelScale { x: Var, scale: Vec<T> },
    Softmax { x: Var },
    CrossEntropy { probs: Var, labels: Vec<usize>, mask: Vec<bool>, clamped: Vec<bool> },
    Consistency { student: Var, target: Vec<T> },
    PairContrast { latent: Var, pairs: Vec<(usize, usize)>, similar: Vec<bool>, margin: T, kind: PairKind },
    SphereProject { x: Var, radius: T, norms: Vec<T> },
    OrthoSphere { x: Var, blocks: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum PairKind {
    Euclidean,
    Angular,
}

#[derive(Debug)]
pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// Recorded computation with reverse-mode gradients.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    track: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), track: true }
    }

    /// A graph whose leaves never request gradients. Used for teacher and
    /// evaluation passes, whose outputs are treated as constants.
    pub fn no_grad() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), track: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient on `backward`.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        let track = self.track;
        self.push_leaf(value, track)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
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

    /// Gradient of the last `backward` root with respect to `v`; zeros when
    /// `v` is not on a path to the root.
    pub fn grad(&self, v: Var) -> Tensor<T> {
        let shape = self.nodes[v.0].value.shape();
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient matches value shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    /// Accumulates reverse-mode adjoints of the scalar `root` into every node
    /// that requires a gradient.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let shape = self.nodes[root.0].value.shape();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarRoot { shape: shape.to_vec() });
        }
        if self.grads.len() < self.nodes.len() {
            self.grads.resize_with(self.nodes.len(), || None);
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        accumulate(&mut self.grads, &self.nodes, root, &[T::one()]);
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else { continue };
            self.backward_node(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn backward_node(&mut self, idx: usize, g: &[T]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Sum { x } => {
                let n = nodes[x.0].value.numel();
                accumulate_with(grads, nodes, *x, |dx| dx.iter_mut().for_each(|d| *d += g[0]), n);
            }
            Op::Mean { x } => {
                let n = nodes[x.0].value.numel();
                let s = g[0] / T::of(n as f64);
                accumulate_with(grads, nodes, *x, |dx| dx.iter_mut().for_each(|d| *d += s), n);
            }
            Op::Add { a, b } => {
                accumulate(grads, nodes, *a, g);
                accumulate(grads, nodes, *b, g);
            }
            Op::Mul { a, b } => {
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                accumulate_with(
                    grads,
                    nodes,
                    *a,
                    |dx| dx.iter_mut().zip(g.iter().zip(bv)).for_each(|(d, (&g, &b))| *d += g * b),
                    g.len(),
                );
                accumulate_with(
                    grads,
                    nodes,
                    *b,
                    |dx| dx.iter_mut().zip(g.iter().zip(av)).for_each(|(d, (&g, &a))| *d += g * a),
                    g.len(),
                );
            }
            Op::Scale { x, factor } => {
                let f = *factor;
                accumulate_with(grads, nodes, *x, |dx| dx.iter_mut().zip(g).for_each(|(d, &g)| *d += g * f), g.len());
            }
            Op::WeightedSum { terms } => {
                for &(v, w) in terms {
                    accumulate(grads, nodes, v, &[g[0] * w]);
                }
            }
            Op::Pick { x, index } => {
                let n = nodes[x.0].value.numel();
                let i = *index;
                accumulate_with(grads, nodes, *x, |dx| dx[i] += g[0], n);
            }
            Op::Reshape { x } => accumulate(grads, nodes, *x, g),
            Op::Conv2d { x, kernel, stride, pad } => {
                nn::conv2d_backward(grads, nodes, *x, *kernel, *stride, *pad, &node.value, g)
            }
            Op::MaxPool2d { x, argmax } => {
                let n = nodes[x.0].value.numel();
                accumulate_with(grads, nodes, *x, |dx| argmax.iter().zip(g).for_each(|(&i, &g)| dx[i] += g), n);
            }
            Op::GlobalAvgPool { x } => nn::gap_backward(grads, nodes, *x, g),
            Op::Dense { x, weight, bias } => nn::dense_backward(grads, nodes, *x, *weight, *bias, g),
            Op::LeakyRelu { x, alpha } => {
                let xv = nodes[x.0].value.data();
                let a = *alpha;
                accumulate_with(
                    grads,
                    nodes,
                    *x,
                    |dx| {
                        for ((d, &g), &x) in dx.iter_mut().zip(g).zip(xv) {
                            *d += if x > T::zero() { g } else { g * a };
                        }
                    },
                    g.len(),
                );
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                nn::batch_norm_backward(grads, nodes, *x, *gamma, *beta, xhat, inv_std, *batch_stats, g)
            }
            Op::ChannelScale { x, scale } => nn::channel_scale_backward(grads, nodes, *x, scale, g),
            Op::Softmax { x } => nn::softmax_backward(grads, nodes, *x, &node.value, g),
            Op::CrossEntropy { probs, labels, mask, clamped } => {
                loss_ops::cross_entropy_backward(grads, nodes, *probs, labels, mask, clamped, g[0])
            }
            Op::Consistency { student, target } => loss_ops::consistency_backward(grads, nodes, *student, target, g[0]),
            Op::PairContrast { latent, pairs, similar, margin, kind } => {
                loss_ops::pair_backward(grads, nodes, *latent, pairs, similar, *margin, *kind, g[0])
            }
            Op::SphereProject { x, radius, norms } => {
                loss_ops::sphere_backward(grads, nodes, *x, *radius, norms, &node.value, g)
            }
            Op::OrthoSphere { x, blocks } => loss_ops::orthosphere_backward(grads, nodes, *x, *blocks, g[0]),
        }
    }

    // ---- elementary ops -------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s: T = v.data().iter().copied().sum::<T>() / T::of(v.numel() as f64);
        self.push(Tensor::scalar(s), Op::Mean { x }, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let data = self.value(x).data().iter().map(|&v| v * factor).collect();
        let value = Tensor::new(self.shape(x), data).expect("same shape");
        self.push(value, Op::Scale { x, factor }, &[x])
    }

    /// `sum_i w_i * s_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut total = T::zero();
        for &(v, w) in terms {
            let s = self
                .value(v)
                .item()
                .ok_or_else(|| Error::shape("weighted_sum", format!("term {} is not a scalar", v.0)))?;
            total += w * s;
        }
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum { terms: terms.to_vec() }, &inputs))
    }

    /// Scalar view of one element (row-major flat index).
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let v = self.value(x);
        if index >= v.numel() {
            return Err(Error::invalid("pick", format!("index {index} out of {} elements", v.numel())));
        }
        let s = v.data()[index];
        Ok(self.push(Tensor::scalar(s), Op::Pick { x, index }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }
}

fn zip_map<T: Real>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// Adds `g` into the gradient buffer of `v` (allocating it on first touch).
pub(crate) fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var, g: &[T]) {
    accumulate_with(grads, nodes, v, |dx| dx.iter_mut().zip(g).for_each(|(d, &g)| *d += g), g.len());
}

pub(crate) fn accumulate_with<T: Real>(
    grads: &mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    v: Var,
    f: impl FnOnce(&mut [T]),
    len: usize,
) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
    f(buf);
}
