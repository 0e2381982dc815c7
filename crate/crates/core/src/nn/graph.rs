//! Reverse-mode differentiation over a recorded tape of tensor ops.
//!
//! Every op appends a node holding its output value; [`Graph::gradients`]
//! walks the tape backwards once. Nodes are only ever appended, so the
//! tape order is a valid topological order.

use crate::error::{Error, Result};
use crate::nn::ops;
use crate::nn::params::NetworkParams;
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Input,
    Param { index: usize, name: String },
    Conv { input: Var, weight: Var, bias: Option<Var> },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// Input, slope and, when the graph is frozen, the imposed pattern.
    LeakyRelu(Var, f64, Option<Vec<bool>>),
    Sigmoid(Var),
    AvgPool2(Var),
    Upsample2(Var),
    Concat(Vec<Var>),
    Reshape(Var),
    Transpose(Var),
    MatMul(Var, Var),
    SoftmaxRows(Var),
    Sum(Var),
    /// Scalar whose gradient with respect to `input` was computed during
    /// the forward pass (used for losses with hand-derived gradients).
    Linearized { input: Var, grad: Tensor<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Which leaky-ReLU inputs were positive, one mask per call in tape order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ActivationPattern(Vec<Vec<bool>>);

impl ActivationPattern {
    pub fn units(&self) -> usize {
        self.0.iter().map(Vec::len).sum()
    }
}

#[derive(Debug)]
struct Frozen {
    pattern: ActivationPattern,
    next: usize,
    mismatch: bool,
}

#[derive(Debug, Default)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    frozen: Option<Frozen>,
}

/// Gradients of one scalar with respect to every node on the tape.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`, or `None` if `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn same_shape<T: Scalar>(what: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            what,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn add_into<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.accumulate(&g).expect("gradient shapes match node shapes"),
        None => *slot = Some(g),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), frozen: None }
    }

    /// A graph whose leaky-ReLU units follow `pattern` instead of the sign
    /// of their inputs. Inside that linear region the function is smooth,
    /// which is what finite differences need near a kink.
    pub fn with_frozen_activations(pattern: ActivationPattern) -> Self {
        Graph {
            nodes: Vec::new(),
            frozen: Some(Frozen { pattern, next: 0, mismatch: false }),
        }
    }

    /// Pattern actually used by every leaky-ReLU node so far.
    pub fn activation_pattern(&self) -> ActivationPattern {
        ActivationPattern(
            self.nodes
                .iter()
                .filter_map(|n| match &n.op {
                    Op::LeakyRelu(_, _, Some(mask)) => Some(mask.clone()),
                    Op::LeakyRelu(a, _, None) => {
                        Some(self.value(*a).data().iter().map(|&v| v > T::zero()).collect())
                    }
                    _ => None,
                })
                .collect(),
        )
    }

    /// True when a frozen graph ran out of masks or saw a size change.
    pub fn pattern_mismatch(&self) -> bool {
        self.frozen.as_ref().is_some_and(|f| f.mismatch || f.next != f.pattern.0.len())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant leaf; gradients may still be queried for it.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input)
    }

    /// Binds a named parameter; [`Graph::backward`] routes its gradient
    /// into the same collection.
    pub fn param(&mut self, params: &NetworkParams<T>, name: &str) -> Result<Var> {
        let index = params
            .index_of(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))?;
        let value = params.entry(index).value.clone();
        Ok(self.push(
            value,
            Op::Param {
                index,
                name: name.to_string(),
            },
        ))
    }

    pub fn conv(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let out = ops::conv2d(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
        )?;
        Ok(self.push(out, Op::Conv { input, weight, bias }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let f = T::of(factor);
        let out = self.value(a).map(|v| v * f);
        self.push(out, Op::Scale(a, factor))
    }

    pub fn leaky_relu(&mut self, a: Var) -> Var {
        let slope = ops::LEAKY_SLOPE;
        let len = self.value(a).len();
        let mask = self.frozen.as_mut().and_then(|f| {
            let m = f.pattern.0.get(f.next).filter(|m| m.len() == len).cloned();
            f.next += 1;
            f.mismatch |= m.is_none();
            m
        });
        let out = match &mask {
            Some(m) => {
                let s = T::of(slope);
                let data = self.value(a).data().iter().zip(m).map(|(&v, &on)| if on { v } else { v * s });
                Tensor::from_vec(self.shape(a), data.collect()).expect("length matches shape")
            }
            None => ops::leaky_relu(self.value(a), slope),
        };
        self.push(out, Op::LeakyRelu(a, slope, mask))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = ops::sigmoid(self.value(a));
        self.push(out, Op::Sigmoid(a))
    }

    /// 2×2 average pooling; spatial dims must be even.
    pub fn downsample2x(&mut self, a: Var) -> Result<Var> {
        let out = ops::avg_pool2(self.value(a))?;
        Ok(self.push(out, Op::AvgPool2(a)))
    }

    /// Nearest-neighbour ×2 upsampling.
    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let out = ops::upsample2(self.value(a))?;
        Ok(self.push(out, Op::Upsample2(a)))
    }

    /// Channel-axis concatenation of `[C_i, H, W]` nodes.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = ops::concat_channels(&values)?;
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = ops::transpose(self.value(a))?;
        Ok(self.push(out, Op::Transpose(a)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = ops::softmax_rows(self.value(a))?;
        Ok(self.push(out, Op::SoftmaxRows(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    /// Records a scalar `value` whose derivative with respect to `input`
    /// is `grad`.
    pub fn linearized(&mut self, input: Var, value: T, grad: Tensor<T>) -> Result<Var> {
        same_shape("linearized grad", self.value(input), &grad)?;
        Ok(self.push(Tensor::scalar(value), Op::Linearized { input, grad }))
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn gradients(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "loss",
                format!("backward needs a scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input | Op::Param { .. } => {}
                Op::Conv { input, weight, bias } => {
                    let cg = ops::conv2d_backward(self.value(*input), self.value(*weight), &g)?;
                    add_into(&mut grads[input.0], cg.input);
                    add_into(&mut grads[weight.0], cg.weight);
                    if let Some(b) = bias {
                        add_into(&mut grads[b.0], cg.bias);
                    }
                }
                Op::Add(a, b) => {
                    add_into(&mut grads[a.0], g.clone());
                    add_into(&mut grads[b.0], g.clone());
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y)?;
                    let gb = g.zip_map(self.value(*a), |x, y| x * y)?;
                    add_into(&mut grads[a.0], ga);
                    add_into(&mut grads[b.0], gb);
                }
                Op::Scale(a, f) => {
                    let f = T::of(*f);
                    add_into(&mut grads[a.0], g.map(|v| v * f));
                }
                Op::LeakyRelu(a, slope, None) => {
                    add_into(
                        &mut grads[a.0],
                        ops::leaky_relu_backward(self.value(*a), &g, *slope),
                    );
                }
                Op::LeakyRelu(a, slope, Some(mask)) => {
                    let s = T::of(*slope);
                    let data = g.data().iter().zip(mask).map(|(&v, &on)| if on { v } else { v * s });
                    add_into(&mut grads[a.0], Tensor::from_vec(g.shape(), data.collect())?);
                }
                Op::Sigmoid(a) => {
                    let ga = node
                        .value
                        .zip_map(&g, |y, gy| gy * y * (T::one() - y))?;
                    add_into(&mut grads[a.0], ga);
                }
                Op::AvgPool2(a) => add_into(&mut grads[a.0], ops::avg_pool2_backward(&g)?),
                Op::Upsample2(a) => add_into(&mut grads[a.0], ops::upsample2_backward(&g)?),
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let shape = self.shape(*p).to_vec();
                        let n = self.value(*p).len();
                        let slice = g.data()[offset..offset + n].to_vec();
                        offset += n;
                        add_into(&mut grads[p.0], Tensor::from_vec(&shape, slice)?);
                    }
                }
                Op::Reshape(a) => {
                    let shape = self.shape(*a).to_vec();
                    add_into(&mut grads[a.0], g.clone().reshape(&shape)?);
                }
                Op::Transpose(a) => add_into(&mut grads[a.0], ops::transpose(&g)?),
                Op::MatMul(a, b) => {
                    let bt = ops::transpose(self.value(*b))?;
                    let at = ops::transpose(self.value(*a))?;
                    add_into(&mut grads[a.0], ops::matmul(&g, &bt)?);
                    add_into(&mut grads[b.0], ops::matmul(&at, &g)?);
                }
                Op::SoftmaxRows(a) => {
                    add_into(&mut grads[a.0], ops::softmax_rows_backward(&node.value, &g)?);
                }
                Op::Sum(a) => {
                    let s = g.data()[0];
                    add_into(&mut grads[a.0], Tensor::full(self.shape(*a), s));
                }
                Op::Linearized { input, grad } => {
                    let s = g.data()[0];
                    add_into(&mut grads[input.0], grad.map(|v| v * s));
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Adds ∂loss/∂param into each bound parameter's gradient buffer.
    /// Parameters that do not influence the loss receive nothing.
    pub fn backward(&self, loss: Var, params: &mut NetworkParams<T>) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            let Op::Param { index, name } = &node.op else { continue };
            let Some(g) = &grads.grads[i] else { continue };
            if *index >= params.len() || params.entry(*index).name != *name {
                return Err(Error::Config(format!(
                    "parameter `{name}` was bound from a different collection"
                )));
            }
            params.entry_mut(*index).grad.accumulate(g)?;
        }
        Ok(())
    }
}
