use std::fmt;

use super::kernels::{self, BatchNormSaved, BatchNormState, ConvGeometry, NormMode};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation defined outside this module (the losses).
pub trait Function: fmt::Debug {
    /// Gradients for each input, in the order the inputs were recorded.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &Tensor) -> Result<Vec<Option<Tensor>>>;

    /// Identifies which smooth piece of a piecewise function the forward
    /// pass landed in. Finite-difference checks use it to detect steps that
    /// cross a kink.
    fn branch_key(&self) -> u64 {
        0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        input: Var,
        factor: usize,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        saved: BatchNormSaved,
    },
    LeakyRelu {
        input: Var,
        slope: f32,
    },
    Concat {
        inputs: Vec<Var>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Softmax {
        input: Var,
    },
    Dot {
        input: Var,
        weights: Vec<f32>,
    },
    Custom {
        inputs: Vec<Var>,
        function: Box<dyn Function>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv { input, weight, bias, .. } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
            Op::MaxPool { input, .. }
            | Op::Upsample { input, .. }
            | Op::LeakyRelu { input, .. }
            | Op::Softmax { input }
            | Op::Dot { input, .. } => vec![*input],
            Op::BatchNorm { input, gamma, beta, .. } => vec![*input, *gamma, *beta],
            Op::Concat { inputs } | Op::Custom { inputs, .. } => inputs.clone(),
            Op::Add { a, b } => vec![*a, *b],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations in execution order and replays them backwards.
///
/// A tape is single-use: build it, call [`Tape::backward`] on a scalar, read
/// the gradients, drop it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a leaf. It takes part in differentiation iff `requires_grad` is set on it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let requires_grad = value.requires_grad();
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value.with_requires_grad(true))
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, mut value: Tensor, op: Op, requires_grad: bool) -> Var {
        value.clear_grad();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, requires_grad)
    }

    pub fn conv3d(&mut self, input: Var, weight: Var, bias: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let y = kernels::conv3d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            &geom,
        )?;
        Ok(self.push_op(y, Op::Conv { input, weight, bias, geom }))
    }

    pub fn maxpool3d(&mut self, input: Var) -> Result<Var> {
        let (y, argmax) = kernels::maxpool3d_forward(self.value(input))?;
        Ok(self.push_op(y, Op::MaxPool { input, argmax }))
    }

    pub fn upsample3d(&mut self, input: Var, factor: usize) -> Result<Var> {
        if factor == 1 {
            return Ok(input);
        }
        let y = kernels::upsample3d_forward(self.value(input), factor)?;
        Ok(self.push_op(y, Op::Upsample { input, factor }))
    }

    pub fn batchnorm3d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState,
        mode: NormMode,
    ) -> Result<Var> {
        let (y, saved) = kernels::batchnorm3d_forward(
            self.value(input),
            self.value(gamma),
            self.value(beta),
            state,
            mode,
        )?;
        Ok(self.push_op(y, Op::BatchNorm { input, gamma, beta, saved }))
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f32) -> Var {
        let y = kernels::leaky_relu_forward(self.value(input), slope);
        self.push_op(y, Op::LeakyRelu { input, slope })
    }

    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.len() == 1 {
            return Ok(inputs[0]);
        }
        let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
        let y = kernels::concat_channels_forward(&values)?;
        Ok(self.push_op(y, Op::Concat { inputs: inputs.to_vec() }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = kernels::add_forward(self.value(a), self.value(b))?;
        Ok(self.push_op(y, Op::Add { a, b }))
    }

    pub fn softmax_channels(&mut self, input: Var) -> Result<Var> {
        let y = kernels::softmax_channels_forward(self.value(input))?;
        Ok(self.push_op(y, Op::Softmax { input }))
    }

    /// Scalar `sum_i w_i x_i`, accumulated in `f64`.
    pub fn dot_const(&mut self, input: Var, weights: Vec<f32>) -> Result<Var> {
        let x = self.value(input);
        if weights.len() != x.len() {
            return Err(Error::dim(format!(
                "projection of length {} for {} values",
                weights.len(),
                x.len()
            )));
        }
        let s: f64 = x
            .data()
            .iter()
            .zip(&weights)
            .map(|(&a, &b)| f64::from(a) * f64::from(b))
            .sum();
        Ok(self.push_op(Tensor::scalar(s as f32), Op::Dot { input, weights }))
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let n = self.value(input).len();
        self.dot_const(input, vec![1.0; n])
    }

    /// Record the output of an externally defined differentiable function.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, function: Box<dyn Function>) -> Var {
        self.push_op(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                function,
            },
        )
    }

    /// Backpropagate from a single-element `loss`, visiting records in exact
    /// reverse order of recording.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::State(format!(
                "backward needs a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let contributions = self.node_backward(node, &g)?;
            grads[i] = Some(g);
            for (v, gi) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                accumulate(&mut grads[v.0], gi)?;
            }
        }
        Ok(Gradients { grads })
    }

    fn node_backward(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv { input, weight, bias, geom } => {
                let (gx, gw, gb) = kernels::conv3d_backward(
                    self.value(*input),
                    self.value(*weight),
                    bias.is_some(),
                    self.nodes[input.0].requires_grad,
                    geom,
                    g,
                )?;
                out.extend(gx.map(|gx| (*input, gx)));
                out.push((*weight, gw));
                if let (Some(b), Some(gb)) = (bias, gb) {
                    out.push((*b, gb));
                }
            }
            Op::MaxPool { input, argmax } => {
                out.push((*input, kernels::maxpool3d_backward(self.value(*input).shape(), argmax, g)?));
            }
            Op::Upsample { input, factor } => {
                out.push((
                    *input,
                    kernels::upsample3d_backward(self.value(*input).shape(), *factor, g)?,
                ));
            }
            Op::BatchNorm { input, gamma, beta, saved } => {
                let (gx, gg, gb) = kernels::batchnorm3d_backward(g, self.value(*gamma), saved)?;
                out.push((*input, gx));
                out.push((*gamma, gg));
                out.push((*beta, gb));
            }
            Op::LeakyRelu { input, slope } => {
                out.push((*input, kernels::leaky_relu_backward(self.value(*input), *slope, g)));
            }
            Op::Concat { inputs } => {
                let channels: Vec<usize> = inputs.iter().map(|v| self.value(*v).shape()[1]).collect();
                let parts = kernels::concat_channels_backward(g, &channels)?;
                out.extend(inputs.iter().copied().zip(parts));
            }
            Op::Add { a, b } => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Softmax { input } => {
                out.push((*input, kernels::softmax_channels_backward(&node.value, g)?));
            }
            Op::Dot { input, weights } => {
                let s = g.data()[0];
                let x = self.value(*input);
                let data = weights.iter().map(|&w| w * s).collect();
                out.push((*input, Tensor::new(x.shape().to_vec(), data)?));
            }
            Op::Custom { inputs, function } => {
                let values: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let gs = function.backward(&values, &node.value, g)?;
                if gs.len() != inputs.len() {
                    return Err(Error::State("custom function returned the wrong number of gradients".into()));
                }
                for (v, gi) in inputs.iter().zip(gs) {
                    if let Some(gi) = gi {
                        out.push((*v, gi));
                    }
                }
            }
        }
        Ok(out)
    }

    /// Length of the shortest chain of recorded operations from each value to
    /// `output` (`None` when the value does not feed it).
    pub fn path_lengths(&self, output: Var) -> Vec<Option<usize>> {
        let mut dist: Vec<Option<usize>> = vec![None; self.nodes.len()];
        dist[output.0] = Some(0);
        for i in (0..=output.0).rev() {
            let Some(d) = dist[i] else { continue };
            for v in self.nodes[i].op.inputs() {
                let e = &mut dist[v.0];
                *e = Some(e.map_or(d + 1, |old| old.min(d + 1)));
            }
        }
        dist
    }

    /// Hash of every branch decision taken by piecewise operations.
    pub fn branch_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |x: u64| {
            h ^= x;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for node in &self.nodes {
            match &node.op {
                Op::LeakyRelu { input, .. } => {
                    for &x in self.value(*input).data() {
                        mix(u64::from(x >= 0.0));
                    }
                }
                Op::MaxPool { argmax, .. } => argmax.iter().for_each(|&a| mix(a as u64)),
                Op::Custom { function, .. } => mix(function.branch_key()),
                _ => {}
            }
        }
        h
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) -> Result<()> {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            if acc.shape() != g.shape() {
                return Err(Error::State("gradient shape mismatch during accumulation".into()));
            }
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
    Ok(())
}
