//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] is rebuilt on every forward pass. Each recorded node keeps its
//! output value plus whatever the backward rule needs (pool winners, fused
//! loss residuals). Trainable weights are registered by reference, so a tape
//! borrows the model for its whole lifetime and the optimizer can only run
//! once the tape has been dropped.

mod check;

pub use check::{grad_check, relative_error};

use crate::error::{Error, Result};
use crate::ops::{self, ArgIndices, Kernel3, Padding};
use crate::tensor::{ConvWeights, Float, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Handle to a trainable parameter registered on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        param: ParamId,
        stride: usize,
        padding: Padding,
    },
    TransposedConv2d {
        input: Var,
        param: ParamId,
    },
    /// Frozen depthwise filter; owns no parameter slot.
    Depthwise {
        input: Var,
        kernel: Kernel3<T>,
    },
    MaxPool {
        input: Var,
        arg: ArgIndices,
    },
    Relu {
        input: Var,
    },
    Sigmoid {
        input: Var,
    },
    Softmax {
        input: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Slice {
        input: Var,
        start: usize,
    },
    Sum {
        input: Var,
    },
    Dot {
        input: Var,
        weights: Tensor<T>,
    },
    /// `residual = d loss / d logits`, saved at forward time.
    FusedLoss {
        logits: Var,
        residual: Tensor<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Ordered record of forward operations. Inputs of every node precede it.
pub struct Tape<'p, T: Float = f32> {
    nodes: Vec<Node<T>>,
    params: Vec<&'p ConvWeights<T>>,
}

impl<T: Float> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T: Float = f32> {
    nodes: Vec<Option<Tensor<T>>>,
    params: Vec<ConvWeights<T>>,
}

impl<T: Float> Gradients<T> {
    /// Gradient of the loss with respect to a node, `None` when the node does
    /// not influence the loss.
    pub fn wrt(&self, var: Var) -> Option<&Tensor<T>> {
        self.nodes.get(var.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> &ConvWeights<T> {
        &self.params[id.0]
    }

    /// One gradient slot per registered parameter, in registration order.
    pub fn params(&self) -> &[ConvWeights<T>] {
        &self.params
    }

    pub fn into_params(self) -> Vec<ConvWeights<T>> {
        self.params
    }
}

impl<'p, T: Float> Tape<'p, T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input tensor.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Registers trainable weights; gradients are reported per [`ParamId`].
    pub fn param(&mut self, weights: &'p ConvWeights<T>) -> ParamId {
        self.params.push(weights);
        ParamId(self.params.len() - 1)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        param: ParamId,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let y = ops::conv2d(self.value(input), self.params[param.0], stride, padding)?;
        Ok(self.push(
            y,
            Op::Conv2d {
                input,
                param,
                stride,
                padding,
            },
        ))
    }

    pub fn transposed_conv2d(&mut self, input: Var, param: ParamId) -> Result<Var> {
        let y = ops::transposed_conv2d(self.value(input), self.params[param.0])?;
        Ok(self.push(y, Op::TransposedConv2d { input, param }))
    }

    /// Depthwise 3x3 with a constant kernel. Nothing is registered as a
    /// parameter, so the kernel can never be updated.
    pub fn depthwise3x3(&mut self, input: Var, kernel: Kernel3<T>) -> Var {
        let y = ops::depthwise3x3(self.value(input), &kernel);
        self.push(y, Op::Depthwise { input, kernel })
    }

    pub fn maxpool2x2(&mut self, input: Var) -> Result<Var> {
        let (y, arg) = ops::maxpool2x2(self.value(input))?;
        Ok(self.push(y, Op::MaxPool { input, arg }))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let y = ops::relu(self.value(input));
        self.push(y, Op::Relu { input })
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let y = ops::sigmoid(self.value(input));
        self.push(y, Op::Sigmoid { input })
    }

    pub fn softmax_channels(&mut self, input: Var) -> Var {
        let y = ops::softmax_channels(self.value(input));
        self.push(y, Op::Softmax { input })
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Concat { a, b }))
    }

    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let y = ops::slice_channels(self.value(input), start, len)?;
        Ok(self.push(y, Op::Slice { input, start }))
    }

    /// Scalar sum of all elements.
    pub fn sum(&mut self, input: Var) -> Var {
        let s = T::from_f64_lossy(self.value(input).sum());
        self.push(Tensor::scalar(s), Op::Sum { input })
    }

    /// Scalar `<input, weights>` for a constant `weights`.
    pub fn dot(&mut self, input: Var, weights: Tensor<T>) -> Result<Var> {
        let s = T::from_f64_lossy(self.value(input).dot(&weights)?);
        Ok(self.push(Tensor::scalar(s), Op::Dot { input, weights }))
    }

    /// Softmax over channels followed by categorical cross-entropy against a
    /// one-hot `target`, averaged over pixels. Probabilities are clamped at
    /// `1e-7` inside the log; the backward rule is the fused `(p - y) / P`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: &Tensor<T>) -> Result<Var> {
        let x = self.value(logits);
        x.expect_shape(target.shape(), "softmax_cross_entropy")?;
        let probs = ops::softmax_channels(x);
        let s = x.shape();
        let pixels = (s.n * s.h * s.w) as f64;
        let loss = crate::train::cross_entropy_loss(&probs, target)?;
        let inv = T::from_f64_lossy(1.0 / pixels);
        let residual = probs.zip_map(target, |p, y| (p - y) * inv)?;
        Ok(self.push(
            Tensor::scalar(T::from_f64_lossy(loss)),
            Op::FusedLoss { logits, residual },
        ))
    }

    /// Sigmoid followed by binary cross-entropy against a 0/1 `target`,
    /// averaged over pixels. Evaluated in the numerically stable logit form
    /// `max(x,0) - x*y + ln(1 + e^-|x|)`; backward is `(sigmoid(x) - y) / P`.
    pub fn sigmoid_bce(&mut self, logits: Var, target: &Tensor<T>) -> Result<Var> {
        let x = self.value(logits);
        x.expect_shape(target.shape(), "sigmoid_bce")?;
        let pixels = x.numel() as f64;
        let loss = crate::train::binary_cross_entropy_with_logits(x, target)?;
        let inv = T::from_f64_lossy(1.0 / pixels);
        let residual = x.zip_map(target, |x, y| (ops::sigmoid_scalar(x) - y) * inv)?;
        Ok(self.push(
            Tensor::scalar(T::from_f64_lossy(loss)),
            Op::FusedLoss { logits, residual },
        ))
    }

    /// Propagates `d loss / d node` back through every recorded node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let loss_shape = self.value(loss).shape();
        if loss_shape.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss node, got shape {loss_shape}"
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut pgrads: Vec<ConvWeights<T>> = self.params.iter().map(|p| p.zeros_like()).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Conv2d {
                    input,
                    param,
                    stride,
                    padding,
                } => {
                    let (gx, gw) = ops::conv2d_backward(
                        self.value(*input),
                        self.params[param.0],
                        *stride,
                        *padding,
                        &g,
                    )?;
                    accumulate(&mut grads, *input, gx)?;
                    accumulate_param(&mut pgrads[param.0], &gw);
                }
                Op::TransposedConv2d { input, param } => {
                    let (gx, gw) = ops::transposed_conv2d_backward(
                        self.value(*input),
                        self.params[param.0],
                        &g,
                    )?;
                    accumulate(&mut grads, *input, gx)?;
                    accumulate_param(&mut pgrads[param.0], &gw);
                }
                Op::Depthwise { input, kernel } => {
                    accumulate(&mut grads, *input, ops::depthwise3x3_backward(&g, kernel))?;
                }
                Op::MaxPool { input, arg } => {
                    let gx = ops::maxpool2x2_backward(self.value(*input).shape(), arg, &g)?;
                    accumulate(&mut grads, *input, gx)?;
                }
                Op::Relu { input } => {
                    accumulate(
                        &mut grads,
                        *input,
                        ops::relu_backward(self.value(*input), &g)?,
                    )?;
                }
                Op::Sigmoid { input } => {
                    accumulate(&mut grads, *input, ops::sigmoid_backward(&node.value, &g)?)?;
                }
                Op::Softmax { input } => {
                    let gx = ops::softmax_channels_backward(&node.value, &g)?;
                    accumulate(&mut grads, *input, gx)?;
                }
                Op::Concat { a, b } => {
                    let ca = self.value(*a).shape().c;
                    let cb = self.value(*b).shape().c;
                    accumulate(&mut grads, *a, ops::slice_channels(&g, 0, ca)?)?;
                    accumulate(&mut grads, *b, ops::slice_channels(&g, ca, cb)?)?;
                }
                Op::Slice { input, start } => {
                    let full = self.value(*input).shape();
                    accumulate(&mut grads, *input, ops::unslice_channels(full, *start, &g))?;
                }
                Op::Sum { input } => {
                    let gx = Tensor::full(self.value(*input).shape(), g.data()[0]);
                    accumulate(&mut grads, *input, gx)?;
                }
                Op::Dot { input, weights } => {
                    let s = g.data()[0];
                    accumulate(&mut grads, *input, weights.map(|w| w * s))?;
                }
                Op::FusedLoss { logits, residual } => {
                    let s = g.data()[0];
                    accumulate(&mut grads, *logits, residual.map(|r| r * s))?;
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            nodes: grads,
            params: pgrads,
        })
    }
}

fn accumulate<T: Float>(grads: &mut [Option<Tensor<T>>], var: Var, g: Tensor<T>) -> Result<()> {
    match &mut grads[var.0] {
        slot @ None => *slot = Some(g),
        Some(acc) => {
            acc.expect_shape(g.shape(), "gradient accumulation")?;
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + *b;
            }
        }
    }
    Ok(())
}

fn accumulate_param<T: Float>(acc: &mut ConvWeights<T>, g: &ConvWeights<T>) {
    for (a, b) in acc.kernel.data_mut().iter_mut().zip(g.kernel.data()) {
        *a = *a + *b;
    }
    for (a, b) in acc.bias.iter_mut().zip(&g.bias) {
        *a = *a + *b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SharpKernel;
    use crate::testutil::{random_tensor, random_weights};

    #[test]
    fn relu_sum_gradient() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::from_vec([1, 1, 1, 2], vec![-1.0, 2.0]).unwrap());
        let r = tape.relu(x);
        let l = tape.sum(r);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn sharp_block_gradient_is_kernel_sum_inside() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(random_tensor([1, 2, 6, 6], 3));
        let y = tape.depthwise3x3(x, SharpKernel::weights());
        let l = tape.sum(y);
        let g = tape.backward(l).unwrap();
        let gx = g.wrt(x).unwrap();
        for c in 0..2 {
            for r in 1..5 {
                for col in 1..5 {
                    assert_eq!(gx.get(0, c, r, col), 0.0);
                }
            }
        }
        assert_eq!(tape.num_params(), 0);
        assert!(g.params().is_empty());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros([1, 1, 2, 2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn repeated_backward_is_identical() {
        let w = random_weights([3, 2, 3, 3], 1);
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(random_tensor([1, 2, 4, 4], 2));
        let p = tape.param(&w);
        let y = tape.conv2d(x, p, 1, Padding::Same).unwrap();
        let y = tape.relu(y);
        let l = tape.dot(y, random_tensor([1, 3, 4, 4], 3)).unwrap();
        let g1 = tape.backward(l).unwrap();
        let g2 = tape.backward(l).unwrap();
        assert_eq!(g1.wrt(x), g2.wrt(x));
        assert_eq!(g1.param(p), g2.param(p));
    }

    #[test]
    fn shared_input_gradients_accumulate() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full([1, 1, 2, 2], 1.0));
        let c = tape.concat_channels(x, x).unwrap();
        let l = tape.sum(c);
        let g = tape.backward(l).unwrap();
        assert!(g.wrt(x).unwrap().data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn every_registered_param_gets_a_slot() {
        let w1 = random_weights([2, 1, 3, 3], 1);
        let unused = random_weights([2, 1, 3, 3], 2);
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(random_tensor([1, 1, 4, 4], 3));
        let p = tape.param(&w1);
        let _ = tape.param(&unused);
        let y = tape.conv2d(x, p, 1, Padding::Same).unwrap();
        let l = tape.sum(y);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.params().len(), 2);
        assert!(g.params()[1].kernel.data().iter().all(|&v| v == 0.0));
    }
}
