use super::kernels::{self, Activation, BatchNormMode, Conv2dParams, ConvGradRequest};
use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Gradient rule of one recorded op.
///
/// `backward` receives the op's input values, its output value and the
/// upstream gradient, and returns one gradient per input. Entries for inputs
/// whose `needs` flag is false may be `None`.
pub trait GradFn<T: Float> {
    fn name(&self) -> &str;

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_output: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

struct Node<T: Float> {
    value: Tensor<T>,
    requires_grad: bool,
    inputs: Vec<Var>,
    grad_fn: Option<Box<dyn GradFn<T>>>,
    /// Accumulated gradient; only kept for leaves.
    grad: Option<Tensor<T>>,
}

/// Tape of executed ops in execution order.
///
/// Nodes are appended as ops run, so every op's inputs precede it and a
/// reverse sweep is a valid topological traversal.
pub struct Graph<T: Float = f32> {
    nodes: Vec<Node<T>>,
    /// Output nodes of piecewise-linear activations, in execution order.
    kinked: Vec<(Var, Activation)>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            kinked: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            inputs: Vec::new(),
            grad_fn: None,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Accumulated gradient of a leaf, `None` before any backward reached it.
    pub fn grad(&self, var: Var) -> Option<&Tensor<T>> {
        self.nodes[var.0].grad.as_ref()
    }

    /// Gradient of a leaf, zeros when the loss does not depend on it.
    pub fn grad_or_zeros(&self, var: Var) -> Tensor<T> {
        self.grad(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.value(var).shape()))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Records an op computed outside the built-in set. `value` must already
    /// be the op's output for `inputs`.
    pub fn record(&mut self, inputs: &[Var], value: Tensor<T>, grad_fn: Box<dyn GradFn<T>>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        #[cfg(debug_assertions)]
        if !value.is_finite() && inputs.iter().all(|v| self.nodes[v.0].value.is_finite()) {
            panic!(
                "{} produced non-finite values from finite inputs",
                grad_fn.name()
            );
        }
        self.nodes.push(Node {
            value,
            requires_grad,
            inputs: inputs.to_vec(),
            grad_fn: requires_grad.then_some(grad_fn),
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `loss`, adding d(loss)/d(leaf) into every
    /// trainable leaf's gradient. Repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let seed = &self.nodes[loss.0].value;
        if seed.numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                seed.shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut pending: Vec<Option<Tensor<T>>> = Vec::with_capacity(loss.0 + 1);
        pending.resize_with(loss.0 + 1, || None);
        pending[loss.0] = Some(Tensor::full(seed.shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(grad) = pending[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let Some(grad_fn) = node.grad_fn.as_ref() else {
                if node.requires_grad {
                    let slot = &mut self.nodes[idx].grad;
                    match slot {
                        Some(acc) => acc.add_assign(&grad),
                        None => *slot = Some(grad),
                    }
                }
                continue;
            };
            let inputs: Vec<&Tensor<T>> =
                node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let input_grads = grad_fn.backward(&inputs, &node.value, &grad, &needs)?;
            for ((input, g), need) in node.inputs.iter().zip(input_grads).zip(needs) {
                let (Some(g), true) = (g, need) else { continue };
                if g.shape() != self.nodes[input.0].value.shape() {
                    return Err(Error::shape(
                        "backward",
                        "gradient",
                        format!(
                            "{} returned gradient {:?} for input of shape {:?}",
                            grad_fn.name(),
                            g.shape(),
                            self.nodes[input.0].value.shape()
                        ),
                    ));
                }
                match &mut pending[input.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        params: Conv2dParams,
    ) -> Result<Var> {
        let out = kernels::conv2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            params,
        )?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.record(&inputs, out, Box::new(ConvBackward { params })))
    }

    /// Batch normalization. In train mode the running statistics are updated
    /// in place with `momentum`.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &mut Tensor<T>,
        running_var: &mut Tensor<T>,
        mode: BatchNormMode,
        momentum: f64,
        eps: f64,
    ) -> Result<Var> {
        let fwd = kernels::batchnorm2d_forward(
            self.value(input),
            self.value(gamma),
            self.value(beta),
            running_mean,
            running_var,
            mode,
            eps,
        )?;
        if mode == BatchNormMode::Train {
            let (n, _, h, w) = self.value(input).dims4("batchnorm2d")?;
            kernels::update_running_stats(running_mean, running_var, &fwd, n * h * w, momentum);
        }
        let grad_fn = BatchNormBackward {
            normalized: fwd.normalized,
            inv_std: fwd.inv_std,
            mode,
        };
        Ok(self.record(&[input, gamma, beta], fwd.output, Box::new(grad_fn)))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Var {
        let out = self.value(input).map(|v| kind.apply(v));
        let var = self.record(&[input], out, Box::new(ActivationBackward { kind }));
        if kind != Activation::Sigmoid {
            self.kinked.push((var, kind));
        }
        var
    }

    /// Which linear piece every relu/relu6 input lies on. Two passes with
    /// equal patterns evaluated the same branch of every activation.
    pub fn activation_pattern(&self) -> Vec<u8> {
        let six = T::from_f64(6.0);
        let mut out = Vec::new();
        for &(var, kind) in &self.kinked {
            let input = self.nodes[var.0].inputs[0];
            out.extend(
                self.nodes[input.0]
                    .value
                    .data()
                    .iter()
                    .map(|&x| match kind {
                        _ if x <= T::zero() => 0,
                        Activation::Relu6 if x >= six => 2,
                        _ => 1,
                    }),
            );
        }
        out
    }

    pub fn upsample2x(&mut self, input: Var) -> Result<Var> {
        let out = kernels::upsample2x_forward(self.value(input))?;
        Ok(self.record(&[input], out, Box::new(UpsampleBackward)))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::concat_channels_forward(self.value(a), self.value(b))?;
        Ok(self.record(&[a, b], out, Box::new(ConcatBackward)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape(
                "add",
                "shape",
                format!("{:?} vs {:?}", x.shape(), y.shape()),
            ));
        }
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| p + q)
            .collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.record(&[a, b], out, Box::new(AddBackward)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape(
                "mul",
                "shape",
                format!("{:?} vs {:?}", x.shape(), y.shape()),
            ));
        }
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| p * q)
            .collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.record(&[a, b], out, Box::new(MulBackward)))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let total = self
            .value(input)
            .data()
            .iter()
            .fold(T::zero(), |acc, &v| acc + v);
        self.record(
            &[input],
            Tensor::scalar(total),
            Box::new(SumBackward { scale: None }),
        )
    }

    pub fn reduce_mean(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        if x.numel() == 0 {
            return Err(Error::InvalidArgument(
                "reduce_mean of an empty tensor".into(),
            ));
        }
        let scale = T::one() / T::from_f64(x.numel() as f64);
        let total = x.data().iter().fold(T::zero(), |acc, &v| acc + v);
        Ok(self.record(
            &[input],
            Tensor::scalar(total * scale),
            Box::new(SumBackward { scale: Some(scale) }),
        ))
    }
}

struct ConvBackward {
    params: Conv2dParams,
}

impl<T: Float> GradFn<T> for ConvBackward {
    fn name(&self) -> &str {
        if self.params.groups > 1 {
            "conv2d(grouped)"
        } else {
            "conv2d"
        }
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_output: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let want = ConvGradRequest {
            input: needs[0],
            weight: needs[1],
            bias: needs.get(2).copied().unwrap_or(false),
        };
        let g = kernels::conv2d_backward(inputs[0], inputs[1], grad_output, self.params, want)?;
        let mut out = vec![g.input, g.weight];
        if inputs.len() == 3 {
            out.push(g.bias);
        }
        Ok(out)
    }
}

struct BatchNormBackward<T> {
    normalized: Tensor<T>,
    inv_std: Vec<T>,
    mode: BatchNormMode,
}

impl<T: Float> GradFn<T> for BatchNormBackward<T> {
    fn name(&self) -> &str {
        "batchnorm2d"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_output: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let g = kernels::batchnorm2d_backward(
            grad_output,
            &self.normalized,
            &self.inv_std,
            inputs[1],
            self.mode,
        )?;
        Ok(vec![Some(g.input), Some(g.gamma), Some(g.beta)])
    }
}

struct ActivationBackward {
    kind: Activation,
}

impl<T: Float> GradFn<T> for ActivationBackward {
    fn name(&self) -> &str {
        self.kind.name()
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_output: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let data = inputs[0]
            .data()
            .iter()
            .zip(output.data())
            .zip(grad_output.data())
            .map(|((&x, &y), &g)| g * self.kind.derivative(x, y))
            .collect();
        Ok(vec![Some(Tensor::new(inputs[0].shape().to_vec(), data)?)])
    }
}

struct UpsampleBackward;

impl<T: Float> GradFn<T> for UpsampleBackward {
    fn name(&self) -> &str {
        "upsample2x"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_output: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(kernels::upsample2x_backward(grad_output)?)])
    }
}

struct ConcatBackward;

impl<T: Float> GradFn<T> for ConcatBackward {
    fn name(&self) -> &str {
        "concat_channels"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_output: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (da, db) = kernels::concat_channels_backward(grad_output, inputs[0].shape()[1])?;
        Ok(vec![Some(da), Some(db)])
    }
}

struct AddBackward;

impl<T: Float> GradFn<T> for AddBackward {
    fn name(&self) -> &str {
        "add"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_output: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(needs
            .iter()
            .map(|&n| n.then(|| grad_output.clone()))
            .collect())
    }
}

struct MulBackward;

impl<T: Float> GradFn<T> for MulBackward {
    fn name(&self) -> &str {
        "mul"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_output: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let scaled = |other: &Tensor<T>| {
            let data = other
                .data()
                .iter()
                .zip(grad_output.data())
                .map(|(&o, &g)| o * g)
                .collect();
            Tensor::new(other.shape().to_vec(), data)
        };
        let da = if needs[0] {
            Some(scaled(inputs[1])?)
        } else {
            None
        };
        let db = if needs[1] {
            Some(scaled(inputs[0])?)
        } else {
            None
        };
        Ok(vec![da, db])
    }
}

struct SumBackward<T> {
    scale: Option<T>,
}

impl<T: Float> GradFn<T> for SumBackward<T> {
    fn name(&self) -> &str {
        if self.scale.is_some() {
            "reduce_mean"
        } else {
            "sum"
        }
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad_output: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let g = grad_output.data()[0] * self.scale.unwrap_or_else(T::one);
        Ok(vec![Some(Tensor::full(inputs[0].shape(), g))])
    }
}
