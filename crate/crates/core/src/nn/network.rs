use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::layer::{infer_shapes, LayerSpec};
use crate::nn::ops;
use crate::nn::tensor::Tensor;
use crate::scalar::{cast, Scalar};

/// Weight and bias of one parametric layer. Also used for gradients and
/// momentum buffers, which mirror the parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<S> {
    pub weight: Tensor<S>,
    pub bias: Vec<S>,
}

impl<S: Scalar> LayerParams<S> {
    pub fn zeros_like(other: &LayerParams<S>) -> Self {
        LayerParams {
            weight: Tensor::zeros(other.weight.shape().to_vec()),
            bias: vec![S::zero(); other.bias.len()],
        }
    }

    /// He-style uniform init over `±sqrt(6 / fan_in)`, zero bias.
    pub fn he_uniform<R: Rng + ?Sized>(spec: &LayerSpec, rng: &mut R) -> Option<Self> {
        let (wshape, blen) = spec.param_shapes()?;
        let bound = (6.0 / spec.fan_in().max(1) as f64).sqrt();
        let len = wshape.iter().product();
        let data = (0..len)
            .map(|_| cast::<S>(rng.random_range(-bound..bound)))
            .collect();
        Some(LayerParams {
            weight: Tensor::new(wshape, data).expect("init shape"),
            bias: vec![S::zero(); blen],
        })
    }

    pub fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn values(&self) -> impl Iterator<Item = &S> {
        self.weight.data().iter().chain(self.bias.iter())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut S> {
        self.weight
            .data_mut()
            .iter_mut()
            .chain(self.bias.iter_mut())
    }
}

/// Per-layer outputs of a forward pass; entry 0 is the input.
#[derive(Debug, Clone)]
pub struct ActivationTrace<S> {
    pub activations: Vec<Tensor<S>>,
}

impl<S: Scalar> ActivationTrace<S> {
    pub fn output(&self) -> &Tensor<S> {
        self.activations.last().expect("trace is never empty")
    }

    pub fn len(&self) -> usize {
        self.activations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.activations.is_empty()
    }
}

/// Parameter gradients (one slot per layer) plus the gradient w.r.t. the
/// network input.
#[derive(Debug, Clone)]
pub struct Gradients<S> {
    pub layers: Vec<Option<LayerParams<S>>>,
    pub input: Option<Tensor<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn zeros_for(net: &Network<S>) -> Self {
        Gradients {
            layers: net
                .params
                .iter()
                .map(|p| p.as_ref().map(LayerParams::zeros_like))
                .collect(),
            input: None,
        }
    }

    pub fn scale(&mut self, factor: S) {
        for p in self.layers.iter_mut().flatten() {
            p.values_mut().for_each(|v| *v *= factor);
        }
    }
}

/// A feed-forward stack of layers with parameters and a per-layer freeze
/// mask. Frozen layers still receive gradients; the optimizer skips them.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<S> {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    shapes: Vec<Vec<usize>>,
    params: Vec<Option<LayerParams<S>>>,
    frozen: Vec<bool>,
}

impl<S: Scalar> Network<S> {
    /// Builds a network with freshly initialized parameters.
    pub fn new<R: Rng + ?Sized>(
        input_shape: Vec<usize>,
        layers: Vec<LayerSpec>,
        rng: &mut R,
    ) -> Result<Self> {
        let shapes = infer_shapes(&input_shape, &layers)?;
        let params = layers
            .iter()
            .map(|l| LayerParams::he_uniform(l, rng))
            .collect();
        let frozen = vec![false; layers.len()];
        Ok(Network {
            input_shape,
            layers,
            shapes,
            params,
            frozen,
        })
    }

    /// Assembles a network from existing parameters, validating every shape.
    pub fn from_parts(
        input_shape: Vec<usize>,
        layers: Vec<LayerSpec>,
        params: Vec<Option<LayerParams<S>>>,
        frozen: Vec<bool>,
    ) -> Result<Self> {
        let shapes = infer_shapes(&input_shape, &layers)?;
        if params.len() != layers.len() || frozen.len() != layers.len() {
            return Err(Error::Architecture(format!(
                "{} layers but {} parameter slots and {} freeze flags",
                layers.len(),
                params.len(),
                frozen.len()
            )));
        }
        for (i, (layer, p)) in layers.iter().zip(&params).enumerate() {
            match (layer.param_shapes(), p) {
                (None, None) => {}
                (Some((w, b)), Some(p))
                    if p.weight.shape() == w.as_slice() && p.bias.len() == b => {}
                (expected, p) => {
                    return Err(Error::Shape {
                        layer: i,
                        expected: expected.map(|(w, _)| w).unwrap_or_default(),
                        actual: p
                            .as_ref()
                            .map(|p| p.weight.shape().to_vec())
                            .unwrap_or_default(),
                    })
                }
            }
        }
        Ok(Network {
            input_shape,
            layers,
            shapes,
            params,
            frozen,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().expect("shapes include input")
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Per-sample activation shapes; entry `i + 1` is the output of layer `i`.
    pub fn activation_shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn params(&self) -> &[Option<LayerParams<S>>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Option<LayerParams<S>>] {
        &mut self.params
    }

    pub fn frozen_mask(&self) -> &[bool] {
        &self.frozen
    }

    pub fn set_frozen(&mut self, layer: usize, frozen: bool) {
        self.frozen[layer] = frozen;
    }

    pub fn freeze_all(&mut self) {
        self.frozen.iter_mut().for_each(|f| *f = true);
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    pub fn param_count_range(&self, start: usize, end: usize) -> usize {
        self.layers[start..end]
            .iter()
            .map(LayerSpec::param_count)
            .sum()
    }

    /// Splits into `[0, at)` and `[at, len)`; the second half takes the
    /// intermediate activation shape as its input.
    pub fn split_at(&self, at: usize) -> (Network<S>, Network<S>) {
        let head = Network {
            input_shape: self.input_shape.clone(),
            layers: self.layers[..at].to_vec(),
            shapes: self.shapes[..=at].to_vec(),
            params: self.params[..at].to_vec(),
            frozen: self.frozen[..at].to_vec(),
        };
        let tail = Network {
            input_shape: self.shapes[at].clone(),
            layers: self.layers[at..].to_vec(),
            shapes: self.shapes[at..].to_vec(),
            params: self.params[at..].to_vec(),
            frozen: self.frozen[at..].to_vec(),
        };
        (head, tail)
    }

    /// Concatenates `self` followed by `tail`.
    pub fn join(&self, tail: &Network<S>) -> Result<Network<S>> {
        if tail.input_shape.as_slice() != self.output_shape() {
            return Err(Error::Shape {
                layer: self.len(),
                expected: self.output_shape().to_vec(),
                actual: tail.input_shape.clone(),
            });
        }
        let mut layers = self.layers.clone();
        layers.extend(tail.layers.iter().cloned());
        let mut params = self.params.clone();
        params.extend(tail.params.iter().cloned());
        let mut frozen = self.frozen.clone();
        frozen.extend(tail.frozen.iter().copied());
        Network::from_parts(self.input_shape.clone(), layers, params, frozen)
    }

    fn check_input(&self, input: &Tensor<S>, start: usize) -> Result<()> {
        if input.shape().len() < 2 || input.shape()[1..] != self.shapes[start][..] {
            let mut expected = vec![input.batch()];
            expected.extend_from_slice(&self.shapes[start]);
            return Err(Error::Shape {
                layer: start,
                expected,
                actual: input.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn apply(&self, i: usize, x: &Tensor<S>) -> Result<Tensor<S>> {
        let out = match self.layers[i] {
            LayerSpec::Conv2d { stride, pad, .. } => {
                let p = self.params[i].as_ref().expect("conv params");
                ops::conv2d(x, &p.weight, &p.bias, stride, pad)
            }
            LayerSpec::Relu => Ok(ops::relu(x)),
            LayerSpec::MaxPool { size, stride } => Ok(ops::max_pool(x, size, stride)),
            LayerSpec::Flatten => {
                let n = x.batch();
                let f = x.sample_len();
                x.clone().reshape(vec![n, f])
            }
            LayerSpec::FullyConnected { .. } => {
                let p = self.params[i].as_ref().expect("fc params");
                ops::fully_connected(x, &p.weight, &p.bias)
            }
        };
        out.map_err(|e| match e {
            Error::Shape {
                expected, actual, ..
            } => Error::Shape {
                layer: i,
                expected,
                actual,
            },
            other => other,
        })
    }

    /// Full forward pass keeping every intermediate activation.
    pub fn forward(&self, input: &Tensor<S>) -> Result<ActivationTrace<S>> {
        self.check_input(input, 0)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input.clone());
        for i in 0..self.layers.len() {
            let next = self.apply(i, activations.last().unwrap())?;
            activations.push(next);
        }
        Ok(ActivationTrace { activations })
    }

    /// Runs layers `[start, end)` on an activation of layer `start`'s input
    /// shape and returns only the final output.
    pub fn forward_range(&self, input: &Tensor<S>, start: usize, end: usize) -> Result<Tensor<S>> {
        if start > end || end > self.layers.len() {
            return Err(Error::InvalidArgument(format!(
                "layer range {start}..{end} outside 0..{}",
                self.layers.len()
            )));
        }
        self.check_input(input, start)?;
        let mut x = input.clone();
        for i in start..end {
            x = self.apply(i, &x)?;
        }
        Ok(x)
    }

    pub fn infer(&self, input: &Tensor<S>) -> Result<Tensor<S>> {
        self.forward_range(input, 0, self.layers.len())
    }

    /// Back-propagates `loss_grad` (gradient w.r.t. the network output)
    /// through a trace produced by [`Network::forward`] on this network.
    pub fn backward(
        &self,
        trace: &ActivationTrace<S>,
        loss_grad: &Tensor<S>,
    ) -> Result<Gradients<S>> {
        self.backward_impl(trace, loss_grad, true)
    }

    /// Same as [`Network::backward`]; the input gradient is only computed
    /// when requested.
    pub fn backward_impl(
        &self,
        trace: &ActivationTrace<S>,
        loss_grad: &Tensor<S>,
        need_input_grad: bool,
    ) -> Result<Gradients<S>> {
        if trace.activations.len() != self.layers.len() + 1 {
            return Err(Error::StaleTrace(format!(
                "trace has {} entries, network expects {}",
                trace.activations.len(),
                self.layers.len() + 1
            )));
        }
        let batch = trace.activations[0].batch();
        for (i, (a, s)) in trace.activations.iter().zip(&self.shapes).enumerate() {
            if a.batch() != batch || a.shape()[1..] != s[..] {
                return Err(Error::StaleTrace(format!(
                    "activation {i} has shape {:?}, expected per-sample {:?}",
                    a.shape(),
                    s
                )));
            }
        }
        if loss_grad.shape() != trace.output().shape() {
            return Err(Error::Shape {
                layer: self.layers.len(),
                expected: trace.output().shape().to_vec(),
                actual: loss_grad.shape().to_vec(),
            });
        }

        let mut layers: Vec<Option<LayerParams<S>>> = vec![None; self.layers.len()];
        let mut grad = loss_grad.clone();
        for i in (0..self.layers.len()).rev() {
            let x = &trace.activations[i];
            let want_input = need_input_grad || i > 0;
            grad = match self.layers[i] {
                LayerSpec::Conv2d { stride, pad, .. } => {
                    let p = self.params[i].as_ref().expect("conv params");
                    let (gx, gw, gb) =
                        ops::conv2d_backward(x, &p.weight, &grad, stride, pad, want_input)?;
                    layers[i] = Some(LayerParams {
                        weight: gw,
                        bias: gb,
                    });
                    match gx {
                        Some(g) => g,
                        None => break,
                    }
                }
                LayerSpec::Relu => ops::relu_backward(x, &grad),
                LayerSpec::MaxPool { size, stride } => {
                    ops::max_pool_backward(x, &grad, size, stride)
                }
                LayerSpec::Flatten => grad.reshape(x.shape().to_vec())?,
                LayerSpec::FullyConnected { .. } => {
                    let p = self.params[i].as_ref().expect("fc params");
                    let (gx, gw, gb) =
                        ops::fully_connected_backward(x, &p.weight, &grad, want_input);
                    layers[i] = Some(LayerParams {
                        weight: gw,
                        bias: gb,
                    });
                    match gx {
                        Some(g) => g,
                        None => break,
                    }
                }
            };
            if i == 0 {
                break;
            }
        }
        let input = if need_input_grad || self.layers.is_empty() {
            Some(grad)
        } else {
            None
        };
        Ok(Gradients { layers, input })
    }

    /// Order-stable FNV-1a digest of all parameter bits, for cheap
    /// "did anything change" assertions.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in self.params.iter().flatten() {
            for v in p.values() {
                for b in v.to_f64_lossless().to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100_0000_01b3);
                }
            }
        }
        h
    }
}
