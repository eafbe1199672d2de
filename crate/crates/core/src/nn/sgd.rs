use crate::error::{Error, Result};
use crate::nn::network::{Gradients, LayerParams, Network};
use crate::scalar::{cast, Scalar};

/// Momentum SGD with L2 weight decay:
/// `v ← μ·v + (g + λ·w)`, `w ← w − η·v`. Frozen layers are skipped entirely.
#[derive(Debug, Clone)]
pub struct Sgd<S> {
    lr: S,
    momentum: S,
    weight_decay: S,
    velocity: Vec<Option<LayerParams<S>>>,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be > 0, got {lr}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must be in [0, 1), got {momentum}"
            )));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "weight decay must be >= 0, got {weight_decay}"
            )));
        }
        Ok(Sgd {
            lr: cast(lr),
            momentum: cast(momentum),
            weight_decay: cast(weight_decay),
            velocity: Vec::new(),
        })
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = cast(lr);
    }

    pub fn step(&mut self, net: &mut Network<S>, grads: &Gradients<S>) -> Result<()> {
        if grads.layers.len() != net.len() {
            return Err(Error::Shape {
                layer: 0,
                expected: vec![net.len()],
                actual: vec![grads.layers.len()],
            });
        }
        if self.velocity.len() != net.len() {
            self.velocity = net
                .params()
                .iter()
                .map(|p| p.as_ref().map(LayerParams::zeros_like))
                .collect();
        }
        let frozen = net.frozen_mask().to_vec();
        for (i, ((param, grad), vel)) in net
            .params_mut()
            .iter_mut()
            .zip(&grads.layers)
            .zip(self.velocity.iter_mut())
            .enumerate()
        {
            if frozen[i] {
                continue;
            }
            let (Some(param), Some(grad), Some(vel)) =
                (param.as_mut(), grad.as_ref(), vel.as_mut())
            else {
                if param.is_some() != grad.is_some() {
                    return Err(Error::Shape {
                        layer: i,
                        expected: vec![param.as_ref().map_or(0, |p| p.len())],
                        actual: vec![grad.as_ref().map_or(0, |g| g.len())],
                    });
                }
                continue;
            };
            if grad.weight.shape() != param.weight.shape() || grad.bias.len() != param.bias.len() {
                return Err(Error::Shape {
                    layer: i,
                    expected: param.weight.shape().to_vec(),
                    actual: grad.weight.shape().to_vec(),
                });
            }
            for ((w, &g), v) in param.values_mut().zip(grad.values()).zip(vel.values_mut()) {
                *v = self.momentum * *v + g + self.weight_decay * *w;
                *w -= self.lr * *v;
            }
        }
        Ok(())
    }
}
