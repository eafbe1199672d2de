//! Construction of mediator, experts and confidence heads from one shared
//! architecture description.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LayerParams, LayerSpec, Network, Tensor};
use crate::scalar::Scalar;

/// Architecture and sharing layout for an ensemble.
///
/// `base_spec` is the convolutional trunk (ending in `Flatten`); the
/// classifier part is `hidden_layers` blocks of `FullyConnected + ReLU`
/// followed by the output layer, with widths taken from
/// `mediator_head_width` / `expert_head_width`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub input_shape: Vec<usize>,
    pub base_spec: Vec<LayerSpec>,
    pub hidden_layers: usize,
    pub n_experts: usize,
    /// Number of lowest convolutional layers shared with (and frozen to) the mediator.
    pub shared_prefix_len: usize,
    /// Layer after which the confidence heads attach.
    pub confidence_layer_index: usize,
    pub expert_head_width: usize,
    pub mediator_head_width: usize,
}

impl EnsembleConfig {
    /// Two conv blocks (5×5 kernels, 2×2 pooling) and one hidden FC layer
    /// for 28×28 grayscale digits. The confidence heads sit after the second
    /// pooling layer.
    pub fn mnist_slim(n_experts: usize, channels: (usize, usize), width: usize) -> Self {
        let (c1, c2) = channels;
        EnsembleConfig {
            input_shape: vec![1, 28, 28],
            base_spec: vec![
                LayerSpec::conv(1, c1, 5),
                LayerSpec::Relu,
                LayerSpec::pool(2),
                LayerSpec::conv(c1, c2, 5),
                LayerSpec::Relu,
                LayerSpec::pool(2),
                LayerSpec::Flatten,
            ],
            hidden_layers: 1,
            n_experts,
            shared_prefix_len: 0,
            confidence_layer_index: 5,
            expert_head_width: width,
            mediator_head_width: width,
        }
    }

    pub fn conv_count(&self) -> usize {
        self.base_spec.iter().filter(|l| l.is_conv()).count()
    }

    fn trunk_output(&self) -> Result<usize> {
        let shapes = crate::nn::layer::infer_shapes(&self.input_shape, &self.base_spec)?;
        let last = shapes.last().unwrap();
        if last.len() != 1 {
            return Err(Error::Architecture(format!(
                "trunk must end flattened, ends with shape {last:?}"
            )));
        }
        Ok(last[0])
    }

    /// Complete layer list for a classifier with the given head width.
    pub fn layers(&self, width: usize, outputs: usize) -> Result<Vec<LayerSpec>> {
        let mut layers = self.base_spec.clone();
        let mut fan_in = self.trunk_output()?;
        for _ in 0..self.hidden_layers {
            layers.push(LayerSpec::fc(fan_in, width));
            layers.push(LayerSpec::Relu);
            fan_in = width;
        }
        layers.push(LayerSpec::fc(fan_in, outputs));
        Ok(layers)
    }

    pub fn total_layers(&self) -> usize {
        self.base_spec.len() + 2 * self.hidden_layers + 1
    }

    /// Index of the first layer that is *not* part of the shared prefix:
    /// the position of the `(k+1)`-th parametric layer, or 0 when `k = 0`.
    pub fn shared_split(&self) -> usize {
        if self.shared_prefix_len == 0 {
            return 0;
        }
        let layers = self
            .layers(self.mediator_head_width, 2)
            .expect("validated config");
        layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.has_params())
            .nth(self.shared_prefix_len)
            .map(|(i, _)| i)
            .unwrap_or(layers.len())
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_experts == 0 {
            return Err(Error::Architecture("need at least one expert".into()));
        }
        if self.expert_head_width == 0 || self.mediator_head_width == 0 {
            return Err(Error::Architecture("head widths must be positive".into()));
        }
        self.layers(self.mediator_head_width, 2)?;
        let convs = self.conv_count();
        if self.shared_prefix_len > convs {
            return Err(Error::Architecture(format!(
                "shared prefix of {} conv layers exceeds the {convs} available",
                self.shared_prefix_len
            )));
        }
        if self.confidence_layer_index >= self.total_layers() - 1 {
            return Err(Error::Architecture(format!(
                "confidence layer index {} must precede the output layer (index {})",
                self.confidence_layer_index,
                self.total_layers() - 1
            )));
        }
        if self.shared_prefix_len > 0 {
            let last_shared_conv = self
                .base_spec
                .iter()
                .enumerate()
                .filter(|(_, l)| l.is_conv())
                .nth(self.shared_prefix_len - 1)
                .map(|(i, _)| i)
                .unwrap();
            if self.confidence_layer_index < last_shared_conv {
                return Err(Error::Architecture(format!(
                    "confidence layer {} lies inside the shared prefix (last shared conv at {last_shared_conv})",
                    self.confidence_layer_index
                )));
            }
        }
        Ok(())
    }
}

pub fn build_mediator<S: Scalar, R: Rng + ?Sized>(
    cfg: &EnsembleConfig,
    n_classes: usize,
    rng: &mut R,
) -> Result<Network<S>> {
    if n_classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "mediator needs at least 2 classes, got {n_classes}"
        )));
    }
    cfg.validate()?;
    Network::new(
        cfg.input_shape.clone(),
        cfg.layers(cfg.mediator_head_width, n_classes)?,
        rng,
    )
}

/// Expert initialized from the mediator: every layer whose shape matches is
/// copied, the rest is freshly initialized. Layers below
/// [`EnsembleConfig::shared_split`] are frozen.
pub fn build_expert<S: Scalar, R: Rng + ?Sized>(
    cfg: &EnsembleConfig,
    mediator: &Network<S>,
    superclass_size: usize,
    rng: &mut R,
) -> Result<Network<S>> {
    if superclass_size == 0 {
        return Err(Error::InvalidArgument(
            "superclass must contain at least one class".into(),
        ));
    }
    cfg.validate()?;
    let layers = cfg.layers(cfg.expert_head_width, superclass_size)?;
    if mediator.len() != layers.len() {
        return Err(Error::Architecture(format!(
            "mediator has {} layers, expert layout has {}",
            mediator.len(),
            layers.len()
        )));
    }
    let fresh = Network::<S>::new(cfg.input_shape.clone(), layers.clone(), rng)?;
    let params = layers
        .iter()
        .enumerate()
        .map(|(i, layer)| {
            if mediator.layers()[i] == *layer {
                mediator.params()[i].clone()
            } else {
                fresh.params()[i].clone()
            }
        })
        .collect();
    let split = cfg.shared_split();
    let frozen = (0..layers.len()).map(|i| i < split).collect();
    Network::from_parts(cfg.input_shape.clone(), layers, params, frozen)
}

/// A single fully connected layer mapping the flattened activation at layer
/// `layer` to one output per superclass.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceHead<S> {
    pub layer: usize,
    pub net: Network<S>,
}

impl<S: Scalar> ConfidenceHead<S> {
    pub fn input_size(&self) -> usize {
        self.net.input_shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.net.output_shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }

    /// Head outputs `(batch, N)` for activations `(batch, ...)` taken at `layer`.
    pub fn forward(&self, activation: &Tensor<S>) -> Result<Tensor<S>> {
        let flat = activation
            .clone()
            .reshape(vec![activation.batch(), activation.sample_len()])?;
        self.net.infer(&flat)
    }
}

pub fn attach_confidence_head<S: Scalar, R: Rng + ?Sized>(
    expert: &Network<S>,
    layer: usize,
    n_superclasses: usize,
    rng: &mut R,
) -> Result<ConfidenceHead<S>> {
    if layer >= expert.len() {
        return Err(Error::InvalidArgument(format!(
            "confidence layer {layer} out of range for {} layers",
            expert.len()
        )));
    }
    if n_superclasses == 0 {
        return Err(Error::InvalidArgument(
            "confidence head needs at least one output".into(),
        ));
    }
    let inputs: usize = expert.activation_shapes()[layer + 1].iter().product();
    let net = Network::new(
        vec![inputs],
        vec![LayerSpec::fc(inputs, n_superclasses)],
        rng,
    )?;
    Ok(ConfidenceHead { layer, net })
}

/// Flat increment: grows the final fully connected layer by `extra_units`
/// outputs. Existing rows are kept bit-for-bit; new rows get the same
/// He-style init as fresh layers and zero bias.
pub fn extend_output_layer<S: Scalar, R: Rng + ?Sized>(
    net: &Network<S>,
    extra_units: usize,
    rng: &mut R,
) -> Result<Network<S>> {
    if extra_units == 0 {
        return Err(Error::InvalidArgument("extra_units must be >= 1".into()));
    }
    let last = net
        .len()
        .checked_sub(1)
        .ok_or_else(|| Error::Architecture("empty network".into()))?;
    let LayerSpec::FullyConnected { inputs, outputs } = net.layers()[last] else {
        return Err(Error::Architecture(
            "final layer is not fully connected".into(),
        ));
    };
    let grown = LayerSpec::fc(inputs, outputs + extra_units);
    let old = net.params()[last].as_ref().expect("fc params");
    let fresh =
        LayerParams::<S>::he_uniform(&LayerSpec::fc(inputs, extra_units), rng).expect("fc params");
    let mut weight = old.weight.data().to_vec();
    weight.extend_from_slice(fresh.weight.data());
    let mut bias = old.bias.clone();
    bias.extend_from_slice(&fresh.bias);

    let mut layers = net.layers().to_vec();
    layers[last] = grown;
    let mut params = net.params().to_vec();
    params[last] = Some(LayerParams {
        weight: Tensor::new(vec![outputs + extra_units, inputs], weight)?,
        bias,
    });
    Network::from_parts(
        net.input_shape().to_vec(),
        layers,
        params,
        net.frozen_mask().to_vec(),
    )
}

impl<S: Scalar> ConfidenceHead<S> {
    pub fn extend<R: Rng + ?Sized>(&self, extra: usize, rng: &mut R) -> Result<Self> {
        Ok(ConfidenceHead {
            layer: self.layer,
            net: extend_output_layer(&self.net, extra, rng)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn small_cfg() -> EnsembleConfig {
        EnsembleConfig::mnist_slim(2, (4, 8), 32)
    }

    #[test]
    fn mediator_output_and_width() {
        let cfg = small_cfg();
        let m = build_mediator::<f32, _>(&cfg, 10, &mut rng(0)).unwrap();
        assert_eq!(m.layers().last(), Some(&LayerSpec::fc(32, 10)));
        let mut wide = cfg.clone();
        wide.mediator_head_width = 512;
        let m = build_mediator::<f32, _>(&wide, 10, &mut rng(0)).unwrap();
        assert_eq!(m.layers()[7], LayerSpec::fc(8 * 4 * 4, 512));
        assert_eq!(m.layers()[9], LayerSpec::fc(512, 10));
        assert!(build_mediator::<f32, _>(&cfg, 1, &mut rng(0)).is_err());
    }

    #[test]
    fn mediator_build_is_deterministic() {
        let cfg = small_cfg();
        let a = build_mediator::<f32, _>(&cfg, 10, &mut rng(3)).unwrap();
        let b = build_mediator::<f32, _>(&cfg, 10, &mut rng(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn expert_without_sharing_is_trainable() {
        let cfg = small_cfg();
        let m = build_mediator::<f32, _>(&cfg, 10, &mut rng(0)).unwrap();
        let e = build_expert(&cfg, &m, 5, &mut rng(1)).unwrap();
        assert!(e.frozen_mask().iter().all(|f| !f));
        assert_eq!(e.layers().last(), Some(&LayerSpec::fc(32, 5)));
        // matching layers copied from the mediator
        assert_eq!(e.params()[0], m.params()[0]);
        assert_eq!(e.params()[7], m.params()[7]);
    }

    #[test]
    fn fully_shared_expert_freezes_every_conv() {
        let mut cfg = small_cfg();
        cfg.shared_prefix_len = 2;
        let m = build_mediator::<f32, _>(&cfg, 10, &mut rng(0)).unwrap();
        let e = build_expert(&cfg, &m, 5, &mut rng(1)).unwrap();
        for (i, l) in e.layers().iter().enumerate() {
            if l.is_conv() {
                assert!(e.frozen_mask()[i]);
                assert_eq!(e.params()[i], m.params()[i]);
            }
        }
        assert_eq!(cfg.shared_split(), 7);
        assert!(!e.frozen_mask()[7]);
    }

    #[test]
    fn sharing_beyond_conv_count_rejected() {
        let mut cfg = small_cfg();
        cfg.shared_prefix_len = 3;
        let m = build_mediator::<f32, _>(&small_cfg(), 10, &mut rng(0)).unwrap();
        assert!(build_expert(&cfg, &m, 5, &mut rng(1)).is_err());
    }

    #[test]
    fn head_attachment() {
        let mut r = rng(0);
        let net = Network::<f32>::new(
            vec![1, 10, 10],
            vec![
                LayerSpec::conv(1, 8, 3),
                LayerSpec::pool(2),
                LayerSpec::Flatten,
                LayerSpec::fc(128, 3),
            ],
            &mut r,
        )
        .unwrap();
        let head = attach_confidence_head(&net, 1, 2, &mut rng(5)).unwrap();
        assert_eq!(head.input_size(), 128);
        assert_eq!(head.outputs(), 2);
        assert_eq!(
            head,
            attach_confidence_head(&net, 1, 2, &mut rng(5)).unwrap()
        );
        assert!(attach_confidence_head(&net, 4, 2, &mut rng(5)).is_err());
    }

    #[test]
    fn extension_preserves_old_logits() {
        let cfg = small_cfg();
        let m = build_mediator::<f64, _>(&cfg, 10, &mut rng(0)).unwrap();
        let grown = extend_output_layer(&m, 5, &mut rng(9)).unwrap();
        assert_eq!(grown.output_shape(), &[15]);
        let x = Tensor::<f64>::new(
            vec![2, 1, 28, 28],
            (0..1568).map(|i| ((i % 17) as f64) / 17.0).collect(),
        )
        .unwrap();
        let a = m.infer(&x).unwrap();
        let b = grown.infer(&x).unwrap();
        for s in 0..2 {
            assert_eq!(a.sample(s), &b.sample(s)[..10]);
        }
        assert!(extend_output_layer(&m, 0, &mut rng(9)).is_err());
        let relu_last = Network::<f64>::new(
            vec![3],
            vec![LayerSpec::fc(3, 2), LayerSpec::Relu],
            &mut rng(1),
        )
        .unwrap();
        assert!(extend_output_layer(&relu_last, 1, &mut rng(1)).is_err());
    }

    #[test]
    fn head_grows_by_one_superclass() {
        let cfg = small_cfg();
        let m = build_mediator::<f32, _>(&cfg, 10, &mut rng(0)).unwrap();
        let head = attach_confidence_head(&m, cfg.confidence_layer_index, 2, &mut rng(1)).unwrap();
        let grown = head.extend(1, &mut rng(2)).unwrap();
        assert_eq!(grown.outputs(), 3);
        assert_eq!(grown.layer, head.layer);
    }
}
