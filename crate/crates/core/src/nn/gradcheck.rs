//! Central finite-difference verification of [`Network::backward`].

use rand::Rng;

use crate::error::Result;
use crate::nn::layer::LayerSpec;
use crate::nn::network::Network;
use crate::nn::ops::{max_pool_argmax, softmax_cross_entropy};
use crate::nn::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, 1e-6)`.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose ±ε perturbation crossed a ReLU or max-pool kink.
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn merge(self, other: GradCheckReport) -> GradCheckReport {
        GradCheckReport {
            max_rel_error: self.max_rel_error.max(other.max_rel_error),
            checked: self.checked + other.checked,
            skipped: self.skipped + other.skipped,
        }
    }
}

const REL_FLOOR: f64 = 1e-6;

/// Summed softmax cross-entropy over the batch.
fn batch_loss(
    net: &Network<f64>,
    x: &Tensor<f64>,
    labels: &[usize],
) -> Result<(f64, Tensor<f64>, Vec<u8>)> {
    let trace = net.forward(x)?;
    let logits = trace.output();
    let classes = logits.sample_len();
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (b, &label) in labels.iter().enumerate() {
        let (l, g) = softmax_cross_entropy(logits.sample(b), label)?;
        loss += l;
        grad.extend(g);
    }
    let grad = Tensor::new(vec![labels.len(), classes], grad)?;
    Ok((loss, grad, kink_signature(net, &trace.activations)))
}

/// Which side of every ReLU and which max-pool winner each activation is on.
fn kink_signature(net: &Network<f64>, activations: &[Tensor<f64>]) -> Vec<u8> {
    let mut sig = Vec::new();
    for (i, layer) in net.layers().iter().enumerate() {
        match layer {
            LayerSpec::Relu => sig.extend(activations[i].data().iter().map(|&v| (v > 0.0) as u8)),
            LayerSpec::MaxPool { size, stride } => {
                sig.extend(
                    max_pool_argmax(&activations[i], *size, *stride)
                        .into_iter()
                        .map(|p| (p % 251) as u8),
                );
            }
            _ => {}
        }
    }
    sig
}

/// Compares analytic parameter and input gradients of the summed
/// cross-entropy loss against central differences with step `eps`.
pub fn check_gradients(
    net: &Network<f64>,
    x: &Tensor<f64>,
    labels: &[usize],
    eps: f64,
) -> Result<GradCheckReport> {
    let trace = net.forward(x)?;
    let (_, loss_grad, base_sig) = batch_loss(net, x, labels)?;
    let analytic = net.backward(&trace, &loss_grad)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut record = |a: f64, plus: (f64, Vec<u8>), minus: (f64, Vec<u8>)| {
        if plus.1 != base_sig || minus.1 != base_sig {
            report.skipped += 1;
            return;
        }
        let numeric = (plus.0 - minus.0) / (2.0 * eps);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        report.max_rel_error = report.max_rel_error.max(rel);
        report.checked += 1;
    };

    let mut probe = net.clone();
    for layer in 0..net.len() {
        let Some(grad) = analytic.layers[layer].as_ref() else {
            continue;
        };
        let grads: Vec<f64> = grad.values().copied().collect();
        for (k, &a) in grads.iter().enumerate() {
            let original = *nth_param(&mut probe, layer, k);
            *nth_param(&mut probe, layer, k) = original + eps;
            let (lp, _, sp) = batch_loss(&probe, x, labels)?;
            *nth_param(&mut probe, layer, k) = original - eps;
            let (lm, _, sm) = batch_loss(&probe, x, labels)?;
            *nth_param(&mut probe, layer, k) = original;
            record(a, (lp, sp), (lm, sm));
        }
    }

    let input_grad = analytic.input.expect("input gradient requested");
    let mut xp = x.clone();
    for k in 0..x.len() {
        let original = x.data()[k];
        xp.data_mut()[k] = original + eps;
        let (lp, _, sp) = batch_loss(net, &xp, labels)?;
        xp.data_mut()[k] = original - eps;
        let (lm, _, sm) = batch_loss(net, &xp, labels)?;
        xp.data_mut()[k] = original;
        record(input_grad.data()[k], (lp, sp), (lm, sm));
    }
    Ok(report)
}

fn nth_param(net: &mut Network<f64>, layer: usize, k: usize) -> &mut f64 {
    net.params_mut()[layer]
        .as_mut()
        .expect("parametric layer")
        .values_mut()
        .nth(k)
        .expect("param index")
}

/// Random architecture with at most three parametric layers and at most
/// `max_params` parameters, plus a matching random input batch and labels.
pub fn random_case<R: Rng + ?Sized>(
    rng: &mut R,
    max_params: usize,
) -> Result<(Network<f64>, Tensor<f64>, Vec<usize>)> {
    loop {
        let classes = rng.random_range(2..=4);
        let (input, layers) = match rng.random_range(0..4) {
            0 => {
                let d = rng.random_range(2..=8);
                let h = rng.random_range(2..=8);
                (
                    vec![d],
                    vec![
                        LayerSpec::fc(d, h),
                        LayerSpec::Relu,
                        LayerSpec::fc(h, classes),
                    ],
                )
            }
            1 => {
                let c = rng.random_range(1..=2);
                let s = rng.random_range(5..=7);
                let o = rng.random_range(1..=3);
                let conv_out = s - 2;
                let pooled = conv_out / 2;
                (
                    vec![c, s, s],
                    vec![
                        LayerSpec::conv(c, o, 3),
                        LayerSpec::Relu,
                        LayerSpec::pool(2),
                        LayerSpec::Flatten,
                        LayerSpec::fc(o * pooled * pooled, classes),
                    ],
                )
            }
            2 => {
                let s = rng.random_range(5..=7);
                let stride = rng.random_range(1..=2);
                let pad = rng.random_range(0..=1);
                let o = rng.random_range(1..=2);
                let out = (s + 2 * pad - 3) / stride + 1;
                (
                    vec![1, s, s],
                    vec![
                        LayerSpec::Conv2d {
                            in_channels: 1,
                            out_channels: o,
                            kernel: 3,
                            stride,
                            pad,
                        },
                        LayerSpec::Relu,
                        LayerSpec::Conv2d {
                            in_channels: o,
                            out_channels: 2,
                            kernel: 2,
                            stride: 1,
                            pad: 0,
                        },
                        LayerSpec::Flatten,
                        LayerSpec::fc(2 * (out - 1) * (out - 1), classes),
                    ],
                )
            }
            _ => {
                let d = rng.random_range(2..=6);
                let h1 = rng.random_range(2..=6);
                let h2 = rng.random_range(2..=6);
                (
                    vec![d],
                    vec![
                        LayerSpec::fc(d, h1),
                        LayerSpec::Relu,
                        LayerSpec::fc(h1, h2),
                        LayerSpec::Relu,
                        LayerSpec::fc(h2, classes),
                    ],
                )
            }
        };
        let net = Network::<f64>::new(input.clone(), layers, rng)?;
        if net.param_count() > max_params {
            continue;
        }
        let batch = rng.random_range(1..=3);
        let mut shape = vec![batch];
        shape.extend(input);
        let len = shape.iter().product();
        let data: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Tensor::new(shape, data)?;
        let labels = (0..batch).map(|_| rng.random_range(0..classes)).collect();
        return Ok((net, x, labels));
    }
}

/// Runs [`check_gradients`] over `count` random small networks.
pub fn run_suite<R: Rng + ?Sized>(rng: &mut R, count: usize, eps: f64) -> Result<GradCheckReport> {
    let mut total = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    for _ in 0..count {
        let (net, x, labels) = random_case(rng, 200)?;
        total = total.merge(check_gradients(&net, &x, &labels, eps)?);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn random_cases_respect_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let (net, x, labels) = random_case(&mut rng, 200).unwrap();
            assert!(net.param_count() <= 200);
            assert!(net.layers().iter().filter(|l| l.has_params()).count() <= 3);
            assert_eq!(x.batch(), labels.len());
        }
    }

    #[test]
    fn suite_passes_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let report = run_suite(&mut rng, 20, 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
        assert!(report.checked > 1000);
    }
}
