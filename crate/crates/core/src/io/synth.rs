//! Deterministic synthetic images: one oriented bar per class, jittered and
//! noised. Small enough for CI, separable by a two-conv network.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::ensemble::rng_for;
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::partition::LabeledDataset;
use crate::scalar::Scalar;

pub fn synth_dataset<S: Scalar>(
    seed: u64,
    n_classes: usize,
    n_per_class: usize,
    size: usize,
) -> Result<LabeledDataset<S>> {
    if n_classes < 2 {
        return Err(Error::InvalidArgument(
            "synthetic data needs at least 2 classes".into(),
        ));
    }
    if size < 8 {
        return Err(Error::InvalidArgument(
            "synthetic images must be at least 8x8".into(),
        ));
    }
    let mut rng = rng_for(seed, "synth", 0);
    let noise = Normal::new(0.0, 0.08).expect("valid sigma");
    let total = n_classes * n_per_class;
    let mut order: Vec<usize> = (0..total).map(|i| i % n_classes).collect();
    order.shuffle(&mut rng);

    let centre = (size as f64 - 1.0) / 2.0;
    let mut pixels = Vec::with_capacity(total * size * size);
    for &class in &order {
        let angle =
            std::f64::consts::PI * class as f64 / n_classes as f64 + rng.random_range(-0.08..0.08);
        let (dx, dy) = (angle.cos(), angle.sin());
        let jitter = size as f64 / 10.0;
        let (cx, cy) = (
            centre + rng.random_range(-jitter..jitter),
            centre + rng.random_range(-jitter..jitter),
        );
        let half_len = size as f64 * rng.random_range(0.3..0.45);
        for y in 0..size {
            for x in 0..size {
                let (px, py) = (x as f64 - cx, y as f64 - cy);
                let along = px * dx + py * dy;
                let across = (px * dy - py * dx).abs();
                let on = if along.abs() <= half_len {
                    (1.2 - across).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let v: f64 = on + noise.sample(&mut rng);
                pixels.push(S::from_f64_lossy(v.clamp(0.0, 1.0)));
            }
        }
    }
    let images = Tensor::new(vec![total, 1, size, size], pixels)?;
    LabeledDataset::new(images, order)
}
