//! Training procedures: a shared minibatch SGD loop plus the mediator,
//! expert, confidence-head and incremental-expert stages built on it.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::ensemble::{derive_seed, rng_for, Ensemble};
use crate::error::{Error, Result};
use crate::nn::ops::softmax_cross_entropy;
use crate::nn::{Network, Sgd, Tensor};
use crate::partition::{relabel_superclass, restrict_to_superclass, LabeledDataset, SuperclassMap};
use crate::scalar::{cast, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Mediator epochs.
    pub epochs: usize,
    pub expert_epochs: usize,
    pub head_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Multiplier applied to the learning rate after every epoch.
    pub lr_decay: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Epochs for re-fitting the confidence heads after a superclass is added.
    pub confidence_finetune_epochs: usize,
    /// Epochs for fine-tuning the grown mediator after a superclass is added.
    pub increment_mediator_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 8,
            expert_epochs: 6,
            head_epochs: 4,
            batch_size: 32,
            lr: 0.05,
            lr_decay: 0.85,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 1,
            confidence_finetune_epochs: 3,
            increment_mediator_epochs: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!(
                "lr_decay must be in (0, 1], got {}",
                self.lr_decay
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        Ok(())
    }

    fn stage(&self, epochs: usize, tag: &str, index: u64) -> TrainConfig {
        TrainConfig {
            epochs,
            seed: derive_seed(self.seed, tag, index),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: f64,
}

/// `epoch,mean_loss,train_accuracy` rows with a header.
pub fn curve_csv(curve: &[EpochStats]) -> String {
    let mut out = String::from("epoch,mean_loss,train_accuracy\n");
    for s in curve {
        out.push_str(&format!(
            "{},{},{}\n",
            s.epoch, s.mean_loss, s.train_accuracy
        ));
    }
    out
}

/// Minibatch momentum SGD on softmax cross-entropy for `cfg.epochs` epochs.
/// The shuffle order comes from `cfg.seed`, so runs are bit-reproducible.
pub fn train_network<S: Scalar>(
    net: &mut Network<S>,
    data: &LabeledDataset<S>,
    cfg: &TrainConfig,
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    if cfg.epochs == 0 {
        return Ok(Vec::new());
    }
    if data.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if data.sample_shape() != net.input_shape() {
        let mut expected = vec![data.len()];
        expected.extend_from_slice(net.input_shape());
        return Err(Error::Shape {
            layer: 0,
            expected,
            actual: data.images.shape().to_vec(),
        });
    }
    let classes = net.output_shape()[0];
    if let Some(&bad) = data.labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            n_classes: classes,
        });
    }

    let mut rng = rng_for(cfg.seed, "shuffle", 0);
    let mut opt = Sgd::<S>::new(cfg.lr, cfg.momentum, cfg.weight_decay)?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut lr = cfg.lr;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let x = data.images.select(batch);
            let trace = net.forward(&x)?;
            let logits = trace.output();
            let scale = cast::<S>(1.0 / batch.len() as f64);
            let mut grad = Vec::with_capacity(logits.len());
            for (b, &idx) in batch.iter().enumerate() {
                let row = logits.sample(b);
                let (loss, g) = softmax_cross_entropy(row, data.labels[idx])?;
                loss_sum += loss.to_f64_lossless();
                if crate::gating::argmax(row) == data.labels[idx] {
                    correct += 1;
                }
                grad.extend(g.into_iter().map(|v| v * scale));
            }
            let grad = Tensor::new(logits.shape().to_vec(), grad)?;
            let grads = net.backward_impl(&trace, &grad, false)?;
            opt.step(net, &grads)?;
        }
        let mean_loss = loss_sum / data.len() as f64;
        if !mean_loss.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        curve.push(EpochStats {
            epoch,
            mean_loss,
            train_accuracy: correct as f64 / data.len() as f64,
        });
        lr *= cfg.lr_decay;
        opt.set_lr(lr);
    }
    Ok(curve)
}

/// Applies layers `[start, end)` of `net` to every sample, in chunks.
pub(crate) fn map_chunked<S: Scalar>(
    net: &Network<S>,
    images: &Tensor<S>,
    start: usize,
    end: usize,
) -> Result<Tensor<S>> {
    const CHUNK: usize = 256;
    let n = images.batch();
    let mut out_shape = vec![n];
    out_shape.extend_from_slice(&net.activation_shapes()[end]);
    let mut data = Vec::with_capacity(out_shape.iter().product());
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(CHUNK) {
        let x = images.select(chunk);
        data.extend_from_slice(net.forward_range(&x, start, end)?.data());
    }
    Tensor::new(out_shape, data)
}

/// Trains the mediator on fine labels over every class in the map.
pub fn train_mediator<S: Scalar>(
    ens: &mut Ensemble<S>,
    data: &LabeledDataset<S>,
    cfg: &TrainConfig,
) -> Result<Vec<EpochStats>> {
    if ens.state.experts.iter().any(|&t| t) {
        return Err(Error::NotReady(
            "experts were already derived from this mediator; start a new ensemble".into(),
        ));
    }
    let hist = data.histogram(ens.n_classes());
    if let Some(missing) = hist.iter().position(|&c| c == 0) {
        return Err(Error::MissingClass(missing));
    }
    let mut full = ens.mediator();
    for i in 0..full.len() {
        full.set_frozen(i, false);
    }
    let curve = train_network(&mut full, data, &cfg.stage(cfg.epochs, "mediator", 0))?;
    let (shared, body) = full.split_at(ens.split());
    ens.shared = shared;
    ens.mediator = body;
    ens.experts.clear();
    ens.state = crate::ensemble::TrainState {
        mediator: true,
        ..Default::default()
    };
    Ok(curve)
}

/// Trains expert `i` on its superclass only, starting from the mediator.
/// The shared prefix is frozen, so its output is computed once and the
/// expert body is trained on those features.
pub fn train_expert<S: Scalar>(
    ens: &mut Ensemble<S>,
    i: usize,
    data: &LabeledDataset<S>,
    cfg: &TrainConfig,
) -> Result<Vec<EpochStats>> {
    if !ens.state.mediator {
        return Err(Error::NotReady(
            "train the mediator before the experts".into(),
        ));
    }
    if ens.experts.is_empty() {
        ens.derive_experts()?;
    }
    let sub = restrict_to_superclass(data, &ens.map, i)?;
    let features = map_chunked(&ens.shared, &sub.data.images, 0, ens.shared.len())?;
    let local = LabeledDataset::new(features, sub.data.labels)?;
    let curve = train_network(
        &mut ens.experts[i].body,
        &local,
        &cfg.stage(cfg.expert_epochs, "expert", i as u64),
    )?;
    ens.state.experts[i] = true;
    ens.state.heads = false;
    Ok(curve)
}

pub fn train_experts<S: Scalar>(
    ens: &mut Ensemble<S>,
    data: &LabeledDataset<S>,
    cfg: &TrainConfig,
) -> Result<Vec<Vec<EpochStats>>> {
    (0..ens.n_experts())
        .map(|i| train_expert(ens, i, data, cfg))
        .collect()
}

/// Confidence-layer activations of expert `i`, flattened to `(n, features)`.
fn head_features<S: Scalar>(ens: &Ensemble<S>, i: usize, images: &Tensor<S>) -> Result<Tensor<S>> {
    let full = ens.expert_network(i);
    let j = ens.config.confidence_layer_index;
    let acts = map_chunked(&full, images, 0, j + 1)?;
    let n = acts.batch();
    let f = acts.sample_len();
    acts.reshape(vec![n, f])
}

fn fit_heads<S: Scalar>(
    ens: &mut Ensemble<S>,
    data: &LabeledDataset<S>,
    epochs: usize,
    cfg: &TrainConfig,
    tag: &str,
) -> Result<Vec<Vec<EpochStats>>> {
    let superclass = relabel_superclass(data, &ens.map)?;
    let mut curves = Vec::with_capacity(ens.experts.len());
    for i in 0..ens.experts.len() {
        let features = head_features(ens, i, &superclass.images)?;
        let ds = LabeledDataset::new(features, superclass.labels.clone())?;
        let curve = train_network(
            &mut ens.experts[i].head.net,
            &ds,
            &cfg.stage(epochs, tag, i as u64),
        )?;
        curves.push(curve);
    }
    Ok(curves)
}

/// Trains every confidence head on superclass labels with the expert
/// backbones frozen; only head parameters change.
pub fn train_confidence_heads<S: Scalar>(
    ens: &mut Ensemble<S>,
    data: &LabeledDataset<S>,
    cfg: &TrainConfig,
) -> Result<Vec<Vec<EpochStats>>> {
    if ens.experts.is_empty() || ens.state.experts.iter().any(|t| !t) {
        return Err(Error::NotReady(
            "train every expert before the confidence heads".into(),
        ));
    }
    let curves = fit_heads(ens, data, cfg.head_epochs, cfg, "confidence")?;
    ens.state.heads = true;
    Ok(curves)
}

#[derive(Debug, Clone)]
pub struct IncrementReport {
    pub new_classes: Vec<usize>,
    pub expert_curve: Vec<EpochStats>,
    pub head_curves: Vec<Vec<EpochStats>>,
    pub mediator_curve: Vec<EpochStats>,
}

/// Adds one superclass: trains a new expert on its data, grows every
/// confidence head by one output and re-fits them for
/// `confidence_finetune_epochs`, and grows the mediator's output layer by
/// the new class count and fine-tunes it. Existing expert bodies and the
/// shared prefix are not touched.
///
/// `data` must hold samples of both old and new classes; `new_map` must
/// equal the current map plus exactly one appended superclass.
pub fn add_expert_incremental<S: Scalar>(
    ens: &mut Ensemble<S>,
    data: &LabeledDataset<S>,
    new_map: &SuperclassMap,
    cfg: &TrainConfig,
) -> Result<IncrementReport> {
    ens.check_ready()?;
    let new_classes = ens.map.new_classes_in(new_map)?;
    let hist = data.histogram(new_map.n_classes());
    if let Some(&missing) = new_classes.iter().find(|&&c| hist[c] == 0) {
        return Err(Error::MissingClass(missing));
    }
    let new_id = ens.n_experts();
    let n_after = new_id + 1;

    // new expert, derived from the (not yet grown) mediator
    ens.map = new_map.clone();
    ens.config.n_experts = n_after;
    let mediator = ens.mediator();
    let expert = ens.new_expert(&mediator, new_id, n_after)?;
    ens.experts.push(expert);
    ens.state.experts.push(false);
    let expert_curve = train_expert(ens, new_id, data, cfg)?;

    // grow the existing heads N → N+1 and re-fit all of them
    for i in 0..new_id {
        let grown = ens.experts[i]
            .head
            .extend(1, &mut rng_for(ens.seed, "head-grow", i as u64))?;
        ens.experts[i].head = grown;
    }
    let head_curves = fit_heads(
        ens,
        data,
        cfg.confidence_finetune_epochs,
        cfg,
        "confidence-finetune",
    )?;
    ens.state.heads = true;

    // flat increment of the mediator output, fine-tuned above the shared prefix
    ens.mediator = crate::builder::extend_output_layer(
        &ens.mediator,
        new_classes.len(),
        &mut rng_for(ens.seed, "mediator-grow", new_id as u64),
    )?;
    let features = map_chunked(&ens.shared, &data.images, 0, ens.shared.len())?;
    let ds = LabeledDataset::new(features, data.labels.clone())?;
    let mediator_curve = train_network(
        &mut ens.mediator,
        &ds,
        &cfg.stage(
            cfg.increment_mediator_epochs,
            "mediator-finetune",
            new_id as u64,
        ),
    )?;

    Ok(IncrementReport {
        new_classes,
        expert_curve,
        head_curves,
        mediator_curve,
    })
}
