#![allow(dead_code)]

use std::sync::OnceLock;

use mmoe::builder::EnsembleConfig;
use mmoe::ensemble::Ensemble;
use mmoe::gating::GatingConfig;
use mmoe::io::synth_dataset;
use mmoe::partition::{LabeledDataset, SuperclassMap};
use mmoe::training::{train_confidence_heads, train_experts, train_mediator, TrainConfig};

pub fn small_config(k: usize, j: usize) -> EnsembleConfig {
    let mut cfg = EnsembleConfig::mnist_slim(2, (4, 8), 16);
    cfg.shared_prefix_len = k;
    cfg.confidence_layer_index = j;
    cfg
}

pub fn train_cfg() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        expert_epochs: 2,
        head_epochs: 3,
        seed: 5,
        ..TrainConfig::default()
    }
}

pub struct Fixture {
    pub train: LabeledDataset<f32>,
    pub test: LabeledDataset<f32>,
    pub ensemble: Ensemble<f32>,
}

pub fn synth_split() -> (LabeledDataset<f32>, LabeledDataset<f32>) {
    (
        synth_dataset(11, 4, 80, 28).unwrap(),
        synth_dataset(12, 4, 25, 28).unwrap(),
    )
}

pub fn build_trained(cfg: EnsembleConfig, train: &LabeledDataset<f32>) -> Ensemble<f32> {
    let map = SuperclassMap::contiguous(&[2, 2]).unwrap();
    let mut ens = Ensemble::new(cfg, map, GatingConfig::default(), 3).unwrap();
    let tc = train_cfg();
    train_mediator(&mut ens, train, &tc).unwrap();
    train_experts(&mut ens, train, &tc).unwrap();
    train_confidence_heads(&mut ens, train, &tc).unwrap();
    ens
}

/// A small trained ensemble on synthetic bars (4 classes, 2 superclasses),
/// with the confidence heads above the shared prefix.
pub fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let (train, test) = synth_split();
        let ensemble = build_trained(small_config(1, 5), &train);
        Fixture {
            train,
            test,
            ensemble,
        }
    })
}
