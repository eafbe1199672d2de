use mmoe::builder::{extend_output_layer, EnsembleConfig};
use mmoe::ensemble::Ensemble;
use mmoe::gating::{gate, GatingConfig};
use mmoe::io::archive::{from_bytes, to_bytes};
use mmoe::io::idx::{load_idx, write_idx};
use mmoe::nn::ops::softmax;
use mmoe::nn::{LayerSpec, Network, Tensor};
use mmoe::partition::{LabeledDataset, SuperclassMap};
use mmoe::training::{train_network, TrainConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mlp(seed: u64) -> Network<f64> {
    let layers = vec![
        LayerSpec::fc(4, 6),
        LayerSpec::Relu,
        LayerSpec::fc(6, 5),
        LayerSpec::Relu,
        LayerSpec::fc(5, 3),
    ];
    Network::new(vec![4], layers, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn random_data(seed: u64, n: usize) -> LabeledDataset<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = (0..n * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let y = (0..n).map(|_| rng.random_range(0..3)).collect();
    LabeledDataset::new(Tensor::new(vec![n, 4], x).unwrap(), y).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // logit spread <= 30 keeps 1 - e^-30 distinguishable from 1 in f64
    #[test]
    fn softmax_is_a_distribution(logits in prop::collection::vec(-15.0f64..15.0, 1..12)) {
        let p = softmax(&logits);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().all(|&v| v > 0.0 && (v < 1.0 || logits.len() == 1)));
    }

    #[test]
    fn frozen_layers_never_move(mask in prop::collection::vec(any::<bool>(), 5), seed in 0u64..1000) {
        let mut net = mlp(seed);
        for (i, &f) in mask.iter().enumerate() {
            net.set_frozen(i, f);
        }
        let before = net.clone();
        let cfg = TrainConfig { epochs: 2, batch_size: 4, seed, ..TrainConfig::default() };
        train_network(&mut net, &random_data(seed, 12), &cfg).unwrap();
        for (i, &frozen) in mask.iter().enumerate() {
            if frozen {
                prop_assert_eq!(&net.params()[i], &before.params()[i]);
            }
        }
    }

    #[test]
    fn training_is_bit_reproducible(seed in any::<u64>()) {
        let data = random_data(seed, 10);
        let cfg = TrainConfig { epochs: 2, batch_size: 3, seed, ..TrainConfig::default() };
        let mut a = mlp(seed % 97);
        let mut b = mlp(seed % 97);
        train_network(&mut a, &data, &cfg).unwrap();
        train_network(&mut b, &data, &cfg).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn output_extension_keeps_old_logits(seed in 0u64..1000, extra in 1usize..5) {
        let net = mlp(seed);
        let grown = extend_output_layer(&net, extra, &mut ChaCha8Rng::seed_from_u64(seed + 1)).unwrap();
        let x = random_data(seed, 6).images;
        let (a, b) = (net.infer(&x).unwrap(), grown.infer(&x).unwrap());
        for s in 0..6 {
            prop_assert_eq!(a.sample(s), &b.sample(s)[..3]);
        }
        prop_assert_eq!(grown.output_shape(), &[3 + extra]);
    }

    #[test]
    fn stopping_threshold_is_the_max_margin(raw in prop::collection::vec(-512i32..512, 2..8), below in any::<bool>()) {
        let scores: Vec<f64> = raw.iter().map(|&r| r as f64 / 32.0).collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = scores.iter().cloned().fold(f64::INFINITY, f64::min);
        let margin = max - min;
        prop_assume!(margin > 0.0);
        let t = if below { margin } else { margin + 1.0 / 64.0 };
        let d = gate(&scores, &GatingConfig::new(t, 0.6).unwrap());
        prop_assert_eq!(!d.stopped.is_empty(), below);
    }

    #[test]
    fn idx_round_trip(n in 1usize..6, rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pixels: Vec<u8> = (0..n * rows * cols).map(|_| rng.random()).collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..10)).collect();
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("i.gz"), dir.path().join("l"));
        write_idx(&ip, &lp, rows, cols, &pixels, &labels).unwrap();
        let ds = load_idx::<f32>(&ip, &lp).unwrap();
        let back: Vec<u8> = ds.images.data().iter().map(|v| (v * 255.0).round() as u8).collect();
        prop_assert_eq!(back, pixels);
        prop_assert_eq!(ds.labels, labels.iter().map(|&l| l as usize).collect::<Vec<_>>());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn archive_round_trip_is_bit_exact(seed in any::<u64>(), k in 0usize..=2, n in 2usize..4) {
        let mut cfg = EnsembleConfig::mnist_slim(n, (2, 3), 8);
        cfg.shared_prefix_len = k;
        cfg.confidence_layer_index = 5;
        let map = SuperclassMap::contiguous(&vec![2; n]).unwrap();
        let ens = Ensemble::<f32>::new(cfg, map, GatingConfig::new(2.5, 0.4).unwrap(), seed).unwrap();
        let bytes = to_bytes(&ens).unwrap();
        let back: Ensemble<f32> = from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &ens);
        prop_assert_eq!(to_bytes(&back).unwrap(), bytes);
    }
}
