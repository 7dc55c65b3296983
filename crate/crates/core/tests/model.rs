use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shadow_defense::model::{
    accuracy, adapt_first_layer, gradient_check, gradient_check_with, train, Architecture, Checkpoint, CnnSpec,
    Network, TrainConfig, TrainingExample,
};

fn small_spec(channels: usize) -> CnnSpec {
    CnnSpec {
        input_channels: channels,
        input_size: 8,
        classes: 3,
        architecture: Architecture::Cnn {
            conv1: 4,
            conv2: 6,
            hidden: 16,
        },
    }
}

fn random_input(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random::<f64>()).collect()
}

fn random_examples(spec: &CnnSpec, n: usize, seed: u64) -> Vec<TrainingExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = spec.input_channels * spec.input_size * spec.input_size;
    (0..n)
        .map(|i| TrainingExample {
            data: (0..len).map(|_| rng.random::<f32>()).collect(),
            label: i % spec.classes,
        })
        .collect()
}

#[test]
fn backprop_matches_finite_differences() {
    let spec = small_spec(4);
    let input = random_input(4 * 64, 3);
    let report = gradient_check(spec, &input, 1, 7).unwrap();
    assert!(report.checked >= 100, "checked {}", report.checked);
    assert!(report.max_rel_error <= 1e-4, "max relative error {}", report.max_rel_error);
}

#[test]
fn gradient_check_detects_a_scaled_gradient() {
    let spec = small_spec(4);
    let input = random_input(4 * 64, 3);
    let report = gradient_check_with(spec, &input, 1, 7, |g| {
        for t in &mut g.0 {
            t.mapv_inplace(|v| v * 1.1);
        }
    })
    .unwrap();
    assert!(report.max_rel_error > 1e-2, "max relative error {}", report.max_rel_error);
}

#[test]
fn linear_model_gradient_is_exact() {
    let spec = CnnSpec::linear(3, 5, 4);
    let input = random_input(75, 11);
    let report = gradient_check(spec, &input, 2, 5).unwrap();
    assert!(report.checked >= 100);
    assert!(report.max_abs_error <= 1e-7, "max absolute error {}", report.max_abs_error);
    assert!(report.max_rel_error <= 1e-4);
}

#[test]
fn overfits_a_small_batch() {
    let spec = small_spec(3);
    let examples = random_examples(&spec, 32, 1);
    let cfg = TrainConfig {
        epochs: 200,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let ckpt = train(&examples, spec, &cfg).unwrap();
    let net: Network<f32> = ckpt.to_network().unwrap();
    let acc = accuracy(&net, &examples).unwrap();
    assert!(acc >= 0.99, "training accuracy {acc}");
    assert_eq!(ckpt.metadata.losses.len(), 200);
    assert!(ckpt.metadata.losses[199] < ckpt.metadata.losses[0]);
}

#[test]
fn zero_learning_rate_keeps_initial_weights() {
    let spec = small_spec(3);
    let examples = random_examples(&spec, 10, 2);
    let cfg = TrainConfig {
        learning_rate: 0.0,
        epochs: 2,
        batch_size: 4,
        seed: 9,
        ..TrainConfig::default()
    };
    let ckpt = train(&examples, spec, &cfg).unwrap();
    let init = Network::<f32>::init(spec, 9).unwrap();
    assert_eq!(ckpt.to_network::<f32>().unwrap(), init);
}

#[test]
fn training_is_deterministic() {
    let spec = small_spec(3);
    let examples = random_examples(&spec, 20, 4);
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 6,
        seed: 21,
        ..TrainConfig::default()
    };
    let a = train(&examples, spec, &cfg).unwrap();
    let b = train(&examples, spec, &cfg).unwrap();
    assert_eq!(a, b);
    let c = train(&examples, spec, &TrainConfig { seed: 22, ..cfg }).unwrap();
    assert_ne!(a.tensors, c.tensors);
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let spec = small_spec(4);
    let examples = random_examples(&spec, 12, 5);
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let ckpt = train(&examples, spec, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, ckpt);
    for (a, b) in loaded.tensors.iter().zip(&ckpt.tensors) {
        let bits_a: Vec<u32> = a.data.iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u32> = b.data.iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
    }
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let spec = small_spec(3);
    let ckpt = Checkpoint::from_network(&Network::<f32>::init(spec, 0).unwrap(), Default::default());
    let bytes = ckpt.to_bytes().unwrap();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::from_bytes(&bad).is_err());
    assert!(Checkpoint::from_bytes(&bytes[..10]).is_err());
}

#[test]
fn adapting_the_first_layer_averages_rgb_filters() {
    let spec = small_spec(3);
    let net = Network::<f32>::init(spec, 1).unwrap();
    let ckpt = Checkpoint::from_network(&net, Default::default());
    let wide = adapt_first_layer(&ckpt).unwrap();
    assert_eq!(wide.spec.input_channels, 4);
    assert_eq!(wide.tensors[0].shape, vec![4, 4, 3, 3]);
    let old = &ckpt.tensors[0].data;
    let new = &wide.tensors[0].data;
    for f in 0..4 {
        for i in 0..9 {
            for c in 0..3 {
                assert_eq!(new[f * 36 + c * 9 + i], old[f * 27 + c * 9 + i]);
            }
            let mean = (old[f * 27 + i] + old[f * 27 + 9 + i] + old[f * 27 + 18 + i]) / 3.0;
            assert_eq!(new[f * 36 + 27 + i], mean);
        }
    }
    assert_eq!(&wide.tensors[1..], &ckpt.tensors[1..]);
    assert!(adapt_first_layer(&wide).is_err());
    wide.to_network::<f32>().unwrap();
}
