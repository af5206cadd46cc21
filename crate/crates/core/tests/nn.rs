mod common;

use metacount::autodiff::Tensor;
use metacount::nn::{init_model, load_checkpoint, save_checkpoint, EstimatorLayer, NetConfig};

#[test]
fn estimator_init_has_requested_variance() {
    let cfg = NetConfig {
        estimator: vec![
            EstimatorLayer { out_channels: 80, kernel: 3, dilation: 2 },
            EstimatorLayer { out_channels: 1, kernel: 1, dilation: 2 },
        ],
        ..NetConfig::default()
    };
    let model = init_model(&cfg).unwrap();
    let weights: Vec<f64> = model.estimator.iter().flat_map(|l| l.weight.data().iter().copied()).collect();
    assert!(weights.len() >= 10_000);
    let n = weights.len() as f64;
    let mean = weights.iter().sum::<f64>() / n;
    let var = weights.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / (n - 1.0);
    assert!((var - 1e-4).abs() < 0.2e-4, "{var}");
    assert!(model.estimator.iter().all(|l| l.bias.data().iter().all(|&b| b == 0.0)));
}

#[test]
fn extractor_init_is_bounded_by_fan_in() {
    let model = init_model(&NetConfig::default()).unwrap();
    for layer in &model.extractor {
        let s = layer.weight.shape();
        let bound = (6.0 / (s[1] * s[2] * s[3]) as f64).sqrt();
        assert!(layer.weight.data().iter().all(|w| w.abs() <= bound));
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = NetConfig::default();
    cfg.estimator[0].dilation = 0;
    assert!(init_model(&cfg).is_err());
    let mut cfg = NetConfig::default();
    cfg.init_std = 0.0;
    assert!(init_model(&cfg).is_err());
    let mut cfg = NetConfig::default();
    cfg.estimator.last_mut().unwrap().out_channels = 2;
    assert!(init_model(&cfg).is_err());
}

#[test]
fn forward_shape_contract() {
    let model = init_model(&NetConfig::default()).unwrap();
    let out = model.predict(&Tensor::full(&[32, 32], 0.5)).unwrap();
    assert_eq!(out.shape(), &[8, 8]);
    assert!(out.is_finite());
    assert!(model.predict(&Tensor::zeros(&[30, 32])).is_err());
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let model = init_model(&NetConfig { seed: 11, ..NetConfig::default() }).unwrap();
    save_checkpoint(&path, &model).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap(), model);
    std::fs::write(&path, b"not a checkpoint").unwrap();
    let err = load_checkpoint(&path).unwrap_err().to_string();
    assert!(err.contains("model.ckpt"), "{err}");
}
