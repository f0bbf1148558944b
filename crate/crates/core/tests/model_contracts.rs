use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use saliency_core::checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint};
use saliency_core::psam::PsamSettings;
use saliency_core::{build_model, Error, ModelConfig, Tensor, Variant};

/// Weights plus bias of a `k×k` convolution.
fn conv(cin: usize, cout: usize, k: usize) -> usize {
    cout * cin * k * k + cout
}

/// Parameter count enumerated from the architecture description.
fn expected_count(cfg: &ModelConfig) -> usize {
    let widths = &cfg.backbone_channels;
    let fpn = cfg.fpn_channels;
    let mut total = 0;
    let mut prev = cfg.in_channels;
    for &w in widths {
        total += conv(prev, w, 3) + cfg.blocks_per_stage * conv(w, w, 3);
        prev = w;
    }
    total += widths.iter().map(|&w| conv(w, fpn, 1)).sum::<usize>();
    total += (widths.len() - 1) * conv(fpn, fpn, 3);
    total += conv(fpn, 1, 3);
    if cfg.variant.has_psam() {
        total += 3 * 3 * fpn * fpn + conv(4 * fpn, fpn, 1);
    }
    if cfg.variant.has_channel_attention() {
        let hidden = fpn / cfg.se_reduction;
        total += (widths.len() - 1) * (fpn * hidden + hidden + hidden * fpn + fpn);
    }
    total
}

#[test]
fn golden_parameter_counts() {
    let golden = [(Variant::Baseline, 329_361), (Variant::BaselineSa, 342_705), (Variant::Full, 344_361)];
    for (variant, count) in golden {
        let cfg = ModelConfig::desk().with_variant(variant);
        assert_eq!(expected_count(&cfg), count, "{variant}");
        assert_eq!(build_model::<f64>(&cfg, 0).unwrap().parameter_count(), count, "{variant}");
    }
}

#[test]
fn variants_nest_and_share_initial_weights() {
    let models: Vec<_> = Variant::ALL
        .iter()
        .map(|&v| build_model::<f64>(&ModelConfig::desk().with_variant(v), 9).unwrap())
        .collect();
    for pair in models.windows(2) {
        let (small, big) = (pair[0].params(), pair[1].params());
        assert!(small.len() < big.len());
        for (name, t) in small.names().iter().zip(small.tensors()) {
            assert_eq!(big.find(name), Some(t), "{name}");
        }
    }
}

#[test]
fn logits_cover_the_input_for_random_configs() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for trial in 0..10 {
        let variant = Variant::ALL[trial % 3];
        let first_stride = [1, 2][rng.gen_range(0..2)];
        let scales = [vec![1, 1, 2], vec![1, 2, 4], vec![2, 2, 2]][rng.gen_range(0..3)].clone();
        let unit = (first_stride << 3) * scales.iter().max().unwrap();
        let fpn = [4, 8][rng.gen_range(0..2)];
        let cfg = ModelConfig {
            input_size: (unit * rng.gen_range(1..=2), unit * rng.gen_range(1..=2)),
            in_channels: 3,
            backbone_channels: (0..4).map(|_| rng.gen_range(2..=6)).collect(),
            first_stride,
            blocks_per_stage: rng.gen_range(0..=1),
            fpn_channels: fpn,
            psam: PsamSettings { scales, window: 3 },
            se_reduction: 2,
            variant,
        };
        let model = build_model::<f64>(&cfg, trial as u64).unwrap();
        let n = rng.gen_range(1..=2);
        let (h, w) = cfg.input_size;
        let x = Tensor::uniform([n, 3, h, w], 0.0, 1.0, &mut rng);
        let logits = model.logits(&x).unwrap();
        assert_eq!(logits.shape(), &[n, 1, h, w], "{cfg:?}");
        assert!(logits.is_finite());
    }
}

#[test]
fn forward_is_deterministic_and_predict_is_sigmoid() {
    let cfg = ModelConfig::desk();
    let a = build_model::<f64>(&cfg, 4).unwrap();
    let b = build_model::<f64>(&cfg, 4).unwrap();
    assert_eq!(a, b);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::uniform([1, 3, 64, 64], 0.0, 1.0, &mut rng);
    let logits = a.logits(&x).unwrap();
    assert_eq!(logits, b.logits(&x).unwrap());
    let probs = a.predict(&x).unwrap();
    for (p, z) in probs.data().iter().zip(logits.data()) {
        assert!((p - 1.0 / (1.0 + (-z).exp())).abs() < 1e-15);
        assert!(*p > 0.0 && *p < 1.0);
    }
}

#[test]
fn checkpoint_round_trip_and_variant_guard() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig::desk().with_variant(Variant::Baseline);
    let model = build_model::<f64>(&cfg, 6).unwrap();
    let path = dir.path().join("nested/m.ckpt");
    save_checkpoint(&model, &path).unwrap();
    let back = load_checkpoint::<f64>(&path).unwrap();
    let x = Tensor::uniform([1, 3, 64, 64], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    assert_eq!(back.logits(&x).unwrap(), model.logits(&x).unwrap());
    assert!(matches!(
        load_checkpoint_for::<f64>(&path, &ModelConfig::desk()),
        Err(Error::ConfigIncompatible(_))
    ));
    assert!(load_checkpoint_for::<f64>(&path, &cfg).is_ok());
}

#[test]
fn single_precision_model_runs() {
    let model = build_model::<f32>(&ModelConfig::desk(), 2).unwrap();
    let x = Tensor::<f32>::full([1, 3, 64, 64], 0.5);
    let p = model.predict(&x).unwrap();
    assert_eq!(p.shape(), &[1, 1, 64, 64]);
    assert!(p.is_finite());
}
