mod common;

use common::gradsuite::full_network_case;
use common::random_tensor;
use psn_core::model::{similarity_score, Stream};
use psn_core::{ArchitectureSpec, Mode, Model, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn reduced(patch: usize) -> ArchitectureSpec {
    ArchitectureSpec {
        patch_size: patch,
        stream_channels: vec![2, 3, 3],
        stream_pool_after: vec![0, 2],
        fusion_channels: vec![4, 3],
        fc1_width: 6,
        num_classes: 2,
    }
}

#[test]
fn full_network_gradient_check_f64() {
    let (case, checked) = full_network_case();
    assert!(checked > 300);
    assert!(case.passed(), "max relative error {}", case.error);
}

#[test]
fn paper_layout_counts_at_112() {
    let spec = ArchitectureSpec::paper(112);
    spec.validate_reference().unwrap();
    let c = spec.counts();
    assert_eq!(
        (c.stream_convs, c.fusion_convs, c.fc_layers, c.max_pools),
        (8, 2, 2, 7)
    );
    assert_eq!((c.fc1_width, c.fc2_width), (512, 2));
    let shapes = spec.param_shapes();
    let kernels: Vec<_> = shapes
        .iter()
        .filter(|(n, _)| n.ends_with(".kernel"))
        .collect();
    assert_eq!(kernels.len(), 18);
    let fc1 = shapes.iter().find(|(n, _)| n == "fc1.weight").unwrap();
    assert_eq!(fc1.1, vec![512, 4096]);
}

#[test]
fn zero_inputs_give_even_odds() {
    let mut m = Model::<f32>::build(reduced(16), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let x = Tensor::zeros(&[3, 1, 16, 16]);
    let pass = m.forward(&x, &x, Mode::Eval).unwrap();
    for &p in pass.probs().data() {
        assert!((p - 0.5).abs() < 1e-6, "{p}");
    }
}

#[test]
fn eval_forward_is_pure() {
    let mut m = Model::<f32>::build(reduced(16), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let sar = random_tensor(&[2, 1, 16, 16], 1).cast::<f32>();
    let opt = random_tensor(&[2, 1, 16, 16], 2).cast::<f32>();
    let before = m.clone();
    let a = m.forward(&sar, &opt, Mode::Eval).unwrap().probs().clone();
    let b = m.forward(&sar, &opt, Mode::Eval).unwrap().probs().clone();
    assert_eq!(a, b);
    assert_eq!(m, before);
    assert_eq!(m.predict(&sar, &opt).unwrap(), a);
}

#[test]
fn training_pass_updates_only_running_stats() {
    let mut m = Model::<f32>::build(reduced(16), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let before = m.clone();
    let x = random_tensor(&[2, 1, 16, 16], 1).cast::<f32>();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    m.forward(
        &x,
        &x,
        Mode::Train {
            dropout_rate: 0.7,
            rng: &mut rng,
            step: 1,
        },
    )
    .unwrap();
    for (name, t) in m.params.iter() {
        let changed = t != before.params.get(name).unwrap();
        assert_eq!(changed, name.contains("running_"), "{name}");
    }
}

#[test]
fn streams_are_not_shared() {
    let mut m = Model::<f64>::build(reduced(16), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let a = random_tensor(&[1, 1, 16, 16], 5);
    let b = random_tensor(&[1, 1, 16, 16], 6);
    let ab = m.predict(&a, &b).unwrap();
    let ba = m.predict(&b, &a).unwrap();
    assert_ne!(ab, ba);

    // copying the SAR stream onto the optical stream makes both halves of
    // the fusion input identical for identical inputs
    let names: Vec<String> = m
        .params
        .names()
        .filter(|n| n.starts_with("sar_"))
        .map(str::to_string)
        .collect();
    for n in names {
        let t = m.params.get(&n).unwrap().clone();
        *m.params.get_mut(&n.replacen("sar_", "opt_", 1)).unwrap() = t;
    }
    let fs = m.stream_features(Stream::Sar, &a).unwrap();
    let fo = m.stream_features(Stream::Optical, &a).unwrap();
    assert_eq!(fs, fo);
}

#[test]
fn fused_features_equal_the_full_pass() {
    let m = Model::<f32>::build(
        ArchitectureSpec::paper(64),
        &mut ChaCha8Rng::seed_from_u64(8),
    )
    .unwrap();
    let sar = random_tensor(&[2, 1, 64, 64], 1).cast::<f32>();
    let opt = random_tensor(&[2, 1, 64, 64], 2).cast::<f32>();
    let full = m.predict(&sar, &opt).unwrap();
    let fs = m.stream_features(Stream::Sar, &sar).unwrap();
    let fo = m.stream_features(Stream::Optical, &opt).unwrap();
    assert_eq!(fs.shape(), &[2, 128, 8, 8]);
    assert_eq!(m.fuse(&fs, &fo).unwrap(), full);
    let scores = similarity_score(&full);
    assert_eq!(scores.len(), 2);
    assert!(scores.iter().all(|s| (0.0..=1.0).contains(s)));
}
