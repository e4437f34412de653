use gradleak_core::defenses::{compress_gradients, noisy_gradients, DefenseSpec};
use gradleak_core::grads::GradEntry;
use gradleak_core::{Error, LayerGradients, ParamKind, PrivacyModuleSpec, RandomStream, Tensor};
use proptest::prelude::*;

fn grads(arrays: &[Vec<f64>]) -> LayerGradients<f64> {
    LayerGradients::new(
        arrays
            .iter()
            .enumerate()
            .map(|(i, v)| GradEntry {
                layer: format!("l{}", i / 2),
                kind: if i % 2 == 0 { ParamKind::Weight } else { ParamKind::Bias },
                value: Tensor::new(vec![v.len()], v.clone()).unwrap(),
            })
            .collect(),
    )
}

fn nonzero() -> impl Strategy<Value = f64> {
    prop_oneof![-10.0f64..-1e-3, 1e-3f64..10.0]
}

fn arrays() -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(nonzero(), 1..60), 1..5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn compression_count_sign_and_idempotence(a in arrays(), p in 0.0f64..0.999) {
        let g = grads(&a);
        let c = compress_gradients(&g, p).unwrap();
        for (orig, out) in g.entries.iter().zip(&c.entries) {
            let n = orig.value.len();
            let zeros = out.value.data().iter().filter(|&&v| v == 0.0).count();
            prop_assert_eq!(zeros, (p * n as f64).floor() as usize);
            let kept_min = out.value.data().iter().filter(|&&v| v != 0.0).map(|v| v.abs()).fold(f64::INFINITY, f64::min);
            for (&o, &v) in orig.value.data().iter().zip(out.value.data()) {
                prop_assert!(v == 0.0 || v == o);
                if v == 0.0 {
                    prop_assert!(o.abs() <= kept_min);
                }
            }
        }
        prop_assert_eq!(compress_gradients(&c, p).unwrap(), c);
    }

    #[test]
    fn clipping_never_increases_norms(a in arrays(), k in -5.0f64..5.0, shift in -1.0f64..1.0, clip in 0.01f64..50.0) {
        let b: Vec<Vec<f64>> = a.iter().map(|v| v.iter().map(|x| k * x + shift).collect()).collect();
        let samples = vec![grads(&a), grads(&b)];
        for s in &samples {
            let out = noisy_gradients(std::slice::from_ref(s), clip, 0.0, &mut RandomStream::new(0)).unwrap();
            let (before, after) = (s.norm_sq().sqrt(), out.norm_sq().sqrt());
            prop_assert!(after <= before * (1.0 + 1e-12));
            prop_assert!(after <= clip * (1.0 + 1e-12));
        }
        // sigma 0 and norms below the threshold: plain mean
        let big = 1e6;
        let mean = noisy_gradients(&samples, big, 0.0, &mut RandomStream::new(0)).unwrap();
        let mut expected = samples[0].clone();
        expected.add_assign(&samples[1]).unwrap();
        let expected = expected.scaled(0.5);
        for (x, y) in mean.entries.iter().zip(&expected.entries) {
            for (u, v) in x.value.data().iter().zip(y.value.data()) {
                prop_assert!((u - v).abs() <= 1e-12 * v.abs().max(1.0));
            }
        }
    }
}

#[test]
fn compression_examples() {
    let g = grads(&[vec![1.0, -3.0, 2.0, 0.5]]);
    let c = compress_gradients(&g, 0.5).unwrap();
    assert_eq!(c.entries[0].value.data(), &[0.0, -3.0, 2.0, 0.0]);
    assert_eq!(compress_gradients(&g, 0.0).unwrap(), g);
    let hundred = grads(&[(1..=100).map(|i| i as f64).collect()]);
    let c = compress_gradients(&hundred, 0.99).unwrap();
    assert_eq!(c.entries[0].value.data().iter().filter(|&&v| v == 0.0).count(), 99);
    assert_eq!(c.entries[0].value.data()[99], 100.0);
    // ties go to the earlier index
    let ties = grads(&[vec![1.0, -1.0, 1.0, 2.0]]);
    let c = compress_gradients(&ties, 0.5).unwrap();
    assert_eq!(c.entries[0].value.data(), &[0.0, 0.0, 1.0, 2.0]);
    assert!(matches!(compress_gradients(&g, 1.0), Err(Error::InvalidInput(_))));
}

#[test]
fn clip_scales_by_half_at_twice_the_threshold() {
    let g = grads(&[vec![3.0, 4.0], vec![0.0]]);
    let out = noisy_gradients(&[g], 2.5, 0.0, &mut RandomStream::new(1)).unwrap();
    assert_eq!(out.entries[0].value.data(), &[1.5, 2.0]);
    assert!(matches!(noisy_gradients::<f64>(&[], 1.0, 0.0, &mut RandomStream::new(1)), Err(Error::InvalidInput(_))));
}

#[test]
fn noise_standard_deviation_follows_the_law() {
    let (clip, sigma, batch) = (20.0, 0.1, 4usize);
    let zero: Vec<LayerGradients<f64>> = (0..batch).map(|_| grads(&[vec![0.0; 10]])).collect();
    let mut rng = RandomStream::new(77);
    let mut values = Vec::new();
    for _ in 0..1000 {
        let out = noisy_gradients(&zero, clip, sigma, &mut rng).unwrap();
        values.extend_from_slice(out.entries[0].value.data());
    }
    assert_eq!(values.len(), 10_000);
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    let expected = clip * sigma / batch as f64;
    assert!((std / expected - 1.0).abs() < 0.05, "std {std} vs {expected}");
}

#[test]
fn spec_validation_and_labels() {
    assert!(DefenseSpec::NoisyGradients { clip: 0.0, noise_multiplier: 0.1 }.validate().is_err());
    assert!(DefenseSpec::NoisyGradients { clip: 1.0, noise_multiplier: -0.1 }.validate().is_err());
    assert!(DefenseSpec::Compression { ratio: 1.0 }.validate().is_err());
    assert!(DefenseSpec::Compression { ratio: 0.99 }.validate().is_ok());
    let cvb = PrivacyModuleSpec::cvb(1, 5, 0.5, 0.1);
    assert!(DefenseSpec::Precode { module: cvb }.validate().is_err());
    assert_eq!(DefenseSpec::Cvb { module: cvb }.params_label(), "P=1;kE=5;sE=0.5;beta=0.1");
    assert_eq!(DefenseSpec::NoisyGradients { clip: 20.0, noise_multiplier: 0.1 }.params_label(), "C=20;sigma=0.1");
    let toml_like = serde_json::json!({"kind": "compression", "ratio": 0.9});
    let parsed: DefenseSpec = serde_json::from_value(toml_like).unwrap();
    assert_eq!(parsed, DefenseSpec::Compression { ratio: 0.9 });
}

#[test]
fn none_passes_gradients_through() {
    let g = grads(&[vec![1.0, 2.0]]);
    assert_eq!(DefenseSpec::None.perturb(&g, &mut RandomStream::new(0)).unwrap(), g);
}
