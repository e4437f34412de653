use gradleak_core::metrics::{asr, mean_std, mse, psnr, psnr_from_mse, ssim, ImageMetrics, MetricReport};
use gradleak_core::{Error, RandomStream, Tensor};
use proptest::prelude::*;
use serde::Deserialize;

#[derive(Deserialize)]
struct Case {
    shape: Vec<usize>,
    a: Vec<f64>,
    b: Vec<f64>,
    ssim: f64,
    psnr: f64,
}

fn reference_cases() -> Vec<Case> {
    let text = include_str!("fixtures/metric_reference.json");
    serde_json::from_str(text).unwrap()
}

/// Direct SSIM: every valid 11x11 window weighted by an explicit 2-D
/// Gaussian, no separable filtering.
fn naive_ssim(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let s = a.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut g1 = [0.0f64; 11];
    for (i, v) in g1.iter_mut().enumerate() {
        let d = i as f64 - 5.0;
        *v = (-d * d / (2.0 * 1.5 * 1.5)).exp();
    }
    let norm: f64 = g1.iter().sum::<f64>().powi(2);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    for ch in 0..c {
        let at = |img: &Tensor<f64>, y: usize, x: usize| img.data()[(ch * h + y) * w + x];
        let mut acc = 0.0;
        let mut count = 0.0;
        for y0 in 0..=h - 11 {
            for x0 in 0..=w - 11 {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..11 {
                    for dx in 0..11 {
                        let k = g1[dy] * g1[dx] / norm;
                        let (p, q) = (at(a, y0 + dy, x0 + dx), at(b, y0 + dy, x0 + dx));
                        ma += k * p;
                        mb += k * q;
                        saa += k * p * p;
                        sbb += k * q * q;
                        sab += k * p * q;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1.0;
            }
        }
        total += acc / count;
    }
    total / c as f64
}

fn random_image(rng: &mut RandomStream, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform()).collect()).unwrap()
}

#[test]
fn ssim_and_psnr_match_reference() {
    for (i, case) in reference_cases().iter().enumerate() {
        let a = Tensor::new(case.shape.clone(), case.a.clone()).unwrap();
        let b = Tensor::new(case.shape.clone(), case.b.clone()).unwrap();
        let s = ssim(&a, &b).unwrap();
        let p = psnr(&a, &b).unwrap();
        assert!((s - case.ssim).abs() < 1e-6, "case {i}: ssim {s} vs {}", case.ssim);
        assert!((p - case.psnr).abs() < 1e-6, "case {i}: psnr {p} vs {}", case.psnr);
    }
}

#[test]
fn ssim_matches_naive_windows() {
    let mut rng = RandomStream::new(4);
    for shape in [[1, 11, 11], [3, 14, 17], [2, 20, 12]] {
        let a = random_image(&mut rng, &shape);
        let b = random_image(&mut rng, &shape);
        let fast = ssim(&a, &b).unwrap();
        assert!((fast - naive_ssim(&a, &b)).abs() < 1e-9);
    }
}

#[test]
fn inverted_image_scores_low() {
    let mut rng = RandomStream::new(9);
    let data: Vec<f64> = (0..3 * 32 * 32).map(|_| 0.25 + 0.5 * rng.uniform()).collect();
    let a = Tensor::new(vec![3, 32, 32], data).unwrap();
    let b = a.map(|v| 1.0 - v);
    let s = ssim(&a, &b).unwrap();
    assert!(s < 0.5);
    assert!((s - naive_ssim(&a, &b)).abs() < 1e-9);
}

#[test]
fn small_images_are_rejected() {
    let a = Tensor::<f64>::zeros(&[1, 10, 32]);
    assert!(matches!(ssim(&a, &a), Err(Error::InvalidInput(_))));
    let b = Tensor::<f64>::zeros(&[1, 12, 12]);
    assert!(matches!(ssim(&b, &Tensor::zeros(&[1, 12, 13])), Err(Error::InvalidInput(_))));
}

#[test]
fn mse_psnr_examples() {
    let z = Tensor::new(vec![1], vec![0.0f64]).unwrap();
    let o = Tensor::new(vec![1], vec![1.0f64]).unwrap();
    assert_eq!(mse(&z, &o).unwrap(), 1.0);
    assert_eq!(psnr(&z, &o).unwrap(), 0.0);
    assert!((psnr_from_mse(0.01) - 20.0).abs() < 1e-12);
    assert_eq!(psnr(&z, &z).unwrap(), f64::INFINITY);
    // values outside [0, 1] are clamped first
    let big = Tensor::new(vec![1], vec![3.0f64]).unwrap();
    assert_eq!(mse(&z, &big).unwrap(), 1.0);
}

#[test]
fn asr_examples() {
    assert!((asr(&[0.6, 0.4, 0.5], 0.5).unwrap() - 200.0 / 3.0).abs() < 1e-9);
    assert_eq!(asr(&[0.1, 0.2], 0.5).unwrap(), 0.0);
    assert_eq!(asr(&[0.5, 0.9], 0.5).unwrap(), 100.0);
    assert!(matches!(asr(&[], 0.5), Err(Error::InvalidInput(_))));
}

#[test]
fn report_aggregates_every_victim() {
    let mut rng = RandomStream::new(2);
    let truth = random_image(&mut rng, &[1, 12, 12]);
    let per: Vec<ImageMetrics> = (0..5)
        .map(|i| {
            let noisy = truth.map(|v| v + 0.05 * i as f64);
            ImageMetrics::compute(&truth, &noisy).unwrap()
        })
        .collect();
    let report = MetricReport::from_victims(per.clone()).unwrap();
    let ssims: Vec<f64> = per.iter().map(|m| m.ssim).collect();
    assert_eq!(report.per_victim.len(), 5);
    assert_eq!((report.ssim_mean, report.ssim_std), mean_std(&ssims));
    assert_eq!(report.asr, asr(&ssims, 0.5).unwrap());
    assert!(per[0].psnr.is_none());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ssim_is_symmetric_and_bounded(seed in any::<u64>(), h in 11usize..16, w in 11usize..16, c in 1usize..4) {
        let mut rng = RandomStream::new(seed);
        let a = random_image(&mut rng, &[c, h, w]);
        let b = random_image(&mut rng, &[c, h, w]);
        let ab = ssim(&a, &b).unwrap();
        let ba = ssim(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&ab));
        let aa = ssim(&a, &a).unwrap();
        prop_assert!((aa - 1.0).abs() < 1e-12);
        prop_assert!(ab <= aa);
    }

    #[test]
    fn psnr_is_minus_ten_log_mse(seed in any::<u64>()) {
        let mut rng = RandomStream::new(seed);
        let a = random_image(&mut rng, &[1, 4, 4]);
        let b = random_image(&mut rng, &[1, 4, 4]);
        let m = mse(&a, &b).unwrap();
        prop_assert_eq!(psnr(&a, &b).unwrap(), -10.0 * m.log10());
        prop_assert_eq!(m, mse(&b, &a).unwrap());
    }

    #[test]
    fn asr_is_monotone_in_threshold(v in prop::collection::vec(0.0f64..1.0, 1..40), t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let a = asr(&v, lo).unwrap();
        let b = asr(&v, hi).unwrap();
        prop_assert!(b <= a);
        prop_assert!((0.0..=100.0).contains(&a));
    }
}
