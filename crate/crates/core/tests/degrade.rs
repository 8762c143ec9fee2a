mod common;

use std::sync::OnceLock;

use common::{rng, uniform};
use iqvq::config::{CorpusSpec, DegradationRanges};
use iqvq::corpus::{gen_corpus, CorpusImage};
use iqvq::degrade::{
    add_noise, degrade, gaussian_blur, gaussian_kernel_1d, jpeg_roundtrip, resample_down, resample_up,
    scaled_quant_table, DegradationParams, LUMA_QUANT,
};
use iqvq::numeric::Tensor;
use iqvq::quality::{proxy_scores, CorpusNormalizer};
use iqvq::Error;
use proptest::prelude::*;

fn corpus() -> &'static [CorpusImage] {
    static C: OnceLock<Vec<CorpusImage>> = OnceLock::new();
    C.get_or_init(|| gen_corpus(&CorpusSpec { count: 64, seed: 11, ..CorpusSpec::default() }).unwrap())
}

#[test]
fn blur_examples() {
    let x = uniform(&[16, 16, 1], 0.0, 1.0, &mut rng(1));
    assert_eq!(gaussian_blur(&x, 0.0).unwrap(), x);
    let flat = Tensor::full(&[16, 16, 1], 0.3);
    assert!(gaussian_blur(&flat, 2.5).unwrap().max_abs_diff(&flat) < 1e-15);
    assert!(matches!(gaussian_blur(&x, -1.0), Err(Error::Argument(_))));

    let mut impulse = Tensor::zeros(&[15, 15, 1]);
    impulse.data_mut()[7 * 15 + 7] = 1.0;
    let out = gaussian_blur(&impulse, 1.0).unwrap();
    let z: f64 = (-3..=3).map(|d: i32| (-(d * d) as f64 / 2.0).exp()).sum();
    for dy in -3i32..=3 {
        for dx in -3i32..=3 {
            let want = (-(dx * dx + dy * dy) as f64 / 2.0).exp() / (z * z);
            let got = out.data()[((7 + dy) * 15 + 7 + dx) as usize];
            assert!((got - want).abs() < 1e-15);
        }
    }
    assert_eq!(gaussian_kernel_1d(1.0).len(), 7);
    assert!((gaussian_kernel_1d(2.3).iter().sum::<f64>() - 1.0).abs() < 1e-15);
}

#[test]
fn resample_examples() {
    let x = Tensor::new(&[2, 2, 1], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
    let down = resample_down(&x, 2).unwrap();
    assert_eq!(down.shape(), &[1, 1, 1]);
    assert_eq!(down.data(), &[0.5]);
    assert_eq!(resample_up(&down, 2).unwrap(), Tensor::full(&[2, 2, 1], 0.5));
    let y = uniform(&[8, 8, 1], 0.0, 1.0, &mut rng(2));
    assert_eq!(resample_down(&y, 1).unwrap(), y);
    assert_eq!(resample_up(&y, 1).unwrap(), y);
    let flat = Tensor::full(&[8, 8, 1], 0.7);
    assert!(resample_down(&flat, 4).unwrap().data().iter().all(|v| (v - 0.7).abs() < 1e-15));
    assert!(matches!(resample_down(&y, 3), Err(Error::Argument(_))));
}

#[test]
fn noise_examples() {
    let x = Tensor::full(&[64, 64, 1], 0.5);
    assert_eq!(add_noise(&x, 0.0, 3).unwrap(), x);
    let a = add_noise(&x, 20.0, 3).unwrap();
    assert_eq!(a, add_noise(&x, 20.0, 3).unwrap());
    assert_ne!(a, add_noise(&x, 20.0, 4).unwrap());
    let d: Vec<f64> = a.data().iter().map(|v| v - 0.5).collect();
    let m = d.iter().sum::<f64>() / d.len() as f64;
    let sd = (d.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (d.len() - 1) as f64).sqrt();
    let target = 20.0 / 255.0;
    assert!((sd - target).abs() <= 0.15 * target, "{sd}");
}

#[test]
fn jpeg_examples() {
    assert_eq!(scaled_quant_table(50).unwrap(), LUMA_QUANT);
    assert!(scaled_quant_table(100).unwrap().iter().all(|&e| e == 1));
    assert!(scaled_quant_table(0).is_err());
    let flat = Tensor::full(&[16, 16, 1], 0.5);
    let out = jpeg_roundtrip(&flat, 90).unwrap();
    assert!(out.max_abs_diff(&flat) <= 0.01);
    // Level shifting sends zero to -128, which q = 50 reproduces exactly
    // (DC step 16 divides 8·128); finer tables may leave a one-count offset.
    let zero = Tensor::zeros(&[16, 16, 1]);
    assert_eq!(jpeg_roundtrip(&zero, 50).unwrap(), zero);
    assert!(matches!(jpeg_roundtrip(&Tensor::zeros(&[12, 16, 1]), 50), Err(Error::Argument(_))));
    assert!(matches!(jpeg_roundtrip(&Tensor::zeros(&[16, 16, 2]), 50), Err(Error::Shape(_))));
}

#[test]
fn degrade_examples() {
    let x = &corpus()[0].image;
    let p = DegradationParams { sigma: 1.0, r: 1, delta: 0.0, q: 90 };
    let y = degrade(x, &p, 5).unwrap();
    assert_eq!(y.shape(), x.shape());
    assert!(proxy_scores(&y).unwrap()[0] < proxy_scores(x).unwrap()[0]);
    let p = DegradationParams { sigma: 2.7, r: 4, delta: 13.0, q: 41 };
    assert_eq!(degrade(x, &p, 9).unwrap(), degrade(x, &p, 9).unwrap());
    let bad = DegradationParams { sigma: 1.0, r: 3, delta: 0.0, q: 90 };
    assert!(degrade(x, &bad, 0).is_err());
}

#[test]
fn sampled_parameters_respect_ranges() {
    let ranges = DegradationRanges::default();
    let mut r = rng(12);
    let mut seen_r = [false; 5];
    for _ in 0..500 {
        let p = ranges.sample(&mut r, 32);
        assert!((1.0..=4.0).contains(&p.sigma));
        assert!((0.0..=20.0).contains(&p.delta));
        assert!((30..=90).contains(&p.q));
        assert!([1, 2, 4].contains(&p.r));
        seen_r[p.r] = true;
    }
    assert!(seen_r[1] && seen_r[2] && seen_r[4]);
}

#[test]
fn degradation_lowers_the_ensemble_score() {
    let imgs = corpus();
    let raw: Vec<_> = imgs.iter().map(|c| proxy_scores(&c.image).unwrap()).collect();
    let norm = CorpusNormalizer::fit(&raw).unwrap();
    let mut r = rng(13);
    let ranges = DegradationRanges::default();
    let lower = imgs[..32]
        .iter()
        .enumerate()
        .filter(|(i, c)| {
            let p = ranges.sample(&mut r, 32);
            let y = degrade(&c.image, &p, 100 + *i as u64).unwrap();
            norm.score(&y).unwrap().ensemble <= norm.score(&c.image).unwrap().ensemble
        })
        .count();
    assert!(lower >= 30, "{lower}/32");
}

/// Severity is swept with noise off, a fine JPEG table and r ≤ 2: a fixed
/// noise realization, or coefficient rounding when the whole downsampled
/// image is a single 8×8 block, can raise the gradient magnitude slightly.
#[test]
fn sharpness_never_increases_with_sigma() {
    for (i, c) in corpus()[..32].iter().enumerate() {
        let r = 1 + i % 2;
        let mut prev = f64::INFINITY;
        for k in 0..=12 {
            let p = DegradationParams { sigma: 1.0 + 0.25 * k as f64, r, delta: 0.0, q: 90 };
            let y = degrade(&c.image, &p, i as u64).unwrap();
            assert_eq!(y, degrade(&c.image, &p, i as u64).unwrap());
            let s = proxy_scores(&y).unwrap()[0];
            assert!(s <= prev, "image {i}, r {r}, sigma step {k}: {s} > {prev}");
            prev = s;
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn degrade_preserves_shape_and_range(
        seed in 0u64..10_000,
        sigma in 1.0f64..4.0,
        r in prop::sample::select(vec![1usize, 2, 4]),
        delta in 0.0f64..20.0,
        q in 30u32..=90,
    ) {
        let x = uniform(&[32, 32, 1], 0.0, 1.0, &mut rng(seed));
        let p = DegradationParams { sigma, r, delta, q };
        let y = degrade(&x, &p, seed).unwrap();
        prop_assert_eq!(y.shape(), x.shape());
        prop_assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(y, degrade(&x, &p, seed).unwrap());
    }

    #[test]
    fn blur_stays_within_the_input_range(seed in 0u64..10_000, sigma in 0.1f64..3.0) {
        let x = uniform(&[16, 16, 1], 0.0, 1.0, &mut rng(seed));
        let y = gaussian_blur(&x, sigma).unwrap();
        let lo = x.data().iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = x.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(y.data().iter().all(|v| *v >= lo - 1e-12 && *v <= hi + 1e-12));
    }
}
