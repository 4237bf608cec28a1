use std::sync::Arc;

use proptest::prelude::*;
use rgwm_core::codebook::{kmeans_cluster, sample_codebook};
use rgwm_core::verifier::count_green;
use rgwm_core::{SplitMix64, Watermark, WatermarkConfig};
use rgwm_generator::{biased_distribution, biased_sample, generate_with_wm, SamplerConfig, ToyArModel, ToyArParams};

fn model(seed: u64) -> ToyArModel {
    let cb = Arc::new(sample_codebook(seed, 64, 2, 8, 0.01).unwrap());
    ToyArModel::new(cb, ToyArParams { alpha: 0.25, beta: 0.25, bias_scale: 1.0, n_classes: 4, seed }).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn truncation_keeps_sorted_bounded_support(
        seed: u64,
        n in 1usize..40,
        top_k in 1usize..50,
        top_p in 0.01f64..=1.0,
        temperature in 0.1f64..5.0,
        delta in 0.0f64..10.0,
    ) {
        let mut rng = SplitMix64::new(seed);
        let logits: Vec<f64> = (0..n).map(|_| 3.0 * rng.gaussian()).collect();
        let mask: Vec<bool> = (0..n).map(|_| rng.next_f64() < 0.3).collect();
        let sampler = SamplerConfig { temperature, top_k, top_p, rng_seed: 0 };
        let dist = biased_distribution(&logits, Some(&mask), delta, &sampler).unwrap();
        prop_assert!(!dist.is_empty() && dist.len() <= top_k.min(n));
        prop_assert!(dist.windows(2).all(|w| w[0].0 < w[1].0));
        prop_assert!(dist.iter().any(|&(_, w)| w == 1.0));
        // Every kept token is at least as likely as every dropped one.
        let biased = |v: usize| logits[v] + if mask[v] { delta } else { 0.0 };
        let kept_min = dist.iter().map(|&(v, _)| biased(v)).fold(f64::INFINITY, f64::min);
        for v in (0..n).filter(|v| !dist.iter().any(|&(t, _)| t == *v)) {
            prop_assert!(biased(v) <= kept_min);
        }
        let token = biased_sample(&logits, Some(&mask), delta, &sampler, &mut rng).unwrap();
        prop_assert!(dist.iter().any(|&(t, _)| t == token));
    }

    #[test]
    fn generation_is_deterministic_and_in_vocab(seed: u64, h in 1usize..6, w in 1usize..6, class in 0usize..4) {
        let m = model(seed);
        let table = Arc::new(kmeans_cluster(m.codebook(), 8, seed).unwrap());
        let wm = Watermark::new(WatermarkConfig::new(seed, 0.25, 3.0, table).unwrap());
        let sampler = SamplerConfig { rng_seed: seed, ..Default::default() };
        let a = generate_with_wm(&m, Some(&wm), class, h, w, &sampler).unwrap();
        prop_assert_eq!(&a, &generate_with_wm(&m, Some(&wm), class, h, w, &sampler).unwrap());
        prop_assert!(a.tokens.iter().all(|&t| t < 64));
        prop_assert_eq!((a.h, a.w), (h, w));
    }

    #[test]
    fn first_token_ignores_the_watermark(seed: u64) {
        let m = model(seed);
        let table = Arc::new(kmeans_cluster(m.codebook(), 8, seed).unwrap());
        let wm = Watermark::new(WatermarkConfig::new(seed, 0.25, 1e9, table).unwrap());
        let sampler = SamplerConfig { rng_seed: seed, ..Default::default() };
        let plain = generate_with_wm(&m, None, 0, 3, 3, &sampler).unwrap();
        let marked = generate_with_wm(&m, Some(&wm), 0, 3, 3, &sampler).unwrap();
        prop_assert_eq!(plain.tokens[0], marked.tokens[0]);
    }
}

#[test]
fn green_fraction_grows_with_delta() {
    let m = model(3);
    let table = Arc::new(kmeans_cluster(m.codebook(), 8, 3).unwrap());
    let means: Vec<f64> = [0.0, 2.0, 5.0]
        .iter()
        .map(|&delta| {
            let wm = Watermark::new(WatermarkConfig::new(4, 0.25, delta, table.clone()).unwrap());
            let total: f64 = (0..100)
                .map(|i| {
                    let sampler = SamplerConfig { rng_seed: i, ..Default::default() };
                    let grid = generate_with_wm(&m, Some(&wm), (i % 4) as usize, 8, 8, &sampler).unwrap();
                    let (green, t) = count_green(&grid, &wm).unwrap();
                    green as f64 / t as f64
                })
                .sum();
            total / 100.0
        })
        .collect();
    assert!(means[0] < means[1] && means[1] < means[2], "{means:?}");
}
