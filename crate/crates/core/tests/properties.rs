use std::sync::Arc;

use proptest::prelude::*;
use rgwm_core::classifier::CcModel;
use rgwm_core::codebook::{kmeans, sample_codebook, ClusterTable, Codebook};
use rgwm_core::greenset::{green_cluster_count, green_cluster_ids};
use rgwm_core::perturb::{apply, PerturbKind, PerturbSpec};
use rgwm_core::pixelcodec::{decode, encode, parse_ppm, ppm_bytes, Image};
use rgwm_core::verifier::{binom_p_value, count_green, roc_metrics};
use rgwm_core::{SplitMix64, TokenGrid, Watermark, WatermarkConfig};

fn codebook_strategy() -> impl Strategy<Value = Codebook> {
    (any::<u64>(), 2usize..96, 1usize..4, 1usize..8, 0.0f64..0.3).prop_map(|(seed, vocab, p, modes, spread)| {
        sample_codebook(seed, vocab, p, modes.min(vocab), spread).unwrap()
    })
}

fn random_image(seed: u64, h: usize, w: usize) -> Image {
    let mut rng = SplitMix64::new(seed);
    Image::new(h, w, (0..h * w * 3).map(|_| rng.next_f64() as f32).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn decode_then_encode_is_identity(cb in codebook_strategy(), h in 1usize..8, w in 1usize..8, seed: u64) {
        let mut rng = SplitMix64::new(seed);
        let grid = TokenGrid::new(h, w, (0..h * w).map(|_| rng.below(cb.vocab_size())).collect()).unwrap();
        prop_assert_eq!(encode(&decode(&grid, &cb).unwrap(), &cb).unwrap(), grid);
    }

    #[test]
    fn codebook_file_round_trips(cb in codebook_strategy()) {
        let mut bytes = Vec::new();
        cb.write_to(&mut bytes).unwrap();
        let back = Codebook::read_from(bytes.as_slice()).unwrap();
        prop_assert_eq!(back.vectors(), cb.vectors());
        prop_assert_eq!(back.patch_size(), cb.patch_size());
    }

    #[test]
    fn green_set_has_floor_size(kappa: u64, k in 1usize..300, ctx_seed: usize, gamma in 0.0f64..=1.0) {
        let ids = green_cluster_ids(kappa, ctx_seed % k, k, gamma);
        prop_assert_eq!(ids.len(), green_cluster_count(gamma, k));
        prop_assert!(ids.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(ids.iter().all(|&c| c < k));
        let n = ids.len() as f64;
        prop_assert!(n <= gamma * k as f64 && gamma * k as f64 - n < 1.0 + 1e-9);
    }

    #[test]
    fn green_tokens_follow_their_clusters(seed: u64, k in 1usize..12, gamma in 0.0f64..=1.0, ctx_seed: usize) {
        let mut rng = SplitMix64::new(seed);
        let vocab = 24;
        let assignment: Vec<usize> = (0..vocab).map(|t| if t < k { t } else { rng.below(k) }).collect();
        let table = Arc::new(ClusterTable::from_assignment(k, assignment.clone(), vec![vec![0.0]; k]).unwrap());
        let wm = Watermark::new(WatermarkConfig::new(seed, gamma, 1.0, table).unwrap());
        let ctx = ctx_seed % k;
        for (t, &c) in assignment.iter().enumerate() {
            prop_assert_eq!(wm.mask(ctx)[t], wm.is_green_cluster(ctx, c));
        }
    }

    #[test]
    fn p_value_is_a_probability(t in 0usize..400, g_seed: usize, gamma in 0.0f64..=1.0) {
        let g = g_seed % (t + 1);
        let p = binom_p_value(g, t, gamma).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
        if g < t {
            prop_assert!(binom_p_value(g + 1, t, gamma).unwrap() <= p);
        }
    }

    #[test]
    fn green_count_bounded(seed: u64, h in 1usize..10, w in 1usize..10, gamma in 0.0f64..=1.0) {
        let cb = sample_codebook(seed, 20, 1, 4, 0.1).unwrap();
        let wm = Watermark::new(WatermarkConfig::new(seed, gamma, 1.0, Arc::new(ClusterTable::identity(&cb))).unwrap());
        let mut rng = SplitMix64::new(seed);
        let grid = TokenGrid::new(h, w, (0..h * w).map(|_| rng.below(20)).collect()).unwrap();
        let (green, total) = count_green(&grid, &wm).unwrap();
        prop_assert_eq!(total, h * w - 1);
        prop_assert!(green <= total);
    }

    #[test]
    fn perturbations_keep_shape_and_range(seed: u64, kind_index in 0usize..10, strength in 0.0f64..1.0) {
        let kind = PerturbKind::ALL[kind_index];
        let intensity = match kind {
            PerturbKind::JpegLike => 1.0 + 99.0 * strength,
            PerturbKind::GaussianBlur => 4.0 * strength,
            PerturbKind::Brightness | PerturbKind::Contrast | PerturbKind::Saturation => 1.0 + 4.0 * strength,
            _ => strength,
        };
        let image = random_image(seed, 9, 7);
        let spec = PerturbSpec::new(kind, intensity, seed).unwrap();
        let out = apply(&image, &spec).unwrap();
        prop_assert_eq!((out.height, out.width), (9, 7));
        prop_assert!(out.data.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(apply(&image, &spec).unwrap(), out);
    }

    #[test]
    fn ppm_round_trip_within_half_step(seed: u64, h in 1usize..9, w in 1usize..9) {
        let image = random_image(seed, h, w);
        let back = parse_ppm(&ppm_bytes(&image)).unwrap();
        prop_assert!(image.data.iter().zip(&back.data).all(|(a, b)| (a - b).abs() <= 1.0 / 510.0 + 1e-6));
    }

    #[test]
    fn kmeans_history_never_increases(seed: u64, n in 3usize..60, dim in 1usize..4, k_seed: usize) {
        let mut rng = SplitMix64::new(seed);
        let points: Vec<f64> = (0..n * dim).map(|_| rng.next_f64()).collect();
        let k = 1 + k_seed % n;
        let fit = kmeans(&points, dim, k, seed).unwrap();
        prop_assert!(fit.history.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
        prop_assert!(fit.assignment.iter().all(|&c| c < k));
    }

    #[test]
    fn auc_is_symmetric(seed: u64, n_pos in 1usize..30, n_neg in 1usize..30) {
        let mut rng = SplitMix64::new(seed);
        let pos: Vec<f64> = (0..n_pos).map(|_| (rng.below(10) as f64) / 10.0).collect();
        let neg: Vec<f64> = (0..n_neg).map(|_| (rng.below(10) as f64) / 10.0).collect();
        let a = roc_metrics(&pos, &neg, 0.1).unwrap().auc;
        let b = roc_metrics(&neg, &pos, 0.1).unwrap().auc;
        prop_assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn classifier_file_round_trips(seed: u64, p in 1usize..3, hidden in 1usize..9, k in 1usize..6) {
        let model = CcModel::random(p, hidden, k, seed).unwrap();
        let mut bytes = Vec::new();
        model.write_to(&mut bytes).unwrap();
        let back = CcModel::read_from(bytes.as_slice()).unwrap();
        for i in 0..model.param_count() {
            prop_assert_eq!(back.param(i), model.param(i) as f32 as f64);
        }
    }
}

/// Within-cluster sum of squares for an assignment of 1-D or 2-D points.
fn inertia_of(points: &[[f64; 2]], assignment: &[usize], k: usize) -> f64 {
    let mut total = 0.0;
    for c in 0..k {
        let members: Vec<&[f64; 2]> = points.iter().zip(assignment).filter(|(_, &a)| a == c).map(|(p, _)| p).collect();
        if members.is_empty() {
            continue;
        }
        let n = members.len() as f64;
        let mean = [members.iter().map(|p| p[0]).sum::<f64>() / n, members.iter().map(|p| p[1]).sum::<f64>() / n];
        total += members.iter().map(|p| (p[0] - mean[0]).powi(2) + (p[1] - mean[1]).powi(2)).sum::<f64>();
    }
    total
}

/// Smallest inertia over all 3^12 assignments.
fn brute_force_inertia(points: &[[f64; 2]]) -> f64 {
    let n = points.len();
    let mut best = f64::INFINITY;
    let mut assignment = vec![0usize; n];
    for code in 0..3usize.pow(n as u32) {
        let mut rest = code;
        for a in assignment.iter_mut() {
            *a = rest % 3;
            rest /= 3;
        }
        best = best.min(inertia_of(points, &assignment, 3));
    }
    best
}

#[test]
fn kmeans_reaches_brute_force_optimum_on_separated_groups() {
    let mut rng = SplitMix64::new(8);
    let centres = [[0.1, 0.1], [0.9, 0.2], [0.5, 0.9]];
    let points: Vec<[f64; 2]> = (0..12)
        .map(|i| {
            let c = centres[i % 3];
            [c[0] + 0.03 * rng.gaussian(), c[1] + 0.03 * rng.gaussian()]
        })
        .collect();
    let optimum = brute_force_inertia(&points);
    let flat: Vec<f64> = points.iter().flatten().copied().collect();
    for seed in 0..5 {
        let fit = kmeans(&flat, 2, 3, seed).unwrap();
        assert!((fit.inertia - optimum).abs() < 1e-9, "seed {seed}: {} vs {optimum}", fit.inertia);
        let recomputed = inertia_of(&points, &fit.assignment, 3);
        assert!((fit.inertia - recomputed).abs() < 1e-9);
    }
}

#[test]
fn kmeans_never_beats_brute_force() {
    let mut rng = SplitMix64::new(9);
    let points: Vec<[f64; 2]> = (0..12).map(|_| [rng.next_f64(), rng.next_f64()]).collect();
    let optimum = brute_force_inertia(&points);
    let flat: Vec<f64> = points.iter().flatten().copied().collect();
    for seed in 0..5 {
        let fit = kmeans(&flat, 2, 3, seed).unwrap();
        assert!(fit.inertia >= optimum - 1e-9);
    }
}
