//! Keyed context hashing and per-context green sets.
//!
//! The pipeline is pinned bit-for-bit so that an independent implementation
//! can recompute every green set:
//!
//! 1. `seed = SHA-256(kappa_be || ctx_be)[..8]` as big-endian `u64`;
//! 2. `r_j = splitmix64(seed).next() / 2^64` for `j = 0..k`;
//! 3. the green clusters are the first `floor(gamma * k)` indices of the
//!    stable ascending argsort of `r`.
//!
//! The context is the cluster of the previous token. With the identity cluster
//! table this is the token-level scheme.

use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::codebook::ClusterTable;
use crate::error::{invalid, Result};
use crate::rng::SplitMix64;

/// Number of preceding tokens hashed into the context. Only 1 is supported.
pub const CONTEXT_LEN: usize = 1;

/// Seed for the green-set PRNG of one context.
pub fn hash_context(kappa: u64, ctx_id: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(kappa.to_be_bytes());
    hasher.update(ctx_id.to_be_bytes());
    let digest = hasher.finalize();
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    u64::from_be_bytes(head)
}

/// `floor(gamma * k)` evaluated on the exact product, not the rounded one.
pub fn green_cluster_count(gamma: f64, k: usize) -> usize {
    let kf = k as f64;
    let mut n = (gamma * kf).floor();
    while n > 0.0 && gamma.mul_add(kf, -n) < 0.0 {
        n -= 1.0;
    }
    while gamma.mul_add(kf, -(n + 1.0)) >= 0.0 {
        n += 1.0;
    }
    n as usize
}

/// Sorted ids of the green clusters for one context.
pub fn green_cluster_ids(kappa: u64, ctx_cluster: usize, k: usize, gamma: f64) -> Vec<usize> {
    let mut rng = SplitMix64::new(hash_context(kappa, ctx_cluster as u64));
    let ranks: Vec<f64> = (0..k).map(|_| rng.next_ratio()).collect();
    let mut order: Vec<usize> = (0..k).collect();
    // Stable sort keeps equal ranks in index order.
    order.sort_by(|&a, &b| ranks[a].total_cmp(&ranks[b]));
    let mut green = order[..green_cluster_count(gamma, k)].to_vec();
    green.sort_unstable();
    green
}

#[derive(Debug, Clone)]
pub struct WatermarkConfig {
    /// Hash prefix (secret key).
    pub kappa: u64,
    /// Fraction of clusters marked green per context.
    pub gamma: f64,
    /// Logit bias added to green tokens.
    pub delta: f64,
    pub clusters: Arc<ClusterTable>,
}

impl WatermarkConfig {
    pub fn new(kappa: u64, gamma: f64, delta: f64, clusters: Arc<ClusterTable>) -> Result<Self> {
        if !(0.0..=1.0).contains(&gamma) {
            return invalid(format!("gamma must be in [0, 1], got {gamma}"));
        }
        if !(delta >= 0.0 && delta.is_finite()) {
            return invalid(format!("delta must be finite and non-negative, got {delta}"));
        }
        Ok(Self { kappa, gamma, delta, clusters })
    }

    pub fn k(&self) -> usize {
        self.clusters.k
    }

    pub fn context_len(&self) -> usize {
        CONTEXT_LEN
    }
}

/// Green set for a single context. The red set is the complement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GreenSet {
    pub green_clusters: Vec<usize>,
    pub green_tokens: Vec<usize>,
    pub mask: Vec<bool>,
}

pub fn compute_green_set(ctx_cluster: usize, config: &WatermarkConfig) -> Result<GreenSet> {
    let table = &config.clusters;
    if ctx_cluster >= table.k {
        return invalid(format!("context cluster {ctx_cluster} out of range for k = {}", table.k));
    }
    let green_clusters = green_cluster_ids(config.kappa, ctx_cluster, table.k, config.gamma);
    let mut is_green = vec![false; table.k];
    for &c in &green_clusters {
        is_green[c] = true;
    }
    let mask: Vec<bool> = table.assignment.iter().map(|&c| is_green[c]).collect();
    let green_tokens = mask.iter().enumerate().filter(|(_, &g)| g).map(|(t, _)| t).collect();
    Ok(GreenSet { green_clusters, green_tokens, mask })
}

pub fn token_is_green(token: usize, ctx_cluster: usize, config: &WatermarkConfig) -> Result<bool> {
    let cluster = crate::codebook::cluster_of(token, &config.clusters)?;
    if ctx_cluster >= config.k() {
        return invalid(format!("context cluster {ctx_cluster} out of range for k = {}", config.k()));
    }
    Ok(green_cluster_ids(config.kappa, ctx_cluster, config.k(), config.gamma).binary_search(&cluster).is_ok())
}

/// A [`WatermarkConfig`] with every context's green set precomputed.
///
/// Lookups are equivalent to calling [`compute_green_set`] per context.
#[derive(Debug, Clone)]
pub struct Watermark {
    config: WatermarkConfig,
    /// `k x k`, indexed `[ctx * k + cluster]`.
    green_clusters: Vec<bool>,
    /// `k x |V|`, indexed `[ctx * |V| + token]`.
    token_masks: Vec<bool>,
}

impl Watermark {
    pub fn new(config: WatermarkConfig) -> Self {
        let k = config.k();
        let vocab = config.clusters.vocab_size();
        let mut green_clusters = vec![false; k * k];
        let mut token_masks = vec![false; k * vocab];
        for ctx in 0..k {
            let row = &mut green_clusters[ctx * k..(ctx + 1) * k];
            for c in green_cluster_ids(config.kappa, ctx, k, config.gamma) {
                row[c] = true;
            }
            let mask = &mut token_masks[ctx * vocab..(ctx + 1) * vocab];
            for (m, &c) in mask.iter_mut().zip(&config.clusters.assignment) {
                *m = row[c];
            }
        }
        Self { config, green_clusters, token_masks }
    }

    pub fn config(&self) -> &WatermarkConfig {
        &self.config
    }

    pub fn clusters(&self) -> &ClusterTable {
        &self.config.clusters
    }

    pub fn gamma(&self) -> f64 {
        self.config.gamma
    }

    pub fn delta(&self) -> f64 {
        self.config.delta
    }

    #[inline]
    pub fn is_green_cluster(&self, ctx_cluster: usize, cluster: usize) -> bool {
        self.green_clusters[ctx_cluster * self.config.k() + cluster]
    }

    /// Token-level bias mask for the context `ctx_cluster`.
    pub fn mask(&self, ctx_cluster: usize) -> &[bool] {
        let vocab = self.config.clusters.vocab_size();
        &self.token_masks[ctx_cluster * vocab..(ctx_cluster + 1) * vocab]
    }

    /// Whether `token` is green when preceded by `prev_token`.
    #[inline]
    pub fn is_green_after(&self, prev_token: usize, token: usize) -> bool {
        let table = &self.config.clusters;
        self.is_green_cluster(table.cluster(prev_token), table.cluster(token))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::{kmeans_cluster, sample_codebook};

    fn identity_config(vocab: usize, gamma: f64, kappa: u64) -> WatermarkConfig {
        let cb = sample_codebook(1, vocab, 1, 1.max(vocab / 4), 0.1).unwrap();
        WatermarkConfig::new(kappa, gamma, 2.0, Arc::new(ClusterTable::identity(&cb))).unwrap()
    }

    #[test]
    fn hash_matches_reference_digest() {
        // SHA-256 of 16 zero bytes starts with 374708fff7719dd5.
        assert_eq!(hash_context(0, 0), 0x374708fff7719dd5);
        assert_eq!(hash_context(1, 2), 0x8c7654ecfd7b0b62);
        assert_eq!(hash_context(2, 1), 0x705be1047ba534f1);
        assert_eq!(hash_context(9, 4), hash_context(9, 4));
    }

    #[test]
    fn reference_green_clusters() {
        // Reference pipeline run outside this crate for kappa=3, ctx=5, k=8, gamma=0.5.
        assert_eq!(hash_context(3, 5), 0x4ad0321c6c547cf3);
        let cfg = identity_config(8, 0.5, 3);
        let set = compute_green_set(5, &cfg).unwrap();
        assert_eq!(set.green_clusters, vec![0, 4, 5, 6]);
        assert_eq!(set.green_tokens, vec![0, 4, 5, 6]);
    }

    #[test]
    fn extreme_gammas() {
        let all = compute_green_set(3, &identity_config(16, 1.0, 7)).unwrap();
        assert!(all.mask.iter().all(|&m| m));
        let none = compute_green_set(3, &identity_config(16, 0.0, 7)).unwrap();
        assert!(none.mask.iter().all(|&m| !m));
        assert!(none.green_clusters.is_empty());
        for t in 0..16 {
            assert!(token_is_green(t, 2, &identity_config(16, 1.0, 7)).unwrap());
            assert!(!token_is_green(t, 2, &identity_config(16, 0.0, 7)).unwrap());
        }
    }

    #[test]
    fn exact_floor_of_product() {
        assert_eq!(green_cluster_count(0.25, 64), 16);
        assert_eq!(green_cluster_count(0.29, 100), 28); // 0.29 is slightly below 29/100
        assert_eq!(green_cluster_count(0.1, 10), 1);
        assert_eq!(green_cluster_count(1.0, 7), 7);
        assert_eq!(green_cluster_count(0.0, 7), 0);
    }

    #[test]
    fn config_validation() {
        let cb = sample_codebook(1, 4, 1, 1, 0.1).unwrap();
        let t = Arc::new(ClusterTable::identity(&cb));
        assert!(WatermarkConfig::new(0, 1.5, 1.0, t.clone()).is_err());
        assert!(WatermarkConfig::new(0, 0.5, -1.0, t.clone()).is_err());
        let cfg = WatermarkConfig::new(0, 0.5, 1.0, t).unwrap();
        assert_eq!(cfg.context_len(), 1);
        assert!(compute_green_set(4, &cfg).is_err());
    }

    #[test]
    fn mask_lookup_agrees_with_membership() {
        let cb = sample_codebook(4, 96, 1, 12, 0.05).unwrap();
        let table = Arc::new(kmeans_cluster(&cb, 12, 2).unwrap());
        let cfg = WatermarkConfig::new(11, 0.25, 2.0, table.clone()).unwrap();
        let wm = Watermark::new(cfg.clone());
        let mut rng = SplitMix64::new(77);
        for _ in 0..1000 {
            let token = rng.below(96);
            let ctx = rng.below(12);
            let expected = compute_green_set(ctx, &cfg).unwrap().mask[token];
            assert_eq!(token_is_green(token, ctx, &cfg).unwrap(), expected);
            assert_eq!(wm.mask(ctx)[token], expected);
            assert_eq!(wm.is_green_cluster(ctx, table.cluster(token)), expected);
        }
    }

    #[test]
    fn green_sets_vary_with_context() {
        for kappa in 0..5 {
            let cfg = identity_config(8, 0.5, kappa);
            let sets: Vec<_> = (0..8).map(|c| compute_green_set(c, &cfg).unwrap().green_clusters).collect();
            assert!(sets.iter().any(|s| s != &sets[0]), "kappa {kappa}");
        }
    }
}
