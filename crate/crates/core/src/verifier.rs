//! Watermark verification, the one-tailed binomial test and ROC metrics.
//!
//! Verification needs the codebook, the cluster table and the key, but never
//! the generating model.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::classifier::{predict_clusters, CcModel};
use crate::codebook::Codebook;
use crate::error::{invalid, Error, Result};
use crate::greenset::Watermark;
use crate::pixelcodec::{encode, Image};
use crate::tokens::TokenGrid;

/// How an image is mapped back to clusters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VerifyMode {
    /// Re-encode with the codebook, then look up each token's cluster.
    Vq,
    /// Predict clusters directly with a trained cluster classifier.
    Cc,
}

impl fmt::Display for VerifyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VerifyMode::Vq => "vq",
            VerifyMode::Cc => "cc",
        })
    }
}

impl FromStr for VerifyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vq" => Ok(VerifyMode::Vq),
            "cc" => Ok(VerifyMode::Cc),
            _ => invalid(format!("unknown verification mode {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub green_count: usize,
    /// Number of scored positions, `h * w - 1`.
    pub total: usize,
    pub green_fraction: f64,
    pub p_value: f64,
    pub mode: VerifyMode,
}

impl VerificationReport {
    fn from_counts(green_count: usize, total: usize, gamma: f64, mode: VerifyMode) -> Result<Self> {
        let green_fraction = if total == 0 { 0.0 } else { green_count as f64 / total as f64 };
        Ok(Self { green_count, total, green_fraction, p_value: binom_p_value(green_count, total, gamma)?, mode })
    }

    /// Whether the null hypothesis is rejected at significance `rho`.
    pub fn is_watermarked(&self, rho: f64) -> bool {
        self.p_value <= rho
    }
}

/// Counts green positions from the second token on. Returns `(green, T)`.
pub fn count_green(grid: &TokenGrid, watermark: &Watermark) -> Result<(usize, usize)> {
    if grid.is_empty() {
        return invalid("cannot verify an empty token grid");
    }
    grid.check_vocab(watermark.clusters().vocab_size())?;
    let clusters: Vec<usize> = grid.tokens.iter().map(|&t| watermark.clusters().cluster(t)).collect();
    count_green_clusters(&clusters, watermark)
}

/// Like [`count_green`] but on a raster sequence of cluster ids.
pub fn count_green_clusters(clusters: &[usize], watermark: &Watermark) -> Result<(usize, usize)> {
    if clusters.is_empty() {
        return invalid("cannot verify an empty cluster grid");
    }
    let k = watermark.config().k();
    if let Some(c) = clusters.iter().find(|&&c| c >= k) {
        return invalid(format!("cluster id {c} out of range for k = {k}"));
    }
    let green = clusters.windows(2).filter(|pair| watermark.is_green_cluster(pair[0], pair[1])).count();
    Ok((green, clusters.len() - 1))
}

/// One-tailed binomial p-value `P[X >= green_count]` for `X ~ Binomial(total, gamma)`,
/// summed in log space.
pub fn binom_p_value(green_count: usize, total: usize, gamma: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&gamma) {
        return invalid(format!("gamma must be in [0, 1], got {gamma}"));
    }
    if green_count > total {
        return invalid(format!("green count {green_count} exceeds total {total}"));
    }
    if green_count == 0 || gamma == 1.0 {
        return Ok(1.0);
    }
    if gamma == 0.0 {
        return Ok(0.0);
    }
    let (ln_p, ln_q) = (gamma.ln(), (-gamma).ln_1p());
    let mut ln_choose = 0.0;
    for j in 1..green_count {
        ln_choose += ((total - j + 1) as f64 / j as f64).ln();
    }
    let mut terms = Vec::with_capacity(total - green_count + 1);
    for j in green_count..=total {
        ln_choose += ((total - j + 1) as f64 / j as f64).ln();
        terms.push(ln_choose + j as f64 * ln_p + (total - j) as f64 * ln_q);
    }
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = terms.iter().map(|t| (t - max).exp()).sum();
    Ok((max + sum.ln()).exp().clamp(0.0, 1.0))
}

/// Verifies a token grid directly (no image round trip).
pub fn verify_tokens(grid: &TokenGrid, watermark: &Watermark) -> Result<VerificationReport> {
    let (green, total) = count_green(grid, watermark)?;
    VerificationReport::from_counts(green, total, watermark.gamma(), VerifyMode::Vq)
}

/// Per-position clusters recovered from an image in the given mode.
pub fn recover_clusters(
    image: &Image,
    codebook: &Codebook,
    watermark: &Watermark,
    mode: VerifyMode,
    cc_model: Option<&CcModel>,
) -> Result<Vec<usize>> {
    match mode {
        VerifyMode::Vq => {
            let grid = encode(image, codebook)?;
            Ok(grid.tokens.iter().map(|&t| watermark.clusters().cluster(t)).collect())
        }
        VerifyMode::Cc => {
            let model = cc_model.ok_or_else(|| Error::InvalidArgument("cc mode requires a cluster classifier".into()))?;
            if model.k != watermark.config().k() {
                return invalid(format!("classifier predicts {} clusters, watermark uses {}", model.k, watermark.config().k()));
            }
            predict_clusters(image, model)
        }
    }
}

pub fn verify_image(
    image: &Image,
    codebook: &Codebook,
    watermark: &Watermark,
    mode: VerifyMode,
    cc_model: Option<&CcModel>,
) -> Result<VerificationReport> {
    if watermark.clusters().vocab_size() != codebook.vocab_size() {
        return invalid("cluster table and codebook disagree on vocabulary size");
    }
    let clusters = recover_clusters(image, codebook, watermark, mode, cc_model)?;
    let (green, total) = count_green_clusters(&clusters, watermark)?;
    VerificationReport::from_counts(green, total, watermark.gamma(), mode)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocMetrics {
    pub auc: f64,
    pub tpr_at_fpr: f64,
    /// Positives scoring at or above this value count as detected.
    pub threshold: f64,
}

/// AUC (Mann-Whitney, ties count one half) and the true-positive rate at the
/// smallest negative score whose exceedance fraction among negatives is at
/// most `fpr_target`. When no negative score qualifies the threshold sits just
/// above the largest negative.
pub fn roc_metrics(pos_scores: &[f64], neg_scores: &[f64], fpr_target: f64) -> Result<RocMetrics> {
    if pos_scores.is_empty() || neg_scores.is_empty() {
        return invalid("ROC metrics need nonempty positive and negative score lists");
    }
    if pos_scores.iter().chain(neg_scores).any(|s| s.is_nan()) {
        return invalid("scores must not be NaN");
    }
    let mut neg = neg_scores.to_vec();
    neg.sort_by(f64::total_cmp);
    let n_neg = neg.len() as f64;

    let mut wins = 0.0;
    for &p in pos_scores {
        let below = neg.partition_point(|&n| n < p);
        let not_above = neg.partition_point(|&n| n <= p);
        wins += below as f64 + 0.5 * (not_above - below) as f64;
    }
    let auc = wins / (pos_scores.len() as f64 * n_neg);

    // Negatives at or above neg[i] number len - partition_point(< neg[i]).
    let threshold = neg
        .iter()
        .copied()
        .find(|&t| (neg.len() - neg.partition_point(|&n| n < t)) as f64 / n_neg <= fpr_target)
        .unwrap_or_else(|| neg[neg.len() - 1].next_up());
    let detected = pos_scores.iter().filter(|&&p| p >= threshold).count();
    Ok(RocMetrics { auc, tpr_at_fpr: detected as f64 / pos_scores.len() as f64, threshold })
}
