//! Search over hash prefixes: the prefix with the best mean TPR over a
//! perturbation set wins, ties going to the smallest prefix.

use rayon::prelude::*;
use rgwm_core::classifier::CcModel;
use rgwm_core::perturb::{apply, NamedPerturbation};
use rgwm_core::pixelcodec::Image;
use rgwm_core::verifier::{roc_metrics, verify_image, VerifyMode};
use serde::{Deserialize, Serialize};

use crate::pipeline::class_for;
use crate::{CliError, CliResult, Config, Pipeline};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefixRow {
    pub kappa: u64,
    pub perturbation: String,
    pub auc: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSummary {
    pub kappa: u64,
    pub mean_tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefixReport {
    pub rows: Vec<PrefixRow>,
    pub candidates: Vec<CandidateSummary>,
    pub chosen_kappa: u64,
    pub mean_tpr: f64,
}

#[derive(Debug, Clone)]
pub struct TuneRequest<'a> {
    pub candidates: &'a [u64],
    pub n_images: usize,
    pub perturbations: &'a [NamedPerturbation],
    pub mode: VerifyMode,
    pub fpr: f64,
}

/// Clean unwatermarked images shared by every candidate.
pub fn negative_pool(cfg: &Config, pipeline: &Pipeline, n_images: usize) -> CliResult<Vec<Image>> {
    (0..n_images)
        .into_par_iter()
        .map(|i| {
            let grid = pipeline.generate(cfg, None, class_for(cfg, i), cfg.seed(&format!("tune/unwm/{i}")))?;
            pipeline.render(&grid)
        })
        .collect()
}

/// Rows for one prefix, in perturbation order.
pub fn evaluate_prefix(
    cfg: &Config,
    pipeline: &Pipeline,
    kappa: u64,
    negatives: &[Image],
    request: &TuneRequest<'_>,
    cc_model: Option<&CcModel>,
) -> CliResult<Vec<PrefixRow>> {
    let watermark = pipeline.watermark(cfg, kappa)?;
    let score = |image: &Image| -> CliResult<f64> {
        Ok(verify_image(image, &pipeline.codebook, &watermark, request.mode, cc_model)?.green_fraction)
    };
    let neg = negatives.iter().map(score).collect::<CliResult<Vec<_>>>()?;
    let positives = (0..request.n_images)
        .map(|i| {
            let grid = pipeline.generate(cfg, Some(&watermark), class_for(cfg, i), cfg.seed(&format!("tune/wm/{i}")))?;
            pipeline.render(&grid)
        })
        .collect::<CliResult<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(request.perturbations.len());
    for p in request.perturbations {
        let pos = positives
            .iter()
            .enumerate()
            .map(|(i, image)| score(&apply(image, &p.spec.with_seed(cfg.seed(&format!("tune/perturb/{}/{i}", p.name))))?))
            .collect::<CliResult<Vec<_>>>()?;
        let roc = roc_metrics(&pos, &neg, request.fpr)?;
        rows.push(PrefixRow { kappa, perturbation: p.name.clone(), auc: roc.auc, tpr: roc.tpr_at_fpr });
    }
    Ok(rows)
}

pub fn tune_prefix(
    cfg: &Config,
    pipeline: &Pipeline,
    request: &TuneRequest<'_>,
    cc_model: Option<&CcModel>,
) -> CliResult<PrefixReport> {
    if request.candidates.is_empty() {
        return Err(CliError::Config("no prefix candidates given".into()));
    }
    if request.n_images < 2 || request.perturbations.is_empty() {
        return Err(CliError::Config("prefix tuning needs n_images >= 2 and at least one perturbation".into()));
    }
    let negatives = negative_pool(cfg, pipeline, request.n_images)?;
    let per_kappa = request
        .candidates
        .par_iter()
        .map(|&kappa| evaluate_prefix(cfg, pipeline, kappa, &negatives, request, cc_model))
        .collect::<CliResult<Vec<_>>>()?;
    let candidates: Vec<CandidateSummary> = request
        .candidates
        .iter()
        .zip(&per_kappa)
        .map(|(&kappa, rows)| CandidateSummary {
            kappa,
            mean_tpr: rows.iter().map(|r| r.tpr).sum::<f64>() / rows.len() as f64,
        })
        .collect();
    let best = choose(&candidates);
    Ok(PrefixReport {
        rows: per_kappa.into_iter().flatten().collect(),
        chosen_kappa: best.kappa,
        mean_tpr: best.mean_tpr,
        candidates,
    })
}

/// Highest mean TPR, smallest prefix among ties.
pub fn choose(candidates: &[CandidateSummary]) -> &CandidateSummary {
    candidates
        .iter()
        .reduce(|best, c| {
            if c.mean_tpr > best.mean_tpr || (c.mean_tpr == best.mean_tpr && c.kappa < best.kappa) {
                c
            } else {
                best
            }
        })
        .expect("candidates are nonempty")
}

pub fn report_csv(report: &PrefixReport) -> String {
    let mut out = String::from("kappa,perturbation,auc,tpr\n");
    for r in &report.rows {
        out.push_str(&format!("{},{},{},{}\n", r.kappa, r.perturbation, r.auc, r.tpr));
    }
    out
}

pub fn summary_json(report: &PrefixReport) -> String {
    let value = serde_json::json!({
        "chosen_kappa": report.chosen_kappa,
        "mean_tpr": report.mean_tpr,
        "candidates": report.candidates,
    });
    serde_json::to_string_pretty(&value).expect("summary serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(kappa: u64, mean_tpr: f64) -> CandidateSummary {
        CandidateSummary { kappa, mean_tpr }
    }

    #[test]
    fn choose_prefers_best_then_smallest() {
        assert_eq!(choose(&[c(3, 0.5)]).kappa, 3);
        assert_eq!(choose(&[c(1, 0.5), c(2, 0.7), c(3, 0.6)]).kappa, 2);
        assert_eq!(choose(&[c(5, 0.7), c(2, 0.7), c(4, 0.1)]).kappa, 2);
    }
}
