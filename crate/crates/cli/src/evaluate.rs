//! Batch evaluation: N watermarked and N unwatermarked generations, every
//! perturbation applied to the watermarked images, each verified per mode and
//! scored by green fraction against the clean unwatermarked images.

use rayon::prelude::*;
use rgwm_core::classifier::CcModel;
use rgwm_core::perturb::{apply, NamedPerturbation};
use rgwm_core::verifier::{roc_metrics, verify_image, VerifyMode};
use serde::{Deserialize, Serialize};

use crate::pipeline::{class_for, image_id};
use crate::{CliError, CliResult, Config, Pipeline};

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub image_id: String,
    pub watermarked: bool,
    pub mode: VerifyMode,
    pub perturbation: String,
    pub green_count: usize,
    pub total: usize,
    pub green_fraction: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub mode: VerifyMode,
    pub perturbation: String,
    pub auc: f64,
    pub tpr: f64,
    pub threshold: f64,
    pub mean_green_fraction: f64,
    /// `AUC | TPR` to three decimals.
    pub cell: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n_images: usize,
    pub fpr: f64,
    /// Mean green fraction of the clean unwatermarked images per mode.
    pub negative_mean_green_fraction: Vec<(VerifyMode, f64)>,
    pub rows: Vec<SummaryRow>,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub rows: Vec<ResultRow>,
    pub summary: Summary,
}

impl Evaluation {
    pub fn row(&self, mode: VerifyMode, perturbation: &str) -> Option<&SummaryRow> {
        self.summary.rows.iter().find(|r| r.mode == mode && r.perturbation == perturbation)
    }
}

pub fn evaluate(cfg: &Config, pipeline: &Pipeline, cc_model: Option<&CcModel>) -> CliResult<Evaluation> {
    cfg.validate()?;
    let ev = &cfg.evaluate;
    if ev.modes.contains(&VerifyMode::Cc) && cc_model.is_none() {
        return Err(CliError::Config("cc mode requires a trained classifier (--cc-model)".into()));
    }
    let mut perturbations = vec![NamedPerturbation::clean()];
    perturbations.extend(ev.perturbations.resolve()?.into_iter().filter(|p| p.name != "clean"));
    let watermark = pipeline.watermark(cfg, cfg.watermark.kappa)?;

    let per_image = |watermarked: bool, index: usize| -> CliResult<Vec<ResultRow>> {
        let id = image_id(watermarked, index);
        let seed = cfg.seed(&format!("generate/{id}"));
        let grid = pipeline.generate(cfg, watermarked.then_some(&watermark), class_for(cfg, index), seed)?;
        let image = pipeline.render(&grid)?;
        let applied: &[NamedPerturbation] = if watermarked { &perturbations } else { &perturbations[..1] };
        let mut rows = Vec::new();
        for p in applied {
            let spec = p.spec.with_seed(cfg.seed(&format!("perturb/{}/{id}", p.name)));
            let attacked = apply(&image, &spec)?;
            for &mode in &ev.modes {
                let report = verify_image(&attacked, &pipeline.codebook, &watermark, mode, cc_model)?;
                rows.push(ResultRow {
                    image_id: id.clone(),
                    watermarked,
                    mode,
                    perturbation: p.name.clone(),
                    green_count: report.green_count,
                    total: report.total,
                    green_fraction: report.green_fraction,
                    p_value: report.p_value,
                });
            }
        }
        Ok(rows)
    };

    let jobs: Vec<(bool, usize)> = (0..ev.n_images).flat_map(|i| [(true, i), (false, i)]).collect();
    let collected = jobs.par_iter().map(|&(wm, i)| per_image(wm, i)).collect::<CliResult<Vec<_>>>()?;
    let mut rows: Vec<ResultRow> = collected.into_iter().flatten().collect();
    rows.sort_by(|a, b| {
        (&a.image_id, a.mode.to_string(), &a.perturbation).cmp(&(&b.image_id, b.mode.to_string(), &b.perturbation))
    });

    let mut summary_rows = Vec::new();
    let mut negative_means = Vec::new();
    for &mode in &ev.modes {
        let neg: Vec<f64> = rows
            .iter()
            .filter(|r| !r.watermarked && r.mode == mode && r.perturbation == "clean")
            .map(|r| r.green_fraction)
            .collect();
        negative_means.push((mode, mean(&neg)));
        for p in &perturbations {
            let pos: Vec<f64> = rows
                .iter()
                .filter(|r| r.watermarked && r.mode == mode && r.perturbation == p.name)
                .map(|r| r.green_fraction)
                .collect();
            let roc = roc_metrics(&pos, &neg, ev.fpr)?;
            summary_rows.push(SummaryRow {
                mode,
                perturbation: p.name.clone(),
                auc: roc.auc,
                tpr: roc.tpr_at_fpr,
                threshold: roc.threshold,
                mean_green_fraction: mean(&pos),
                cell: format!("{:.3} | {:.3}", roc.auc, roc.tpr_at_fpr),
            });
        }
    }
    let summary = Summary { n_images: ev.n_images, fpr: ev.fpr, negative_mean_green_fraction: negative_means, rows: summary_rows };
    Ok(Evaluation { rows, summary })
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub const RESULTS_HEADER: &str = "image_id,mode,perturbation,green_count,T,green_fraction,p_value";

pub fn results_csv(rows: &[ResultRow]) -> String {
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{:e}\n",
            r.image_id, r.mode, r.perturbation, r.green_count, r.total, r.green_fraction, r.p_value
        ));
    }
    out
}
