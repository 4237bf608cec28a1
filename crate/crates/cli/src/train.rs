//! Cluster classifier training on fresh toy generations.

use rayon::prelude::*;
use rgwm_core::classifier::{cc_train, CcTrainConfig, TrainOutcome};
use rgwm_core::TokenGrid;

use crate::pipeline::class_for;
use crate::{CliResult, Config, Pipeline};

pub fn training_grids(cfg: &Config, pipeline: &Pipeline, n_images: usize) -> CliResult<Vec<TokenGrid>> {
    (0..n_images)
        .into_par_iter()
        .map(|i| pipeline.generate(cfg, None, class_for(cfg, i), cfg.seed(&format!("train_cc/data/{i}"))))
        .collect()
}

pub fn train_config(cfg: &Config) -> CliResult<CcTrainConfig> {
    let t = &cfg.train_cc;
    Ok(CcTrainConfig {
        epochs: t.epochs,
        batch_size: t.batch_size,
        learning_rate: t.learning_rate,
        momentum: t.momentum,
        hidden: t.hidden,
        perturbations: t.perturbations.resolve()?,
        seed: cfg.seed("train_cc/shuffle"),
    })
}

pub fn train_cc(cfg: &Config, pipeline: &Pipeline) -> CliResult<TrainOutcome> {
    cfg.validate()?;
    let grids = training_grids(cfg, pipeline, cfg.train_cc.n_images)?;
    let outcome = cc_train(&pipeline.codebook, &pipeline.table, &grids, cfg.seed("train_cc/init"), &train_config(cfg)?)?;
    Ok(outcome)
}
