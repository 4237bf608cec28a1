//! Codebook, cluster table and toy model built from a [`Config`].

use std::sync::Arc;

use rgwm_core::codebook::{kmeans_cluster, sample_codebook, ClusterTable, Codebook};
use rgwm_core::pixelcodec::{decode, quantize_8bit, Image};
use rgwm_core::{TokenGrid, Watermark, WatermarkConfig};
use rgwm_generator::{generate_with_wm, ToyArModel, ToyArParams};

use crate::{CliError, CliResult, Config};

#[derive(Debug, Clone)]
pub struct Pipeline {
    pub codebook: Arc<Codebook>,
    pub table: Arc<ClusterTable>,
    pub model: ToyArModel,
}

impl Pipeline {
    pub fn build(cfg: &Config) -> CliResult<Self> {
        cfg.validate()?;
        let cb = &cfg.codebook;
        let codebook = sample_codebook(cfg.seed("codebook"), cb.vocab_size, cb.patch_size, cb.n_modes, cb.spread)?;
        let table = cluster_table(cfg, &codebook)?;
        Self::from_parts(cfg, codebook, table)
    }

    pub fn from_parts(cfg: &Config, codebook: Codebook, table: ClusterTable) -> CliResult<Self> {
        if table.vocab_size() != codebook.vocab_size() {
            return Err(CliError::Config("cluster table does not match the codebook".into()));
        }
        let codebook = Arc::new(codebook);
        let m = &cfg.model;
        let params = ToyArParams {
            alpha: m.alpha,
            beta: m.beta,
            bias_scale: m.bias_scale,
            n_classes: m.n_classes,
            seed: cfg.seed("model"),
        };
        let model = ToyArModel::new(codebook.clone(), params)?;
        Ok(Self { codebook, table: Arc::new(table), model })
    }

    pub fn watermark(&self, cfg: &Config, kappa: u64) -> CliResult<Watermark> {
        let wm = &cfg.watermark;
        Ok(Watermark::new(WatermarkConfig::new(kappa, wm.gamma, wm.delta, self.table.clone())?))
    }

    pub fn generate(&self, cfg: &Config, watermark: Option<&Watermark>, class_id: usize, seed: u64) -> CliResult<TokenGrid> {
        let sampler = cfg.sampler_config(seed);
        Ok(generate_with_wm(&self.model, watermark, class_id, cfg.generate.h, cfg.generate.w, &sampler)?)
    }

    /// Decoded image as stored on disk (8-bit).
    pub fn render(&self, grid: &TokenGrid) -> CliResult<Image> {
        Ok(quantize_8bit(&decode(grid, &self.codebook)?))
    }
}

pub fn cluster_table(cfg: &Config, codebook: &Codebook) -> CliResult<ClusterTable> {
    if cfg.cluster.identity {
        Ok(ClusterTable::identity(codebook))
    } else {
        Ok(kmeans_cluster(codebook, cfg.cluster.k, cfg.seed("kmeans"))?)
    }
}

pub fn image_id(watermarked: bool, index: usize) -> String {
    format!("{}-{index:05}", if watermarked { "wm" } else { "unwm" })
}

pub fn class_for(cfg: &Config, index: usize) -> usize {
    index % cfg.model.n_classes
}
