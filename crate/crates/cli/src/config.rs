//! Run configuration. One JSON document with a section per stage; every
//! random stream is derived from `master_seed` and a stage label.

use std::path::Path;

use rgwm_core::perturb::{builtin_set, NamedPerturbation};
use rgwm_core::rng::derive_seed;
use rgwm_core::verifier::VerifyMode;
use serde::{Deserialize, Serialize};

use crate::{CliError, CliResult};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub master_seed: u64,
    pub codebook: CodebookSection,
    pub cluster: ClusterSection,
    pub model: ModelSection,
    pub watermark: WatermarkSection,
    pub sampler: SamplerSection,
    pub generate: GenerateSection,
    pub evaluate: EvaluateSection,
    pub train_cc: TrainCcSection,
    pub tune_prefix: TunePrefixSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodebookSection {
    pub vocab_size: usize,
    pub patch_size: usize,
    pub n_modes: usize,
    pub spread: f64,
}

impl Default for CodebookSection {
    fn default() -> Self {
        Self { vocab_size: 512, patch_size: 4, n_modes: 64, spread: 0.005 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterSection {
    pub k: usize,
    /// Use one cluster per token (the no-clustering scheme).
    pub identity: bool,
}

impl Default for ClusterSection {
    fn default() -> Self {
        Self { k: 64, identity: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub alpha: f64,
    pub beta: f64,
    pub bias_scale: f64,
    pub n_classes: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { alpha: 0.25, beta: 0.25, bias_scale: 1.0, n_classes: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WatermarkSection {
    pub kappa: u64,
    pub gamma: f64,
    pub delta: f64,
}

impl Default for WatermarkSection {
    fn default() -> Self {
        Self { kappa: 1, gamma: 0.25, delta: 5.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub temperature: f64,
    /// `None` keeps the whole vocabulary.
    pub top_k: Option<usize>,
    pub top_p: f64,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self { temperature: 1.0, top_k: None, top_p: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateSection {
    pub h: usize,
    pub w: usize,
    pub class_id: usize,
}

impl Default for GenerateSection {
    fn default() -> Self {
        Self { h: 16, w: 16, class_id: 0 }
    }
}

/// Perturbations either by builtin set name or as an explicit list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerturbationChoice {
    Set(String),
    List(Vec<NamedPerturbation>),
}

impl PerturbationChoice {
    pub fn resolve(&self) -> CliResult<Vec<NamedPerturbation>> {
        match self {
            Self::Set(name) => builtin_set(name).map_err(|e| CliError::Config(e.to_string())),
            Self::List(list) => {
                for p in list {
                    p.spec.validate().map_err(|e| CliError::Config(format!("perturbation {}: {e}", p.name)))?;
                }
                Ok(list.clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    pub n_images: usize,
    pub perturbations: PerturbationChoice,
    pub modes: Vec<VerifyMode>,
    pub fpr: f64,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self { n_images: 200, perturbations: PerturbationChoice::Set("A".into()), modes: vec![VerifyMode::Vq], fpr: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainCcSection {
    pub n_images: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub hidden: usize,
    pub perturbations: PerturbationChoice,
}

impl Default for TrainCcSection {
    fn default() -> Self {
        Self {
            n_images: 1000,
            epochs: 30,
            batch_size: 16,
            learning_rate: 1e-2,
            momentum: 0.9,
            hidden: 64,
            perturbations: PerturbationChoice::Set("train".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TunePrefixSection {
    pub candidates: Vec<u64>,
    pub n_images: usize,
    pub perturbations: PerturbationChoice,
    pub mode: VerifyMode,
    pub fpr: f64,
}

impl Default for TunePrefixSection {
    fn default() -> Self {
        Self {
            candidates: (1..=8).collect(),
            n_images: 100,
            perturbations: PerturbationChoice::Set("A".into()),
            mode: VerifyMode::Vq,
            fpr: 0.01,
        }
    }
}

impl Config {
    pub fn from_json(text: &str) -> CliResult<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("invalid config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> CliResult<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn seed(&self, label: &str) -> u64 {
        derive_seed(self.master_seed, label)
    }

    pub fn validate(&self) -> CliResult<()> {
        let fail = |msg: String| Err(CliError::Config(msg));
        let cb = &self.codebook;
        if cb.vocab_size == 0 || cb.patch_size == 0 || cb.n_modes == 0 || cb.n_modes > cb.vocab_size {
            return fail(format!("codebook needs vocab_size >= n_modes >= 1 and patch_size >= 1, got {cb:?}"));
        }
        if !(cb.spread >= 0.0 && cb.spread.is_finite()) {
            return fail(format!("codebook spread must be non-negative, got {}", cb.spread));
        }
        if !self.cluster.identity && (self.cluster.k == 0 || self.cluster.k > cb.vocab_size) {
            return fail(format!("cluster k must be in 1..={}, got {}", cb.vocab_size, self.cluster.k));
        }
        if !(0.0..=1.0).contains(&self.watermark.gamma) || !(self.watermark.delta >= 0.0 && self.watermark.delta.is_finite()) {
            return fail(format!("watermark needs gamma in [0, 1] and delta >= 0, got {:?}", self.watermark));
        }
        if self.generate.h == 0 || self.generate.w == 0 {
            return fail("grid dimensions must be positive".into());
        }
        if self.model.n_classes == 0 || self.generate.class_id >= self.model.n_classes {
            return fail(format!("class {} not in 0..{}", self.generate.class_id, self.model.n_classes));
        }
        self.sampler_config(0).validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.evaluate.n_images == 0 || self.evaluate.modes.is_empty() {
            return fail("evaluate needs n_images >= 1 and at least one mode".into());
        }
        for fpr in [self.evaluate.fpr, self.tune_prefix.fpr] {
            if !(0.0..=1.0).contains(&fpr) {
                return fail(format!("fpr must be in [0, 1], got {fpr}"));
            }
        }
        if self.tune_prefix.candidates.is_empty() || self.tune_prefix.n_images < 2 {
            return fail("tune_prefix needs candidates and n_images >= 2".into());
        }
        let t = &self.train_cc;
        if t.n_images == 0 || t.epochs == 0 || t.batch_size == 0 || t.hidden == 0 {
            return fail(format!("train_cc sizes must be positive, got {t:?}"));
        }
        self.evaluate.perturbations.resolve()?;
        self.train_cc.perturbations.resolve()?;
        self.tune_prefix.perturbations.resolve()?;
        Ok(())
    }

    pub fn sampler_config(&self, rng_seed: u64) -> rgwm_generator::SamplerConfig {
        rgwm_generator::SamplerConfig {
            temperature: self.sampler.temperature,
            top_k: self.sampler.top_k.unwrap_or(usize::MAX),
            top_p: self.sampler.top_p,
            rng_seed,
        }
    }
}
