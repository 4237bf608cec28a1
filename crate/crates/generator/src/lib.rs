//! A desk-scale autoregressive token model and watermarked sampling.
//!
//! [`ToyArModel`] scores each candidate token by its codeword distance to the
//! left and upper neighbours plus a per-class bias, which gives generated
//! grids the local coherence that makes cluster-level watermarks useful.
//! [`generate_with_wm`] samples a grid in raster order and, from the second
//! token on, adds the watermark bias to the green tokens of the context.

use std::sync::Arc;

use rgwm_core::error::{Error, Result};
use rgwm_core::{Codebook, SplitMix64, TokenGrid, Watermark};

/// Hyper-parameters of [`ToyArModel`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyArParams {
    /// Coupling to the left neighbour.
    pub alpha: f64,
    /// Coupling to the upper neighbour.
    pub beta: f64,
    /// Standard deviation of the class bias table.
    pub bias_scale: f64,
    pub n_classes: usize,
    pub seed: u64,
}

impl Default for ToyArParams {
    fn default() -> Self {
        Self { alpha: 4.0, beta: 4.0, bias_scale: 1.0, n_classes: 10, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct ToyArModel {
    codebook: Arc<Codebook>,
    params: ToyArParams,
    /// `n_classes x |V|`.
    class_bias: Vec<f64>,
    /// `|V| x |V|` squared codeword distances.
    sq_dist: Vec<f64>,
}

impl ToyArModel {
    pub fn new(codebook: Arc<Codebook>, params: ToyArParams) -> Result<Self> {
        if params.n_classes == 0 {
            return Err(Error::InvalidArgument("n_classes must be positive".into()));
        }
        for (name, v) in [("alpha", params.alpha), ("beta", params.beta), ("bias_scale", params.bias_scale)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        let vocab = codebook.vocab_size();
        let mut rng = SplitMix64::new(params.seed);
        let class_bias = (0..params.n_classes * vocab).map(|_| params.bias_scale * rng.gaussian()).collect();
        let mut sq_dist = vec![0.0; vocab * vocab];
        for a in 0..vocab {
            for b in (a + 1)..vocab {
                let d: f64 = codebook
                    .vector(a)
                    .iter()
                    .zip(codebook.vector(b))
                    .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
                    .sum();
                sq_dist[a * vocab + b] = d;
                sq_dist[b * vocab + a] = d;
            }
        }
        Ok(Self { codebook, params, class_bias, sq_dist })
    }

    pub fn codebook(&self) -> &Codebook {
        &self.codebook
    }

    pub fn params(&self) -> &ToyArParams {
        &self.params
    }

    pub fn vocab_size(&self) -> usize {
        self.codebook.vocab_size()
    }

    pub fn class_bias(&self, class_id: usize) -> &[f64] {
        let vocab = self.vocab_size();
        &self.class_bias[class_id * vocab..(class_id + 1) * vocab]
    }

    /// Next-token logits at raster `position` of an `h x w` grid whose first
    /// `position` entries of `tokens` are already generated:
    /// `-alpha |c_v - c_left|^2 - beta |c_v - c_up|^2 + bias[class, v]`,
    /// dropping terms for neighbours outside the grid.
    pub fn logits(&self, tokens: &[usize], h: usize, w: usize, position: usize, class_id: usize) -> Result<Vec<f64>> {
        if position >= h * w {
            return Err(Error::InvalidArgument(format!("position {position} outside {h}x{w} grid")));
        }
        if tokens.len() < position {
            return Err(Error::InvalidArgument(format!("only {} of {position} preceding tokens given", tokens.len())));
        }
        if class_id >= self.params.n_classes {
            return Err(Error::InvalidArgument(format!("class {class_id} out of range")));
        }
        let vocab = self.vocab_size();
        if let Some(t) = tokens[..position].iter().find(|&&t| t >= vocab) {
            return Err(Error::InvalidArgument(format!("token {t} out of range")));
        }
        let mut logits = self.class_bias(class_id).to_vec();
        let (row, col) = (position / w, position % w);
        let mut add = |neighbour: usize, weight: f64| {
            if weight != 0.0 {
                let dists = &self.sq_dist[neighbour * vocab..(neighbour + 1) * vocab];
                for (l, d) in logits.iter_mut().zip(dists) {
                    *l -= weight * d;
                }
            }
        };
        if col > 0 {
            add(tokens[position - 1], self.params.alpha);
        }
        if row > 0 {
            add(tokens[position - w], self.params.beta);
        }
        Ok(logits)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub temperature: f64,
    /// Keep this many most likely tokens; `>= |V|` disables truncation.
    pub top_k: usize,
    /// Nucleus mass in (0, 1]; 1 disables truncation.
    pub top_p: f64,
    pub rng_seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { temperature: 1.0, top_k: usize::MAX, top_p: 1.0, rng_seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.top_k == 0 {
            return Err(Error::InvalidArgument("top_k must be at least 1".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::InvalidArgument(format!("top_p must be in (0, 1], got {}", self.top_p)));
        }
        Ok(())
    }
}

/// Sampling distribution after biasing, temperature and truncation, as
/// `(token, unnormalised weight)` pairs in ascending token order.
pub fn biased_distribution(
    logits: &[f64],
    green_mask: Option<&[bool]>,
    delta: f64,
    sampler: &SamplerConfig,
) -> Result<Vec<(usize, f64)>> {
    sampler.validate()?;
    if let Some(mask) = green_mask {
        if mask.len() != logits.len() {
            return Err(Error::InvalidArgument("mask and logits differ in length".into()));
        }
    }
    let scaled: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(v, &l)| {
            let biased = match green_mask {
                Some(mask) if mask[v] => l + delta,
                _ => l,
            };
            biased / sampler.temperature
        })
        .collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|l| (l - max).exp()).collect();

    let vocab = logits.len();
    if sampler.top_k >= vocab && sampler.top_p >= 1.0 {
        return Ok(weights.into_iter().enumerate().collect());
    }
    // Most likely first; equal weights keep ascending token order.
    let mut ranked: Vec<usize> = (0..vocab).collect();
    ranked.sort_by(|&a, &b| scaled[b].total_cmp(&scaled[a]));
    ranked.truncate(sampler.top_k.min(vocab));
    if sampler.top_p < 1.0 {
        let mass: f64 = ranked.iter().map(|&v| weights[v]).sum();
        let mut acc = 0.0;
        let mut keep = ranked.len();
        for (i, &v) in ranked.iter().enumerate() {
            acc += weights[v];
            if acc >= sampler.top_p * mass {
                keep = i + 1;
                break;
            }
        }
        ranked.truncate(keep);
    }
    ranked.sort_unstable();
    Ok(ranked.into_iter().map(|v| (v, weights[v])).collect())
}

/// Draws one token from the biased, truncated softmax by inverse-CDF over
/// ascending token ids.
pub fn biased_sample(
    logits: &[f64],
    green_mask: Option<&[bool]>,
    delta: f64,
    sampler: &SamplerConfig,
    rng: &mut SplitMix64,
) -> Result<usize> {
    let dist = biased_distribution(logits, green_mask, delta, sampler)?;
    let total: f64 = dist.iter().map(|(_, w)| w).sum();
    if !(total > 0.0) {
        return Err(Error::Internal("sampling distribution has no mass".into()));
    }
    let target = rng.next_f64() * total;
    let mut acc = 0.0;
    let mut last = None;
    for &(token, weight) in &dist {
        if weight <= 0.0 {
            continue;
        }
        acc += weight;
        last = Some(token);
        if acc > target {
            return Ok(token);
        }
    }
    last.ok_or_else(|| Error::Internal("sampling distribution has no mass".into()))
}

/// Generates an `h x w` grid for `class_id`. With a watermark, every token
/// after the first is sampled with the green set of the previous token's
/// cluster boosted by `delta`; without one, sampling is unbiased.
pub fn generate_with_wm(
    model: &ToyArModel,
    watermark: Option<&Watermark>,
    class_id: usize,
    h: usize,
    w: usize,
    sampler: &SamplerConfig,
) -> Result<TokenGrid> {
    if h == 0 || w == 0 {
        return Err(Error::InvalidArgument("grid dimensions must be positive".into()));
    }
    sampler.validate()?;
    if let Some(wm) = watermark {
        if wm.clusters().vocab_size() != model.vocab_size() {
            return Err(Error::InvalidArgument("watermark cluster table does not match the model vocabulary".into()));
        }
    }
    let mut rng = SplitMix64::new(sampler.rng_seed);
    let mut tokens = Vec::with_capacity(h * w);
    for position in 0..h * w {
        let logits = model.logits(&tokens, h, w, position, class_id)?;
        let token = match (watermark, position) {
            (Some(wm), i) if i > 0 => {
                let ctx = wm.clusters().cluster(tokens[i - 1]);
                biased_sample(&logits, Some(wm.mask(ctx)), wm.delta(), sampler, &mut rng)?
            }
            _ => biased_sample(&logits, None, 0.0, sampler, &mut rng)?,
        };
        tokens.push(token);
    }
    TokenGrid::new(h, w, tokens)
}
