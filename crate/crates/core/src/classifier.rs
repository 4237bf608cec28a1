//! Cluster classifier: a per-patch two-layer perceptron that maps (possibly
//! perturbed) pixels straight to token clusters, trained with cross-entropy
//! on perturbation-augmented clean generations.

use std::io::{BufRead, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codebook::{ClusterTable, Codebook};
use crate::error::{invalid, Error, Result};
use crate::perturb::{apply, builtin_sets, scaled, NamedPerturbation, PerturbSpec};
use crate::pixelcodec::{decode, patch_grid_dims, Image};
use crate::rng::SplitMix64;
use crate::tokens::TokenGrid;

const NORM_MEAN: f64 = 0.5;
const NORM_SCALE: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct CcModel {
    pub patch_size: usize,
    pub hidden: usize,
    pub k: usize,
    /// `hidden x input`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `k x hidden`, row-major.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// Gradients with the same layout as [`CcModel`]'s parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CcGrads {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    p: usize,
    #[serde(rename = "Hdim")]
    hidden: usize,
    k: usize,
}

impl CcModel {
    pub fn zeros(patch_size: usize, hidden: usize, k: usize) -> Result<Self> {
        if patch_size == 0 || hidden == 0 || k == 0 {
            return invalid("classifier dimensions must be positive");
        }
        let input = 3 * patch_size * patch_size;
        Ok(Self {
            patch_size,
            hidden,
            k,
            w1: vec![0.0; hidden * input],
            b1: vec![0.0; hidden],
            w2: vec![0.0; k * hidden],
            b2: vec![0.0; k],
        })
    }

    /// He-scaled Gaussian weights, zero biases.
    pub fn random(patch_size: usize, hidden: usize, k: usize, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(patch_size, hidden, k)?;
        let mut rng = SplitMix64::new(seed);
        let s1 = (2.0 / model.input_dim() as f64).sqrt();
        model.w1.iter_mut().for_each(|w| *w = s1 * rng.gaussian());
        let s2 = (1.0 / hidden as f64).sqrt();
        model.w2.iter_mut().for_each(|w| *w = s2 * rng.gaussian());
        Ok(model)
    }

    pub fn input_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    fn slot(&mut self, index: usize) -> &mut f64 {
        let mut i = index;
        for part in [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2] {
            if i < part.len() {
                return &mut part[i];
            }
            i -= part.len();
        }
        panic!("parameter index {index} out of range");
    }

    /// Parameter `index` in the order W1, b1, W2, b2.
    pub fn param(&self, index: usize) -> f64 {
        let mut i = index;
        for part in [&self.w1, &self.b1, &self.w2, &self.b2] {
            if i < part.len() {
                return part[i];
            }
            i -= part.len();
        }
        panic!("parameter index {index} out of range");
    }

    pub fn set_param(&mut self, index: usize, value: f64) {
        *self.slot(index) = value;
    }

    pub fn is_finite(&self) -> bool {
        self.w1.iter().chain(&self.b1).chain(&self.w2).chain(&self.b2).all(|v| v.is_finite())
    }

    fn hidden_layer(&self, patch: &[f32], pre: &mut [f64]) {
        let input = self.input_dim();
        for (h, z) in pre.iter_mut().enumerate() {
            let row = &self.w1[h * input..(h + 1) * input];
            let mut acc = self.b1[h];
            for (w, &x) in row.iter().zip(patch) {
                acc += w * (x as f64 - NORM_MEAN) * NORM_SCALE;
            }
            *z = acc;
        }
    }

    fn output_layer(&self, pre: &[f64], logits: &mut [f64]) {
        for (c, out) in logits.iter_mut().enumerate() {
            let row = &self.w2[c * self.hidden..(c + 1) * self.hidden];
            *out = self.b2[c] + row.iter().zip(pre).map(|(w, &z)| if z > 0.0 { w * z } else { 0.0 }).sum::<f64>();
        }
    }

    /// Logits for one patch of length `3 p^2`.
    pub fn forward(&self, patch: &[f32]) -> Result<Vec<f64>> {
        if patch.len() != self.input_dim() {
            return invalid(format!("patch has length {}, classifier expects {}", patch.len(), self.input_dim()));
        }
        let mut pre = vec![0.0; self.hidden];
        let mut logits = vec![0.0; self.k];
        self.hidden_layer(patch, &mut pre);
        self.output_layer(&pre, &mut logits);
        Ok(logits)
    }

    /// Writes a one-line JSON header followed by the parameters as
    /// little-endian `f32` in the order W1, b1, W2, b2.
    pub fn write_to(&self, mut out: impl Write) -> Result<()> {
        let header = ModelHeader { p: self.patch_size, hidden: self.hidden, k: self.k };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        for v in self.w1.iter().chain(&self.b1).chain(&self.w2).chain(&self.b2) {
            out.write_all(&(*v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(input: impl Read) -> Result<Self> {
        let mut reader = std::io::BufReader::new(input);
        let mut line = String::new();
        reader.read_line(&mut line)?;
        let header: ModelHeader =
            serde_json::from_str(line.trim_end()).map_err(|e| Error::Format(format!("bad model header: {e}")))?;
        let mut model = Self::zeros(header.p, header.hidden, header.k).map_err(|e| Error::Format(e.to_string()))?;
        let mut blob = Vec::new();
        reader.read_to_end(&mut blob)?;
        if blob.len() != model.param_count() * 4 {
            return Err(Error::Format(format!(
                "expected {} parameter bytes, found {}",
                model.param_count() * 4,
                blob.len()
            )));
        }
        for (i, bytes) in blob.chunks_exact(4).enumerate() {
            model.set_param(i, f32::from_le_bytes(bytes.try_into().unwrap()) as f64);
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

impl CcGrads {
    fn zeros_like(model: &CcModel) -> Self {
        Self {
            w1: vec![0.0; model.w1.len()],
            b1: vec![0.0; model.b1.len()],
            w2: vec![0.0; model.w2.len()],
            b2: vec![0.0; model.b2.len()],
        }
    }

    /// Gradient entry `index` in the order W1, b1, W2, b2.
    pub fn get(&self, index: usize) -> f64 {
        let mut i = index;
        for part in [&self.w1, &self.b1, &self.w2, &self.b2] {
            if i < part.len() {
                return part[i];
            }
            i -= part.len();
        }
        panic!("gradient index {index} out of range");
    }

    fn scale(&mut self, factor: f64) {
        for part in [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2] {
            part.iter_mut().for_each(|g| *g *= factor);
        }
    }
}

fn check_labels(model: &CcModel, patches: &[f32], labels: &[usize]) -> Result<()> {
    if patches.len() != labels.len() * model.input_dim() {
        return invalid(format!("{} patch values do not match {} labels", patches.len(), labels.len()));
    }
    if labels.is_empty() {
        return invalid("no patches given");
    }
    if let Some(l) = labels.iter().find(|&&l| l >= model.k) {
        return invalid(format!("label {l} out of range for k = {}", model.k));
    }
    Ok(())
}

fn log_softmax_at(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits[label] - lse
}

/// Mean cross-entropy over flattened patches.
pub fn patch_loss(model: &CcModel, patches: &[f32], labels: &[usize]) -> Result<f64> {
    check_labels(model, patches, labels)?;
    let mut pre = vec![0.0; model.hidden];
    let mut logits = vec![0.0; model.k];
    let mut total = 0.0;
    for (patch, &label) in patches.chunks_exact(model.input_dim()).zip(labels) {
        model.hidden_layer(patch, &mut pre);
        model.output_layer(&pre, &mut logits);
        total -= log_softmax_at(&logits, label);
    }
    Ok(total / labels.len() as f64)
}

/// Mean cross-entropy and its gradient over flattened patches.
pub fn patch_loss_and_grad(model: &CcModel, patches: &[f32], labels: &[usize]) -> Result<(f64, CcGrads)> {
    check_labels(model, patches, labels)?;
    let input = model.input_dim();
    let mut grads = CcGrads::zeros_like(model);
    let mut pre = vec![0.0; model.hidden];
    let mut logits = vec![0.0; model.k];
    let mut d_hidden = vec![0.0; model.hidden];
    let mut x = vec![0.0; input];
    let mut total = 0.0;
    for (patch, &label) in patches.chunks_exact(input).zip(labels) {
        model.hidden_layer(patch, &mut pre);
        model.output_layer(&pre, &mut logits);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let norm: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        total -= logits[label] - max - norm.ln();

        d_hidden.fill(0.0);
        for c in 0..model.k {
            let d_out = (logits[c] - max).exp() / norm - if c == label { 1.0 } else { 0.0 };
            grads.b2[c] += d_out;
            let w_row = &model.w2[c * model.hidden..(c + 1) * model.hidden];
            let g_row = &mut grads.w2[c * model.hidden..(c + 1) * model.hidden];
            for h in 0..model.hidden {
                if pre[h] > 0.0 {
                    g_row[h] += d_out * pre[h];
                    d_hidden[h] += d_out * w_row[h];
                }
            }
        }
        for (xi, &p) in x.iter_mut().zip(patch) {
            *xi = (p as f64 - NORM_MEAN) * NORM_SCALE;
        }
        for h in 0..model.hidden {
            let d = d_hidden[h];
            if d == 0.0 {
                continue;
            }
            grads.b1[h] += d;
            for (g, xi) in grads.w1[h * input..(h + 1) * input].iter_mut().zip(&x) {
                *g += d * xi;
            }
        }
    }
    let n = labels.len() as f64;
    grads.scale(1.0 / n);
    Ok((total / n, grads))
}

/// An image with the cluster id of every patch position in raster order.
#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub image: Image,
    pub clusters: Vec<usize>,
}

impl LabeledImage {
    pub fn from_grid(grid: &TokenGrid, codebook: &Codebook, table: &ClusterTable) -> Result<Self> {
        let image = decode(grid, codebook)?;
        let clusters = grid.tokens.iter().map(|&t| table.cluster(t)).collect();
        Ok(Self { image, clusters })
    }
}

fn batch_patches(batch: &[LabeledImage], model: &CcModel, perturb: &PerturbSpec) -> Result<(Vec<f32>, Vec<usize>)> {
    let mut patches = Vec::new();
    let mut labels = Vec::new();
    for (i, item) in batch.iter().enumerate() {
        let spec = perturb.with_seed(perturb.seed.wrapping_add(i as u64));
        let image = apply(&item.image, &spec)?;
        let (rows, cols) = patch_grid_dims(&image, model.patch_size)?;
        if rows * cols != item.clusters.len() {
            return invalid("label grid does not match image size");
        }
        patches.extend(image.patches(model.patch_size)?);
        labels.extend_from_slice(&item.clusters);
    }
    Ok((patches, labels))
}

/// Mean per-patch cross-entropy over all images of the batch after applying
/// `perturb` (image `i` uses seed `perturb.seed + i`).
pub fn cc_loss(batch: &[LabeledImage], model: &CcModel, perturb: &PerturbSpec) -> Result<f64> {
    let (patches, labels) = batch_patches(batch, model, perturb)?;
    patch_loss(model, &patches, &labels)
}

pub fn cc_backward(batch: &[LabeledImage], model: &CcModel, perturb: &PerturbSpec) -> Result<(f64, CcGrads)> {
    let (patches, labels) = batch_patches(batch, model, perturb)?;
    patch_loss_and_grad(model, &patches, &labels)
}

/// Largest relative error between analytic gradients and central finite
/// differences with step `h`, over `n_params` parameters drawn with `seed`.
/// Relative error is `|a - n| / max(|a|, |n|, 1e-7)`. Draws whose step can
/// cross a ReLU kink are skipped.
pub fn cc_grad_check(model: &CcModel, patches: &[f32], labels: &[usize], h: f64, n_params: usize, seed: u64) -> Result<f64> {
    if !(h > 0.0) {
        return invalid("finite-difference step must be positive");
    }
    let (_, grads) = patch_loss_and_grad(model, patches, labels)?;
    let mut rng = SplitMix64::new(seed);
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut draws = 0;
    while checked < n_params {
        draws += 1;
        if draws > 100 * n_params.max(1) {
            return Err(Error::Internal("too many parameters sit on a ReLU kink".into()));
        }
        let index = rng.below(model.param_count());
        if crosses_kink(model, patches, index, h) {
            continue;
        }
        checked += 1;
        let original = model.param(index);
        probe.set_param(index, original + h);
        let up = patch_loss(&probe, patches, labels)?;
        probe.set_param(index, original - h);
        let down = patch_loss(&probe, patches, labels)?;
        probe.set_param(index, original);
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads.get(index);
        let denom = analytic.abs().max(numeric.abs()).max(1e-7);
        worst = worst.max((analytic - numeric).abs() / denom);
    }
    Ok(worst)
}

/// Whether moving first-layer parameter `index` by `h` either way can flip a
/// hidden ReLU on some patch. Central differences are not meaningful there.
fn crosses_kink(model: &CcModel, patches: &[f32], index: usize, h: f64) -> bool {
    let input = model.input_dim();
    let w1_len = model.w1.len();
    let (unit, column) = match index {
        i if i < w1_len => (i / input, Some(i % input)),
        i if i < w1_len + model.hidden => (i - w1_len, None),
        _ => return false,
    };
    let row = &model.w1[unit * input..(unit + 1) * input];
    patches.chunks_exact(input).any(|patch| {
        let x = |j: usize| (patch[j] as f64 - NORM_MEAN) * NORM_SCALE;
        let pre = model.b1[unit] + row.iter().enumerate().map(|(j, w)| w * x(j)).sum::<f64>();
        let reach = column.map_or(h, |j| h * x(j).abs());
        pre.abs() <= 2.0 * reach
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CcTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub hidden: usize,
    pub perturbations: Vec<NamedPerturbation>,
    pub seed: u64,
}

impl Default for CcTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            learning_rate: 1e-2,
            momentum: 0.9,
            hidden: 64,
            perturbations: builtin_sets().train,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: CcModel,
    /// Mean training loss of every epoch.
    pub epoch_losses: Vec<f64>,
}

/// Trains a classifier on clean generations `dataset` (token grids) with SGD
/// and momentum. Each image in each epoch receives one perturbation drawn
/// uniformly from the configured set, scaled linearly from weak to full
/// strength over the epochs.
pub fn cc_train(
    codebook: &Codebook,
    table: &ClusterTable,
    dataset: &[TokenGrid],
    model_seed: u64,
    config: &CcTrainConfig,
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return invalid("training dataset is empty");
    }
    if config.epochs == 0 || config.batch_size == 0 {
        return invalid("epochs and batch_size must be positive");
    }
    if table.vocab_size() != codebook.vocab_size() {
        return invalid("cluster table and codebook disagree on vocabulary size");
    }
    let items = dataset
        .iter()
        .map(|g| LabeledImage::from_grid(g, codebook, table))
        .collect::<Result<Vec<_>>>()?;
    let mut model = CcModel::random(codebook.patch_size(), config.hidden, table.k, model_seed)?;
    let mut velocity = CcGrads::zeros_like(&model);
    let mut rng = SplitMix64::new(config.seed);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let fraction = (epoch + 1) as f64 / config.epochs as f64;
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut patch_count = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let mut patches = Vec::new();
            let mut labels = Vec::new();
            for &i in chunk {
                let image = if config.perturbations.is_empty() {
                    items[i].image.clone()
                } else {
                    let pick = &config.perturbations[rng.below(config.perturbations.len())];
                    let spec = scaled(&pick.spec, fraction)?.with_seed(rng.next_u64());
                    apply(&items[i].image, &spec)?
                };
                patches.extend(image.patches(model.patch_size)?);
                labels.extend_from_slice(&items[i].clusters);
            }
            let (loss, grads) = patch_loss_and_grad(&model, &patches, &labels)?;
            loss_sum += loss * labels.len() as f64;
            patch_count += labels.len();
            sgd_step(&mut model, &mut velocity, &grads, config.learning_rate, config.momentum);
        }
        let mean = loss_sum / patch_count as f64;
        log::info!("cc epoch {}/{}: loss {mean:.6} (schedule {fraction:.3})", epoch + 1, config.epochs);
        epoch_losses.push(mean);
    }
    if !model.is_finite() {
        return Err(Error::Internal("classifier parameters diverged".into()));
    }
    Ok(TrainOutcome { model, epoch_losses })
}

fn sgd_step(model: &mut CcModel, velocity: &mut CcGrads, grads: &CcGrads, lr: f64, momentum: f64) {
    let parts = [
        (&mut model.w1, &mut velocity.w1, &grads.w1),
        (&mut model.b1, &mut velocity.b1, &grads.b1),
        (&mut model.w2, &mut velocity.w2, &grads.w2),
        (&mut model.b2, &mut velocity.b2, &grads.b2),
    ];
    for (params, vel, grad) in parts {
        for ((p, v), g) in params.iter_mut().zip(vel.iter_mut()).zip(grad) {
            *v = momentum * *v + g;
            *p -= lr * *v;
        }
    }
}

/// Per-patch argmax cluster (lowest id on ties) in raster order.
pub fn predict_clusters(image: &Image, model: &CcModel) -> Result<Vec<usize>> {
    let (rows, cols) = patch_grid_dims(image, model.patch_size)?;
    let mut patch = vec![0.0f32; model.input_dim()];
    let mut pre = vec![0.0; model.hidden];
    let mut logits = vec![0.0; model.k];
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            image.read_patch(r, c, model.patch_size, &mut patch);
            model.hidden_layer(&patch, &mut pre);
            model.output_layer(&pre, &mut logits);
            let mut best = 0;
            for (i, &l) in logits.iter().enumerate() {
                if l > logits[best] {
                    best = i;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

/// Fraction of positions where `predicted` equals `truth`.
pub fn cluster_accuracy(predicted: &[usize], truth: &[usize]) -> f64 {
    let hits = predicted.iter().zip(truth).filter(|(a, b)| a == b).count();
    hits as f64 / truth.len().max(1) as f64
}
