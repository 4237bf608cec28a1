//! The VQ vocabulary: codebook vectors, nearest-neighbour quantization and
//! k-means cluster tables over the codewords.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::SplitMix64;

const CODEBOOK_MAGIC: &[u8; 8] = b"RGWMCBK1";
const COLLISION_STEP: f32 = 1.0 / (1u32 << 20) as f32;

pub const KMEANS_TOLERANCE: f64 = 1e-9;
pub const KMEANS_MAX_ITERATIONS: usize = 300;

/// A codebook of `vocab_size` vectors, each of dimension `3 * patch_size^2`,
/// so that a codeword is exactly one RGB patch.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    vocab_size: usize,
    dim: usize,
    patch_size: usize,
    seed: u64,
    vectors: Vec<f32>,
}

impl Codebook {
    /// Builds a codebook from raw row-major vectors. Components must lie in
    /// [0, 1] and rows must be pairwise distinct.
    pub fn from_vectors(patch_size: usize, vectors: Vec<f32>, seed: u64) -> Result<Self> {
        if patch_size == 0 {
            return invalid("patch_size must be positive");
        }
        let dim = 3 * patch_size * patch_size;
        if vectors.is_empty() || !vectors.len().is_multiple_of(dim) {
            return invalid(format!("vector data length {} is not a positive multiple of {dim}", vectors.len()));
        }
        if let Some(v) = vectors.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return invalid(format!("codebook component {v} outside [0, 1]"));
        }
        let vocab_size = vectors.len() / dim;
        let mut seen = HashSet::with_capacity(vocab_size);
        for row in vectors.chunks_exact(dim) {
            if !seen.insert(row_key(row)) {
                return invalid("codebook contains duplicate vectors");
            }
        }
        Ok(Self { vocab_size, dim, patch_size, seed, vectors })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    /// Generation seed; zero for codebooks loaded from disk.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn vector(&self, token: usize) -> &[f32] {
        &self.vectors[token * self.dim..(token + 1) * self.dim]
    }

    pub fn vectors(&self) -> &[f32] {
        &self.vectors
    }

    /// Index of the nearest codeword; ties go to the lowest id.
    /// `latent` must have length `dim`.
    pub fn nearest(&self, latent: &[f32]) -> usize {
        debug_assert_eq!(latent.len(), self.dim);
        let mut best = 0;
        let mut best_dist = f32::INFINITY;
        for (token, row) in self.vectors.chunks_exact(self.dim).enumerate() {
            let mut dist = 0.0f32;
            for (a, b) in row.iter().zip(latent) {
                let d = a - b;
                dist += d * d;
            }
            if dist < best_dist {
                best_dist = dist;
                best = token;
            }
        }
        best
    }

    /// Smallest Euclidean distance between two distinct codewords.
    pub fn min_pairwise_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for i in 0..self.vocab_size {
            for j in (i + 1)..self.vocab_size {
                best = best.min(sq_dist_f32(self.vector(i), self.vector(j)));
            }
        }
        best.sqrt()
    }

    pub fn write_to(&self, mut out: impl Write) -> Result<()> {
        out.write_all(CODEBOOK_MAGIC)?;
        for field in [self.vocab_size, self.dim, self.patch_size] {
            out.write_all(&(field as u32).to_le_bytes())?;
        }
        for v in &self.vectors {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut input: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        if bytes.len() < 20 || &bytes[..8] != CODEBOOK_MAGIC {
            return Err(Error::Format("missing RGWMCBK1 header".into()));
        }
        let field = |i: usize| {
            let at = 8 + 4 * i;
            u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize
        };
        let (vocab_size, dim, patch_size) = (field(0), field(1), field(2));
        if vocab_size == 0 || patch_size == 0 || dim != 3 * patch_size * patch_size {
            return Err(Error::Format(format!(
                "inconsistent header: vocab {vocab_size}, dim {dim}, patch {patch_size}"
            )));
        }
        let payload = &bytes[20..];
        if payload.len() != vocab_size * dim * 4 {
            return Err(Error::Format(format!(
                "expected {} payload bytes, found {}",
                vocab_size * dim * 4,
                payload.len()
            )));
        }
        let vectors = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Self::from_vectors(patch_size, vectors, 0).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(file))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

fn row_key(row: &[f32]) -> Vec<u32> {
    row.iter().map(|v| v.to_bits()).collect()
}

fn sq_dist_f32(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum()
}

/// Draws a synthetic codebook from a seeded Gaussian mixture.
///
/// Mode centres are uniform in [0,1]^d; token `i` belongs to mode
/// `i % n_modes` and its vector is the centre plus isotropic noise of standard
/// deviation `spread`, clamped to [0,1]. Exact duplicates are separated by
/// nudging component 0 in steps of `2^-20 * (token + 1)`.
pub fn sample_codebook(seed: u64, vocab_size: usize, patch_size: usize, n_modes: usize, spread: f64) -> Result<Codebook> {
    if vocab_size == 0 || patch_size == 0 {
        return invalid("vocab_size and patch_size must be positive");
    }
    if n_modes == 0 || n_modes > vocab_size {
        return invalid(format!("n_modes must be in [1, {vocab_size}], got {n_modes}"));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return invalid(format!("spread must be finite and non-negative, got {spread}"));
    }
    let dim = 3 * patch_size * patch_size;
    let mut rng = SplitMix64::new(seed);
    let centres: Vec<f64> = (0..n_modes * dim).map(|_| rng.next_f64()).collect();

    let mut vectors = Vec::with_capacity(vocab_size * dim);
    let mut seen: HashSet<Vec<u32>> = HashSet::with_capacity(vocab_size);
    for token in 0..vocab_size {
        let centre = &centres[(token % n_modes) * dim..][..dim];
        let mut row: Vec<f32> = centre
            .iter()
            .map(|c| (c + spread * rng.gaussian()).clamp(0.0, 1.0) as f32)
            .collect();
        let step = COLLISION_STEP * (token + 1) as f32;
        let direction = if row[0] + step <= 1.0 { 1.0 } else { -1.0 };
        while seen.contains(&row_key(&row)) {
            row[0] = (row[0] + direction * step).clamp(0.0, 1.0);
        }
        seen.insert(row_key(&row));
        vectors.extend_from_slice(&row);
    }
    Ok(Codebook { vocab_size, dim, patch_size, seed, vectors })
}

/// Nearest codeword to `latent` by squared Euclidean distance, lowest id on ties.
pub fn quantize(latent: &[f32], codebook: &Codebook) -> Result<usize> {
    if latent.len() != codebook.dim() {
        return invalid(format!("latent has length {}, codebook dim is {}", latent.len(), codebook.dim()));
    }
    Ok(codebook.nearest(latent))
}

/// A partition of the vocabulary into `k` nonempty clusters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterTable {
    pub k: usize,
    pub assignment: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    #[serde(skip)]
    pub inertia: f64,
}

impl ClusterTable {
    /// One cluster per token: the token-level (no clustering) scheme.
    pub fn identity(codebook: &Codebook) -> Self {
        let n = codebook.vocab_size();
        Self {
            k: n,
            assignment: (0..n).collect(),
            centroids: (0..n)
                .map(|t| codebook.vector(t).iter().map(|&v| v as f64).collect())
                .collect(),
            inertia: 0.0,
        }
    }

    pub fn from_assignment(k: usize, assignment: Vec<usize>, centroids: Vec<Vec<f64>>) -> Result<Self> {
        let table = Self { k, assignment, centroids, inertia: 0.0 };
        table.validate()?;
        Ok(table)
    }

    pub fn vocab_size(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_identity(&self) -> bool {
        self.k == self.assignment.len() && self.assignment.iter().enumerate().all(|(i, &c)| i == c)
    }

    /// Cluster of `token`; the caller guarantees the id is in range.
    #[inline]
    pub fn cluster(&self, token: usize) -> usize {
        self.assignment[token]
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == cluster)
            .map(|(t, _)| t)
            .collect()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &c in &self.assignment {
            sizes[c] += 1;
        }
        sizes
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k > self.assignment.len() {
            return invalid(format!("k = {} invalid for {} tokens", self.k, self.assignment.len()));
        }
        if self.centroids.len() != self.k {
            return invalid(format!("expected {} centroids, found {}", self.k, self.centroids.len()));
        }
        if self.assignment.iter().any(|&c| c >= self.k) {
            return invalid("cluster id out of range");
        }
        if self.cluster_sizes().contains(&0) {
            return invalid("cluster table has an empty cluster");
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let table: ClusterTable = serde_json::from_str(text)?;
        table.validate()?;
        Ok(table)
    }
}

/// Cluster id of `token`.
pub fn cluster_of(token: usize, table: &ClusterTable) -> Result<usize> {
    match table.assignment.get(token) {
        Some(&c) => Ok(c),
        None => invalid(format!("token {token} out of range for {} tokens", table.vocab_size())),
    }
}

/// Outcome of a k-means run over raw points.
#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub assignment: Vec<usize>,
    /// Row-major, `k x dim`.
    pub centroids: Vec<f64>,
    pub inertia: f64,
    /// Inertia after every assignment step, followed by the final inertia.
    pub history: Vec<f64>,
    pub iterations: usize,
}

/// Lloyd's algorithm with seeded k-means++ initialisation over `n` row-major
/// points of dimension `dim`.
///
/// Stops once no centroid moves by more than [`KMEANS_TOLERANCE`] or after
/// [`KMEANS_MAX_ITERATIONS`]. A cluster that empties is reseeded with the
/// point farthest from its own centroid. Requires at least `k` distinct
/// points for every cluster to end up nonempty.
pub fn kmeans(points: &[f64], dim: usize, k: usize, seed: u64) -> Result<KMeansFit> {
    if dim == 0 || !points.len().is_multiple_of(dim) {
        return invalid("point data is not a multiple of dim");
    }
    let n = points.len() / dim;
    if k == 0 || k > n {
        return invalid(format!("k must be in [1, {n}], got {k}"));
    }
    let point = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut rng = SplitMix64::new(seed);

    // k-means++ seeding.
    let mut centroids = Vec::with_capacity(k * dim);
    let mut chosen = vec![false; n];
    let first = rng.below(n);
    chosen[first] = true;
    centroids.extend_from_slice(point(first));
    let mut nearest_sq: Vec<f64> = (0..n).map(|i| sq_dist(point(i), point(first))).collect();
    for _ in 1..k {
        let total: f64 = nearest_sq.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.next_f64() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in nearest_sq.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                acc += w;
                pick = Some(i);
                if acc > target {
                    break;
                }
            }
            pick.expect("positive total weight has a positive entry")
        } else {
            // Every point coincides with a centre; fall back to the first unused one.
            chosen.iter().position(|c| !c).unwrap_or(0)
        };
        chosen[pick] = true;
        centroids.extend_from_slice(point(pick));
        for (i, d) in nearest_sq.iter_mut().enumerate() {
            *d = d.min(sq_dist(point(i), point(pick)));
        }
    }

    let mut assignment = vec![0usize; n];
    let mut history = Vec::new();
    let mut iterations = 0;
    for _ in 0..KMEANS_MAX_ITERATIONS {
        iterations += 1;
        let mut inertia = 0.0;
        for (i, slot) in assignment.iter_mut().enumerate() {
            let (c, d) = nearest_centroid(point(i), &centroids, dim);
            *slot = c;
            inertia += d;
        }
        history.push(inertia);

        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &c) in assignment.iter().enumerate() {
            counts[c] += 1;
            for (s, x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(point(i)) {
                *s += x;
            }
        }
        let mut updated = centroids.clone();
        for c in 0..k {
            if counts[c] > 0 {
                for (u, s) in updated[c * dim..(c + 1) * dim].iter_mut().zip(&sums[c * dim..]) {
                    *u = s / counts[c] as f64;
                }
            }
        }
        let mut reseeded = false;
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            reseeded = true;
            let far = (0..n)
                .filter(|&i| counts[assignment[i]] > 1)
                .map(|i| (i, sq_dist(point(i), &updated[assignment[i] * dim..(assignment[i] + 1) * dim])))
                .fold(None, |best: Option<(usize, f64)>, (i, d)| match best {
                    Some((_, bd)) if bd >= d => best,
                    _ => Some((i, d)),
                });
            let Some((far, _)) = far else {
                return Err(crate::Error::Internal("no point available to reseed an empty cluster".into()));
            };
            counts[assignment[far]] -= 1;
            assignment[far] = c;
            counts[c] = 1;
            updated[c * dim..(c + 1) * dim].copy_from_slice(point(far));
        }
        let movement = (0..k)
            .map(|c| sq_dist(&centroids[c * dim..(c + 1) * dim], &updated[c * dim..(c + 1) * dim]).sqrt())
            .fold(0.0, f64::max);
        centroids = updated;
        if !reseeded && movement < KMEANS_TOLERANCE {
            break;
        }
    }

    let inertia: f64 = assignment
        .iter()
        .enumerate()
        .map(|(i, &c)| sq_dist(point(i), &centroids[c * dim..(c + 1) * dim]))
        .sum();
    history.push(inertia);
    Ok(KMeansFit { assignment, centroids, inertia, history, iterations })
}

/// Partitions the codebook into `k` clusters with [`kmeans`].
pub fn kmeans_cluster(codebook: &Codebook, k: usize, seed: u64) -> Result<ClusterTable> {
    if k == 0 || k > codebook.vocab_size() {
        return invalid(format!("k must be in [1, {}], got {k}", codebook.vocab_size()));
    }
    let points: Vec<f64> = codebook.vectors().iter().map(|&v| v as f64).collect();
    let fit = kmeans(&points, codebook.dim(), k, seed)?;
    log::debug!("k-means converged after {} iterations, inertia {}", fit.iterations, fit.inertia);
    let centroids = fit.centroids.chunks_exact(codebook.dim()).map(<[f64]>::to_vec).collect();
    let mut table = ClusterTable::from_assignment(k, fit.assignment, centroids)?;
    table.inertia = fit.inertia;
    Ok(table)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest_centroid(p: &[f64], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centre) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(p, centre);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}
