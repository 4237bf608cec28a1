//! Deterministic pixel-space perturbations (noise, blur, JPEG-style
//! compression, impulse noise, pixel drop and colour jitter) and the built-in
//! evaluation and training suites.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::pixelcodec::Image;
use crate::rng::SplitMix64;

/// Quality used at the start of the training schedule; the table's
/// "80 - 20" range is encoded as this start plus a spec's minimum quality.
pub const JPEG_SCHEDULE_START_QUALITY: f64 = 80.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbKind {
    GaussianNoise,
    GaussianBlur,
    JpegLike,
    SaltPepper,
    RandomDrop,
    Brightness,
    Contrast,
    Hue,
    Saturation,
    Identity,
}

impl PerturbKind {
    pub const ALL: [PerturbKind; 10] = [
        PerturbKind::GaussianNoise,
        PerturbKind::GaussianBlur,
        PerturbKind::JpegLike,
        PerturbKind::SaltPepper,
        PerturbKind::RandomDrop,
        PerturbKind::Brightness,
        PerturbKind::Contrast,
        PerturbKind::Hue,
        PerturbKind::Saturation,
        PerturbKind::Identity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PerturbKind::GaussianNoise => "gaussian_noise",
            PerturbKind::GaussianBlur => "gaussian_blur",
            PerturbKind::JpegLike => "jpeg_like",
            PerturbKind::SaltPepper => "salt_pepper",
            PerturbKind::RandomDrop => "random_drop",
            PerturbKind::Brightness => "brightness",
            PerturbKind::Contrast => "contrast",
            PerturbKind::Hue => "hue",
            PerturbKind::Saturation => "saturation",
            PerturbKind::Identity => "identity",
        }
    }

    /// Intensity at which the perturbation does nothing.
    pub fn neutral_intensity(self) -> f64 {
        match self {
            PerturbKind::JpegLike => 100.0,
            PerturbKind::Brightness | PerturbKind::Contrast | PerturbKind::Saturation => 1.0,
            _ => 0.0,
        }
    }
}

impl fmt::Display for PerturbKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PerturbKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PerturbKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown perturbation kind {s:?}")))
    }
}

/// One perturbation. `intensity` is sigma, blur radius, JPEG quality,
/// impulse probability, drop ratio or maximum jitter depending on `kind`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbSpec {
    pub kind: PerturbKind,
    pub intensity: f64,
    #[serde(default)]
    pub seed: u64,
}

impl PerturbSpec {
    pub fn new(kind: PerturbKind, intensity: f64, seed: u64) -> Result<Self> {
        let spec = Self { kind, intensity, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn identity() -> Self {
        Self { kind: PerturbKind::Identity, intensity: 0.0, seed: 0 }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    /// Parses `kind=value`, e.g. `gaussian_noise=0.05`.
    pub fn parse(text: &str) -> Result<Self> {
        let (kind, value) = match text.split_once('=') {
            Some((k, v)) => (k.trim(), Some(v.trim())),
            None => (text.trim(), None),
        };
        let kind: PerturbKind = kind.parse()?;
        let intensity = match value {
            Some(v) => v
                .parse::<f64>()
                .map_err(|_| Error::InvalidArgument(format!("bad intensity {v:?}")))?,
            None if kind == PerturbKind::Identity => 0.0,
            None => return invalid(format!("perturbation {kind} needs an intensity")),
        };
        Self::new(kind, intensity, 0)
    }

    pub fn validate(&self) -> Result<()> {
        let x = self.intensity;
        let ok = x.is_finite()
            && match self.kind {
                PerturbKind::GaussianNoise | PerturbKind::GaussianBlur => x >= 0.0,
                PerturbKind::JpegLike => (1.0..=100.0).contains(&x),
                PerturbKind::SaltPepper | PerturbKind::RandomDrop | PerturbKind::Hue => (0.0..=1.0).contains(&x),
                PerturbKind::Brightness | PerturbKind::Contrast | PerturbKind::Saturation => x >= 1.0,
                PerturbKind::Identity => true,
            };
        if ok {
            Ok(())
        } else {
            invalid(format!("intensity {x} out of range for {}", self.kind))
        }
    }
}

impl fmt::Display for PerturbSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.kind == PerturbKind::Identity {
            f.write_str("identity")
        } else {
            write!(f, "{}={}", self.kind, self.intensity)
        }
    }
}

/// Applies `spec` to `image`. Output has the same shape and values in [0, 1].
pub fn apply(image: &Image, spec: &PerturbSpec) -> Result<Image> {
    spec.validate()?;
    let mut rng = SplitMix64::new(spec.seed);
    let x = spec.intensity;
    let mut out = image.clone();
    match spec.kind {
        PerturbKind::Identity => {}
        PerturbKind::GaussianNoise => {
            if x > 0.0 {
                for v in &mut out.data {
                    *v = (*v as f64 + x * rng.gaussian()).clamp(0.0, 1.0) as f32;
                }
            }
        }
        PerturbKind::GaussianBlur => {
            if x > 0.0 {
                out = gaussian_blur(image, x);
            }
        }
        PerturbKind::JpegLike => out = jpeg_like(image, x),
        PerturbKind::SaltPepper => {
            if x > 0.0 {
                for v in &mut out.data {
                    let u = rng.next_f64();
                    if u < x / 2.0 {
                        *v = 0.0;
                    } else if u < x {
                        *v = 1.0;
                    }
                }
            }
        }
        PerturbKind::RandomDrop => {
            let n = image.pixel_count();
            let drop = ((x * n as f64).round() as usize).min(n);
            let mut order: Vec<usize> = (0..n).collect();
            for i in 0..drop {
                let j = i + rng.below(n - i);
                order.swap(i, j);
                out.data[order[i] * 3..order[i] * 3 + 3].fill(0.0);
            }
        }
        PerturbKind::Brightness => {
            if x > 1.0 {
                let f = rng.uniform(1.0 / x, x);
                for v in &mut out.data {
                    *v = (*v as f64 * f).clamp(0.0, 1.0) as f32;
                }
            }
        }
        PerturbKind::Contrast => {
            if x > 1.0 {
                let f = rng.uniform(1.0 / x, x);
                let n = image.pixel_count() as f64;
                let mut mean = [0.0f64; 3];
                for px in image.data.chunks_exact(3) {
                    for ch in 0..3 {
                        mean[ch] += px[ch] as f64 / n;
                    }
                }
                for px in out.data.chunks_exact_mut(3) {
                    for ch in 0..3 {
                        px[ch] = (mean[ch] + f * (px[ch] as f64 - mean[ch])).clamp(0.0, 1.0) as f32;
                    }
                }
            }
        }
        PerturbKind::Hue => {
            if x > 0.0 {
                let shift = rng.uniform(-x, x);
                map_hsv(&mut out, |h, s, v| ((h + shift).rem_euclid(1.0), s, v));
            }
        }
        PerturbKind::Saturation => {
            if x > 1.0 {
                let f = rng.uniform(1.0 / x, x);
                map_hsv(&mut out, |h, s, v| (h, (s * f).clamp(0.0, 1.0), v));
            }
        }
    }
    Ok(out)
}

/// The perturbation at `fraction` of its maximum strength, for linear schedules.
///
/// Additive kinds (noise sigma, blur radius, impulse p, drop ratio, hue shift)
/// scale from 0; JPEG quality moves from [`JPEG_SCHEDULE_START_QUALITY`] down
/// to the configured quality; multiplicative jitter moves from 1 to the maximum.
pub fn scaled(spec: &PerturbSpec, fraction: f64) -> Result<PerturbSpec> {
    if !(0.0..=1.0).contains(&fraction) {
        return invalid(format!("schedule fraction must be in [0, 1], got {fraction}"));
    }
    let x = spec.intensity;
    let intensity = match spec.kind {
        PerturbKind::GaussianNoise
        | PerturbKind::GaussianBlur
        | PerturbKind::SaltPepper
        | PerturbKind::RandomDrop
        | PerturbKind::Hue => fraction * x,
        PerturbKind::JpegLike => JPEG_SCHEDULE_START_QUALITY - fraction * (JPEG_SCHEDULE_START_QUALITY - x),
        PerturbKind::Brightness | PerturbKind::Contrast | PerturbKind::Saturation => 1.0 + fraction * (x - 1.0),
        PerturbKind::Identity => x,
    };
    PerturbSpec::new(spec.kind, intensity, spec.seed)
}

/// A perturbation with the short name used in reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedPerturbation {
    pub name: String,
    pub spec: PerturbSpec,
}

impl NamedPerturbation {
    fn new(name: &str, kind: PerturbKind, intensity: f64) -> Self {
        Self { name: name.to_string(), spec: PerturbSpec { kind, intensity, seed: 0 } }
    }

    pub fn clean() -> Self {
        Self::new("clean", PerturbKind::Identity, 0.0)
    }
}

#[derive(Debug, Clone)]
pub struct BuiltinSets {
    pub set_a: Vec<NamedPerturbation>,
    pub set_b: Vec<NamedPerturbation>,
    pub train: Vec<NamedPerturbation>,
}

pub fn builtin_sets() -> BuiltinSets {
    use PerturbKind::*;
    let set = |values: [f64; 9]| {
        let kinds = [
            ("noise", GaussianNoise),
            ("jpeg", JpegLike),
            ("blur", GaussianBlur),
            ("salt_pepper", SaltPepper),
            ("drop", RandomDrop),
            ("brightness", Brightness),
            ("contrast", Contrast),
            ("hue", Hue),
            ("saturation", Saturation),
        ];
        kinds.iter().zip(values).map(|(&(n, k), v)| NamedPerturbation::new(n, k, v)).collect::<Vec<_>>()
    };
    BuiltinSets {
        set_a: set([0.05, 60.0, 2.0, 0.03, 0.3, 3.0, 1.5, 0.1, 2.0]),
        set_b: set([0.2, 20.0, 3.0, 0.1, 0.5, 4.0, 4.0, 0.5, 5.0]),
        // No random drop during training; JPEG quality is the low end of 80-20.
        train: vec![
            NamedPerturbation::new("noise", GaussianNoise, 0.1),
            NamedPerturbation::new("jpeg", JpegLike, 20.0),
            NamedPerturbation::new("blur", GaussianBlur, 2.0),
            NamedPerturbation::new("salt_pepper", SaltPepper, 0.07),
            NamedPerturbation::new("brightness", Brightness, 4.0),
            NamedPerturbation::new("contrast", Contrast, 2.0),
            NamedPerturbation::new("hue", Hue, 0.1),
            NamedPerturbation::new("saturation", Saturation, 2.0),
        ],
    }
}

/// Looks up a built-in set by name: `A`, `B` or `train`.
pub fn builtin_set(name: &str) -> Result<Vec<NamedPerturbation>> {
    let sets = builtin_sets();
    match name.to_ascii_lowercase().as_str() {
        "a" | "seta" => Ok(sets.set_a),
        "b" | "setb" => Ok(sets.set_b),
        "train" => Ok(sets.train),
        _ => invalid(format!("unknown perturbation set {name:?}; expected A, B or train")),
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

fn gaussian_blur(image: &Image, radius: f64) -> Image {
    let half = radius.ceil() as isize;
    let sigma = radius / 2.0;
    let mut kernel: Vec<f64> = (-half..=half).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|w| *w /= total);

    let (h, w) = (image.height, image.width);
    let mut tmp = vec![0.0f64; image.data.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let mut acc = 0.0;
                for (t, weight) in kernel.iter().enumerate() {
                    let sx = reflect(x as isize + t as isize - half, w);
                    acc += weight * image.at(y, sx, ch) as f64;
                }
                tmp[image.index(y, x, ch)] = acc;
            }
        }
    }
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let mut acc = 0.0;
                for (t, weight) in kernel.iter().enumerate() {
                    let sy = reflect(y as isize + t as isize - half, h);
                    acc += weight * tmp[image.index(sy, x, ch)];
                }
                out.data[image.index(y, x, ch)] = acc.clamp(0.0, 1.0) as f32;
            }
        }
    }
    out
}

/// Standard JPEG luminance quantisation table, row-major.
pub const LUMA_QUANT_TABLE: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Luminance table scaled for `quality` with the IJG rule.
pub fn quant_table(quality: f64) -> [f64; 64] {
    let scale = if quality < 50.0 { 5000.0 / quality } else { 200.0 - 2.0 * quality };
    let mut table = [0.0; 64];
    for (t, &q) in table.iter_mut().zip(&LUMA_QUANT_TABLE) {
        *t = (q as f64 * scale / 100.0).round().clamp(1.0, 255.0);
    }
    table
}

fn dct_basis() -> [[f64; 8]; 8] {
    let mut basis = [[0.0; 8]; 8];
    for (u, row) in basis.iter_mut().enumerate() {
        let alpha = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (x, b) in row.iter_mut().enumerate() {
            *b = alpha * (std::f64::consts::PI * (2 * x + 1) as f64 * u as f64 / 16.0).cos();
        }
    }
    basis
}

fn jpeg_like(image: &Image, quality: f64) -> Image {
    let table = quant_table(quality);
    let basis = dct_basis();
    let (h, w) = (image.height, image.width);
    let mut out = image.clone();
    let mut block = [[0.0f64; 8]; 8];
    let mut tmp = [[0.0f64; 8]; 8];
    for by in (0..h).step_by(8) {
        for bx in (0..w).step_by(8) {
            for ch in 0..3 {
                for (yy, row) in block.iter_mut().enumerate() {
                    for (xx, v) in row.iter_mut().enumerate() {
                        let y = reflect((by + yy) as isize, h);
                        let x = reflect((bx + xx) as isize, w);
                        *v = image.at(y, x, ch) as f64 * 255.0 - 128.0;
                    }
                }
                // Forward 2-D DCT: coeff = B * block * B^T.
                for u in 0..8 {
                    for x in 0..8 {
                        tmp[u][x] = (0..8).map(|y| basis[u][y] * block[y][x]).sum();
                    }
                }
                for u in 0..8 {
                    for v in 0..8 {
                        let c: f64 = (0..8).map(|x| tmp[u][x] * basis[v][x]).sum();
                        let q = table[u * 8 + v];
                        block[u][v] = (c / q).round() * q;
                    }
                }
                // Inverse: pixels = B^T * coeff * B.
                for y in 0..8 {
                    for v in 0..8 {
                        tmp[y][v] = (0..8).map(|u| basis[u][y] * block[u][v]).sum();
                    }
                }
                for yy in 0..8 {
                    for xx in 0..8 {
                        let (y, x) = (by + yy, bx + xx);
                        if y < h && x < w {
                            let p: f64 = (0..8).map(|v| tmp[yy][v] * basis[v][xx]).sum();
                            let idx = out.index(y, x, ch);
                            out.data[idx] = ((p + 128.0) / 255.0).clamp(0.0, 1.0) as f32;
                        }
                    }
                }
            }
        }
    }
    out
}

fn map_hsv(image: &mut Image, f: impl Fn(f64, f64, f64) -> (f64, f64, f64)) {
    for px in image.data.chunks_exact_mut(3) {
        let (h, s, v) = rgb_to_hsv(px[0] as f64, px[1] as f64, px[2] as f64);
        let (h, s, v) = f(h, s, v);
        let (r, g, b) = hsv_to_rgb(h, s, v);
        px[0] = r.clamp(0.0, 1.0) as f32;
        px[1] = g.clamp(0.0, 1.0) as f32;
        px[2] = b.clamp(0.0, 1.0) as f32;
    }
}

/// Hue in turns [0, 1), saturation and value in [0, 1].
pub fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6.rem_euclid(2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    (r + m, g + m, b + m)
}
