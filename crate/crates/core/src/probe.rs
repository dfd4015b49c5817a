//! Embedding-consistency probe: how similar an image's embedding stays under
//! a suite of ordinary (non-differentiable) image transforms, and how the
//! resulting scores are distributed for clean versus perturbed sets.

use std::collections::BTreeMap;
use std::io::Cursor;
use std::path::Path;

use candle_core::{Device, Tensor};
use image::codecs::jpeg::JpegEncoder;
use image::{ImageBuffer, Rgb, RgbImage};
use nalgebra::{SMatrix, SVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::concept::EncoderBackend;
use crate::error::{Error, Result};
use crate::images::{chw_to_rgb8, image_to_chw, ImageSet, Shape3};
use crate::sampler::BilinearMap;

pub const HISTOGRAM_BINS: usize = 32;
pub const DEFAULT_SAMPLES_PER_TRANSFORM: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProbeTransform {
    Identity,
    Jpeg {
        quality: u8,
    },
    GaussianBlur {
        kernel: usize,
        sigma: (f64, f64),
    },
    Affine {
        degrees: f64,
        translate: f64,
        scale: (f64, f64),
        shear: f64,
    },
    ColorJitter {
        brightness: f64,
        contrast: f64,
        saturation: f64,
        hue: f64,
    },
    HorizontalFlip {
        p: f64,
    },
    Perspective {
        distortion: f64,
        p: f64,
    },
}

impl ProbeTransform {
    pub fn name(&self) -> &'static str {
        match self {
            ProbeTransform::Identity => "identity",
            ProbeTransform::Jpeg { .. } => "jpeg",
            ProbeTransform::GaussianBlur { .. } => "gaussian_blur",
            ProbeTransform::Affine { .. } => "affine",
            ProbeTransform::ColorJitter { .. } => "color_jitter",
            ProbeTransform::HorizontalFlip { .. } => "horizontal_flip",
            ProbeTransform::Perspective { .. } => "perspective",
        }
    }

    /// Draws parameters and transforms a `[C, H, W]` image.
    pub fn apply<R: Rng + ?Sized>(&self, img: &[f32], shape: Shape3, rng: &mut R) -> Result<Vec<f32>> {
        Ok(match *self {
            ProbeTransform::Identity => img.to_vec(),
            ProbeTransform::Jpeg { quality } => jpeg_round_trip(img, shape, quality)?,
            ProbeTransform::GaussianBlur { kernel, sigma } => {
                let s = rng.random_range(sigma.0..=sigma.1);
                gaussian_blur(img, shape, kernel, s)
            }
            ProbeTransform::Affine {
                degrees,
                translate,
                scale,
                shear,
            } => {
                let [_, h, w] = shape;
                let angle = rng.random_range(-degrees..=degrees);
                let tx = (rng.random_range(-translate..=translate) * w as f64).round();
                let ty = (rng.random_range(-translate..=translate) * h as f64).round();
                let s = rng.random_range(scale.0..=scale.1);
                let sh = rng.random_range(-shear..=shear);
                affine(img, shape, angle, (tx, ty), s, sh)
            }
            ProbeTransform::ColorJitter {
                brightness,
                contrast,
                saturation,
                hue,
            } => {
                let mut ops = [0u8, 1, 2, 3];
                ops.shuffle(rng);
                let b = rng.random_range(1.0 - brightness..=1.0 + brightness);
                let c = rng.random_range(1.0 - contrast..=1.0 + contrast);
                let s = rng.random_range(1.0 - saturation..=1.0 + saturation);
                let hshift = rng.random_range(-hue..=hue);
                let mut out = img.to_vec();
                for op in ops {
                    match op {
                        0 => adjust_brightness(&mut out, b),
                        1 => adjust_contrast(&mut out, shape, c),
                        2 => adjust_saturation(&mut out, shape, s),
                        _ => adjust_hue(&mut out, shape, hshift),
                    }
                }
                out
            }
            ProbeTransform::HorizontalFlip { p } => {
                if rng.random_bool(p) {
                    hflip(img, shape)
                } else {
                    img.to_vec()
                }
            }
            ProbeTransform::Perspective { distortion, p } => {
                if rng.random_bool(p) {
                    perspective(img, shape, distortion, rng)?
                } else {
                    img.to_vec()
                }
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSuite {
    pub transforms: Vec<ProbeTransform>,
}

impl Default for ProbeSuite {
    fn default() -> Self {
        Self {
            transforms: vec![
                ProbeTransform::Jpeg { quality: 50 },
                ProbeTransform::GaussianBlur {
                    kernel: 7,
                    sigma: (0.1, 2.0),
                },
                ProbeTransform::Affine {
                    degrees: 15.0,
                    translate: 0.1,
                    scale: (0.8, 1.2),
                    shear: 10.0,
                },
                ProbeTransform::ColorJitter {
                    brightness: 0.2,
                    contrast: 0.2,
                    saturation: 0.2,
                    hue: 0.1,
                },
                ProbeTransform::HorizontalFlip { p: 0.5 },
                ProbeTransform::Perspective { distortion: 0.5, p: 0.5 },
            ],
        }
    }
}

impl ProbeSuite {
    pub fn validate(&self) -> Result<()> {
        if self.transforms.is_empty() {
            return Err(Error::range("probe.transforms", "suite is empty"));
        }
        let mut seen = std::collections::HashSet::new();
        for t in &self.transforms {
            if !seen.insert(t.name()) {
                return Err(Error::range("probe.transforms", format!("duplicate transform {:?}", t.name())));
            }
            let ok = match *t {
                ProbeTransform::Identity => true,
                ProbeTransform::Jpeg { quality } => (1..=100).contains(&quality),
                ProbeTransform::GaussianBlur { kernel, sigma } => kernel % 2 == 1 && sigma.0 > 0.0 && sigma.0 <= sigma.1,
                ProbeTransform::Affine { scale, .. } => scale.0 > 0.0 && scale.0 <= scale.1,
                ProbeTransform::ColorJitter {
                    brightness,
                    contrast,
                    saturation,
                    hue,
                } => [brightness, contrast, saturation].iter().all(|v| (0.0..=1.0).contains(v)) && (0.0..=0.5).contains(&hue),
                ProbeTransform::HorizontalFlip { p } => (0.0..=1.0).contains(&p),
                ProbeTransform::Perspective { distortion, p } => (0.0..=1.0).contains(&distortion) && (0.0..=1.0).contains(&p),
            };
            if !ok {
                return Err(Error::range("probe.transforms", format!("invalid parameters for {:?}", t.name())));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessScore {
    pub per_transform: BTreeMap<String, f64>,
    pub aggregate: f64,
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0f64, 0f64, 0f64);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (*x as f64, *y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    let denom = (aa * bb).sqrt();
    if denom == 0.0 {
        // Two zero embeddings are the same point; one zero is undefined.
        return if aa == bb { 1.0 } else { 0.0 };
    }
    (ab / denom).clamp(-1.0, 1.0)
}

/// Mean cosine similarity between the embedding of `image` and those of
/// `samples_per_transform` random draws of every transform in the suite.
pub fn robustness_score<R: Rng + ?Sized>(
    image: &[f32],
    shape: Shape3,
    backend: &dyn EncoderBackend,
    suite: &ProbeSuite,
    samples_per_transform: usize,
    rng: &mut R,
) -> Result<RobustnessScore> {
    if samples_per_transform < 1 {
        return Err(Error::range("probe.samples_per_transform", "must be >= 1"));
    }
    suite.validate()?;
    let res = backend.image_resolution();
    let [c, h, w] = shape;
    let resize = BilinearMap::resize(1, (h, w), (res, res));
    let mut flat = resize.apply_slice(image, c);
    for t in &suite.transforms {
        for _ in 0..samples_per_transform {
            flat.extend(resize.apply_slice(&t.apply(image, shape, rng)?, c));
        }
    }
    let count = 1 + suite.transforms.len() * samples_per_transform;
    let batch = Tensor::from_vec(flat, (count, c, res, res), &Device::Cpu)?;
    let emb = backend.encode_image(&batch)?.to_dtype(candle_core::DType::F32)?.to_vec2::<f32>()?;
    let mut per_transform = BTreeMap::new();
    for (ti, t) in suite.transforms.iter().enumerate() {
        let sims: f64 = (0..samples_per_transform)
            .map(|s| cosine(&emb[0], &emb[1 + ti * samples_per_transform + s]))
            .sum();
        per_transform.insert(t.name().to_string(), sims / samples_per_transform as f64);
    }
    let aggregate = per_transform.values().sum::<f64>() / per_transform.len() as f64;
    Ok(RobustnessScore {
        per_transform,
        aggregate,
    })
}

/// Normalized histogram with `HISTOGRAM_BINS` equal bins on `[-1, 1]`.
pub fn histogram(values: &[f64]) -> Vec<f64> {
    let mut bins = vec![0f64; HISTOGRAM_BINS];
    for v in values {
        let pos = ((v.clamp(-1.0, 1.0) + 1.0) / 2.0 * HISTOGRAM_BINS as f64).floor() as usize;
        bins[pos.min(HISTOGRAM_BINS - 1)] += 1.0;
    }
    let n = values.len().max(1) as f64;
    bins.iter_mut().for_each(|b| *b /= n);
    bins
}

/// `1 - TV(p, q)` for two normalized histograms.
pub fn overlap(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| a.min(*b)).sum::<f64>().clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreDistributions {
    pub clean: Vec<RobustnessScore>,
    pub perturbed: Vec<RobustnessScore>,
    pub clean_histogram: Vec<f64>,
    pub perturbed_histogram: Vec<f64>,
    /// Overlap of the aggregate-score histograms.
    pub overlap: f64,
    /// Overlap of the histograms of each transform's scores.
    pub per_transform_overlap: BTreeMap<String, f64>,
}

impl ScoreDistributions {
    pub fn clean_aggregates(&self) -> Vec<f64> {
        self.clean.iter().map(|s| s.aggregate).collect()
    }

    pub fn perturbed_aggregates(&self) -> Vec<f64> {
        self.perturbed.iter().map(|s| s.aggregate).collect()
    }
}

/// Probe output as written by the command line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub backend: String,
    pub samples_per_transform: usize,
    pub suite: ProbeSuite,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturbation_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
    pub distributions: ScoreDistributions,
}

fn score_set(
    set: &ImageSet,
    backend: &dyn EncoderBackend,
    suite: &ProbeSuite,
    samples: usize,
    seed: u64,
) -> Result<Vec<RobustnessScore>> {
    (0..set.len())
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            robustness_score(set.image(i), set.shape(), backend, suite, samples, &mut rng)
        })
        .collect()
}

pub fn score_distributions(
    clean: &ImageSet,
    perturbed: &ImageSet,
    backend: &dyn EncoderBackend,
    suite: &ProbeSuite,
    samples_per_transform: usize,
    seed: u64,
) -> Result<ScoreDistributions> {
    if clean.is_empty() || perturbed.is_empty() {
        return Err(Error::EmptyEval("probe needs non-empty clean and perturbed sets".into()));
    }
    let c = score_set(clean, backend, suite, samples_per_transform, seed)?;
    let p = score_set(perturbed, backend, suite, samples_per_transform, seed)?;
    let ch = histogram(&c.iter().map(|s| s.aggregate).collect::<Vec<_>>());
    let ph = histogram(&p.iter().map(|s| s.aggregate).collect::<Vec<_>>());
    let mut per_transform_overlap = BTreeMap::new();
    for t in &suite.transforms {
        let name = t.name();
        let a: Vec<f64> = c.iter().map(|s| s.per_transform[name]).collect();
        let b: Vec<f64> = p.iter().map(|s| s.per_transform[name]).collect();
        per_transform_overlap.insert(name.to_string(), overlap(&histogram(&a), &histogram(&b)));
    }
    Ok(ScoreDistributions {
        overlap: overlap(&ch, &ph),
        clean: c,
        perturbed: p,
        clean_histogram: ch,
        perturbed_histogram: ph,
        per_transform_overlap,
    })
}

/// Renders both histograms as overlaid bars: clean in blue, perturbed in red.
pub fn render_histograms(clean: &[f64], perturbed: &[f64], path: &Path) -> Result<()> {
    const W: u32 = 640;
    const H: u32 = 320;
    const MARGIN: u32 = 20;
    let mut img: RgbImage = ImageBuffer::from_pixel(W, H, Rgb([255, 255, 255]));
    let peak = clean.iter().chain(perturbed).fold(0f64, |m, v| m.max(*v)).max(1e-12);
    let bins = clean.len().max(perturbed.len()).max(1) as u32;
    let bar = (W - 2 * MARGIN) / bins;
    let plot_h = (H - 2 * MARGIN) as f64;
    for (series, color) in [(clean, [40u8, 90, 200]), (perturbed, [210, 50, 40])] {
        for (i, v) in series.iter().enumerate() {
            let top = H - MARGIN - (v / peak * plot_h).round() as u32;
            for x in MARGIN + i as u32 * bar..MARGIN + (i as u32 + 1) * bar {
                for y in top..H - MARGIN {
                    let px = img.get_pixel_mut(x, y);
                    // Blend so overlapping bars show both colors.
                    for ch in 0..3 {
                        px.0[ch] = ((px.0[ch] as u16 + color[ch] as u16) / 2) as u8;
                    }
                }
            }
        }
    }
    for x in MARGIN..W - MARGIN {
        img.put_pixel(x, H - MARGIN, Rgb([0, 0, 0]));
    }
    img.save(path)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Transform primitives on `[C, H, W]` float images.

pub fn jpeg_round_trip(img: &[f32], shape: Shape3, quality: u8) -> Result<Vec<f32>> {
    let rgb = chw_to_rgb8(img, shape);
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(&mut Cursor::new(&mut buf), quality).encode_image(&rgb)?;
    let decoded = image::load_from_memory_with_format(&buf, image::ImageFormat::Jpeg)?;
    image_to_chw(&decoded, shape)
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f32> {
    let half = (size as f64 - 1.0) / 2.0;
    let k: Vec<f64> = (0..size).map(|i| (-((i as f64 - half).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter().map(|v| (v / s) as f32).collect()
}

fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// Separable Gaussian blur with reflect padding.
pub fn gaussian_blur(img: &[f32], shape: Shape3, kernel: usize, sigma: f64) -> Vec<f32> {
    let [c, h, w] = shape;
    let k = gaussian_kernel(kernel, sigma);
    let r = (kernel / 2) as i64;
    let mut tmp = vec![0f32; img.len()];
    let mut out = vec![0f32; img.len()];
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..h {
            for x in 0..w {
                tmp[base + y * w + x] = (0..kernel)
                    .map(|i| k[i] * img[base + y * w + reflect(x as i64 + i as i64 - r, w)])
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                out[base + y * w + x] = (0..kernel)
                    .map(|i| k[i] * tmp[base + reflect(y as i64 + i as i64 - r, h) * w + x])
                    .sum();
            }
        }
    }
    out
}

/// Resamples with `src = f(dst)` in pixel coordinates; outside pixels are 0.
fn warp<F: Fn(f64, f64) -> (f64, f64)>(img: &[f32], shape: Shape3, f: F) -> Vec<f32> {
    let [c, h, w] = shape;
    let map = BilinearMap::from_fn(1, (h, w), (h, w), |_, oy, ox| {
        let (sx, sy) = f(ox as f64, oy as f64);
        (sx.is_finite() && sy.is_finite()).then_some((sy, sx))
    });
    map.apply_slice(img, c)
}

/// Rotation by `angle_deg`, translation, isotropic scale, and x-shear, all
/// about the image center.
pub fn affine(img: &[f32], shape: Shape3, angle_deg: f64, translate: (f64, f64), scale: f64, shear_deg: f64) -> Vec<f32> {
    let [_, h, w] = shape;
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let a = angle_deg.to_radians();
    let sh = shear_deg.to_radians();
    // Forward linear part: scale * R(a) * Shear_x(sh).
    let m = SMatrix::<f64, 2, 2>::new(a.cos(), -a.sin(), a.sin(), a.cos())
        * SMatrix::<f64, 2, 2>::new(1.0, sh.tan(), 0.0, 1.0)
        * scale;
    let inv = m.try_inverse().unwrap_or_else(SMatrix::identity);
    warp(img, shape, |x, y| {
        let p = inv * SVector::<f64, 2>::new(x - cx - translate.0, y - cy - translate.1);
        (p[0] + cx, p[1] + cy)
    })
}

pub fn hflip(img: &[f32], shape: Shape3) -> Vec<f32> {
    let [c, h, w] = shape;
    let mut out = vec![0f32; img.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[ch * h * w + y * w + x] = img[ch * h * w + y * w + (w - 1 - x)];
            }
        }
    }
    out
}

/// Homography mapping each `from` corner onto the matching `to` corner.
fn homography(from: &[(f64, f64); 4], to: &[(f64, f64); 4]) -> Option<SMatrix<f64, 3, 3>> {
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for (i, (&(x, y), &(u, v))) in from.iter().zip(to).enumerate() {
        let r = 2 * i;
        a.set_row(r, &SMatrix::<f64, 1, 8>::from_row_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]));
        a.set_row(r + 1, &SMatrix::<f64, 1, 8>::from_row_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]));
        b[r] = u;
        b[r + 1] = v;
    }
    let h = a.lu().solve(&b)?;
    Some(SMatrix::<f64, 3, 3>::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0))
}

/// Moves each corner inward by up to `distortion` of the half size and warps
/// the image accordingly.
pub fn perspective<R: Rng + ?Sized>(img: &[f32], shape: Shape3, distortion: f64, rng: &mut R) -> Result<Vec<f32>> {
    let [_, h, w] = shape;
    let (wm, hm) = ((w - 1) as f64, (h - 1) as f64);
    let dx = (distortion * (w / 2) as f64).floor() as i64;
    let dy = (distortion * (h / 2) as f64).floor() as i64;
    let mut jitter = |d: i64| if d > 0 { rng.random_range(0..=d) as f64 } else { 0.0 };
    let start = [(0.0, 0.0), (wm, 0.0), (wm, hm), (0.0, hm)];
    let end = [
        (jitter(dx), jitter(dy)),
        (wm - jitter(dx), jitter(dy)),
        (wm - jitter(dx), hm - jitter(dy)),
        (jitter(dx), hm - jitter(dy)),
    ];
    // Output pixels are pulled from the source through end -> start.
    let hm = homography(&end, &start).ok_or_else(|| Error::Oracle("degenerate perspective corners".into()))?;
    Ok(warp(img, shape, |x, y| {
        let p = hm * SVector::<f64, 3>::new(x, y, 1.0);
        (p[0] / p[2], p[1] / p[2])
    }))
}

fn adjust_brightness(img: &mut [f32], factor: f64) {
    for v in img.iter_mut() {
        *v = (*v as f64 * factor).clamp(0.0, 1.0) as f32;
    }
}

fn gray(img: &[f32], shape: Shape3) -> Vec<f32> {
    let [c, h, w] = shape;
    let n = h * w;
    if c < 3 {
        return img[..n].to_vec();
    }
    (0..n)
        .map(|i| 0.299 * img[i] + 0.587 * img[n + i] + 0.114 * img[2 * n + i])
        .collect()
}

fn adjust_contrast(img: &mut [f32], shape: Shape3, factor: f64) {
    let g = gray(img, shape);
    let mean = g.iter().map(|v| *v as f64).sum::<f64>() / g.len() as f64;
    for v in img.iter_mut() {
        *v = (mean + factor * (*v as f64 - mean)).clamp(0.0, 1.0) as f32;
    }
}

fn adjust_saturation(img: &mut [f32], shape: Shape3, factor: f64) {
    let [c, h, w] = shape;
    if c < 3 {
        return;
    }
    let g = gray(img, shape);
    let n = h * w;
    for ch in 0..3 {
        for i in 0..n {
            let v = &mut img[ch * n + i];
            *v = (g[i] as f64 + factor * (*v as f64 - g[i] as f64)).clamp(0.0, 1.0) as f32;
        }
    }
}

fn adjust_hue(img: &mut [f32], shape: Shape3, shift: f64) {
    let [c, h, w] = shape;
    if c < 3 || shift == 0.0 {
        return;
    }
    let n = h * w;
    for i in 0..n {
        let (r, g, b) = (img[i] as f64, img[n + i] as f64, img[2 * n + i] as f64);
        let (hh, s, v) = rgb_to_hsv(r, g, b);
        let (r, g, b) = hsv_to_rgb((hh + shift).rem_euclid(1.0), s, v);
        img[i] = r as f32;
        img[n + i] = g as f32;
        img[2 * n + i] = b as f32;
    }
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i64 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}
