//! Random differentiable transformations applied to perturbed batches while
//! crafting: one fused affine warp (rotation, isotropic scale, translation
//! about the image center), then an optional horizontal flip, then zeroed
//! rectangular patches.

use candle_core::Tensor;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::BilinearMap;

/// Rejection-sampling attempts per patch before giving up on it.
pub const PATCH_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformConfig {
    /// Master switch; when false the pipeline is the identity.
    pub enabled: bool,
    pub rot_degrees: f64,
    pub translate_frac: f64,
    pub scale_range: (f64, f64),
    pub hflip_prob: f64,
    pub patch_count: usize,
    pub patch_side_frac: (f64, f64),
}

impl Default for TransformConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            rot_degrees: 5.0,
            translate_frac: 0.05,
            scale_range: (0.95, 1.05),
            hflip_prob: 0.5,
            patch_count: 3,
            patch_side_frac: (0.10, 0.30),
        }
    }
}

impl TransformConfig {
    /// A configuration whose every draw is the identity.
    pub fn identity() -> Self {
        Self {
            enabled: true,
            rot_degrees: 0.0,
            translate_frac: 0.0,
            scale_range: (1.0, 1.0),
            hflip_prob: 0.0,
            patch_count: 0,
            patch_side_frac: (0.10, 0.30),
        }
    }

    /// Range violations, one message per offending field.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.rot_degrees >= 0.0 && self.rot_degrees.is_finite()) {
            out.push("transforms.rot_degrees must be finite and >= 0".into());
        }
        if !(self.translate_frac >= 0.0 && self.translate_frac <= 1.0) {
            out.push("transforms.translate_frac must lie in [0, 1]".into());
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && hi > 0.0 && lo <= hi && hi.is_finite()) {
            out.push("transforms.scale_range must satisfy 0 < low <= high".into());
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            out.push("transforms.hflip_prob must lie in [0, 1]".into());
        }
        let (plo, phi) = self.patch_side_frac;
        if !(plo > 0.0 && plo <= 1.0 && phi > 0.0 && phi <= 1.0 && plo <= phi) {
            out.push("transforms.patch_side_frac must satisfy 0 < low <= high <= 1".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        match self.violations().as_slice() {
            [] => Ok(()),
            [one] => Err(Error::range(field_of(one), one.clone())),
            _ => Err(Error::Schema(self.violations())),
        }
    }
}

fn field_of(message: &str) -> String {
    message.split_whitespace().next().unwrap_or_default().to_string()
}

/// Axis-aligned box in pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchRect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl PatchRect {
    pub fn bottom(&self) -> usize {
        self.top + self.height
    }

    pub fn right(&self) -> usize {
        self.left + self.width
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.bottom() && x >= self.left && x < self.right()
    }

    pub fn intersection_area(&self, other: &PatchRect) -> usize {
        let h = self.bottom().min(other.bottom()).saturating_sub(self.top.max(other.top));
        let w = self.right().min(other.right()).saturating_sub(self.left.max(other.left));
        h * w
    }

    pub fn in_bounds(&self, height: usize, width: usize) -> bool {
        self.height > 0 && self.width > 0 && self.bottom() <= height && self.right() <= width
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSet {
    pub rects: Vec<PatchRect>,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.rects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rects.is_empty()
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        self.rects.iter().any(|r| r.contains(y, x))
    }

    pub fn is_disjoint(&self) -> bool {
        self.rects.iter().enumerate().all(|(i, a)| {
            self.rects[i + 1..]
                .iter()
                .all(|b| a.intersection_area(b) == 0)
        })
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn side_length<R: Rng + ?Sized>(rng: &mut R, side: usize, frac: (f64, f64)) -> usize {
    let len = uniform(rng, frac.0 * side as f64, frac.1 * side as f64).round() as usize;
    len.clamp(1, side)
}

/// Samples up to `cfg.patch_count` pairwise-disjoint boxes. A box that
/// cannot be placed within [`PATCH_ATTEMPTS`] draws is skipped.
pub fn sample_patches<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    cfg: &TransformConfig,
    rng: &mut R,
) -> PatchSet {
    let mut rects: Vec<PatchRect> = Vec::with_capacity(cfg.patch_count);
    for _ in 0..cfg.patch_count {
        for _ in 0..PATCH_ATTEMPTS {
            let h = side_length(rng, height, cfg.patch_side_frac);
            let w = side_length(rng, width, cfg.patch_side_frac);
            let candidate = PatchRect {
                top: rng.random_range(0..=height - h),
                left: rng.random_range(0..=width - w),
                height: h,
                width: w,
            };
            if rects.iter().all(|r| r.intersection_area(&candidate) == 0) {
                rects.push(candidate);
                break;
            }
        }
    }
    PatchSet { rects }
}

/// One sample's frozen transform parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledTransform {
    pub angle_deg: f64,
    pub scale: f64,
    /// Translation in pixels, `(dy, dx)`.
    pub shift: (f64, f64),
    pub flip: bool,
    pub patches: PatchSet,
}

impl SampledTransform {
    pub fn identity() -> Self {
        Self {
            angle_deg: 0.0,
            scale: 1.0,
            shift: (0.0, 0.0),
            flip: false,
            patches: PatchSet::default(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(height: usize, width: usize, cfg: &TransformConfig, rng: &mut R) -> Self {
        let angle_deg = uniform(rng, -cfg.rot_degrees, cfg.rot_degrees);
        let scale = uniform(rng, cfg.scale_range.0, cfg.scale_range.1);
        let ty = cfg.translate_frac * height as f64;
        let tx = cfg.translate_frac * width as f64;
        let shift = (uniform(rng, -ty, ty), uniform(rng, -tx, tx));
        let flip = cfg.hflip_prob > 0.0 && rng.random::<f64>() < cfg.hflip_prob;
        let patches = if height >= 1 && width >= 1 {
            sample_patches(height, width, cfg, rng)
        } else {
            PatchSet::default()
        };
        Self {
            angle_deg,
            scale,
            shift,
            flip,
            patches,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.angle_deg == 0.0
            && self.scale == 1.0
            && self.shift == (0.0, 0.0)
            && !self.flip
            && self.patches.is_empty()
    }

    /// Source coordinate feeding output pixel `(oy, ox)`; `None` inside a patch.
    pub fn source_coord(&self, oy: usize, ox: usize, height: usize, width: usize) -> Option<(f64, f64)> {
        if self.patches.contains(oy, ox) {
            return None;
        }
        let ox = if self.flip { width - 1 - ox } else { ox };
        let cy = (height as f64 - 1.0) / 2.0;
        let cx = (width as f64 - 1.0) / 2.0;
        // Invert p_out = c + s R(theta) (p_src - c) + t.
        let dy = (oy as f64 - cy - self.shift.0) / self.scale;
        let dx = (ox as f64 - cx - self.shift.1) / self.scale;
        let (sin, cos) = self.angle_deg.to_radians().sin_cos();
        let sx = cos * dx + sin * dy + cx;
        let sy = -sin * dx + cos * dy + cy;
        Some((sy, sx))
    }
}

/// A batch of frozen per-sample transforms, applicable (and differentiable)
/// any number of times.
#[derive(Debug, Clone)]
pub struct FrozenTransform {
    pub samples: Vec<SampledTransform>,
    height: usize,
    width: usize,
    map: Option<BilinearMap>,
}

impl FrozenTransform {
    pub fn new(samples: Vec<SampledTransform>, height: usize, width: usize) -> Self {
        let map = if samples.iter().all(SampledTransform::is_identity) {
            None
        } else {
            Some(BilinearMap::from_fn(
                samples.len(),
                (height, width),
                (height, width),
                |b, oy, ox| samples[b].source_coord(oy, ox, height, width),
            ))
        };
        Self {
            samples,
            height,
            width,
            map,
        }
    }

    /// Draws parameters for `batch` samples. Each sample gets its own rng
    /// stream seeded from `rng`, so results do not depend on evaluation order.
    pub fn sample<R: RngCore + ?Sized>(
        batch: usize,
        height: usize,
        width: usize,
        cfg: &TransformConfig,
        rng: &mut R,
    ) -> Self {
        if !cfg.enabled {
            return Self::new(vec![SampledTransform::identity(); batch], height, width);
        }
        let seeds: Vec<u64> = (0..batch).map(|_| rng.next_u64()).collect();
        let samples = seeds
            .into_iter()
            .map(|s| SampledTransform::sample(height, width, cfg, &mut ChaCha8Rng::seed_from_u64(s)))
            .collect();
        Self::new(samples, height, width)
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if b != self.samples.len() || (h, w) != (self.height, self.width) {
            return Err(Error::Resolution {
                expected: vec![self.samples.len(), c, self.height, self.width],
                actual: vec![b, c, h, w],
            });
        }
        match &self.map {
            None => Ok(x.clone()),
            Some(map) => map.apply(x),
        }
    }
}

/// Samples fresh parameters for every element of `batch` and applies them.
pub fn random_transform<R: RngCore + ?Sized>(
    batch: &Tensor,
    cfg: &TransformConfig,
    rng: &mut R,
) -> Result<Tensor> {
    let (b, _, h, w) = batch.dims4()?;
    if b == 0 {
        return Err(Error::EmptyEval("random_transform on an empty batch".into()));
    }
    FrozenTransform::sample(b, h, w, cfg, rng).apply(batch)
}
