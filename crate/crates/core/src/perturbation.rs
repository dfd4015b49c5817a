//! The universal perturbation, its norm-ball projection, application to
//! image batches, and the binary file format.
//!
//! File layout, all integers little-endian:
//!
//! ```text
//! "UIPERT01"            8 bytes magic
//! meta_len              u32
//! metadata              meta_len bytes of UTF-8 JSON
//! payload               f32 array in C order [C, H, W]
//! ```

use std::path::Path;

use candle_core::{Device, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::images::{numel, Shape3};

pub const MAGIC: &[u8; 8] = b"UIPERT01";

/// Slack allowed on the l-infinity bound.
pub const LINF_SLACK: f64 = 1e-7;
/// Slack allowed on the l2 bound.
pub const L2_SLACK: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    #[default]
    Linf,
    L2,
}

impl std::fmt::Display for NormKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NormKind::Linf => "linf",
            NormKind::L2 => "l2",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationMeta {
    pub shape: Shape3,
    pub epsilon: f64,
    pub norm: NormKind,
    pub target: String,
    pub backend: String,
    pub steps: usize,
    pub seed: u64,
    /// Unix seconds.
    pub created: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
}

impl PerturbationMeta {
    /// Creation time honoring `SOURCE_DATE_EPOCH` for reproducible artifacts.
    pub fn now() -> u64 {
        if let Some(v) = std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|v| v.parse().ok()) {
            return v;
        }
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    data: Vec<f32>,
    pub meta: PerturbationMeta,
}

impl Perturbation {
    pub fn new(data: Vec<f32>, meta: PerturbationMeta) -> Result<Self> {
        if data.len() != numel(meta.shape) {
            return Err(Error::Resolution {
                expected: meta.shape.to_vec(),
                actual: vec![data.len()],
            });
        }
        if !(meta.epsilon > 0.0 && meta.epsilon.is_finite()) {
            return Err(Error::range("epsilon", format!("must be > 0, got {}", meta.epsilon)));
        }
        Ok(Self { data, meta })
    }

    pub fn zeros(shape: Shape3, epsilon: f64, norm: NormKind) -> Result<Self> {
        Self::new(
            vec![0.0; numel(shape)],
            PerturbationMeta {
                shape,
                epsilon,
                norm,
                target: String::new(),
                backend: String::new(),
                steps: 0,
                seed: 0,
                created: 0,
                config_digest: None,
            },
        )
    }

    /// Standard-normal draw per entry, projected onto the norm ball.
    pub fn init<R: Rng + ?Sized>(shape: Shape3, epsilon: f64, norm: NormKind, seed: u64, rng: &mut R) -> Result<Self> {
        let data: Vec<f32> = (0..numel(shape))
            .map(|_| rng.sample::<f64, _>(StandardNormal) as f32)
            .collect();
        let mut t = Self::new(
            data,
            PerturbationMeta {
                seed,
                ..Self::zeros(shape, epsilon, norm)?.meta
            },
        )?;
        t.project();
        Ok(t)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn shape(&self) -> Shape3 {
        self.meta.shape
    }

    pub fn epsilon(&self) -> f64 {
        self.meta.epsilon
    }

    pub fn norm_kind(&self) -> NormKind {
        self.meta.norm
    }

    pub fn linf(&self) -> f64 {
        self.data.iter().fold(0f64, |m, v| m.max(v.abs() as f64))
    }

    pub fn l2(&self) -> f64 {
        self.data.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt()
    }

    /// Whether the norm bound holds within its slack.
    pub fn within_budget(&self) -> bool {
        match self.meta.norm {
            NormKind::Linf => self.linf() <= self.meta.epsilon + LINF_SLACK,
            NormKind::L2 => self.l2() <= self.meta.epsilon + L2_SLACK,
        }
    }

    /// Replaces the values and re-projects.
    pub fn set_data(&mut self, data: Vec<f32>) -> Result<()> {
        if data.len() != self.data.len() {
            return Err(Error::Resolution {
                expected: self.meta.shape.to_vec(),
                actual: vec![data.len()],
            });
        }
        self.data = data;
        self.project();
        Ok(())
    }

    /// Projects onto the ball: elementwise clamp for l-infinity, radial
    /// rescale for l2. Points already inside are left untouched.
    pub fn project(&mut self) {
        project_values(&mut self.data, self.meta.epsilon, self.meta.norm);
    }

    pub fn projected(mut self) -> Self {
        self.project();
        self
    }

    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        let [c, h, w] = self.meta.shape;
        Ok(Tensor::from_slice(&self.data, (c, h, w), device)?)
    }

    /// `clip(x + T, 0, 1)` for every image of `batch: [B, C, H, W]`.
    pub fn apply(&self, batch: &Tensor) -> Result<Tensor> {
        apply_tensor(&self.to_tensor(batch.device())?.to_dtype(batch.dtype())?, batch)
    }

    /// `clip(x + T, 0, 1)` for one flat `[C, H, W]` image.
    pub fn apply_slice(&self, image: &[f32]) -> Result<Vec<f32>> {
        if image.len() != self.data.len() {
            return Err(Error::Resolution {
                expected: self.meta.shape.to_vec(),
                actual: vec![image.len()],
            });
        }
        Ok(image
            .iter()
            .zip(&self.data)
            .map(|(x, t)| (x + t).clamp(0.0, 1.0))
            .collect())
    }

    pub fn metadata_json(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(&self.meta)?)
    }

    /// SHA-256 of the serialized metadata, hex encoded.
    pub fn metadata_digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.metadata_json()?)))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = self.metadata_json()?;
        let meta_len = u32::try_from(meta.len()).map_err(|_| Error::Format("metadata too large".into()))?;
        let mut out = Vec::with_capacity(12 + meta.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&meta_len.to_le_bytes());
        out.extend_from_slice(&meta);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(Error::Format(format!("truncated header ({} bytes)", bytes.len())));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let meta_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let meta_end = 12usize
            .checked_add(meta_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Format("truncated metadata".into()))?;
        let meta: PerturbationMeta = serde_json::from_slice(&bytes[12..meta_end])
            .map_err(|e| Error::Format(format!("metadata: {e}")))?;
        let payload = &bytes[meta_end..];
        let expected = numel(meta.shape) * 4;
        if payload.len() < expected {
            return Err(Error::Format(format!(
                "truncated payload: {} of {expected} bytes",
                payload.len()
            )));
        }
        if payload.len() > expected {
            return Err(Error::Format(format!(
                "{} trailing bytes after payload",
                payload.len() - expected
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Self::new(data, meta).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Largest `f32` not above `epsilon`, so an f32 clamp never exceeds the budget.
pub fn linf_bound(epsilon: f64) -> f32 {
    let e = epsilon as f32;
    if e as f64 > epsilon && e > 0.0 {
        f32::from_bits(e.to_bits() - 1)
    } else {
        e
    }
}

pub fn project_values(data: &mut [f32], epsilon: f64, norm: NormKind) {
    match norm {
        NormKind::Linf => {
            let e = linf_bound(epsilon);
            for v in data.iter_mut() {
                *v = v.clamp(-e, e);
            }
        }
        NormKind::L2 => {
            let n = data.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            if n > epsilon {
                let s = (epsilon / n) as f32;
                for v in data.iter_mut() {
                    *v *= s;
                }
            }
        }
    }
}

/// `clip(x + t, 0, 1)` with `t: [C, H, W]` broadcast over `batch: [B, C, H, W]`.
/// The gradient passes through inside the pixel range and is zero outside.
pub fn apply_tensor(t: &Tensor, batch: &Tensor) -> Result<Tensor> {
    let dims = batch.dims();
    if dims.len() != 4 || &dims[1..] != t.dims() {
        return Err(Error::Resolution {
            expected: t.dims().to_vec(),
            actual: dims.to_vec(),
        });
    }
    Ok(batch.broadcast_add(t)?.clamp(0f32, 1f32)?)
}
