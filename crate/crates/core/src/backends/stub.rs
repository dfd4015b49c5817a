//! Small deterministic encoders for tests, smoke runs, and synthetic worlds.
//!
//! Image towers are seeded random projections (linear, or a one-hidden-layer
//! tanh network). The text tower averages per-token vectors: tokens found in
//! an optional lookup table use the stored vector, every other token gets a
//! pseudo-random vector derived from a hash of the token and the seed.

use std::collections::HashMap;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::concept::EncoderBackend;
use crate::error::{Error, Result};

fn gaussian(rows: usize, cols: usize, scale: f64, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (z * scale) as f32
        })
        .collect()
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Bag-of-tokens text encoder.
#[derive(Debug, Clone)]
pub struct TokenTextEncoder {
    dim: usize,
    seed: u64,
    table: HashMap<String, Vec<f32>>,
}

impl TokenTextEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self {
            dim,
            seed,
            table: HashMap::new(),
        }
    }

    /// Pins the vector used for `token` (lowercased).
    pub fn insert(&mut self, token: &str, vector: Vec<f32>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::backend("token-text", format!("vector length {} != {}", vector.len(), self.dim)));
        }
        self.table.insert(token.to_lowercase(), vector);
        Ok(())
    }

    pub fn token_vector(&self, token: &str) -> Vec<f32> {
        if let Some(v) = self.table.get(token) {
            return v.clone();
        }
        let digest = Sha256::digest(token.as_bytes());
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        let seed = u64::from_le_bytes(bytes) ^ self.seed.rotate_left(17);
        gaussian(1, self.dim, 1.0 / (self.dim as f64).sqrt(), seed)
    }

    pub fn encode(&self, text: &str) -> Vec<f32> {
        let tokens = tokenize(text);
        let mut acc = vec![0f64; self.dim];
        for t in &tokens {
            for (a, v) in acc.iter_mut().zip(self.token_vector(t)) {
                *a += v as f64;
            }
        }
        let n = tokens.len().max(1) as f64;
        acc.into_iter().map(|a| (a / n) as f32).collect()
    }

    pub fn encode_batch(&self, texts: &[String], device: &Device) -> Result<Tensor> {
        let flat: Vec<f32> = texts.iter().flat_map(|t| self.encode(t)).collect();
        Ok(Tensor::from_vec(flat, (texts.len(), self.dim), device)?)
    }
}

fn check_input(images: &Tensor, channels: usize, res: usize) -> Result<()> {
    let (_, c, h, w) = images.dims4()?;
    if (c, h, w) != (channels, res, res) {
        return Err(Error::Resolution {
            expected: vec![channels, res, res],
            actual: vec![c, h, w],
        });
    }
    Ok(())
}

/// `E(x) = W vec(x)` with a seeded Gaussian `W`.
#[derive(Debug, Clone)]
pub struct LinearEncoder {
    name: String,
    channels: usize,
    resolution: usize,
    dim: usize,
    weight: Tensor,
    pub text: TokenTextEncoder,
}

impl LinearEncoder {
    pub fn new(channels: usize, resolution: usize, dim: usize, seed: u64) -> Result<Self> {
        let n = channels * resolution * resolution;
        let w = gaussian(dim, n, 1.0 / (n as f64).sqrt(), seed);
        Self::with_weight(channels, resolution, Tensor::from_vec(w, (dim, n), &Device::Cpu)?, seed)
    }

    /// Uses the given `[dim, C*R*R]` weight.
    pub fn with_weight(channels: usize, resolution: usize, weight: Tensor, seed: u64) -> Result<Self> {
        let (dim, n) = weight.dims2()?;
        if n != channels * resolution * resolution {
            return Err(Error::backend("linear-stub", format!("weight has {n} columns, expected {}", channels * resolution * resolution)));
        }
        Ok(Self {
            name: "linear-stub".into(),
            channels,
            resolution,
            dim,
            weight: weight.to_dtype(DType::F32)?,
            text: TokenTextEncoder::new(dim, seed.wrapping_add(1)),
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
}

impl EncoderBackend for LinearEncoder {
    fn name(&self) -> &str {
        &self.name
    }

    fn embed_dim(&self) -> usize {
        self.dim
    }

    fn image_resolution(&self) -> usize {
        self.resolution
    }

    fn encode_image(&self, images: &Tensor) -> Result<Tensor> {
        check_input(images, self.channels, self.resolution)?;
        let b = images.dim(0)?;
        let w = self.weight.to_dtype(images.dtype())?;
        Ok(images.reshape((b, ()))?.matmul(&w.t()?)?)
    }

    fn encode_text(&self, texts: &[String]) -> Result<Tensor> {
        self.text.encode_batch(texts, &Device::Cpu)
    }
}

/// `E(x) = W2 tanh(W1 vec(x) + b1)`: a smooth nonlinear stand-in.
#[derive(Debug, Clone)]
pub struct TanhEncoder {
    name: String,
    channels: usize,
    resolution: usize,
    dim: usize,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    pub text: TokenTextEncoder,
}

impl TanhEncoder {
    pub const HIDDEN: usize = 128;

    pub fn new(channels: usize, resolution: usize, dim: usize, seed: u64) -> Result<Self> {
        let n = channels * resolution * resolution;
        let h = Self::HIDDEN;
        let dev = Device::Cpu;
        Ok(Self {
            name: "tanh-stub".into(),
            channels,
            resolution,
            dim,
            w1: Tensor::from_vec(gaussian(h, n, 2.0 / (n as f64).sqrt(), seed), (h, n), &dev)?,
            b1: Tensor::from_vec(gaussian(1, h, 0.1, seed ^ 0x9e37), h, &dev)?,
            w2: Tensor::from_vec(gaussian(dim, h, 1.0 / (h as f64).sqrt(), seed ^ 0x79b9), (dim, h), &dev)?,
            text: TokenTextEncoder::new(dim, seed.wrapping_add(1)),
        })
    }
}

impl EncoderBackend for TanhEncoder {
    fn name(&self) -> &str {
        &self.name
    }

    fn embed_dim(&self) -> usize {
        self.dim
    }

    fn image_resolution(&self) -> usize {
        self.resolution
    }

    fn encode_image(&self, images: &Tensor) -> Result<Tensor> {
        check_input(images, self.channels, self.resolution)?;
        let b = images.dim(0)?;
        let dt = images.dtype();
        let hidden = images
            .reshape((b, ()))?
            .matmul(&self.w1.to_dtype(dt)?.t()?)?
            .broadcast_add(&self.b1.to_dtype(dt)?)?
            .tanh()?;
        Ok(hidden.matmul(&self.w2.to_dtype(dt)?.t()?)?)
    }

    fn encode_text(&self, texts: &[String]) -> Result<Tensor> {
        self.text.encode_batch(texts, &Device::Cpu)
    }
}
