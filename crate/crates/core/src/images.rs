//! In-memory labeled image collections and image file IO.
//!
//! Images are stored channel-major (`[C, H, W]`) as `f32` in `[0, 1]`.

use std::path::Path;

use candle_core::{Device, Tensor};
use image::imageops::FilterType;
use image::{DynamicImage, ImageBuffer, Rgb};

use crate::error::{Error, Result};

/// `[C, H, W]`
pub type Shape3 = [usize; 3];

pub fn numel(shape: Shape3) -> usize {
    shape.iter().product()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet {
    shape: Shape3,
    data: Vec<f32>,
    labels: Vec<usize>,
}

impl ImageSet {
    pub fn new(shape: Shape3, data: Vec<f32>, labels: Vec<usize>) -> Result<Self> {
        if data.len() != labels.len() * numel(shape) {
            return Err(Error::Resolution {
                expected: vec![labels.len(), shape[0], shape[1], shape[2]],
                actual: vec![data.len()],
            });
        }
        Ok(Self { shape, data, labels })
    }

    pub fn empty(shape: Shape3) -> Self {
        Self {
            shape,
            data: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn push(&mut self, image: &[f32], label: usize) -> Result<()> {
        if image.len() != numel(self.shape) {
            return Err(Error::Resolution {
                expected: self.shape.to_vec(),
                actual: vec![image.len()],
            });
        }
        self.data.extend_from_slice(image);
        self.labels.push(label);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = numel(self.shape);
        &self.data[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Stacks the selected images into a `[B, C, H, W]` tensor.
    pub fn tensor(&self, indices: &[usize], device: &Device) -> Result<Tensor> {
        let n = numel(self.shape);
        let mut flat = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            flat.extend_from_slice(self.image(i));
        }
        let [c, h, w] = self.shape;
        Ok(Tensor::from_vec(flat, (indices.len(), c, h, w), device)?)
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut out = Self::empty(self.shape);
        for &i in indices {
            out.data.extend_from_slice(self.image(i));
            out.labels.push(self.labels[i]);
        }
        out
    }

    /// Indices grouped by label, for labels `0..num_labels`.
    pub fn indices_by_label(&self, num_labels: usize) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); num_labels];
        for (i, &l) in self.labels.iter().enumerate() {
            if l < num_labels {
                out[l].push(i);
            }
        }
        out
    }
}

/// Converts a decoded image to `[C, H, W]` floats at the given shape.
/// One channel means luma, three means RGB.
pub fn image_to_chw(img: &DynamicImage, shape: Shape3) -> Result<Vec<f32>> {
    let [c, h, w] = shape;
    let resized = if img.width() as usize == w && img.height() as usize == h {
        img.clone()
    } else {
        img.resize_exact(w as u32, h as u32, FilterType::Triangle)
    };
    let mut out = vec![0f32; c * h * w];
    match c {
        1 => {
            let g = resized.to_luma8();
            for (i, p) in g.pixels().enumerate() {
                out[i] = p.0[0] as f32 / 255.0;
            }
        }
        3 => {
            let rgb = resized.to_rgb8();
            for (i, p) in rgb.pixels().enumerate() {
                for ch in 0..3 {
                    out[ch * h * w + i] = p.0[ch] as f32 / 255.0;
                }
            }
        }
        other => {
            return Err(Error::Config(format!("unsupported channel count {other}")));
        }
    }
    Ok(out)
}

pub fn load_image(path: &Path, shape: Shape3) -> Result<Vec<f32>> {
    let img = image::open(path)?;
    image_to_chw(&img, shape)
}

/// Quantizes a `[3, H, W]` (or `[1, H, W]`) float image to 8-bit RGB.
pub fn chw_to_rgb8(image: &[f32], shape: Shape3) -> ImageBuffer<Rgb<u8>, Vec<u8>> {
    let [c, h, w] = shape;
    let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        if c == 1 {
            let v = q(image[i]);
            Rgb([v, v, v])
        } else {
            Rgb([q(image[i]), q(image[h * w + i]), q(image[2 * h * w + i])])
        }
    })
}

pub fn save_png(path: &Path, image: &[f32], shape: Shape3) -> Result<()> {
    chw_to_rgb8(image, shape).save(path)?;
    Ok(())
}
