//! Sparse bilinear resampling expressed as four gather-and-weight taps.
//!
//! A `BilinearMap` is built once from per-pixel source coordinates and then
//! applied to a `[B, C, H, W]` tensor. Because the map is a fixed linear
//! operator on the pixels, gradients flow through `index_select` back to the
//! input.

use candle_core::Tensor;

use crate::error::{Error, Result};

/// Source location for one output pixel, in input pixel coordinates
/// (pixel centers at integers).
pub type SourceCoord = Option<(f64, f64)>;

#[derive(Debug, Clone)]
pub struct BilinearMap {
    batch: usize,
    in_hw: (usize, usize),
    out_hw: (usize, usize),
    index: [Vec<u32>; 4],
    weight: [Vec<f64>; 4],
}

impl BilinearMap {
    /// Builds a map from a source-coordinate function `f(b, oy, ox)`.
    ///
    /// Coordinates inside the pixel-area extent `[-0.5, side - 0.5]` are
    /// clamped to the pixel-center grid before interpolation; anything
    /// outside that extent, or `None`, produces an exact zero.
    pub fn from_fn<F>(batch: usize, in_hw: (usize, usize), out_hw: (usize, usize), f: F) -> Self
    where
        F: Fn(usize, usize, usize) -> SourceCoord,
    {
        let (ih, iw) = in_hw;
        let (oh, ow) = out_hw;
        let n = batch * oh * ow;
        let mut index: [Vec<u32>; 4] = std::array::from_fn(|_| Vec::with_capacity(n));
        let mut weight: [Vec<f64>; 4] = std::array::from_fn(|_| Vec::with_capacity(n));
        for b in 0..batch {
            let base = b * ih * iw;
            for oy in 0..oh {
                for ox in 0..ow {
                    let taps = f(b, oy, ox).and_then(|(sy, sx)| bilinear_taps(sy, sx, ih, iw));
                    match taps {
                        Some(taps) => {
                            for (k, (i, w)) in taps.into_iter().enumerate() {
                                index[k].push((base + i) as u32);
                                weight[k].push(w);
                            }
                        }
                        None => {
                            for k in 0..4 {
                                index[k].push(base as u32);
                                weight[k].push(0.0);
                            }
                        }
                    }
                }
            }
        }
        Self {
            batch,
            in_hw,
            out_hw,
            index,
            weight,
        }
    }

    /// Bilinear resize with half-pixel centers (the usual `align_corners=false`).
    pub fn resize(batch: usize, in_hw: (usize, usize), out_hw: (usize, usize)) -> Self {
        let sy = in_hw.0 as f64 / out_hw.0 as f64;
        let sx = in_hw.1 as f64 / out_hw.1 as f64;
        Self::from_fn(batch, in_hw, out_hw, |_, oy, ox| {
            Some(((oy as f64 + 0.5) * sy - 0.5, (ox as f64 + 0.5) * sx - 0.5))
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn out_hw(&self) -> (usize, usize) {
        self.out_hw
    }

    /// Applies the map to `x: [B, C, H_in, W_in]`, returning `[B, C, H_out, W_out]`.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if b != self.batch || (h, w) != self.in_hw {
            return Err(Error::Resolution {
                expected: vec![self.batch, c, self.in_hw.0, self.in_hw.1],
                actual: vec![b, c, h, w],
            });
        }
        let (oh, ow) = self.out_hw;
        let device = x.device();
        let dtype = x.dtype();
        let flat = x
            .reshape((b, c, h * w))?
            .transpose(0, 1)?
            .contiguous()?
            .reshape((c, b * h * w))?;
        let n = b * oh * ow;
        let mut acc: Option<Tensor> = None;
        for k in 0..4 {
            let idx = Tensor::from_slice(&self.index[k], n, device)?;
            let wts = Tensor::from_slice(&self.weight[k], (1, n), device)?.to_dtype(dtype)?;
            let term = flat.index_select(&idx, 1)?.broadcast_mul(&wts)?;
            acc = Some(match acc {
                None => term,
                Some(a) => (a + term)?,
            });
        }
        let out = acc.expect("four taps");
        Ok(out
            .reshape((c, b, oh, ow))?
            .transpose(0, 1)?
            .contiguous()?)
    }

    /// Applies the map to a single `[C, H, W]` image stored as a flat slice.
    /// Non-differentiable convenience used by the probe transforms.
    pub fn apply_slice(&self, image: &[f32], channels: usize) -> Vec<f32> {
        debug_assert_eq!(self.batch, 1);
        let (ih, iw) = self.in_hw;
        let (oh, ow) = self.out_hw;
        let plane = oh * ow;
        let mut out = vec![0f32; channels * plane];
        for ch in 0..channels {
            let src = &image[ch * ih * iw..(ch + 1) * ih * iw];
            for p in 0..plane {
                let mut v = 0f64;
                for k in 0..4 {
                    let wgt = self.weight[k][p];
                    if wgt != 0.0 {
                        v += wgt * src[self.index[k][p] as usize] as f64;
                    }
                }
                out[ch * plane + p] = v as f32;
            }
        }
        out
    }
}

/// Four `(flat index, weight)` taps, or `None` when the point lies outside
/// the pixel-area extent.
fn bilinear_taps(sy: f64, sx: f64, h: usize, w: usize) -> Option<[(usize, f64); 4]> {
    if !sy.is_finite() || !sx.is_finite() {
        return None;
    }
    if sy < -0.5 || sy > h as f64 - 0.5 || sx < -0.5 || sx > w as f64 - 0.5 {
        return None;
    }
    let sy = sy.clamp(0.0, (h - 1) as f64);
    let sx = sx.clamp(0.0, (w - 1) as f64);
    let y0 = sy.floor() as usize;
    let x0 = sx.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = sy - y0 as f64;
    let fx = sx - x0 as f64;
    Some([
        (y0 * w + x0, (1.0 - fy) * (1.0 - fx)),
        (y0 * w + x1, (1.0 - fy) * fx),
        (y1 * w + x0, fy * (1.0 - fx)),
        (y1 * w + x1, fy * fx),
    ])
}

/// Differentiable bilinear resize of a `[B, C, H, W]` batch. Equal sizes
/// return the input unchanged.
pub fn resize_bilinear(x: &Tensor, out_hw: (usize, usize)) -> Result<Tensor> {
    let (b, _, h, w) = x.dims4()?;
    if (h, w) == out_hw {
        return Ok(x.clone());
    }
    BilinearMap::resize(b, (h, w), out_hw).apply(x)
}
