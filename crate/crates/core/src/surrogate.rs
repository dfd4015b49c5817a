//! Direction-based surrogate: image and text feature directions, their
//! cosine similarities used as logits, and the negative log-likelihood of the
//! target concept.
//!
//! All functions are dtype-generic over candle tensors; the loss itself is
//! evaluated in `f64` and cast back to the input dtype.

use candle_core::{DType, Tensor, D};

use crate::error::{Error, Result};

/// Directions whose Euclidean norm falls below this are rejected.
pub const ZERO_DIRECTION_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct DirectionBatch {
    /// `[B, d]`
    pub d_x: Tensor,
    /// `[B, d]`
    pub d_target: Tensor,
    /// `[B, M, d]`
    pub d_negatives: Tensor,
}

impl DirectionBatch {
    pub fn new(d_x: Tensor, d_target: Tensor, d_negatives: Tensor) -> Result<Self> {
        let (b, d) = d_x.dims2()?;
        let (bt, dt) = d_target.dims2()?;
        let (bn, _m, dn) = d_negatives.dims3()?;
        if (bt, dt) != (b, d) || bn != b || dn != d {
            return Err(Error::Resolution {
                expected: vec![b, d],
                actual: vec![bt, dt, bn, dn],
            });
        }
        Ok(Self {
            d_x,
            d_target,
            d_negatives,
        })
    }

    pub fn batch(&self) -> usize {
        self.d_x.dim(0).unwrap_or(0)
    }

    pub fn num_negatives(&self) -> usize {
        self.d_negatives.dim(1).unwrap_or(0)
    }
}

#[derive(Debug, Clone)]
pub struct LogitBatch {
    /// `[B]`
    pub target_sim: Tensor,
    /// `[B, M]`
    pub negative_sims: Tensor,
}

impl LogitBatch {
    pub fn from_values(target: &[f64], negatives: &[Vec<f64>], device: &candle_core::Device) -> Result<Self> {
        let b = target.len();
        let m = negatives.first().map_or(0, Vec::len);
        if negatives.len() != b || negatives.iter().any(|r| r.len() != m) {
            return Err(Error::Resolution {
                expected: vec![b, m],
                actual: vec![negatives.len()],
            });
        }
        let flat: Vec<f64> = negatives.iter().flatten().copied().collect();
        Ok(Self {
            target_sim: Tensor::from_slice(target, b, device)?,
            negative_sims: Tensor::from_vec(flat, (b, m), device)?,
        })
    }

    pub fn target_values(&self) -> Result<Vec<f64>> {
        Ok(self.target_sim.to_dtype(DType::F64)?.to_vec1::<f64>()?)
    }

    pub fn negative_values(&self) -> Result<Vec<Vec<f64>>> {
        Ok(self.negative_sims.to_dtype(DType::F64)?.to_vec2::<f64>()?)
    }
}

fn row_norms(t: &Tensor) -> Result<Tensor> {
    Ok(t.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?)
}

/// Fails on the first row (in flattened leading-dim order) whose norm is
/// below [`ZERO_DIRECTION_TOL`].
fn guard_rows(t: &Tensor, which: &'static str) -> Result<()> {
    let norms = row_norms(&t.detach())?
        .flatten_all()?
        .to_dtype(DType::F64)?
        .to_vec1::<f64>()?;
    match norms.iter().position(|n| !(*n >= ZERO_DIRECTION_TOL)) {
        Some(row) => Err(Error::ZeroDirection {
            which,
            row,
            norm: norms[row],
        }),
        None => Ok(()),
    }
}

/// `E_I(perturbed) - E_I(clean)` per sample.
pub fn image_direction(perturbed_emb: &Tensor, clean_emb: &Tensor) -> Result<Tensor> {
    if perturbed_emb.dims() != clean_emb.dims() || perturbed_emb.rank() != 2 {
        return Err(Error::Resolution {
            expected: clean_emb.dims().to_vec(),
            actual: perturbed_emb.dims().to_vec(),
        });
    }
    let d_x = (perturbed_emb - clean_emb)?;
    guard_rows(&d_x, "image direction")?;
    Ok(d_x)
}

/// Target and negative text directions relative to each sample's own source
/// concept: `(target - source[b], negatives[m] - source[b])`.
pub fn text_directions(target_emb: &Tensor, negative_embs: &Tensor, source_embs: &Tensor) -> Result<(Tensor, Tensor)> {
    let d = target_emb.dims1()?;
    let (m, dn) = negative_embs.dims2()?;
    let (b, ds) = source_embs.dims2()?;
    if dn != d || ds != d {
        return Err(Error::Resolution {
            expected: vec![d],
            actual: vec![dn, ds],
        });
    }
    let d_target = target_emb.unsqueeze(0)?.broadcast_sub(source_embs)?;
    let d_negatives = negative_embs
        .unsqueeze(0)?
        .broadcast_sub(&source_embs.unsqueeze(1)?)?;
    guard_rows(&d_target, "target text direction")?;
    guard_rows(&d_negatives, "negative text direction")?;
    debug_assert_eq!(d_negatives.dims(), &[b, m, d]);
    Ok((d_target, d_negatives))
}

fn unit_rows(t: &Tensor) -> Result<Tensor> {
    Ok(t.broadcast_div(&row_norms(t)?)?)
}

/// Cosine similarity of each image direction with its target direction and
/// with each of its negative directions.
pub fn direction_logits(dirs: &DirectionBatch) -> Result<LogitBatch> {
    let x = unit_rows(&dirs.d_x)?;
    let t = unit_rows(&dirs.d_target)?;
    let n = unit_rows(&dirs.d_negatives)?;
    let target_sim = (&x * &t)?.sum(D::Minus1)?;
    let negative_sims = n.broadcast_mul(&x.unsqueeze(1)?)?.sum(D::Minus1)?;
    Ok(LogitBatch {
        target_sim,
        negative_sims,
    })
}

/// Batch-mean negative log-likelihood of the target concept under a softmax
/// over `[target, negatives...] / temperature`.
pub fn nll_loss(logits: &LogitBatch, temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::range("craft.temperature", format!("must be > 0, got {temperature}")));
    }
    let dtype = logits.target_sim.dtype();
    let target = logits.target_sim.to_dtype(DType::F64)?;
    let negatives = logits.negative_sims.to_dtype(DType::F64)?;
    let b = target.dims1()?;
    if b == 0 {
        return Err(Error::EmptyEval("loss over an empty batch".into()));
    }
    let z = (Tensor::cat(&[&target.unsqueeze(1)?, &negatives], 1)? / temperature)?;
    let shift = z.max_keepdim(1)?.detach();
    let lse = (z.broadcast_sub(&shift)?.exp()?.sum_keepdim(1)?.log()? + &shift)?;
    let per_sample = (lse.squeeze(1)? - z.narrow(1, 0, 1)?.squeeze(1)?)?;
    Ok(per_sample.mean(0)?.to_dtype(dtype)?)
}

/// Full surrogate evaluation from embeddings: directions, logits, loss.
pub fn surrogate_loss(
    perturbed_emb: &Tensor,
    clean_emb: &Tensor,
    target_emb: &Tensor,
    negative_embs: &Tensor,
    source_embs: &Tensor,
    temperature: f64,
) -> Result<(Tensor, LogitBatch)> {
    let d_x = image_direction(perturbed_emb, clean_emb)?;
    let (d_target, d_negatives) = text_directions(target_emb, negative_embs, source_embs)?;
    let logits = direction_logits(&DirectionBatch::new(d_x, d_target, d_negatives)?)?;
    let loss = nll_loss(&logits, temperature)?;
    Ok((loss, logits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn t2(v: &[&[f64]]) -> Tensor {
        let rows = v.len();
        let cols = v[0].len();
        let flat: Vec<f64> = v.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::from_vec(flat, (rows, cols), &Device::Cpu).unwrap()
    }

    #[test]
    fn image_direction_is_difference() {
        let d = image_direction(&t2(&[&[0.3, 0.2]]), &t2(&[&[0.1, 0.2]])).unwrap();
        let v = d.to_vec2::<f64>().unwrap();
        assert!((v[0][0] - 0.2).abs() < 1e-15 && v[0][1] == 0.0);
    }

    #[test]
    fn null_perturbation_is_zero_direction() {
        let x = t2(&[&[0.1, 0.2], &[0.5, 0.5]]);
        assert!(matches!(
            image_direction(&x, &x),
            Err(Error::ZeroDirection { row: 0, .. })
        ));
    }

    #[test]
    fn text_directions_by_hand() {
        let dev = Device::Cpu;
        let target = Tensor::new(&[1f64, 1.0], &dev).unwrap();
        let negs = t2(&[&[0.0, 2.0]]);
        let src = t2(&[&[1.0, 0.0]]);
        let (dt, dn) = text_directions(&target, &negs, &src).unwrap();
        assert_eq!(dt.to_vec2::<f64>().unwrap(), vec![vec![0.0, 1.0]]);
        assert_eq!(dn.to_vec3::<f64>().unwrap(), vec![vec![vec![-1.0, 2.0]]]);

        let zero_src = t2(&[&[0.0, 0.0]]);
        let (dt, _) = text_directions(&Tensor::new(&[1f64, 0.0], &dev).unwrap(), &negs, &zero_src).unwrap();
        assert_eq!(dt.to_vec2::<f64>().unwrap(), vec![vec![1.0, 0.0]]);
    }

    #[test]
    fn coincident_target_and_source_rejected() {
        let dev = Device::Cpu;
        let target = Tensor::new(&[1f64, 0.0], &dev).unwrap();
        let negs = t2(&[&[0.0, 2.0]]);
        let src = t2(&[&[1.0, 0.0]]);
        assert!(matches!(
            text_directions(&target, &negs, &src),
            Err(Error::ZeroDirection { .. })
        ));
    }

    fn cos(x: &[f64], y: &[f64]) -> f64 {
        let dirs = DirectionBatch::new(t2(&[x]), t2(&[y]), t2(&[y]).unsqueeze(1).unwrap()).unwrap();
        direction_logits(&dirs).unwrap().target_values().unwrap()[0]
    }

    #[test]
    fn cosine_examples() {
        assert!((cos(&[1.0, 0.0], &[1.0, 0.0]) - 1.0).abs() < 1e-12);
        assert!(cos(&[1.0, 0.0], &[0.0, 1.0]).abs() < 1e-12);
        assert!((cos(&[1.0, 1.0], &[1.0, 0.0]) - 0.70710678).abs() < 1e-8);
    }

    #[test]
    fn uniform_logits_give_log_of_class_count() {
        let logits = LogitBatch::from_values(&[0.3], &[vec![0.3; 9]], &Device::Cpu).unwrap();
        let l = nll_loss(&logits, 1.0).unwrap().to_scalar::<f64>().unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn hand_evaluated_loss() {
        let logits = LogitBatch::from_values(&[1.0], &[vec![0.0, 0.0]], &Device::Cpu).unwrap();
        let l = nll_loss(&logits, 1.0).unwrap().to_scalar::<f64>().unwrap();
        let e = std::f64::consts::E;
        assert!((l - -(e / (e + 2.0)).ln()).abs() < 1e-12);
        assert!((l - 0.55144).abs() < 1e-5);
    }

    #[test]
    fn raising_target_similarity_lowers_loss() {
        let mut prev = f64::INFINITY;
        for s in [-1.0, -0.5, 0.0, 0.5, 1.0] {
            let logits = LogitBatch::from_values(&[s], &[vec![0.2, -0.1, 0.4]], &Device::Cpu).unwrap();
            let l = nll_loss(&logits, 1.0).unwrap().to_scalar::<f64>().unwrap();
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn non_positive_temperature_rejected() {
        let logits = LogitBatch::from_values(&[0.0], &[vec![0.0]], &Device::Cpu).unwrap();
        assert!(matches!(nll_loss(&logits, 0.0), Err(Error::Range { .. })));
        assert!(matches!(nll_loss(&logits, -1.0), Err(Error::Range { .. })));
    }

    #[test]
    fn loss_keeps_input_dtype() {
        let logits = LogitBatch {
            target_sim: Tensor::new(&[0.5f32], &Device::Cpu).unwrap(),
            negative_sims: Tensor::new(&[[0.1f32, 0.2]], &Device::Cpu).unwrap(),
        };
        assert_eq!(nll_loss(&logits, 1.0).unwrap().dtype(), DType::F32);
    }
}
