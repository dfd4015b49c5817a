//! The perturbation crafting loop.

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::concept::{ConceptCache, EncoderBackend};
use crate::error::{Error, Result};
use crate::images::{ImageSet, Shape3};
use crate::perturbation::{apply_tensor, NormKind, Perturbation, PerturbationMeta};
use crate::sampler::resize_bilinear;
use crate::surrogate::{direction_logits, nll_loss, text_directions, DirectionBatch, ZERO_DIRECTION_TOL};
use crate::transform::{random_transform, TransformConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CraftConfig {
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epsilon: f64,
    pub norm: NormKind,
    pub temperature: f64,
    /// `[C, H, W]` of the perturbation, the victim's operational resolution.
    pub resolution: Shape3,
    pub seed: u64,
    /// Loss-trace sampling interval in steps.
    pub loss_trace_every: usize,
}

impl Default for CraftConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            lr: 0.01,
            weight_decay: 1e-5,
            batch_size: 64,
            epsilon: 32.0 / 255.0,
            norm: NormKind::Linf,
            temperature: 1.0,
            resolution: [3, 32, 32],
            seed: 0,
            loss_trace_every: 10,
        }
    }
}

impl CraftConfig {
    /// Every violated constraint, as `field: message`.
    pub fn violations(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut bad = |field: &str, msg: String| out.push((format!("craft.{field}"), msg));
        if self.steps < 1 {
            bad("steps", "must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            bad("lr", format!("must be > 0, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            bad("weight_decay", format!("must be >= 0, got {}", self.weight_decay));
        }
        if self.batch_size < 1 {
            bad("batch_size", "must be >= 1".into());
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            bad("epsilon", format!("must be > 0, got {}", self.epsilon));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            bad("temperature", format!("must be > 0, got {}", self.temperature));
        }
        if self.resolution.iter().any(|&d| d == 0) {
            bad("resolution", format!("dimensions must be positive, got {:?}", self.resolution));
        }
        if self.loss_trace_every < 1 {
            bad("loss_trace_every", "must be >= 1".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        match self.violations().into_iter().next() {
            Some((field, message)) => Err(Error::Range { field, message }),
            None => Ok(()),
        }
    }
}

/// Diagnostics for one finished optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    /// 1-based.
    pub step: usize,
    /// Batch-mean surrogate loss before the update.
    pub loss: f64,
    /// Norms of the perturbation after projection.
    pub linf: f64,
    pub l2: f64,
    /// Samples that contributed to the loss.
    pub batch: usize,
}

#[derive(Debug, Clone)]
pub struct CraftOutcome {
    pub perturbation: Perturbation,
    /// Steps 1, every `loss_trace_every`-th, and the last.
    pub trace: Vec<StepRecord>,
    /// POOD samples excluded because their label names the target or a negative.
    pub dropped_samples: usize,
}

impl CraftOutcome {
    pub fn trace_csv(&self) -> String {
        let mut s = String::from("step,loss,linf,l2\n");
        for r in &self.trace {
            s.push_str(&format!("{},{:.9},{:.9},{:.9}\n", r.step, r.loss, r.linf, r.l2));
        }
        s
    }
}

/// Independent random streams so that changing one consumer does not shift
/// the others.
struct Streams {
    init: ChaCha8Rng,
    batch: ChaCha8Rng,
    transform: ChaCha8Rng,
    template: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let mut master = ChaCha8Rng::seed_from_u64(seed);
        let mut child = || ChaCha8Rng::seed_from_u64(master.next_u64());
        Self {
            init: child(),
            batch: child(),
            transform: child(),
            template: child(),
        }
    }
}

/// Epoch-wise shuffled batches over a fixed index pool.
struct BatchCursor {
    pool: Vec<usize>,
    order: Vec<usize>,
    pos: usize,
}

impl BatchCursor {
    fn new(pool: Vec<usize>) -> Self {
        Self {
            order: pool.clone(),
            pos: pool.len(),
            pool,
        }
    }

    fn next(&mut self, size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let size = size.min(self.pool.len());
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.clone_from(&self.pool);
                self.order.shuffle(rng);
                self.pos = 0;
            }
            let take = (size - out.len()).min(self.order.len() - self.pos);
            out.extend_from_slice(&self.order[self.pos..self.pos + take]);
            self.pos += take;
        }
        out
    }
}

/// Rows of `d_x` whose norm exceeds the zero-direction tolerance.
fn live_rows(d_x: &Tensor) -> Result<Vec<u32>> {
    let norms = d_x.to_dtype(DType::F64)?.sqr()?.sum(1)?.sqrt()?.to_vec1::<f64>()?;
    Ok(norms
        .iter()
        .enumerate()
        .filter(|(_, n)| **n > ZERO_DIRECTION_TOL)
        .map(|(i, _)| i as u32)
        .collect())
}

/// Optimizes a universal perturbation for `concepts.target` on the POOD set.
///
/// `observer` sees every step after projection together with the current
/// perturbation values.
pub fn craft_with<F>(
    pood: &ImageSet,
    cache: &ConceptCache,
    backend: &dyn EncoderBackend,
    cfg: &CraftConfig,
    transform: &TransformConfig,
    mut observer: F,
) -> Result<CraftOutcome>
where
    F: FnMut(&StepRecord, &[f32]),
{
    cfg.validate()?;
    transform.validate()?;
    if pood.shape() != cfg.resolution {
        return Err(Error::Resolution {
            expected: cfg.resolution.to_vec(),
            actual: pood.shape().to_vec(),
        });
    }
    let concepts = &cache.concepts;
    let mut pool = Vec::with_capacity(pood.len());
    let mut dropped = 0usize;
    for i in 0..pood.len() {
        let label = pood.label(i);
        concepts.check_label(label)?;
        if concepts.coincides(label) {
            dropped += 1;
        } else if !cache.has_source(label) {
            return Err(Error::ConceptSet(format!("no cached embedding for POOD label {label}")));
        } else {
            pool.push(i);
        }
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} POOD samples whose label coincides with the target or a negative concept");
    }
    if pool.is_empty() {
        return Err(Error::UnusablePood(format!(
            "all {} POOD samples were dropped by the coincident-concept guard",
            pood.len()
        )));
    }

    let device = Device::Cpu;
    let mut rngs = Streams::new(cfg.seed);
    let init = Perturbation::init(cfg.resolution, cfg.epsilon, cfg.norm, cfg.seed, &mut rngs.init)?;
    let [c, h, w] = cfg.resolution;
    let var = Var::from_slice(init.data(), (c, h, w), &device)?;
    let mut opt = AdamW::new(
        vec![var.clone()],
        ParamsAdamW {
            lr: cfg.lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: cfg.weight_decay,
        },
    )?;
    let res = backend.image_resolution();
    let mut cursor = BatchCursor::new(pool);
    let mut values = init.data().to_vec();
    let mut trace = Vec::new();

    for step in 1..=cfg.steps {
        let idx = cursor.next(cfg.batch_size, &mut rngs.batch);
        let labels: Vec<usize> = idx.iter().map(|&i| pood.label(i)).collect();
        let x = pood.tensor(&idx, &device)?;

        let perturbed = apply_tensor(var.as_tensor(), &x)?;
        let perturbed = random_transform(&perturbed, transform, &mut rngs.transform)?;
        let perturbed = resize_bilinear(&perturbed, (res, res))?;
        let clean = resize_bilinear(&x, (res, res))?;
        let e_adv = backend.encode_image(&perturbed)?;
        let e_clean = backend.encode_image(&clean)?.detach();
        let (target, negs, sources) = cache.step_tensors(&labels, &mut rngs.template, &device)?;

        let d_x = (e_adv - e_clean)?;
        let live = live_rows(&d_x)?;
        if live.is_empty() {
            return Err(Error::ZeroDirection {
                which: "image direction",
                row: 0,
                norm: 0.0,
            });
        }
        let (d_x, sources) = if live.len() < labels.len() {
            let keep = Tensor::new(live.as_slice(), &device)?;
            (d_x.index_select(&keep, 0)?, sources.index_select(&keep, 0)?)
        } else {
            (d_x, sources)
        };
        let dt = d_x.dtype();
        let (d_t, d_n) = text_directions(&target.to_dtype(dt)?, &negs.to_dtype(dt)?, &sources.to_dtype(dt)?)?;
        let logits = direction_logits(&DirectionBatch::new(d_x, d_t, d_n)?)?;
        let loss = nll_loss(&logits, cfg.temperature)?;
        let loss_value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !loss_value.is_finite() {
            return Err(Error::Divergence { step, loss: loss_value });
        }
        opt.backward_step(&loss)?;

        values = var.as_tensor().flatten_all()?.to_vec1::<f32>()?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step, loss: loss_value });
        }
        crate::perturbation::project_values(&mut values, cfg.epsilon, cfg.norm);
        var.set(&Tensor::from_slice(&values, (c, h, w), &device)?)?;

        let record = StepRecord {
            step,
            loss: loss_value,
            linf: values.iter().fold(0f64, |m, v| m.max(v.abs() as f64)),
            l2: values.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt(),
            batch: live.len(),
        };
        if step == 1 || step % cfg.loss_trace_every == 0 || step == cfg.steps {
            log::debug!("step {step}: loss {loss_value:.6}");
            trace.push(record);
        }
        observer(&record, &values);
    }

    let meta = PerturbationMeta {
        shape: cfg.resolution,
        epsilon: cfg.epsilon,
        norm: cfg.norm,
        target: concepts.target.clone(),
        backend: backend.name().to_string(),
        steps: cfg.steps,
        seed: cfg.seed,
        created: PerturbationMeta::now(),
        config_digest: None,
    };
    Ok(CraftOutcome {
        perturbation: Perturbation::new(values, meta)?,
        trace,
        dropped_samples: dropped,
    })
}

pub fn craft(
    pood: &ImageSet,
    cache: &ConceptCache,
    backend: &dyn EncoderBackend,
    cfg: &CraftConfig,
    transform: &TransformConfig,
) -> Result<CraftOutcome> {
    craft_with(pood, cache, backend, cfg, transform, |_, _| {})
}
