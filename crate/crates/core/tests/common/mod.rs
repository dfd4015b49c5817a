#![allow(dead_code)]

use candle_core::{Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use uapkit::concept::{default_templates, ConceptCache, TemplateMode};
use uapkit::images::ImageSet;
use uapkit::perturbation::Perturbation;
use uapkit::surrogate::{nll_loss, surrogate_loss, LogitBatch};
use uapkit::synthetic::{SyntheticConfig, SyntheticWorld};
use uapkit::transform::{FrozenTransform, SampledTransform, TransformConfig};
use uapkit::victim::VictimModel;

/// Error-free transformation of `a + b` into a sum and its rounding error.
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

/// Double-double accumulator.
#[derive(Default, Clone, Copy)]
pub struct DoubleDouble {
    hi: f64,
    lo: f64,
}

impl DoubleDouble {
    pub fn add(&mut self, x: f64) {
        let (s, e) = two_sum(self.hi, x);
        let (hi, lo) = two_sum(s, e + self.lo);
        self.hi = hi;
        self.lo = lo;
    }

    pub fn value(&self) -> f64 {
        self.hi + self.lo
    }
}

/// Negative log-likelihood of the first logit, evaluated as written: explicit
/// exponentials, no max shift, sums accumulated in double-double.
pub fn brute_nll_sample(target: f64, negatives: &[f64], temperature: f64) -> f64 {
    let mut denom = DoubleDouble::default();
    let e_t = (target / temperature).exp();
    denom.add(e_t);
    for &n in negatives {
        denom.add((n / temperature).exp());
    }
    -(e_t.ln() - denom.value().ln())
}

pub fn brute_nll(target: &[f64], negatives: &[Vec<f64>], temperature: f64) -> f64 {
    let mut acc = DoubleDouble::default();
    for (t, n) in target.iter().zip(negatives) {
        acc.add(brute_nll_sample(*t, n, temperature));
    }
    acc.value() / target.len() as f64
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

/// Rank of `class` in `row`: the number of classes that beat it, with equal
/// scores broken toward the lower index.
pub fn rank_of(row: &[f32], class: usize) -> usize {
    (0..row.len())
        .filter(|&j| row[j] > row[class] || (row[j] == row[class] && j < class))
        .count()
}

/// One image at a time: clip, classify, rank. Returns `(hits, evaluated)`.
pub fn brute_asr_counts(
    victim: &dyn VictimModel,
    set: &ImageSet,
    t: &Perturbation,
    target: usize,
    k: usize,
) -> (usize, usize) {
    let [c, h, w] = set.shape();
    let mut hits = 0;
    let mut n = 0;
    for i in 0..set.len() {
        if set.label(i) == target {
            continue;
        }
        let x: Vec<f32> = set
            .image(i)
            .iter()
            .zip(t.data())
            .map(|(a, d)| (a + d).clamp(0.0, 1.0))
            .collect();
        let x = Tensor::from_vec(x, (1, c, h, w), &Device::Cpu).unwrap();
        let row = victim.classify(&x).unwrap().to_vec2::<f32>().unwrap().remove(0);
        n += 1;
        if rank_of(&row, target) < k {
            hits += 1;
        }
    }
    (hits, n)
}

/// Synthetic world with everything needed to craft against it.
pub struct Setup {
    pub world: SyntheticWorld,
    pub pood: ImageSet,
    pub cache: ConceptCache,
}

pub fn setup(cfg: SyntheticConfig, pood_per_class: usize, target: usize) -> Setup {
    let world = SyntheticWorld::new(cfg).unwrap();
    let pood = world.pood_set(pood_per_class, world.cfg.seed.wrapping_add(3));
    let concepts = world.concept_set(target).unwrap();
    let labels: Vec<usize> = (0..world.pood_vocabulary().len()).collect();
    let cache = ConceptCache::from_text(
        &concepts,
        world.encoder(),
        &default_templates(),
        TemplateMode::Exhaustive,
        &labels,
    )
    .unwrap();
    Setup { world, pood, cache }
}

/// A tiny world for many-trial loops.
pub fn tiny_config(seed: u64) -> SyntheticConfig {
    SyntheticConfig {
        shape: [3, 8, 8],
        victim_classes: ["cat", "ship", "truck"].iter().map(|s| s.to_string()).collect(),
        pood_classes: 2,
        embed_dim: 16,
        seed,
        ..Default::default()
    }
}

pub fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Worst relative error of `nll_loss` against [`brute_nll`] over random
/// batches of cosine logits.
pub fn loss_oracle_worst(batches: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0f64;
    for _ in 0..batches {
        let b = rng.random_range(1..=16);
        let m = rng.random_range(1..=12);
        let tau = [1.0, 0.5, 0.07][rng.random_range(0..3)];
        let target: Vec<f64> = (0..b).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let negs: Vec<Vec<f64>> = (0..b).map(|_| (0..m).map(|_| rng.random_range(-1.0..=1.0)).collect()).collect();
        let logits = LogitBatch::from_values(&target, &negs, &Device::Cpu).unwrap();
        let got = nll_loss(&logits, tau).unwrap().to_scalar::<f64>().unwrap();
        worst = worst.max(rel_err(got, brute_nll(&target, &negs, tau)));
    }
    worst
}

/// Surrogate loss for a linear encoder `E(v) = W v`, optionally with a
/// constant bias added to every embedding, image and text alike.
pub fn biased_loss(seed: u64, sigma_scale: f64, with_bias: bool) -> f64 {
    let dev = Device::Cpu;
    let (b, m, d, n) = (8, 9, 32, 3 * 8 * 8);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::from_vec(gaussian(&mut rng, d * n), (d, n), &dev).unwrap();
    let x = Tensor::from_vec((0..b * n).map(|_| rng.random::<f64>()).collect::<Vec<_>>(), (b, n), &dev).unwrap();
    let t: Vec<f64> = (0..n).map(|_| rng.random_range(-0.125..0.125)).collect();
    let xp = x.broadcast_add(&Tensor::from_vec(t, n, &dev).unwrap()).unwrap().clamp(0.0, 1.0).unwrap();
    let text = |rows: usize, rng: &mut ChaCha8Rng| Tensor::from_vec(gaussian(rng, rows * d), (rows, d), &dev).unwrap();
    let target = text(1, &mut rng);
    let negs = text(m, &mut rng);
    let src = text(b, &mut rng);
    let sigma = Tensor::from_vec(gaussian(&mut rng, d), d, &dev).unwrap().affine(sigma_scale, 0.0).unwrap();
    let enc = |v: &Tensor| v.matmul(&w.t().unwrap()).unwrap();
    let bias = |e: Tensor| if with_bias { e.broadcast_add(&sigma).unwrap() } else { e };
    let (loss, _) = surrogate_loss(
        &bias(enc(&xp)),
        &bias(enc(&x)),
        &bias(target).squeeze(0).unwrap(),
        &bias(negs),
        &bias(src),
        1.0,
    )
    .unwrap();
    loss.to_scalar::<f64>().unwrap()
}

/// Worst relative disagreement between biased and unbiased losses over
/// `trials` biases with magnitudes spread across three decades.
pub fn bias_cancellation_worst(trials: u64) -> f64 {
    (0..trials)
        .map(|seed| {
            let scale = 10f64.powf(3.0 * seed as f64 / trials as f64);
            rel_err(biased_loss(seed, scale, true), biased_loss(seed, scale, false))
        })
        .fold(0.0, f64::max)
}

/// Pixels within one step of a patch edge, inside or out.
pub fn near_patch(t: &SampledTransform, y: usize, x: usize, h: usize, w: usize) -> bool {
    let lo = |v: usize| v.saturating_sub(1);
    (lo(y)..=(y + 1).min(h - 1)).any(|yy| (lo(x)..=(x + 1).min(w - 1)).any(|xx| t.patches.contains(yy, xx)))
}

/// Worst relative error between the reverse-mode directional derivative of
/// a frozen default transform and a central difference (step 1e-3), on
/// random `3 x 32 x 32` inputs with patch-boundary pixels masked out.
pub fn transform_jvp_worst(inputs: usize, seed: u64) -> f64 {
    let dev = Device::Cpu;
    let (c, h, w) = (3, 32, 32);
    let cfg = TransformConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0f64;
    for _ in 0..inputs {
        let frozen = FrozenTransform::sample(1, h, w, &cfg, &mut rng);
        let x0: Vec<f64> = (0..c * h * w).map(|_| rng.random()).collect();
        let v = gaussian(&mut rng, c * h * w);
        let mut u = gaussian(&mut rng, c * h * w);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    if near_patch(&frozen.samples[0], y, x, h, w) {
                        u[(ch * h + y) * w + x] = 0.0;
                    }
                }
            }
        }
        let ut = Tensor::from_vec(u, (1, c, h, w), &dev).unwrap();
        let var = Var::from_vec(x0.clone(), (1, c, h, w), &dev).unwrap();
        let out = frozen.apply(var.as_tensor()).unwrap();
        let g = (out * &ut).unwrap().sum_all().unwrap().backward().unwrap();
        let vjp = g.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let analytic: f64 = vjp.iter().zip(&v).map(|(a, b)| a * b).sum();

        let step = 1e-3;
        let shifted = |sign: f64| {
            let xs: Vec<f64> = x0.iter().zip(&v).map(|(a, b)| a + sign * step * b).collect();
            let y = frozen.apply(&Tensor::from_vec(xs, (1, c, h, w), &dev).unwrap()).unwrap();
            (y * &ut).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap()
        };
        let numeric = (shifted(1.0) - shifted(-1.0)) / (2.0 * step);
        worst = worst.max(rel_err(analytic, numeric));
    }
    worst
}
