//! A small self-contained world for smoke runs and tests: victim classes and
//! disjoint POOD classes are noisy copies of random prototype images, the
//! image encoder is a seeded linear projection, and each concept name's text
//! vector is the encoder's embedding of its prototype. The victim is the
//! nearest-prototype classifier, so a perturbation that moves embeddings
//! toward the target concept also moves pixels toward the target prototype.

use candle_core::{Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backends::LinearEncoder;
use crate::concept::{ConceptSet, EncoderBackend};
use crate::error::Result;
use crate::images::{numel, ImageSet, Shape3};
use crate::victim::LinearVictim;

pub const CIFAR10_CLASSES: [&str; 10] = [
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub shape: Shape3,
    pub victim_classes: Vec<String>,
    pub pood_classes: usize,
    /// Prototype entries are `0.5 ± amplitude`.
    pub amplitude: f32,
    /// Per-pixel uniform noise half-width for samples.
    pub noise: f32,
    pub embed_dim: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            shape: [3, 8, 8],
            victim_classes: CIFAR10_CLASSES.iter().map(|s| s.to_string()).collect(),
            pood_classes: 20,
            amplitude: 0.04,
            noise: 0.02,
            embed_dim: 128,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub cfg: SyntheticConfig,
    victim_protos: Vec<Vec<f32>>,
    pood_protos: Vec<Vec<f32>>,
    encoder: LinearEncoder,
}

fn prototype(n: usize, amplitude: f32, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..n)
        .map(|_| if rng.random_bool(0.5) { 0.5 + amplitude } else { 0.5 - amplitude })
        .collect()
}

impl SyntheticWorld {
    pub fn new(cfg: SyntheticConfig) -> Result<Self> {
        let n = numel(cfg.shape);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let victim_protos = (0..cfg.victim_classes.len())
            .map(|_| prototype(n, cfg.amplitude, &mut rng))
            .collect::<Vec<_>>();
        let pood_protos = (0..cfg.pood_classes)
            .map(|_| prototype(n, cfg.amplitude, &mut rng))
            .collect::<Vec<_>>();
        let [c, h, w] = cfg.shape;
        assert_eq!(h, w, "synthetic worlds use square images");
        let mut encoder = LinearEncoder::new(c, h, cfg.embed_dim, cfg.seed.wrapping_add(101))?;
        let names: Vec<String> = cfg
            .victim_classes
            .iter()
            .cloned()
            .chain(Self::pood_names(cfg.pood_classes))
            .collect();
        let protos: Vec<f32> = victim_protos.iter().chain(&pood_protos).flatten().copied().collect();
        let emb = encoder
            .encode_image(&Tensor::from_vec(protos, (names.len(), c, h, w), &Device::Cpu)?)?
            .to_vec2::<f32>()?;
        for (name, v) in names.iter().zip(emb) {
            encoder.text.insert(name, v)?;
        }
        Ok(Self {
            cfg,
            victim_protos,
            pood_protos,
            encoder,
        })
    }

    fn pood_names(count: usize) -> impl Iterator<Item = String> {
        (0..count).map(|i| format!("pood{i:03}"))
    }

    pub fn pood_vocabulary(&self) -> Vec<String> {
        Self::pood_names(self.cfg.pood_classes).collect()
    }

    pub fn encoder(&self) -> &LinearEncoder {
        &self.encoder
    }

    pub fn victim_prototype(&self, class: usize) -> &[f32] {
        &self.victim_protos[class]
    }

    /// Nearest-prototype classifier: `score_k = 2 p_k . x - |p_k|^2`.
    pub fn victim(&self) -> Result<LinearVictim> {
        let weight = self.victim_protos.iter().flatten().map(|v| 2.0 * v).collect();
        let bias = self
            .victim_protos
            .iter()
            .map(|p| -p.iter().map(|v| v * v).sum::<f32>())
            .collect();
        LinearVictim::new("synthetic-prototype", self.cfg.shape, weight, bias)
    }

    fn sample(&self, protos: &[Vec<f32>], per_class: usize, seed: u64) -> ImageSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ImageSet::empty(self.cfg.shape);
        let a = self.cfg.noise;
        for _ in 0..per_class {
            for (label, p) in protos.iter().enumerate() {
                let img: Vec<f32> = p
                    .iter()
                    .map(|v| (v + if a > 0.0 { rng.random_range(-a..=a) } else { 0.0 }).clamp(0.0, 1.0))
                    .collect();
                set.push(&img, label).expect("prototype length matches shape");
            }
        }
        set
    }

    /// `per_class` samples of every victim class, interleaved by class.
    pub fn victim_set(&self, per_class: usize, seed: u64) -> ImageSet {
        self.sample(&self.victim_protos, per_class, seed)
    }

    /// `per_class` samples of every POOD class, labels index [`Self::pood_vocabulary`].
    pub fn pood_set(&self, per_class: usize, seed: u64) -> ImageSet {
        self.sample(&self.pood_protos, per_class, seed)
    }

    /// Target plus every other victim class as negatives, over the POOD vocabulary.
    pub fn concept_set(&self, target: usize) -> Result<ConceptSet> {
        ConceptSet::from_victim_labels(&self.cfg.victim_classes[target], &self.cfg.victim_classes, self.pood_vocabulary())
    }
}
