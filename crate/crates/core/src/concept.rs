//! Concept embeddings: template rendering, averaging over templates, image
//! concepts, and the per-run cache consumed by the crafter.

use std::collections::HashMap;

use candle_core::{DType, Device, Tensor};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Placeholder substituted by the concept name in every template.
pub const PLACEHOLDER: &str = "[concept]";

/// Default prompt templates. The first three are the canonical ones; the
/// rest add phrasing variety in the same register.
pub const DEFAULT_TEMPLATES: [&str; 8] = [
    "a photo of a [concept]",
    "a blurry image of a [concept]",
    "a pixelated version of a [concept]",
    "a photo of the [concept]",
    "a close-up photo of a [concept]",
    "a low resolution photo of a [concept]",
    "a bright photo of a [concept]",
    "a cropped photo of a [concept]",
];

pub fn default_templates() -> Vec<String> {
    DEFAULT_TEMPLATES.iter().map(|s| s.to_string()).collect()
}

/// A vision-language encoder used as the surrogate.
///
/// `encode_image` must be differentiable with respect to its input: the
/// crafter backpropagates through it to the perturbation.
pub trait EncoderBackend: Send + Sync {
    fn name(&self) -> &str;
    fn embed_dim(&self) -> usize;
    /// Square input side the image tower expects.
    fn image_resolution(&self) -> usize;
    /// `[B, C, R, R]` pixels in `[0, 1]` to `[B, embed_dim]`.
    fn encode_image(&self, images: &Tensor) -> Result<Tensor>;
    /// `K` strings to `[K, embed_dim]`.
    fn encode_text(&self, texts: &[String]) -> Result<Tensor>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Text,
    Image,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    vector: Vec<f32>,
    provenance: Provenance,
}

impl Embedding {
    pub fn new(vector: Vec<f32>, provenance: Provenance, embed_dim: usize) -> Result<Self> {
        if vector.len() != embed_dim {
            return Err(Error::Backend {
                backend: "embedding".into(),
                message: format!("length {} != embed_dim {embed_dim}", vector.len()),
            });
        }
        if let Some(i) = vector.iter().position(|v| !v.is_finite()) {
            return Err(Error::Backend {
                backend: "embedding".into(),
                message: format!("non-finite entry at {i}"),
            });
        }
        Ok(Self { vector, provenance })
    }

    pub fn vector(&self) -> &[f32] {
        &self.vector
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn len(&self) -> usize {
        self.vector.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vector.is_empty()
    }

    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.vector, self.vector.len(), device)?)
    }
}

/// Lowercases and collapses separators so that `"Sea_Lion"` and
/// `"sea lion"` compare equal.
pub fn normalize_concept(s: &str) -> String {
    s.split(|c: char| c.is_whitespace() || c == '_' || c == '-')
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Target concept, negative concepts, and the POOD label vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptSet {
    pub target: String,
    pub negatives: Vec<String>,
    pub source_vocabulary: Vec<String>,
}

impl ConceptSet {
    pub fn new(target: impl Into<String>, negatives: Vec<String>, source_vocabulary: Vec<String>) -> Result<Self> {
        let set = Self {
            target: target.into(),
            negatives,
            source_vocabulary,
        };
        set.validate()?;
        Ok(set)
    }

    /// Negatives are every victim label other than the target.
    pub fn from_victim_labels(target: &str, labels: &[String], source_vocabulary: Vec<String>) -> Result<Self> {
        let t = normalize_concept(target);
        let negatives = labels
            .iter()
            .filter(|l| normalize_concept(l) != t)
            .cloned()
            .collect();
        Self::new(target, negatives, source_vocabulary)
    }

    pub fn validate(&self) -> Result<()> {
        if normalize_concept(&self.target).is_empty() {
            return Err(Error::ConceptSet("target concept is empty".into()));
        }
        if self.negatives.is_empty() {
            return Err(Error::ConceptSet("at least one negative concept is required".into()));
        }
        let target = normalize_concept(&self.target);
        let mut seen = std::collections::HashSet::new();
        for n in &self.negatives {
            let key = normalize_concept(n);
            if key == target {
                return Err(Error::ConceptSet(format!("target {:?} listed among negatives", self.target)));
            }
            if !seen.insert(key) {
                return Err(Error::ConceptSet(format!("duplicate negative concept {n:?}")));
            }
        }
        if self.source_vocabulary.is_empty() {
            return Err(Error::ConceptSet("source vocabulary is empty".into()));
        }
        Ok(())
    }

    pub fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.source_vocabulary.len() {
            return Err(Error::ConceptSet(format!(
                "label index {label} outside vocabulary of {}",
                self.source_vocabulary.len()
            )));
        }
        Ok(())
    }

    /// True when POOD label `label` names the target or one of the negatives.
    pub fn coincides(&self, label: usize) -> bool {
        let Some(name) = self.source_vocabulary.get(label) else {
            return false;
        };
        let key = normalize_concept(name);
        key == normalize_concept(&self.target) || self.negatives.iter().any(|n| normalize_concept(n) == key)
    }
}

/// Renders each pattern with `concept` substituted for [`PLACEHOLDER`].
pub fn compose_templates<S: AsRef<str>>(concept: &str, templates: &[S]) -> Result<Vec<String>> {
    if templates.is_empty() {
        return Err(Error::MalformedTemplate {
            template: String::new(),
            reason: "template list is empty".into(),
        });
    }
    templates
        .iter()
        .map(|t| {
            let t = t.as_ref();
            match t.matches(PLACEHOLDER).count() {
                1 => Ok(t.replacen(PLACEHOLDER, concept, 1)),
                n => Err(Error::MalformedTemplate {
                    template: t.to_string(),
                    reason: format!("expected exactly one {PLACEHOLDER} placeholder, found {n}"),
                }),
            }
        })
        .collect()
}

fn mean_rows(rows: &Tensor) -> Result<Vec<f32>> {
    let mean = rows.to_dtype(DType::F64)?.mean(0)?.to_dtype(DType::F32)?;
    Ok(mean.to_vec1::<f32>()?)
}

fn check_embed_shape(backend: &dyn EncoderBackend, t: &Tensor, rows: usize) -> Result<()> {
    let dims = t.dims();
    if dims != [rows, backend.embed_dim()] {
        return Err(Error::backend(
            backend.name(),
            format!("returned shape {dims:?}, expected [{rows}, {}]", backend.embed_dim()),
        ));
    }
    Ok(())
}

fn encode_text_checked(backend: &dyn EncoderBackend, texts: &[String]) -> Result<Tensor> {
    let out = backend
        .encode_text(texts)
        .map_err(|e| match e {
            e @ Error::Backend { .. } => e,
            other => Error::backend(backend.name(), other),
        })?
        .detach();
    check_embed_shape(backend, &out, texts.len())?;
    Ok(out)
}

/// Mean text embedding of `concept` over all rendered templates.
pub fn embed_text_concept<S: AsRef<str>>(
    concept: &str,
    backend: &dyn EncoderBackend,
    templates: &[S],
) -> Result<Embedding> {
    let rendered = compose_templates(concept, templates)?;
    let rows = encode_text_checked(backend, &rendered)?;
    Embedding::new(mean_rows(&rows)?, Provenance::Text, backend.embed_dim())
}

/// Mean image embedding over a batch of concept exemplars.
pub fn embed_image_concept(samples: &Tensor, backend: &dyn EncoderBackend) -> Result<Embedding> {
    let rows = encode_image_samples(samples, backend)?;
    Embedding::new(mean_rows(&rows)?, Provenance::Image, backend.embed_dim())
}

fn encode_image_samples(samples: &Tensor, backend: &dyn EncoderBackend) -> Result<Tensor> {
    let (b, _c, h, w) = samples.dims4()?;
    if b == 0 {
        return Err(Error::EmptyConcept("image concept batch is empty".into()));
    }
    let r = backend.image_resolution();
    if (h, w) != (r, r) {
        return Err(Error::Resolution {
            expected: vec![r, r],
            actual: vec![h, w],
        });
    }
    let flat = samples.flatten_all()?.to_dtype(DType::F32)?;
    let lo = flat.min(0)?.to_scalar::<f32>()?;
    let hi = flat.max(0)?.to_scalar::<f32>()?;
    if lo < 0.0 || hi > 1.0 {
        return Err(Error::EmptyConcept(format!(
            "image concept pixels must lie in [0, 1], found [{lo}, {hi}]"
        )));
    }
    let rows = backend.encode_image(samples)?.detach();
    check_embed_shape(backend, &rows, b)?;
    Ok(rows)
}

/// How text templates are combined while crafting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum TemplateMode {
    /// Average every template once; the result is constant across steps.
    #[default]
    Exhaustive,
    /// Average a fresh random subset of `count` templates at every step.
    SampledPerStep { count: usize },
}

/// Per-template embeddings for one concept.
#[derive(Debug, Clone)]
pub struct TemplateBank {
    rows: Vec<Vec<f32>>,
    mean: Vec<f32>,
}

impl TemplateBank {
    fn from_rows(rows: Vec<Vec<f32>>) -> Self {
        let d = rows[0].len();
        let mut acc = vec![0f64; d];
        for r in &rows {
            for (a, v) in acc.iter_mut().zip(r) {
                *a += *v as f64;
            }
        }
        let n = rows.len() as f64;
        let mean = acc.into_iter().map(|a| (a / n) as f32).collect();
        Self { rows, mean }
    }

    fn single(vector: Vec<f32>) -> Self {
        Self {
            rows: vec![vector.clone()],
            mean: vector,
        }
    }

    pub fn mean(&self) -> &[f32] {
        &self.mean
    }

    fn draw<R: Rng + ?Sized>(&self, mode: TemplateMode, rng: &mut R) -> Vec<f32> {
        match mode {
            TemplateMode::SampledPerStep { count } if count < self.rows.len() => {
                let picks = sample(rng, self.rows.len(), count.max(1));
                let chosen: Vec<Vec<f32>> = picks.into_iter().map(|i| self.rows[i].clone()).collect();
                TemplateBank::from_rows(chosen).mean
            }
            _ => self.mean.clone(),
        }
    }
}

/// Concept embeddings computed once per crafting run and shared read-only.
#[derive(Debug, Clone)]
pub struct ConceptCache {
    pub concepts: ConceptSet,
    pub mode: TemplateMode,
    pub provenance: Provenance,
    embed_dim: usize,
    target: TemplateBank,
    negatives: Vec<TemplateBank>,
    sources: HashMap<usize, TemplateBank>,
}

impl ConceptCache {
    /// Text concepts: every concept (target, negatives, and the POOD labels
    /// in `used_labels`) is embedded under every template.
    pub fn from_text<S: AsRef<str>>(
        concepts: &ConceptSet,
        backend: &dyn EncoderBackend,
        templates: &[S],
        mode: TemplateMode,
        used_labels: &[usize],
    ) -> Result<Self> {
        concepts.validate()?;
        let bank = |concept: &str| -> Result<TemplateBank> {
            let rendered = compose_templates(concept, templates)?;
            let rows = encode_text_checked(backend, &rendered)?;
            let rows = rows.to_dtype(DType::F32)?.to_vec2::<f32>()?;
            if rows.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::backend(backend.name(), format!("non-finite text embedding for {concept:?}")));
            }
            Ok(TemplateBank::from_rows(rows))
        };
        let target = bank(&concepts.target)?;
        let negatives = concepts.negatives.iter().map(|n| bank(n)).collect::<Result<Vec<_>>>()?;
        let mut sources = HashMap::new();
        for &label in used_labels {
            concepts.check_label(label)?;
            if !sources.contains_key(&label) {
                sources.insert(label, bank(&concepts.source_vocabulary[label])?);
            }
        }
        Ok(Self {
            concepts: concepts.clone(),
            mode,
            provenance: Provenance::Text,
            embed_dim: backend.embed_dim(),
            target,
            negatives,
            sources,
        })
    }

    /// Image concepts: `exemplars` maps each concept name (target and
    /// negatives) to a batch of images at the backend resolution; POOD source
    /// concepts are the mean image embedding of the given POOD samples.
    pub fn from_images(
        concepts: &ConceptSet,
        backend: &dyn EncoderBackend,
        exemplars: &HashMap<String, Tensor>,
        source_exemplars: &HashMap<usize, Tensor>,
    ) -> Result<Self> {
        concepts.validate()?;
        let embed = |name: &str| -> Result<TemplateBank> {
            let key = normalize_concept(name);
            let batch = exemplars
                .iter()
                .find(|(k, _)| normalize_concept(k) == key)
                .map(|(_, v)| v)
                .ok_or_else(|| Error::EmptyConcept(format!("no exemplar images for concept {name:?}")))?;
            Ok(TemplateBank::single(embed_image_concept(batch, backend)?.vector))
        };
        let target = embed(&concepts.target)?;
        let negatives = concepts.negatives.iter().map(|n| embed(n)).collect::<Result<Vec<_>>>()?;
        let mut sources = HashMap::new();
        for (&label, batch) in source_exemplars {
            concepts.check_label(label)?;
            sources.insert(label, TemplateBank::single(embed_image_concept(batch, backend)?.vector));
        }
        Ok(Self {
            concepts: concepts.clone(),
            mode: TemplateMode::Exhaustive,
            provenance: Provenance::Image,
            embed_dim: backend.embed_dim(),
            target,
            negatives,
            sources,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn num_negatives(&self) -> usize {
        self.negatives.len()
    }

    pub fn has_source(&self, label: usize) -> bool {
        self.sources.contains_key(&label)
    }

    pub fn target(&self) -> Result<Embedding> {
        Embedding::new(self.target.mean.clone(), self.provenance, self.embed_dim)
    }

    pub fn source(&self, label: usize) -> Option<&[f32]> {
        self.sources.get(&label).map(TemplateBank::mean)
    }

    /// Draws `(target [d], negatives [M, d], sources [B, d])` for one step.
    /// In exhaustive mode the rng is not consumed.
    pub fn step_tensors<R: Rng + ?Sized>(
        &self,
        labels: &[usize],
        rng: &mut R,
        device: &Device,
    ) -> Result<(Tensor, Tensor, Tensor)> {
        let d = self.embed_dim;
        let target = self.target.draw(self.mode, rng);
        let mut negs = Vec::with_capacity(self.negatives.len() * d);
        for n in &self.negatives {
            negs.extend(n.draw(self.mode, rng));
        }
        let mut srcs = Vec::with_capacity(labels.len() * d);
        for &l in labels {
            let bank = self
                .sources
                .get(&l)
                .ok_or_else(|| Error::ConceptSet(format!("no cached embedding for POOD label {l}")))?;
            srcs.extend(bank.draw(self.mode, rng));
        }
        Ok((
            Tensor::from_vec(target, d, device)?,
            Tensor::from_vec(negs, (self.negatives.len(), d), device)?,
            Tensor::from_vec(srcs, (labels.len(), d), device)?,
        ))
    }
}
