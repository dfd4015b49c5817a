//! Glue between a [`RunConfig`] and the library pieces: concept caches,
//! evaluation sets, and the craft entry point used by the command line.

use std::collections::HashMap;

use candle_core::{Device, Tensor};

use crate::concept::{ConceptCache, EncoderBackend};
use crate::config::{DatasetFormat, DatasetSpec, RunConfig};
use crate::craft::{craft_with, CraftOutcome, StepRecord};
use crate::dataset::{align_labels, load_cifar10, load_folder, FolderOptions, PoodDataset};
use crate::error::{Error, Result};
use crate::images::{ImageSet, Shape3};
use crate::sampler::resize_bilinear;

/// POOD samples per label used for image-provenance source concepts.
pub const SOURCE_EXEMPLARS: usize = 32;

/// Embeds the configured concepts: text templates by default, image
/// exemplars when `concepts.exemplars` is set.
pub fn concept_cache(cfg: &RunConfig, backend: &dyn EncoderBackend, pood: &PoodDataset) -> Result<ConceptCache> {
    let concepts = cfg.concepts.concept_set(pood.labels.clone())?;
    let used: Vec<usize> = {
        let mut u: Vec<usize> = pood.images.labels().to_vec();
        u.sort_unstable();
        u.dedup();
        u.retain(|&l| !concepts.coincides(l));
        u
    };
    let Some(dir) = &cfg.concepts.exemplars else {
        return ConceptCache::from_text(&concepts, backend, &cfg.concepts.templates, cfg.concepts.template_mode, &used);
    };
    let res = backend.image_resolution();
    let shape = [pood.images.shape()[0], res, res];
    let ex = load_folder(dir, shape, &FolderOptions::default())?;
    let mut exemplars: HashMap<String, Tensor> = HashMap::new();
    for (label, name) in ex.labels.iter().enumerate() {
        let idx: Vec<usize> = (0..ex.images.len()).filter(|&i| ex.images.label(i) == label).collect();
        exemplars.insert(name.clone(), ex.images.tensor(&idx, &Device::Cpu)?);
    }
    let by_label = pood.images.indices_by_label(pood.labels.len());
    let mut sources = HashMap::new();
    for &l in &used {
        let idx: Vec<usize> = by_label[l].iter().copied().take(SOURCE_EXEMPLARS).collect();
        let x = pood.images.tensor(&idx, &Device::Cpu)?;
        sources.insert(l, resize_bilinear(&x, (res, res))?);
    }
    ConceptCache::from_images(&concepts, backend, &exemplars, &sources)
}

/// Runs the crafting loop for a loaded POOD set and stamps the config digest
/// into the perturbation metadata.
pub fn run_craft<F>(cfg: &RunConfig, backend: &dyn EncoderBackend, pood: &PoodDataset, observer: F) -> Result<CraftOutcome>
where
    F: FnMut(&StepRecord, &[f32]),
{
    let cache = concept_cache(cfg, backend, pood)?;
    let mut out = craft_with(&pood.images, &cache, backend, &cfg.effective_craft(), &cfg.transforms, observer)?;
    out.perturbation.meta.config_digest = Some(cfg.digest()?);
    Ok(out)
}

/// Loads an evaluation set at the victim's input shape with labels in the
/// victim's class order.
pub fn load_eval_set(spec: &DatasetSpec, shape: Shape3, victim_labels: &[String]) -> Result<ImageSet> {
    let set = match spec.format {
        DatasetFormat::Cifar10 => {
            if shape != [3, 32, 32] {
                return Err(Error::Resolution {
                    expected: shape.to_vec(),
                    actual: vec![3, 32, 32],
                });
            }
            load_cifar10(&spec.path, spec.split, spec.limit)?.0
        }
        DatasetFormat::Folder => {
            let ds = load_folder(&spec.path, shape, &FolderOptions::default())?;
            let set = align_labels(&ds, victim_labels)?;
            match spec.limit {
                Some(l) if l < set.len() => set.subset(&(0..l).collect::<Vec<_>>()),
                _ => set,
            }
        }
    };
    if set.is_empty() {
        return Err(Error::EmptyEval(format!("no images in {}", spec.path.display())));
    }
    Ok(set)
}
