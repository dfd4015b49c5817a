//! Run configuration: one JSON document holding every knob of a run.
//!
//! Loading applies defaults for missing keys, rejects unknown keys (all of
//! them are reported at once), and then range-checks values.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::backends::BackendOptions;
use crate::concept::{default_templates, normalize_concept, ConceptSet, TemplateMode};
use crate::craft::CraftConfig;
use crate::dataset::{FolderOptions, Split};
use crate::error::{Error, Result};
use crate::probe::{ProbeSuite, DEFAULT_SAMPLES_PER_TRANSFORM};
use crate::sfa::SfaConfig;
use crate::synthetic::CIFAR10_CLASSES;
use crate::transform::TransformConfig;
use crate::victim::VictimSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConceptConfig {
    pub target: String,
    /// Defaults to every victim label other than the target.
    pub negatives: Option<Vec<String>>,
    /// Class names of the victim task, in output order.
    pub victim_labels: Vec<String>,
    pub templates: Vec<String>,
    pub template_mode: TemplateMode,
    /// Directory of `<concept>/<images>` exemplars; switches concepts from
    /// text to image embeddings.
    pub exemplars: Option<PathBuf>,
}

impl Default for ConceptConfig {
    fn default() -> Self {
        Self {
            target: "ship".into(),
            negatives: None,
            victim_labels: CIFAR10_CLASSES.iter().map(|s| s.to_string()).collect(),
            templates: default_templates(),
            template_mode: TemplateMode::Exhaustive,
            exemplars: None,
        }
    }
}

impl ConceptConfig {
    pub fn concept_set(&self, source_vocabulary: Vec<String>) -> Result<ConceptSet> {
        match &self.negatives {
            Some(n) => ConceptSet::new(self.target.clone(), n.clone(), source_vocabulary),
            None => ConceptSet::from_victim_labels(&self.target, &self.victim_labels, source_vocabulary),
        }
    }

    /// Index of the target among the victim labels.
    pub fn target_index(&self) -> Option<usize> {
        let t = normalize_concept(&self.target);
        self.victim_labels.iter().position(|l| normalize_concept(l) == t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoodConfig {
    pub root: PathBuf,
    #[serde(default)]
    pub exclude: Vec<String>,
    #[serde(default)]
    pub max_per_class: Option<usize>,
    #[serde(default)]
    pub names_file: Option<PathBuf>,
    /// Also drop subdirectories named like any victim label.
    #[serde(default = "yes")]
    pub exclude_victim_labels: bool,
}

fn yes() -> bool {
    true
}

impl PoodConfig {
    pub fn folder_options(&self, victim_labels: &[String]) -> FolderOptions {
        let mut exclude = self.exclude.clone();
        if self.exclude_victim_labels {
            exclude.extend(victim_labels.iter().cloned());
        }
        FolderOptions {
            exclude,
            max_per_class: self.max_per_class,
            names_file: self.names_file.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    /// One subdirectory per class, named like the victim labels.
    #[default]
    Folder,
    /// CIFAR-10 binary batches.
    Cifar10,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub path: PathBuf,
    #[serde(default)]
    pub format: DatasetFormat,
    #[serde(default = "test_split")]
    pub split: Split,
    #[serde(default)]
    pub limit: Option<usize>,
}

fn test_split() -> Split {
    Split::Test
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub dataset: Option<DatasetSpec>,
    /// Defaults to the target concept's index among the victim labels.
    pub target_class: Option<usize>,
    pub topk: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            target_class: None,
            topk: vec![1, 5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SfaSection {
    pub attack: SfaConfig,
    /// Non-target evaluation samples attacked per run.
    pub samples: usize,
    /// Program answering label queries; the in-process victim when absent.
    pub oracle_command: Option<Vec<String>>,
}

impl Default for SfaSection {
    fn default() -> Self {
        Self {
            attack: SfaConfig::default(),
            samples: 100,
            oracle_command: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    pub suite: ProbeSuite,
    pub samples_per_transform: usize,
    pub limit: Option<usize>,
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self {
            suite: ProbeSuite::default(),
            samples_per_transform: DEFAULT_SAMPLES_PER_TRANSFORM,
            limit: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// When set, replaces `craft.seed` and seeds every other random stream.
    pub seed: Option<u64>,
    pub backend: String,
    pub backend_options: BackendOptions,
    pub craft: CraftConfig,
    pub transforms: TransformConfig,
    pub concepts: ConceptConfig,
    pub pood: Option<PoodConfig>,
    pub victims: Vec<VictimSpec>,
    pub eval: EvalConfig,
    pub sfa: SfaSection,
    pub probe: ProbeSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            backend: "linear-stub".into(),
            backend_options: BackendOptions::default(),
            craft: CraftConfig::default(),
            transforms: TransformConfig::default(),
            concepts: ConceptConfig::default(),
            pood: None,
            victims: Vec::new(),
            eval: EvalConfig::default(),
            sfa: SfaSection::default(),
            probe: ProbeSection::default(),
        }
    }
}

/// Subtrees whose shape depends on a tag, checked by serde instead.
const OPAQUE: [&str; 3] = ["concepts.template_mode", "probe.suite", "victims"];

/// The default config with every optional section filled in, so that the
/// key walk sees every accepted key.
fn key_template() -> Value {
    let mut t = RunConfig::default();
    t.seed = Some(0);
    t.concepts.negatives = Some(Vec::new());
    t.concepts.exemplars = Some(PathBuf::new());
    t.pood = Some(PoodConfig {
        root: PathBuf::new(),
        exclude: Vec::new(),
        max_per_class: Some(0),
        names_file: Some(PathBuf::new()),
        exclude_victim_labels: true,
    });
    t.backend_options.cache_dir = Some(PathBuf::new());
    t.eval.dataset = Some(DatasetSpec {
        path: PathBuf::new(),
        format: DatasetFormat::Folder,
        split: Split::Test,
        limit: Some(0),
    });
    t.eval.target_class = Some(0);
    t.sfa.oracle_command = Some(Vec::new());
    t.probe.limit = Some(0);
    serde_json::to_value(t).expect("config serializes")
}

fn unknown_keys(doc: &Value, template: &Value, path: &str, out: &mut Vec<String>) {
    let (Value::Object(d), Value::Object(t)) = (doc, template) else {
        return;
    };
    for (k, v) in d {
        let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
        match t.get(k) {
            None => out.push(format!("unknown key `{p}`")),
            Some(tv) if !OPAQUE.contains(&p.as_str()) => unknown_keys(v, tv, &p, out),
            Some(_) => {}
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Value = serde_json::from_str(text)?;
        if !doc.is_object() {
            return Err(Error::Schema(vec!["top level must be a JSON object".into()]));
        }
        let mut problems = Vec::new();
        unknown_keys(&doc, &key_template(), "", &mut problems);
        if !problems.is_empty() {
            return Err(Error::Schema(problems));
        }
        let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| Error::Schema(vec![e.to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    /// Every range violation as `(field, message)`.
    pub fn violations(&self) -> Vec<(String, String)> {
        let mut out = self.craft.violations();
        for m in self.transforms.violations() {
            let field = m.split_whitespace().next().unwrap_or_default().to_string();
            out.push((field, m));
        }
        if self.eval.topk.iter().any(|&k| k == 0) {
            out.push(("eval.topk".into(), "every k must be >= 1".into()));
        }
        if let Err(Error::Range { field, message }) = self.sfa.attack.validate() {
            out.push((field, message));
        }
        if self.sfa.samples == 0 {
            out.push(("sfa.samples".into(), "must be >= 1".into()));
        }
        if self.probe.samples_per_transform == 0 {
            out.push(("probe.samples_per_transform".into(), "must be >= 1".into()));
        }
        if let Err(Error::Range { field, message }) = self.probe.suite.validate() {
            out.push((field, message));
        }
        if self.concepts.victim_labels.len() < 2 {
            out.push(("concepts.victim_labels".into(), "need at least two classes".into()));
        }
        if normalize_concept(&self.concepts.target).is_empty() {
            out.push(("concepts.target".into(), "must not be empty".into()));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        match v.len() {
            0 => Ok(()),
            1 => {
                let (field, message) = v.into_iter().next().expect("one violation");
                Err(Error::Range { field, message })
            }
            _ => Err(Error::Schema(v.into_iter().map(|(f, m)| format!("{f}: {m}")).collect())),
        }
    }

    /// Applies command-line overrides and re-validates.
    pub fn with_overrides(mut self, seed: Option<u64>, steps: Option<usize>, epsilon: Option<f64>) -> Result<Self> {
        if seed.is_some() {
            self.seed = seed;
        }
        if let Some(s) = steps {
            self.craft.steps = s;
        }
        if let Some(e) = epsilon {
            self.craft.epsilon = e;
        }
        self.validate()?;
        Ok(self)
    }

    /// Craft settings with the run seed applied.
    pub fn effective_craft(&self) -> CraftConfig {
        let mut c = self.craft.clone();
        if let Some(s) = self.seed {
            c.seed = s;
        }
        c
    }

    pub fn effective_seed(&self) -> u64 {
        self.seed.unwrap_or(self.craft.seed)
    }

    pub fn target_class(&self) -> Result<usize> {
        self.eval
            .target_class
            .or_else(|| self.concepts.target_index())
            .ok_or_else(|| {
                Error::Config(format!(
                    "target {:?} is not a victim label; set eval.target_class",
                    self.concepts.target
                ))
            })
    }

    /// SHA-256 of the canonical serialization, hex encoded.
    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(self)?)))
    }
}
