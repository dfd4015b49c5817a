//! Decision-based sign-flip random search, optionally warm-started from a
//! universal perturbation, with exact query accounting.

use std::path::PathBuf;
use std::process::Command;

use candle_core::{Device, Tensor};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::concept::normalize_concept;
use crate::error::{Error, Result};
use crate::images::{numel, save_png, ImageSet, Shape3};
use crate::perturbation::Perturbation;
use crate::victim::{argmax, scores, VictimModel};

/// Answers one label per image and nothing else.
pub trait LabelOracle {
    fn query(&mut self, image: &[f32], shape: Shape3) -> Result<usize>;
}

/// Label-only view of an in-process victim.
pub struct VictimOracle<'a> {
    victim: &'a dyn VictimModel,
}

impl<'a> VictimOracle<'a> {
    pub fn new(victim: &'a dyn VictimModel) -> Self {
        Self { victim }
    }
}

impl LabelOracle for VictimOracle<'_> {
    fn query(&mut self, image: &[f32], shape: Shape3) -> Result<usize> {
        let [c, h, w] = shape;
        let x = Tensor::from_slice(image, (1, c, h, w), &Device::Cpu)?;
        Ok(argmax(&scores(self.victim, &x)?[0]))
    }
}

/// Runs `program args... <image.png>` per query and reads a label from its
/// standard output: either a class name from `labels` or a class index.
pub struct CommandOracle {
    program: PathBuf,
    args: Vec<String>,
    labels: Vec<String>,
    dir: tempfile::TempDir,
}

impl CommandOracle {
    pub fn new(program: impl Into<PathBuf>, args: Vec<String>, labels: Vec<String>) -> Result<Self> {
        let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
        Ok(Self {
            program: program.into(),
            args,
            labels,
            dir,
        })
    }

    fn parse(&self, answer: &str) -> Result<usize> {
        let key = normalize_concept(answer);
        if let Some(i) = self.labels.iter().position(|l| normalize_concept(l) == key) {
            return Ok(i);
        }
        answer
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::Oracle(format!("unrecognized label {answer:?}")))
    }
}

impl LabelOracle for CommandOracle {
    fn query(&mut self, image: &[f32], shape: Shape3) -> Result<usize> {
        let path = self.dir.path().join("query.png");
        save_png(&path, image, shape)?;
        let out = Command::new(&self.program)
            .args(&self.args)
            .arg(&path)
            .output()
            .map_err(|e| Error::io(&self.program, e))?;
        if !out.status.success() {
            return Err(Error::Oracle(format!(
                "{} exited with {}: {}",
                self.program.display(),
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        let text = String::from_utf8_lossy(&out.stdout);
        let line = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
        self.parse(line)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryBudget {
    pub max_queries: usize,
    pub queries_used: usize,
}

impl QueryBudget {
    pub fn new(max_queries: usize) -> Self {
        Self {
            max_queries,
            queries_used: 0,
        }
    }

    pub fn remaining(&self) -> usize {
        self.max_queries - self.queries_used
    }

    /// Charges one query, or returns false when none are left.
    pub fn consume(&mut self) -> bool {
        if self.queries_used < self.max_queries {
            self.queries_used += 1;
            true
        } else {
            false
        }
    }
}

/// Acceptance rule for candidates that do not reach the target label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProgressProxy {
    /// Only target hits are accepted.
    #[default]
    Disabled,
    /// Accept candidates whose label differs from the source label.
    LeaveSource { source: usize },
}

impl ProgressProxy {
    fn holds(self, label: usize) -> bool {
        match self {
            ProgressProxy::Disabled => false,
            ProgressProxy::LeaveSource { source } => label != source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SfaConfig {
    pub epsilon: f64,
    pub max_queries: usize,
    pub initial_flip_fraction: f64,
    /// Consecutive rejections before the flip fraction halves.
    pub patience: usize,
    pub min_flip_fraction: f64,
    /// Accept non-target candidates that leave the sample's true label.
    pub leave_source_proxy: bool,
}

impl Default for SfaConfig {
    fn default() -> Self {
        Self {
            epsilon: 16.0 / 255.0,
            max_queries: 10_000,
            initial_flip_fraction: 0.05,
            patience: 10,
            min_flip_fraction: 1e-4,
            leave_source_proxy: true,
        }
    }
}

impl SfaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::range("sfa.epsilon", format!("must be > 0, got {}", self.epsilon)));
        }
        if !(self.initial_flip_fraction > 0.0 && self.initial_flip_fraction <= 1.0) {
            return Err(Error::range("sfa.initial_flip_fraction", "must be in (0, 1]"));
        }
        if !(self.min_flip_fraction > 0.0 && self.min_flip_fraction <= self.initial_flip_fraction) {
            return Err(Error::range("sfa.min_flip_fraction", "must be in (0, initial_flip_fraction]"));
        }
        if self.patience < 1 {
            return Err(Error::range("sfa.patience", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SfaResult {
    pub success: bool,
    pub queries: usize,
    /// `clip(x + delta, 0, 1)` for the last accepted candidate.
    pub final_example: Vec<f32>,
    /// Label of the last queried candidate, if any query ran.
    pub final_label: Option<usize>,
}

fn clip_add(x: &[f32], delta: &[f32]) -> Vec<f32> {
    x.iter().zip(delta).map(|(a, d)| (a + d).clamp(0.0, 1.0)).collect()
}

/// Random-search attack that flips the signs of a shrinking random subset of
/// perturbation entries until the oracle reports `target_class`.
#[allow(clippy::too_many_arguments)]
pub fn sign_flip_attack<O, R>(
    oracle: &mut O,
    x: &[f32],
    shape: Shape3,
    init: Option<&Perturbation>,
    target_class: usize,
    proxy: ProgressProxy,
    cfg: &SfaConfig,
    rng: &mut R,
) -> Result<SfaResult>
where
    O: LabelOracle + ?Sized,
    R: Rng + ?Sized,
{
    cfg.validate()?;
    let n = numel(shape);
    if x.len() != n {
        return Err(Error::Resolution {
            expected: shape.to_vec(),
            actual: vec![x.len()],
        });
    }
    let eps = crate::perturbation::linf_bound(cfg.epsilon);
    let mut delta: Vec<f32> = match init {
        Some(t) => {
            if t.shape() != shape {
                return Err(Error::Resolution {
                    expected: shape.to_vec(),
                    actual: t.shape().to_vec(),
                });
            }
            t.data().iter().map(|v| v.clamp(-eps, eps)).collect()
        }
        None => (0..n).map(|_| if rng.random_bool(0.5) { eps } else { -eps }).collect(),
    };
    let mut budget = QueryBudget::new(cfg.max_queries);
    let mut current = clip_add(x, &delta);
    if !budget.consume() {
        return Ok(SfaResult {
            success: false,
            queries: 0,
            final_example: current,
            final_label: None,
        });
    }
    let mut label = oracle.query(&current, shape)?;
    if label == target_class {
        return Ok(SfaResult {
            success: true,
            queries: budget.queries_used,
            final_example: current,
            final_label: Some(label),
        });
    }

    let mut p = cfg.initial_flip_fraction;
    let mut rejections = 0;
    while budget.consume() {
        let k = ((p * n as f64).round() as usize).clamp(1, n);
        let mut cand = delta.clone();
        for i in sample(rng, n, k) {
            cand[i] = if cand[i] == 0.0 {
                if rng.random_bool(0.5) { eps } else { -eps }
            } else {
                -cand[i]
            };
        }
        let img = clip_add(x, &cand);
        let got = oracle.query(&img, shape)?;
        if got == target_class {
            return Ok(SfaResult {
                success: true,
                queries: budget.queries_used,
                final_example: img,
                final_label: Some(got),
            });
        }
        if proxy.holds(got) {
            delta = cand;
            current = img;
            label = got;
            rejections = 0;
        } else {
            rejections += 1;
            if rejections >= cfg.patience {
                p = (p / 2.0).max(cfg.min_flip_fraction);
                rejections = 0;
            }
        }
    }
    Ok(SfaResult {
        success: false,
        queries: budget.queries_used,
        final_example: current,
        final_label: Some(label),
    })
}

/// One row of a batch run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SfaRecord {
    pub index: usize,
    pub label: usize,
    pub success: bool,
    pub queries: usize,
}

/// Attacks every non-target sample of `set`. Sample `i` uses an rng seeded
/// with `seed + i`, so runs with and without `init` are paired.
pub fn attack_set<O: LabelOracle + ?Sized>(
    oracle: &mut O,
    set: &ImageSet,
    init: Option<&Perturbation>,
    target_class: usize,
    cfg: &SfaConfig,
    seed: u64,
) -> Result<Vec<SfaRecord>> {
    let mut out = Vec::new();
    for i in 0..set.len() {
        let label = set.label(i);
        if label == target_class {
            continue;
        }
        let proxy = if cfg.leave_source_proxy {
            ProgressProxy::LeaveSource { source: label }
        } else {
            ProgressProxy::Disabled
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        let r = sign_flip_attack(oracle, set.image(i), set.shape(), init, target_class, proxy, cfg, &mut rng)?;
        log::debug!("sample {i}: success={} queries={}", r.success, r.queries);
        out.push(SfaRecord {
            index: i,
            label,
            success: r.success,
            queries: r.queries,
        });
    }
    if out.is_empty() {
        return Err(Error::EmptyEval("no samples outside the target class".into()));
    }
    Ok(out)
}

pub fn records_csv(records: &[SfaRecord]) -> String {
    let mut s = String::from("index,label,success,queries\n");
    for r in records {
        s.push_str(&format!("{},{},{},{}\n", r.index, r.label, r.success, r.queries));
    }
    s
}

/// Median query count; failures count at the budget they exhausted.
pub fn median_queries(records: &[SfaRecord]) -> f64 {
    let mut q: Vec<usize> = records.iter().map(|r| r.queries).collect();
    q.sort_unstable();
    let n = q.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        q[n / 2] as f64
    } else {
        (q[n / 2 - 1] + q[n / 2]) as f64 / 2.0
    }
}
