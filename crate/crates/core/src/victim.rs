//! Victim classifiers and the evaluation harness: clean accuracy, top-k
//! attack success rate, per-class breakdowns, and the bundled reference CNN.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Module, ModuleT, Tensor, D};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use candle_nn::{BatchNorm, Conv2d, Conv2dConfig, Linear, VarBuilder, VarMap};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::images::{numel, ImageSet, Shape3};
use crate::perturbation::{apply_tensor, Perturbation};

/// Images per forward pass during evaluation.
pub const EVAL_BATCH: usize = 256;

/// A classifier consuming `[B, C, H, W]` pixels in `[0, 1]`. Adapters own
/// their input normalization.
pub trait VictimModel: Send + Sync {
    fn name(&self) -> &str;
    fn num_classes(&self) -> usize;
    fn input_shape(&self) -> Shape3;
    /// Class scores `[B, num_classes]`.
    fn classify(&self, images: &Tensor) -> Result<Tensor>;
}

/// Scores for one batch, checked for shape and finiteness.
pub fn scores(victim: &dyn VictimModel, images: &Tensor) -> Result<Vec<Vec<f32>>> {
    let (b, c, h, w) = images.dims4()?;
    if [c, h, w] != victim.input_shape() {
        return Err(Error::Resolution {
            expected: victim.input_shape().to_vec(),
            actual: vec![c, h, w],
        });
    }
    let out = victim.classify(images)?.to_dtype(DType::F32)?;
    if out.dims() != [b, victim.num_classes()] {
        return Err(Error::backend(
            victim.name(),
            format!("scores have shape {:?}, expected [{b}, {}]", out.dims(), victim.num_classes()),
        ));
    }
    let rows = out.to_vec2::<f32>()?;
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::backend(victim.name(), "non-finite class scores"));
    }
    Ok(rows)
}

/// Index of the highest score; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Whether `class` is among the `k` highest scores, ranking ties by index.
pub fn in_top_k(row: &[f32], class: usize, k: usize) -> bool {
    let s = row[class];
    let ahead = row
        .iter()
        .enumerate()
        .filter(|&(i, &v)| v > s || (v == s && i < class))
        .count();
    ahead < k
}

fn check_dataset(victim: &dyn VictimModel, set: &ImageSet) -> Result<()> {
    if set.is_empty() {
        return Err(Error::EmptyEval("evaluation set is empty".into()));
    }
    if set.shape() != victim.input_shape() {
        return Err(Error::Resolution {
            expected: victim.input_shape().to_vec(),
            actual: set.shape().to_vec(),
        });
    }
    if let Some(&l) = set.labels().iter().find(|&&l| l >= victim.num_classes()) {
        return Err(Error::range("dataset.labels", format!("label {l} >= {} classes", victim.num_classes())));
    }
    Ok(())
}

/// Scores for every image of `set`, optionally with the perturbation applied.
pub fn score_set(victim: &dyn VictimModel, set: &ImageSet, perturbation: Option<&Perturbation>) -> Result<Vec<Vec<f32>>> {
    check_dataset(victim, set)?;
    let device = Device::Cpu;
    let delta = match perturbation {
        Some(t) => {
            if t.shape() != set.shape() {
                return Err(Error::Resolution {
                    expected: set.shape().to_vec(),
                    actual: t.shape().to_vec(),
                });
            }
            Some(t.to_tensor(&device)?)
        }
        None => None,
    };
    let mut out = Vec::with_capacity(set.len());
    let indices: Vec<usize> = (0..set.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let x = set.tensor(chunk, &device)?;
        let x = match &delta {
            Some(d) => apply_tensor(d, &x)?,
            None => x,
        };
        out.extend(scores(victim, &x)?);
    }
    Ok(out)
}

pub fn clean_accuracy(victim: &dyn VictimModel, set: &ImageSet) -> Result<f64> {
    let rows = score_set(victim, set, None)?;
    Ok(accuracy_from_scores(&rows, set.labels()))
}

pub fn accuracy_from_scores(rows: &[Vec<f32>], labels: &[usize]) -> f64 {
    let hits = rows.iter().zip(labels).filter(|(r, &l)| argmax(r) == l).count();
    hits as f64 / rows.len() as f64
}

fn check_target(victim: &dyn VictimModel, target_class: usize, k: usize) -> Result<()> {
    if target_class >= victim.num_classes() {
        return Err(Error::range(
            "target_class",
            format!("{target_class} >= {} classes", victim.num_classes()),
        ));
    }
    if k < 1 {
        return Err(Error::range("topk", "must be >= 1"));
    }
    Ok(())
}

/// `(hits, evaluated)` over non-target samples.
pub fn asr_counts(rows: &[Vec<f32>], labels: &[usize], target_class: usize, k: usize) -> (usize, usize) {
    let mut hits = 0;
    let mut n = 0;
    for (r, &l) in rows.iter().zip(labels) {
        if l == target_class {
            continue;
        }
        n += 1;
        if in_top_k(r, target_class, k) {
            hits += 1;
        }
    }
    (hits, n)
}

fn fraction(hits: usize, n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::EmptyEval("no samples outside the target class".into()));
    }
    Ok(hits as f64 / n as f64)
}

pub fn attack_success_rate(
    victim: &dyn VictimModel,
    set: &ImageSet,
    t: &Perturbation,
    target_class: usize,
    k: usize,
) -> Result<f64> {
    check_target(victim, target_class, k)?;
    let rows = score_set(victim, set, Some(t))?;
    let (hits, n) = asr_counts(&rows, set.labels(), target_class, k);
    fraction(hits, n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassStatus {
    Measured,
    /// The target class itself, never counted.
    Excluded,
    /// No samples of this class in the set.
    Absent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub class: usize,
    pub status: ClassStatus,
    pub count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub asr: Option<f64>,
}

pub fn per_class_from_scores(
    rows: &[Vec<f32>],
    labels: &[usize],
    num_classes: usize,
    target_class: usize,
    k: usize,
) -> Vec<ClassEntry> {
    let mut hits = vec![0usize; num_classes];
    let mut counts = vec![0usize; num_classes];
    for (r, &l) in rows.iter().zip(labels) {
        counts[l] += 1;
        if in_top_k(r, target_class, k) {
            hits[l] += 1;
        }
    }
    (0..num_classes)
        .map(|c| {
            let (status, asr) = if c == target_class {
                (ClassStatus::Excluded, None)
            } else if counts[c] == 0 {
                (ClassStatus::Absent, None)
            } else {
                (ClassStatus::Measured, Some(hits[c] as f64 / counts[c] as f64))
            };
            ClassEntry {
                class: c,
                status,
                count: counts[c],
                asr,
            }
        })
        .collect()
}

/// Top-1 ASR grouped by ground-truth class.
pub fn per_class_report(
    victim: &dyn VictimModel,
    set: &ImageSet,
    t: &Perturbation,
    target_class: usize,
) -> Result<Vec<ClassEntry>> {
    check_target(victim, target_class, 1)?;
    let rows = score_set(victim, set, Some(t))?;
    Ok(per_class_from_scores(&rows, set.labels(), victim.num_classes(), target_class, 1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub victim: String,
    pub perturbation_digest: String,
    pub target_class: usize,
    pub clean_accuracy: f64,
    pub asr_topk: BTreeMap<usize, f64>,
    pub per_class_asr: Vec<ClassEntry>,
    pub n_evaluated: usize,
    pub excluded_target_class: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        let mut fracs = vec![self.clean_accuracy];
        fracs.extend(self.asr_topk.values());
        fracs.extend(self.per_class_asr.iter().filter_map(|e| e.asr));
        if fracs.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::Oracle("report fraction outside [0, 1]".into()));
        }
        if self.n_evaluated == 0 {
            return Err(Error::EmptyEval("report has no evaluated samples".into()));
        }
        Ok(())
    }
}

/// Clean accuracy plus ASR at every `k` in `ks`, from two passes over `set`.
pub fn evaluate(
    victim: &dyn VictimModel,
    set: &ImageSet,
    t: &Perturbation,
    target_class: usize,
    ks: &[usize],
) -> Result<EvalReport> {
    for &k in ks {
        check_target(victim, target_class, k)?;
    }
    let clean = score_set(victim, set, None)?;
    let adv = score_set(victim, set, Some(t))?;
    let labels = set.labels();
    let mut asr_topk = BTreeMap::new();
    let mut n_evaluated = 0;
    for &k in ks {
        let (hits, n) = asr_counts(&adv, labels, target_class, k);
        asr_topk.insert(k, fraction(hits, n)?);
        n_evaluated = n;
    }
    if ks.is_empty() {
        n_evaluated = asr_counts(&adv, labels, target_class, 1).1;
    }
    let report = EvalReport {
        victim: victim.name().to_string(),
        perturbation_digest: t.metadata_digest()?,
        target_class,
        clean_accuracy: accuracy_from_scores(&clean, labels),
        asr_topk,
        per_class_asr: per_class_from_scores(&adv, labels, victim.num_classes(), target_class, 1),
        n_evaluated,
        excluded_target_class: labels.len() - n_evaluated,
        config_digest: None,
    };
    report.validate()?;
    Ok(report)
}

/// Aligned text table, one row per report, percentages with two decimals.
pub fn format_table(reports: &[EvalReport]) -> String {
    let ks: Vec<usize> = {
        let mut ks: Vec<usize> = reports.iter().flat_map(|r| r.asr_topk.keys().copied()).collect();
        ks.sort_unstable();
        ks.dedup();
        ks
    };
    let mut header = vec!["Victim".to_string(), "CA".to_string()];
    header.extend(ks.iter().map(|k| format!("ASR@{k}")));
    let mut rows = vec![header];
    for r in reports {
        let mut row = vec![r.victim.clone(), format!("{:.2}", 100.0 * r.clean_accuracy)];
        for k in &ks {
            row.push(r.asr_topk.get(k).map_or("-".into(), |v| format!("{:.2}", 100.0 * v)));
        }
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, s)| if c == 0 { format!("{s:<w$}", w = widths[c]) } else { format!("{s:>w$}", w = widths[c]) })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
            out.push('\n');
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Reference CNN

struct Stage {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
}

impl Stage {
    fn new(cin: usize, cout: usize, vb: VarBuilder) -> Result<Self> {
        let cfg = Conv2dConfig {
            padding: 1,
            ..Default::default()
        };
        Ok(Self {
            conv1: candle_nn::conv2d_no_bias(cin, cout, 3, cfg, vb.pp("conv1"))?,
            bn1: candle_nn::batch_norm(cout, 1e-5, vb.pp("bn1"))?,
            conv2: candle_nn::conv2d_no_bias(cout, cout, 3, cfg, vb.pp("conv2"))?,
            bn2: candle_nn::batch_norm(cout, 1e-5, vb.pp("bn2"))?,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let x = self.bn1.forward_t(&self.conv1.forward(x)?, train)?.relu()?;
        let x = self.bn2.forward_t(&self.conv2.forward(&x)?, train)?.relu()?;
        Ok(x.max_pool2d(2)?)
    }
}

/// Small VGG-style network: per stage two 3x3 conv + batch-norm + ReLU and a
/// 2x2 max-pool, then global average pooling and a linear head. Inputs are
/// standardized with per-channel statistics stored alongside the weights.
pub struct ReferenceCnn {
    name: String,
    input_shape: Shape3,
    num_classes: usize,
    widths: Vec<usize>,
    stages: Vec<Stage>,
    head: Linear,
    mean: Tensor,
    std: Tensor,
    varmap: Option<VarMap>,
}

impl ReferenceCnn {
    pub const NAME: &'static str = "reference-cnn";

    fn build(
        vb: VarBuilder,
        input_shape: Shape3,
        num_classes: usize,
        widths: &[usize],
        varmap: Option<VarMap>,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::range("victim.num_classes", "must be >= 2"));
        }
        if widths.is_empty() {
            return Err(Error::range("victim.widths", "need at least one stage"));
        }
        let mut stages = Vec::with_capacity(widths.len());
        let mut cin = input_shape[0];
        for (i, &w) in widths.iter().enumerate() {
            stages.push(Stage::new(cin, w, vb.pp(format!("stages.{i}")))?);
            cin = w;
        }
        let head = candle_nn::linear(cin, num_classes, vb.pp("head"))?;
        let c = input_shape[0];
        let mean = vb.get_with_hints(c, "norm.mean", candle_nn::Init::Const(0.5))?;
        let std = vb.get_with_hints(c, "norm.std", candle_nn::Init::Const(0.25))?;
        Ok(Self {
            name: Self::NAME.into(),
            input_shape,
            num_classes,
            widths: widths.to_vec(),
            stages,
            head,
            mean,
            std,
            varmap,
        })
    }

    /// Freshly initialized network with trainable parameters.
    pub fn new(input_shape: Shape3, num_classes: usize, widths: &[usize], seed: u64) -> Result<Self> {
        let device = Device::Cpu;
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, DType::F32, &device);
        let net = Self::build(vb, input_shape, num_classes, widths, Some(varmap))?;
        net.ensure_meta()?;
        net.reinitialize(seed)?;
        Ok(net)
    }

    /// Seeded uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init of convolution
    /// and linear parameters; the candle CPU generator cannot be seeded.
    fn reinitialize(&self, seed: u64) -> Result<()> {
        let Some(vm) = &self.varmap else { return Ok(()) };
        let data = vm.data().lock().expect("varmap lock");
        let mut names: Vec<&String> = data.keys().filter(|k| k.contains("conv") || k.starts_with("head.")).collect();
        names.sort();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for name in names {
            let var = &data[name];
            let fan_in = if name.starts_with("head.") {
                data["head.weight"].dim(1)?
            } else {
                var.dims()[1..].iter().product()
            };
            let bound = 1.0 / (fan_in as f32).sqrt();
            let vals: Vec<f32> = (0..var.elem_count()).map(|_| rng.random_range(-bound..bound)).collect();
            var.set(&Tensor::from_vec(vals, var.shape(), &Device::Cpu)?)?;
        }
        Ok(())
    }

    fn ensure_meta(&self) -> Result<()> {
        if let Some(vm) = &self.varmap {
            let hw = [self.input_shape[1] as f32, self.input_shape[2] as f32];
            let mut data = vm.data().lock().expect("varmap lock");
            if !data.contains_key("meta.input_hw") {
                let t = Tensor::new(&hw, &Device::Cpu)?;
                data.insert("meta.input_hw".into(), candle_core::Var::from_tensor(&t)?);
            }
        }
        Ok(())
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    /// Sets the per-channel standardization statistics.
    pub fn set_normalization(&self, mean: &[f32], std: &[f32]) -> Result<()> {
        let c = self.input_shape[0];
        if mean.len() != c || std.len() != c || std.iter().any(|s| *s <= 0.0) {
            return Err(Error::range("victim.normalization", "need one mean and positive std per channel"));
        }
        let vm = self
            .varmap
            .as_ref()
            .ok_or_else(|| Error::backend(&self.name, "weights are frozen"))?;
        let data = vm.data().lock().expect("varmap lock");
        data["norm.mean"].set(&Tensor::new(mean, &Device::Cpu)?)?;
        data["norm.std"].set(&Tensor::new(std, &Device::Cpu)?)?;
        Ok(())
    }

    pub fn forward_t(&self, images: &Tensor, train: bool) -> Result<Tensor> {
        let c = self.input_shape[0];
        let x = images
            .broadcast_sub(&self.mean.reshape((1, c, 1, 1))?)?
            .broadcast_div(&self.std.reshape((1, c, 1, 1))?)?;
        let mut x = x;
        for s in &self.stages {
            x = s.forward(&x, train)?;
        }
        let pooled = x.mean(D::Minus1)?.mean(D::Minus1)?;
        Ok(self.head.forward(&pooled)?)
    }

    /// Writes weights, batch-norm statistics, normalization, and input size
    /// as safetensors.
    pub fn save(&self, path: &Path) -> Result<()> {
        let vm = self
            .varmap
            .as_ref()
            .ok_or_else(|| Error::backend(&self.name, "no parameter store to save"))?;
        vm.save(path).map_err(|e| match e {
            candle_core::Error::Io(io) => Error::io(path, io),
            other => Error::Tensor(other),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "victim weights not found")));
        }
        let device = Device::Cpu;
        let tensors = candle_core::safetensors::load(path, &device)?;
        let bad = |m: &str| Error::Format(format!("{}: {m}", path.display()));
        let mut widths = Vec::new();
        let mut cin = None;
        while let Some(w) = tensors.get(&format!("stages.{}.conv1.weight", widths.len())) {
            let (o, i, _, _) = w.dims4()?;
            cin.get_or_insert(i);
            widths.push(o);
        }
        let channels = cin.ok_or_else(|| bad("no convolution stages"))?;
        let (num_classes, _) = tensors.get("head.weight").ok_or_else(|| bad("missing head.weight"))?.dims2()?;
        let hw = tensors
            .get("meta.input_hw")
            .ok_or_else(|| bad("missing meta.input_hw"))?
            .to_dtype(DType::F32)?
            .to_vec1::<f32>()?;
        if hw.len() != 2 {
            return Err(bad("meta.input_hw must hold two values"));
        }
        let shape = [channels, hw[0] as usize, hw[1] as usize];
        let varmap = VarMap::new();
        {
            let mut data = varmap.data().lock().expect("varmap lock");
            for (k, v) in &tensors {
                data.insert(k.clone(), candle_core::Var::from_tensor(&v.to_dtype(DType::F32)?)?);
            }
        }
        let vb = VarBuilder::from_varmap(&varmap, DType::F32, &device);
        Self::build(vb, shape, num_classes, &widths, Some(varmap.clone()))
    }

    fn trainable(&self) -> Vec<candle_core::Var> {
        let Some(vm) = &self.varmap else { return Vec::new() };
        let data = vm.data().lock().expect("varmap lock");
        let mut named: Vec<(&String, &candle_core::Var)> = data
            .iter()
            .filter(|(k, _)| !k.contains("running_") && !k.starts_with("norm.") && !k.starts_with("meta."))
            .collect();
        named.sort_by(|a, b| a.0.cmp(b.0));
        named.into_iter().map(|(_, v)| v.clone()).collect()
    }
}

impl VictimModel for ReferenceCnn {
    fn name(&self) -> &str {
        &self.name
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn input_shape(&self) -> Shape3 {
        self.input_shape
    }

    fn classify(&self, images: &Tensor) -> Result<Tensor> {
        self.forward_t(&images.to_dtype(DType::F32)?, false)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub widths: Vec<usize>,
    /// Random crop with 4-pixel zero padding and horizontal flips.
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 128,
            lr: 2e-3,
            weight_decay: 5e-4,
            widths: vec![32, 64, 128],
            augment: true,
            seed: 0,
        }
    }
}

/// Per-epoch training summary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: f64,
}

fn channel_stats(set: &ImageSet) -> (Vec<f32>, Vec<f32>) {
    let [c, h, w] = set.shape();
    let plane = h * w;
    let mut sum = vec![0f64; c];
    let mut sq = vec![0f64; c];
    for i in 0..set.len() {
        let img = set.image(i);
        for ch in 0..c {
            for v in &img[ch * plane..(ch + 1) * plane] {
                sum[ch] += *v as f64;
                sq[ch] += (*v as f64).powi(2);
            }
        }
    }
    let n = (set.len() * plane) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| ((q / n - m * m).max(1e-12)).sqrt() as f32)
        .collect();
    (mean.into_iter().map(|m| m as f32).collect(), std)
}

fn augment_into(out: &mut Vec<f32>, img: &[f32], shape: Shape3, rng: &mut ChaCha8Rng) {
    const PAD: i64 = 4;
    let [c, h, w] = shape;
    let dy = rng.random_range(-PAD..=PAD);
    let dx = rng.random_range(-PAD..=PAD);
    let flip = rng.random_bool(0.5);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let sx = if flip { w - 1 - x } else { x } as i64 + dx;
                let sy = y as i64 + dy;
                let v = if sy >= 0 && sy < h as i64 && sx >= 0 && sx < w as i64 {
                    img[ch * h * w + sy as usize * w + sx as usize]
                } else {
                    0.0
                };
                out.push(v);
            }
        }
    }
}

/// Trains a [`ReferenceCnn`] with AdamW and a cosine learning-rate schedule.
pub fn train_reference_cnn<F>(train: &ImageSet, num_classes: usize, cfg: &TrainConfig, mut progress: F) -> Result<ReferenceCnn>
where
    F: FnMut(&EpochRecord),
{
    if train.is_empty() {
        return Err(Error::EmptyEval("training set is empty".into()));
    }
    if cfg.epochs < 1 || cfg.batch_size < 1 || !(cfg.lr > 0.0) {
        return Err(Error::range("train", "epochs, batch_size, and lr must be positive"));
    }
    let shape = train.shape();
    let net = ReferenceCnn::new(shape, num_classes, &cfg.widths, cfg.seed)?;
    let (mean, std) = channel_stats(train);
    net.set_normalization(&mean, &std)?;
    let mut opt = AdamW::new(
        net.trainable(),
        ParamsAdamW {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
    )?;
    let device = Device::Cpu;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = (per_epoch * cfg.epochs) as f64;
    let n = numel(shape);
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let lr = 0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * step as f64 / total).cos());
            opt.set_learning_rate(lr);
            let mut flat = Vec::with_capacity(chunk.len() * n);
            for &i in chunk {
                if cfg.augment {
                    augment_into(&mut flat, train.image(i), shape, &mut rng);
                } else {
                    flat.extend_from_slice(train.image(i));
                }
            }
            let x = Tensor::from_vec(flat, (chunk.len(), shape[0], shape[1], shape[2]), &device)?;
            let y: Vec<u32> = chunk.iter().map(|&i| train.label(i) as u32).collect();
            let y = Tensor::new(y.as_slice(), &device)?;
            let logits = net.forward_t(&x, true)?;
            let loss = candle_nn::loss::cross_entropy(&logits, &y)?;
            opt.backward_step(&loss)?;
            let l = loss.to_scalar::<f32>()? as f64;
            if !l.is_finite() {
                return Err(Error::Divergence { step, loss: l });
            }
            loss_sum += l * chunk.len() as f64;
            let pred = logits.argmax(D::Minus1)?.to_vec1::<u32>()?;
            correct += pred.iter().zip(chunk).filter(|(p, &i)| **p as usize == train.label(i)).count();
            step += 1;
        }
        let rec = EpochRecord {
            epoch,
            mean_loss: loss_sum / train.len() as f64,
            train_accuracy: correct as f64 / train.len() as f64,
        };
        log::info!("epoch {epoch}: loss {:.4} train acc {:.4}", rec.mean_loss, rec.train_accuracy);
        progress(&rec);
    }
    Ok(net)
}

/// Victims addressable by name from a configuration file.
pub fn load_victim(spec: &VictimSpec) -> Result<Box<dyn VictimModel>> {
    let net = ReferenceCnn::load(&spec.weights)?;
    Ok(Box::new(match &spec.name {
        Some(n) => net.with_name(n.clone()),
        None => net,
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VictimSpec {
    /// Display name; defaults to the architecture name.
    #[serde(default)]
    pub name: Option<String>,
    /// Reference CNN weights in safetensors format.
    pub weights: std::path::PathBuf,
}

/// Victim returning fixed scores for every input; handy for harness tests.
#[derive(Debug, Clone)]
pub struct ConstantVictim {
    pub scores: Vec<f32>,
    pub shape: Shape3,
}

impl VictimModel for ConstantVictim {
    fn name(&self) -> &str {
        "constant"
    }

    fn num_classes(&self) -> usize {
        self.scores.len()
    }

    fn input_shape(&self) -> Shape3 {
        self.shape
    }

    fn classify(&self, images: &Tensor) -> Result<Tensor> {
        let b = images.dim(0)?;
        let row = Tensor::new(self.scores.as_slice(), images.device())?;
        Ok(row.unsqueeze(0)?.repeat((b, 1))?)
    }
}

/// Linear victim `scores = W vec(x) + b`, used for synthetic evaluations.
#[derive(Debug, Clone)]
pub struct LinearVictim {
    name: String,
    shape: Shape3,
    weight: Tensor,
    bias: Tensor,
}

impl LinearVictim {
    pub fn new(name: impl Into<String>, shape: Shape3, weight: Vec<f32>, bias: Vec<f32>) -> Result<Self> {
        let k = bias.len();
        let n = numel(shape);
        if weight.len() != k * n || k < 2 {
            return Err(Error::range("victim.weight", format!("expected {k}x{n} weights and >= 2 classes")));
        }
        Ok(Self {
            name: name.into(),
            shape,
            weight: Tensor::from_vec(weight, (k, n), &Device::Cpu)?,
            bias: Tensor::from_vec(bias, k, &Device::Cpu)?,
        })
    }
}

impl VictimModel for LinearVictim {
    fn name(&self) -> &str {
        &self.name
    }

    fn num_classes(&self) -> usize {
        self.bias.dim(0).unwrap_or(0)
    }

    fn input_shape(&self) -> Shape3 {
        self.shape
    }

    fn classify(&self, images: &Tensor) -> Result<Tensor> {
        let b = images.dim(0)?;
        let x = images.to_dtype(DType::F32)?.reshape((b, ()))?;
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

/// Counts per label, for summaries.
pub fn label_histogram(labels: &[usize]) -> HashMap<usize, usize> {
    let mut h = HashMap::new();
    for &l in labels {
        *h.entry(l).or_insert(0) += 1;
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perturbation::NormKind;

    fn balanced(k: usize, per: usize, shape: Shape3) -> ImageSet {
        let mut set = ImageSet::empty(shape);
        for c in 0..k {
            for _ in 0..per {
                set.push(&vec![0.5; numel(shape)], c).unwrap();
            }
        }
        set
    }

    #[test]
    fn constant_victim_is_at_chance() {
        let shape = [1, 2, 2];
        let mut s = vec![0.0; 10];
        s[3] = 1.0;
        let v = ConstantVictim { scores: s, shape };
        assert!((clean_accuracy(&v, &balanced(10, 5, shape)).unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn always_target_victim_has_full_asr() {
        let shape = [1, 2, 2];
        let mut s = vec![0.0; 4];
        s[2] = 5.0;
        let v = ConstantVictim { scores: s, shape };
        let set = balanced(4, 3, shape);
        let t = Perturbation::zeros(shape, 0.1, NormKind::Linf).unwrap();
        for k in 1..=4 {
            assert_eq!(attack_success_rate(&v, &set, &t, 2, k).unwrap(), 1.0);
        }
        let rep = per_class_report(&v, &set, &t, 2).unwrap();
        assert_eq!(rep[2].status, ClassStatus::Excluded);
        assert!(rep.iter().filter(|e| e.class != 2).all(|e| e.asr == Some(1.0)));
    }

    #[test]
    fn empty_bucket_is_absent() {
        let shape = [1, 1, 1];
        let mut set = ImageSet::empty(shape);
        set.push(&[0.5], 0).unwrap();
        let rows = vec![vec![0.0, 1.0, 0.0]];
        let rep = per_class_from_scores(&rows, set.labels(), 3, 1, 1);
        assert_eq!(rep[2].status, ClassStatus::Absent);
        assert_eq!(rep[2].asr, None);
        assert_eq!(rep[0].asr, Some(1.0));
    }

    #[test]
    fn top_k_tie_break_by_index() {
        let row = [1.0, 1.0, 0.5];
        assert!(in_top_k(&row, 0, 1));
        assert!(!in_top_k(&row, 1, 1));
        assert!(in_top_k(&row, 1, 2));
        assert_eq!(argmax(&row), 0);
    }

    #[test]
    fn mismatched_resolution_rejected() {
        let v = ConstantVictim {
            scores: vec![0.0, 1.0],
            shape: [1, 2, 2],
        };
        let set = balanced(2, 1, [1, 3, 3]);
        assert!(matches!(clean_accuracy(&v, &set), Err(Error::Resolution { .. })));
    }

    #[test]
    fn reference_cnn_round_trips_and_learns() {
        let shape = [3, 8, 8];
        let mut set = ImageSet::empty(shape);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for i in 0..64 {
            let c = i % 2;
            let img: Vec<f32> = (0..numel(shape))
                .map(|j| {
                    let base = if (j / 64 == 0) == (c == 0) { 0.8 } else { 0.2 };
                    base + rng.random_range(-0.1..0.1)
                })
                .collect();
            set.push(&img, c).unwrap();
        }
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 16,
            lr: 5e-3,
            widths: vec![8, 8],
            augment: false,
            ..Default::default()
        };
        let net = train_reference_cnn(&set, 2, &cfg, |_| {}).unwrap();
        assert!(clean_accuracy(&net, &set).unwrap() >= 0.9);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.safetensors");
        net.save(&path).unwrap();
        let back = ReferenceCnn::load(&path).unwrap();
        assert_eq!(back.input_shape(), shape);
        assert_eq!(back.widths(), &[8, 8]);
        let x = set.tensor(&[0, 1, 2], &Device::Cpu).unwrap();
        let a = net.classify(&x).unwrap().to_vec2::<f32>().unwrap();
        let b = back.classify(&x).unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn table_is_aligned() {
        let r = EvalReport {
            victim: "v".into(),
            perturbation_digest: "d".into(),
            target_class: 0,
            clean_accuracy: 0.9353,
            asr_topk: [(1, 0.5), (5, 0.75)].into_iter().collect(),
            per_class_asr: vec![],
            n_evaluated: 10,
            excluded_target_class: 0,
            config_digest: None,
        };
        let t = format_table(&[r]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[0], "Victim     CA  ASR@1  ASR@5");
        assert_eq!(lines[2], "v       93.53  50.00  75.00");
    }
}
