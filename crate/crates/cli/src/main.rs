use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use uapkit::backends::build_backend;
use uapkit::config::{DatasetFormat, DatasetSpec, RunConfig};
use uapkit::dataset::{ingest_pood, load_cifar10, load_folder, load_images, FolderOptions, Split};
use uapkit::images::ImageSet;
use uapkit::perturbation::Perturbation;
use uapkit::pipeline::{load_eval_set, run_craft};
use uapkit::probe::{render_histograms, score_distributions, ProbeReport};
use uapkit::sfa::{attack_set, median_queries, CommandOracle, LabelOracle, SfaRecord, VictimOracle};
use uapkit::victim::{clean_accuracy, evaluate, format_table, load_victim, train_reference_cnn, TrainConfig, VictimModel, VictimSpec};
use uapkit::{Error, Result};

#[derive(Parser)]
#[command(name = "uapkit", version, about = "Craft and evaluate universal targeted perturbations")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides craft.steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Overrides craft.epsilon.
    #[arg(long)]
    epsilon: Option<f64>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        cfg.with_overrides(self.seed, self.steps, self.epsilon)
    }
}

#[derive(Copy, Clone, ValueEnum)]
enum Format {
    Folder,
    Cifar10,
}

impl From<Format> for DatasetFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Folder => DatasetFormat::Folder,
            Format::Cifar10 => DatasetFormat::Cifar10,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Optimize a perturbation on the configured POOD set.
    Craft {
        #[command(flatten)]
        common: Common,
        /// Perturbation file to write; the loss trace goes to `<out>.trace.csv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Clean accuracy and attack success rates of a perturbation.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        perturbation: PathBuf,
        /// Victim weights; repeatable. Adds to the configured victims.
        #[arg(long)]
        victim: Vec<PathBuf>,
        #[arg(long)]
        target_class: Option<usize>,
        /// Repeatable; replaces eval.topk.
        #[arg(long)]
        topk: Vec<usize>,
        /// Evaluation data; replaces eval.dataset.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "folder")]
        data_format: Format,
        /// JSON report path; printed to standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sign-flip query attack, from random and (if given) perturbation starts.
    Sfa {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        perturbation: Option<PathBuf>,
        #[arg(long)]
        victim: Option<PathBuf>,
        #[arg(long)]
        target_class: Option<usize>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "folder")]
        data_format: Format,
        /// Per-sample query counts (CSV).
        #[arg(long)]
        out: PathBuf,
    },
    /// Embedding-consistency scores for clean and perturbed images.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        clean: PathBuf,
        /// Directory of perturbed images.
        #[arg(long, conflicts_with = "perturbation")]
        perturbed: Option<PathBuf>,
        /// Perturbation applied to the clean images instead of `--perturbed`.
        #[arg(long)]
        perturbation: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        histogram: Option<PathBuf>,
    },
    /// Render the histograms of a probe report.
    Plot {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the reference CNN victim.
    TrainVictim {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "cifar10")]
        data_format: Format,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 128)]
        batch_size: usize,
        #[arg(long, default_value_t = 2e-3)]
        lr: f64,
        /// Comma-separated stage widths.
        #[arg(long, default_value = "32,64,128", value_delimiter = ',')]
        widths: Vec<usize>,
        /// Use at most this many training images.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the fully-defaulted configuration.
    DefaultConfig {
        #[arg(long)]
        out: PathBuf,
    },
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn trace_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".trace.csv");
    PathBuf::from(s)
}

fn eval_dataset(cfg: &RunConfig, data: Option<PathBuf>, format: Format) -> Result<DatasetSpec> {
    match data {
        Some(path) => Ok(DatasetSpec {
            path,
            format: format.into(),
            split: Split::Test,
            limit: cfg.eval.dataset.as_ref().and_then(|d| d.limit),
        }),
        None => cfg
            .eval
            .dataset
            .clone()
            .ok_or_else(|| Error::Config("no evaluation data: set eval.dataset or pass --data".into())),
    }
}

fn victims(cfg: &RunConfig, extra: &[PathBuf]) -> Result<Vec<Box<dyn VictimModel>>> {
    let mut specs = cfg.victims.clone();
    specs.extend(extra.iter().map(|p| VictimSpec {
        name: None,
        weights: p.clone(),
    }));
    if specs.is_empty() {
        return Err(Error::Config("no victims: set victims or pass --victim".into()));
    }
    specs.iter().map(load_victim).collect()
}

fn craft_cmd(common: &Common, out: &Path) -> Result<()> {
    let cfg = common.load()?;
    let pood_cfg = cfg
        .pood
        .as_ref()
        .ok_or_else(|| Error::Config("pood.root is required for craft".into()))?;
    let pood = ingest_pood(
        &pood_cfg.root,
        cfg.craft.resolution,
        &pood_cfg.folder_options(&cfg.concepts.victim_labels),
    )?;
    log::info!(
        "POOD: {} images, {} labels, {} skipped, excluded {:?}",
        pood.images.len(),
        pood.labels.len(),
        pood.skipped,
        pood.excluded
    );
    let mut opts = cfg.backend_options.clone();
    opts.seed = cfg.effective_seed();
    let backend = build_backend(&cfg.backend, &opts)?;
    let steps = cfg.craft.steps;
    let outcome = run_craft(&cfg, backend.as_ref(), &pood, |r, _| {
        if r.step % 100 == 0 || r.step == steps {
            log::info!("step {}/{steps}: loss {:.5}", r.step, r.loss);
        }
    })?;
    outcome.perturbation.save(out)?;
    let digest = cfg.digest()?;
    write(&trace_path(out), format!("# config_digest={digest}\n{}", outcome.trace_csv()))?;
    let last = outcome.trace.last().map_or(f64::NAN, |r| r.loss);
    println!(
        "wrote {} (target {:?}, {} steps, final loss {last:.5}, linf {:.6})",
        out.display(),
        outcome.perturbation.meta.target,
        steps,
        outcome.perturbation.linf()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn eval_cmd(
    common: &Common,
    perturbation: &Path,
    extra: &[PathBuf],
    target_class: Option<usize>,
    topk: &[usize],
    data: Option<PathBuf>,
    format: Format,
    out: Option<&Path>,
) -> Result<()> {
    let mut cfg = common.load()?;
    if !topk.is_empty() {
        cfg.eval.topk = topk.to_vec();
    }
    let t = Perturbation::load(perturbation)?;
    let target = match target_class {
        Some(t) => t,
        None => cfg.target_class()?,
    };
    let spec = eval_dataset(&cfg, data, format)?;
    let digest = cfg.digest()?;
    let mut reports = Vec::new();
    for v in victims(&cfg, extra)? {
        if v.input_shape() != t.shape() {
            return Err(Error::Resolution {
                expected: v.input_shape().to_vec(),
                actual: t.shape().to_vec(),
            });
        }
        let set = load_eval_set(&spec, v.input_shape(), &cfg.concepts.victim_labels)?;
        let mut r = evaluate(v.as_ref(), &set, &t, target, &cfg.eval.topk)?;
        r.config_digest = Some(digest.clone());
        reports.push(r);
    }
    print!("{}", format_table(&reports));
    let json = if reports.len() == 1 {
        serde_json::to_string_pretty(&reports[0])?
    } else {
        serde_json::to_string_pretty(&reports)?
    };
    match out {
        Some(p) => write(p, json)?,
        None => println!("{json}"),
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn sfa_cmd(
    common: &Common,
    perturbation: Option<&Path>,
    victim: Option<&Path>,
    target_class: Option<usize>,
    data: Option<PathBuf>,
    format: Format,
    out: &Path,
) -> Result<()> {
    let cfg = common.load()?;
    let target = match target_class {
        Some(t) => t,
        None => cfg.target_class()?,
    };
    let extra: Vec<PathBuf> = victim.map(Path::to_path_buf).into_iter().collect();
    let v = victims(&cfg, &extra)?.pop().expect("at least one victim");
    let spec = eval_dataset(&cfg, data, format)?;
    let set = load_eval_set(&spec, v.input_shape(), &cfg.concepts.victim_labels)?;
    let chosen: Vec<usize> = (0..set.len()).filter(|&i| set.label(i) != target).take(cfg.sfa.samples).collect();
    let set = set.subset(&chosen);
    let init = perturbation.map(Perturbation::load).transpose()?;
    let mut oracle: Box<dyn LabelOracle> = match &cfg.sfa.oracle_command {
        Some(cmd) if !cmd.is_empty() => Box::new(CommandOracle::new(&cmd[0], cmd[1..].to_vec(), cfg.concepts.victim_labels.clone())?),
        _ => Box::new(VictimOracle::new(v.as_ref())),
    };
    let seed = cfg.effective_seed();
    let mut rows: Vec<(&str, SfaRecord)> = Vec::new();
    let random = attack_set(oracle.as_mut(), &set, None, target, &cfg.sfa.attack, seed)?;
    println!("random init: median queries {}", median_queries(&random));
    rows.extend(random.into_iter().map(|r| ("random", r)));
    if let Some(t) = &init {
        let warm = attack_set(oracle.as_mut(), &set, Some(t), target, &cfg.sfa.attack, seed)?;
        println!("perturbation init: median queries {}", median_queries(&warm));
        rows.extend(warm.into_iter().map(|r| ("perturbation", r)));
    }
    let mut csv = format!("# config_digest={}\ninit,index,label,success,queries\n", cfg.digest()?);
    for (init, r) in rows {
        let index = chosen[r.index];
        csv.push_str(&format!("{init},{index},{},{},{}\n", r.label, r.success, r.queries));
    }
    write(out, csv)
}

fn probe_cmd(common: &Common, clean: &Path, perturbed: Option<&Path>, perturbation: Option<&Path>, out: &Path, histogram: Option<&Path>) -> Result<()> {
    let cfg = common.load()?;
    let shape = cfg.craft.resolution;
    let mut clean_set = load_images(clean, shape)?;
    if let Some(l) = cfg.probe.limit {
        clean_set = clean_set.subset(&(0..l.min(clean_set.len())).collect::<Vec<_>>());
    }
    let (perturbed_set, digest) = match (perturbed, perturbation) {
        (Some(dir), _) => (load_images(dir, shape)?, None),
        (None, Some(p)) => {
            let t = Perturbation::load(p)?;
            let mut set = ImageSet::empty(shape);
            for i in 0..clean_set.len() {
                set.push(&t.apply_slice(clean_set.image(i))?, clean_set.label(i))?;
            }
            (set, Some(t.metadata_digest()?))
        }
        (None, None) => return Err(Error::Config("pass --perturbed or --perturbation".into())),
    };
    let mut opts = cfg.backend_options.clone();
    opts.seed = cfg.effective_seed();
    let backend = build_backend(&cfg.backend, &opts)?;
    let dist = score_distributions(
        &clean_set,
        &perturbed_set,
        backend.as_ref(),
        &cfg.probe.suite,
        cfg.probe.samples_per_transform,
        cfg.effective_seed(),
    )?;
    println!("overlap {:.4}", dist.overlap);
    for (name, o) in &dist.per_transform_overlap {
        println!("  {name:<16} {o:.4}");
    }
    if let Some(h) = histogram {
        render_histograms(&dist.clean_histogram, &dist.perturbed_histogram, h)?;
    }
    let report = ProbeReport {
        backend: backend.name().to_string(),
        samples_per_transform: cfg.probe.samples_per_transform,
        suite: cfg.probe.suite.clone(),
        perturbation_digest: digest,
        config_digest: Some(cfg.digest()?),
        distributions: dist,
    };
    write(out, serde_json::to_string_pretty(&report)?)
}

fn plot_cmd(scores: &Path, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(scores).map_err(|e| Error::io(scores, e))?;
    let report: ProbeReport = serde_json::from_str(&text)?;
    let d = &report.distributions;
    render_histograms(&d.clean_histogram, &d.perturbed_histogram, out)
}

#[allow(clippy::too_many_arguments)]
fn train_cmd(
    common: &Common,
    data: &Path,
    format: Format,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    widths: &[usize],
    limit: Option<usize>,
    out: &Path,
) -> Result<()> {
    let cfg = common.load()?;
    let labels = &cfg.concepts.victim_labels;
    let (train, test) = match format {
        Format::Cifar10 => {
            let (train, _) = load_cifar10(data, Split::Train, limit)?;
            let test = load_cifar10(data, Split::Test, None).ok().map(|(s, _)| s);
            (train, test)
        }
        Format::Folder => {
            let ds = load_folder(data, cfg.craft.resolution, &FolderOptions::default())?;
            let set = uapkit::dataset::align_labels(&ds, labels)?;
            let set = match limit {
                Some(l) if l < set.len() => set.subset(&(0..l).collect::<Vec<_>>()),
                _ => set,
            };
            (set, None)
        }
    };
    let tc = TrainConfig {
        epochs,
        batch_size,
        lr,
        widths: widths.to_vec(),
        seed: cfg.effective_seed(),
        ..Default::default()
    };
    let net = train_reference_cnn(&train, labels.len(), &tc, |r| {
        println!("epoch {:>3}  loss {:.4}  train acc {:.4}", r.epoch, r.mean_loss, r.train_accuracy);
    })?;
    net.save(out)?;
    if let Some(test) = test {
        println!("test accuracy {:.4}", clean_accuracy(&net, &test)?);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Craft { common, out } => craft_cmd(&common, &out),
        Cmd::Eval {
            common,
            perturbation,
            victim,
            target_class,
            topk,
            data,
            data_format,
            out,
        } => eval_cmd(&common, &perturbation, &victim, target_class, &topk, data, data_format, out.as_deref()),
        Cmd::Sfa {
            common,
            perturbation,
            victim,
            target_class,
            data,
            data_format,
            out,
        } => sfa_cmd(&common, perturbation.as_deref(), victim.as_deref(), target_class, data, data_format, &out),
        Cmd::Probe {
            common,
            clean,
            perturbed,
            perturbation,
            out,
            histogram,
        } => probe_cmd(&common, &clean, perturbed.as_deref(), perturbation.as_deref(), &out, histogram.as_deref()),
        Cmd::Plot { scores, out } => plot_cmd(&scores, &out),
        Cmd::TrainVictim {
            common,
            data,
            data_format,
            epochs,
            batch_size,
            lr,
            widths,
            limit,
            out,
        } => train_cmd(&common, &data, data_format, epochs, batch_size, lr, &widths, limit, &out),
        Cmd::DefaultConfig { out } => RunConfig::default().save(&out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = serde_json::json!({
                "error": e.class(),
                "exit_code": e.exit_code(),
                "message": e.to_string(),
            });
            eprintln!("{msg}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
