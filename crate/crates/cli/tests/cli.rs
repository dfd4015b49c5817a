use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tempfile::TempDir;
use uapkit::images::save_png;
use uapkit::perturbation::Perturbation;
use uapkit::victim::ReferenceCnn;

const SHAPE: [usize; 3] = [3, 32, 32];

fn random_images(dir: &Path, count: usize, rng: &mut ChaCha8Rng) {
    std::fs::create_dir_all(dir).unwrap();
    for i in 0..count {
        let img: Vec<f32> = (0..3 * 32 * 32).map(|_| rng.random::<f32>()).collect();
        save_png(&dir.join(format!("{i:03}.png")), &img, SHAPE).unwrap();
    }
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for class in ["lantern", "teapot", "violin"] {
            random_images(&dir.path().join("pood").join(class), 4, &mut rng);
        }
        for class in ["airplane", "cat", "ship"] {
            random_images(&dir.path().join("eval").join(class), 3, &mut rng);
        }
        random_images(&dir.path().join("clean"), 4, &mut rng);
        ReferenceCnn::new(SHAPE, 10, &[4, 8], 3).unwrap().save(&dir.path().join("victim.safetensors")).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self, name: &str, extra: Value) -> PathBuf {
        let mut cfg = json!({
            "seed": 11,
            "craft": {"steps": 4, "batch_size": 4},
            "pood": {"root": self.path("pood")},
            "eval": {"dataset": {"path": self.path("eval"), "format": "folder"}},
            "probe": {"samples_per_transform": 1},
            "sfa": {"samples": 3, "attack": {"max_queries": 30}},
        });
        merge(&mut cfg, extra);
        let path = self.path(name);
        std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
        path
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

fn uapkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uapkit"))
        .args(args)
        .env("SOURCE_DATE_EPOCH", "1700000000")
        .output()
        .unwrap()
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn failure(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("error line on stderr");
    serde_json::from_str(line).unwrap_or_else(|_| panic!("not JSON: {line}"))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn craft_then_eval_chains_digests() {
    let fx = Fixture::new();
    let cfg = fx.config("run.json", json!({}));
    let pert = fx.path("t.uap");
    ok(uapkit(&["craft", "--config", s(&cfg), "--out", s(&pert)]));
    let trace = std::fs::read_to_string(fx.path("t.uap.trace.csv")).unwrap();
    assert!(trace.lines().any(|l| l == "step,loss,linf,l2"));

    let t = Perturbation::load(&pert).unwrap();
    assert_eq!(t.shape(), SHAPE);
    assert!(t.within_budget());
    let report_path = fx.path("report.json");
    let out = ok(uapkit(&[
        "eval",
        "--config",
        s(&cfg),
        "--perturbation",
        s(&pert),
        "--victim",
        s(&fx.path("victim.safetensors")),
        "--out",
        s(&report_path),
    ]));
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("ASR@1") && table.contains("ASR@5"), "{table}");

    let report: Value = serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report["perturbation_digest"], t.metadata_digest().unwrap());
    assert_eq!(report["config_digest"].as_str(), t.meta.config_digest.as_deref());
    assert_eq!(report["target_class"], 8);
    // Ship images are excluded from the success rate.
    assert_eq!(report["n_evaluated"], 6);
    assert_eq!(report["excluded_target_class"], 3);
}

#[test]
fn reruns_are_byte_identical() {
    let fx = Fixture::new();
    let cfg = fx.config("run.json", json!({}));
    let (a, b) = (fx.path("a.uap"), fx.path("b.uap"));
    ok(uapkit(&["craft", "--config", s(&cfg), "--out", s(&a)]));
    ok(uapkit(&["craft", "--config", s(&cfg), "--out", s(&b)]));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(
        std::fs::read(fx.path("a.uap.trace.csv")).unwrap(),
        std::fs::read(fx.path("b.uap.trace.csv")).unwrap()
    );

    let c = fx.path("c.uap");
    ok(uapkit(&["craft", "--config", s(&cfg), "--seed", "12", "--out", s(&c)]));
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
}

#[test]
fn resolution_mismatch_exits_with_resolution_error() {
    let fx = Fixture::new();
    let cfg = fx.config("run.json", json!({"craft": {"resolution": [3, 16, 16]}}));
    let pert = fx.path("small.uap");
    ok(uapkit(&["craft", "--config", s(&cfg), "--out", s(&pert)]));
    let out = uapkit(&[
        "eval",
        "--config",
        s(&cfg),
        "--perturbation",
        s(&pert),
        "--victim",
        s(&fx.path("victim.safetensors")),
    ]);
    assert_eq!(out.status.code(), Some(5));
    assert_eq!(failure(&out)["error"], "resolution");
}

#[test]
fn unknown_config_keys_are_all_reported() {
    let fx = Fixture::new();
    let cfg = fx.config("bad.json", json!({"craft": {"stpes": 3}, "colour": 1}));
    let out = uapkit(&["craft", "--config", s(&cfg), "--out", s(&fx.path("x.uap"))]);
    assert_eq!(out.status.code(), Some(3));
    let err = failure(&out);
    assert_eq!(err["error"], "schema");
    let msg = err["message"].as_str().unwrap();
    assert!(msg.contains("craft.stpes") && msg.contains("colour"), "{msg}");
    assert!(!fx.path("x.uap").exists());
}

#[test]
fn out_of_range_values_exit_with_range_error() {
    let fx = Fixture::new();
    let cfg = fx.config("run.json", json!({}));
    let out = uapkit(&["craft", "--config", s(&cfg), "--epsilon=-1", "--out", s(&fx.path("x.uap"))]);
    assert_eq!(out.status.code(), Some(4));
    let err = failure(&out);
    assert_eq!(err["error"], "range");
    assert!(err["message"].as_str().unwrap().contains("craft.epsilon"));
}

#[test]
fn craft_without_pood_is_a_config_error() {
    let fx = Fixture::new();
    let out = uapkit(&["craft", "--out", s(&fx.path("x.uap"))]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(failure(&out)["error"], "config");
}

#[test]
fn probe_reports_two_histograms_and_overlap() {
    let fx = Fixture::new();
    let cfg = fx.config("run.json", json!({}));
    let pert = fx.path("t.uap");
    ok(uapkit(&["craft", "--config", s(&cfg), "--out", s(&pert)]));
    let (report, png) = (fx.path("probe.json"), fx.path("probe.png"));
    ok(uapkit(&[
        "probe",
        "--config",
        s(&cfg),
        "--clean",
        s(&fx.path("clean")),
        "--perturbation",
        s(&pert),
        "--out",
        s(&report),
        "--histogram",
        s(&png),
    ]));
    let r: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let d = &r["distributions"];
    for key in ["clean_histogram", "perturbed_histogram"] {
        let h: Vec<f64> = serde_json::from_value(d[key].clone()).unwrap();
        assert_eq!(h.len(), 32);
        assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    let overlap = d["overlap"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&overlap));
    assert_eq!(d["clean"].as_array().unwrap().len(), 4);
    assert_eq!(r["perturbation_digest"], Perturbation::load(&pert).unwrap().metadata_digest().unwrap());
    assert!(image::open(&png).is_ok());

    let replot = fx.path("replot.png");
    ok(uapkit(&["plot", "--scores", s(&report), "--out", s(&replot)]));
    assert_eq!(std::fs::read(&png).unwrap(), std::fs::read(&replot).unwrap());
}

#[test]
fn probe_accepts_a_perturbed_directory() {
    let fx = Fixture::new();
    let cfg = fx.config("run.json", json!({}));
    let report = fx.path("probe.json");
    ok(uapkit(&[
        "probe",
        "--config",
        s(&cfg),
        "--clean",
        s(&fx.path("clean")),
        "--perturbed",
        s(&fx.path("clean")),
        "--out",
        s(&report),
    ]));
    let r: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(r["perturbation_digest"].is_null());
    assert_eq!(r["distributions"]["clean"], r["distributions"]["perturbed"]);
}

#[test]
fn sfa_writes_paired_query_counts() {
    let fx = Fixture::new();
    let cfg = fx.config("run.json", json!({}));
    let pert = fx.path("t.uap");
    ok(uapkit(&["craft", "--config", s(&cfg), "--out", s(&pert)]));
    let csv = fx.path("sfa.csv");
    let out = ok(uapkit(&[
        "sfa",
        "--config",
        s(&cfg),
        "--perturbation",
        s(&pert),
        "--victim",
        s(&fx.path("victim.safetensors")),
        "--out",
        s(&csv),
    ]));
    assert!(String::from_utf8_lossy(&out.stdout).contains("median queries"));
    let text = std::fs::read_to_string(&csv).unwrap();
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).skip(1).collect();
    assert_eq!(rows.iter().filter(|r| r.starts_with("random,")).count(), 3);
    assert_eq!(rows.iter().filter(|r| r.starts_with("perturbation,")).count(), 3);
    for r in rows {
        let queries: usize = r.rsplit(',').next().unwrap().parse().unwrap();
        assert!((1..=30).contains(&queries), "{r}");
    }
}

#[test]
fn default_config_round_trips() {
    let fx = Fixture::new();
    let path = fx.path("default.json");
    ok(uapkit(&["default-config", "--out", s(&path)]));
    let cfg = uapkit::config::RunConfig::load(&path).unwrap();
    assert_eq!(cfg, uapkit::config::RunConfig::default());
}
