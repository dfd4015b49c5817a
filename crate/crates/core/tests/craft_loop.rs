mod common;

use uapkit::concept::{default_templates, ConceptCache, ConceptSet, TemplateMode};
use uapkit::craft::{craft, craft_with, CraftConfig};
use uapkit::perturbation::NormKind;
use uapkit::transform::TransformConfig;
use uapkit::victim::{attack_success_rate, clean_accuracy};
use uapkit::Error;

use common::*;

fn tiny_craft(seed: u64, steps: usize) -> CraftConfig {
    CraftConfig {
        steps,
        batch_size: 8,
        resolution: [3, 8, 8],
        seed,
        loss_trace_every: 1,
        ..Default::default()
    }
}

#[test]
fn loss_falls_in_nearly_every_seeded_trial() {
    let mut improved = 0;
    for trial in 0..100 {
        let s = setup(tiny_config(trial), 8, 1);
        let out = craft(&s.pood, &s.cache, s.world.encoder(), &tiny_craft(trial, 200), &TransformConfig::identity()).unwrap();
        let (first, last) = (out.trace.first().unwrap(), out.trace.last().unwrap());
        assert_eq!((first.step, last.step), (1, 200));
        if last.loss < first.loss {
            improved += 1;
        }
    }
    assert!(improved >= 95, "loss fell in {improved}/100 trials");
}

#[test]
fn smoke_run_lowers_the_loss_by_step_fifty() {
    let s = setup(tiny_config(3), 6, 1);
    let out = craft(&s.pood, &s.cache, s.world.encoder(), &tiny_craft(3, 50), &TransformConfig::default()).unwrap();
    assert_eq!(out.trace.len(), 50);
    assert!(out.trace[49].loss < out.trace[0].loss, "{} !< {}", out.trace[49].loss, out.trace[0].loss);
}

#[test]
fn norm_invariant_holds_after_every_step() {
    for norm in [NormKind::Linf, NormKind::L2] {
        let s = setup(tiny_config(4), 6, 1);
        let eps = match norm {
            NormKind::Linf => 8.0 / 255.0,
            NormKind::L2 => 0.5,
        };
        let cfg = CraftConfig {
            epsilon: eps,
            norm,
            lr: 0.05,
            ..tiny_craft(4, 120)
        };
        let mut steps = 0;
        craft_with(&s.pood, &s.cache, s.world.encoder(), &cfg, &TransformConfig::default(), |r, t| {
            steps += 1;
            match norm {
                NormKind::Linf => {
                    assert!(t.iter().all(|v| (v.abs() as f64) <= eps + 1e-7), "step {}", r.step);
                    assert!(r.linf <= eps + 1e-7);
                }
                NormKind::L2 => {
                    let n = t.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
                    assert!(n <= eps + 1e-5, "step {}: {n}", r.step);
                }
            }
        })
        .unwrap();
        assert_eq!(steps, 120);
    }
}

#[test]
fn identical_seeds_reproduce_bitwise() {
    let run = |seed| {
        let s = setup(tiny_config(5), 6, 1);
        craft(&s.pood, &s.cache, s.world.encoder(), &tiny_craft(seed, 60), &TransformConfig::default()).unwrap()
    };
    let (a, b, c) = (run(9), run(9), run(10));
    let bits = |o: &uapkit::craft::CraftOutcome| o.perturbation.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(a.trace_csv(), b.trace_csv());
    assert_ne!(bits(&a), bits(&c));
}

#[test]
fn all_coincident_pool_is_unusable() {
    let s = setup(tiny_config(6), 4, 1);
    let concepts = ConceptSet::new("ship", vec!["cat".into(), "truck".into()], vec!["Ship".into(), "cat ".into()]).unwrap();
    let cache = ConceptCache::from_text(&concepts, s.world.encoder(), &default_templates(), TemplateMode::Exhaustive, &[]).unwrap();
    let err = craft(&s.pood, &cache, s.world.encoder(), &tiny_craft(6, 5), &TransformConfig::default()).unwrap_err();
    assert!(matches!(err, Error::UnusablePood(_)), "{err}");
}

#[test]
fn pool_at_the_wrong_resolution_is_rejected() {
    let s = setup(tiny_config(7), 4, 1);
    let cfg = CraftConfig {
        resolution: [3, 16, 16],
        ..tiny_craft(7, 5)
    };
    let err = craft(&s.pood, &s.cache, s.world.encoder(), &cfg, &TransformConfig::default()).unwrap_err();
    assert!(matches!(err, Error::Resolution { .. }), "{err}");
}

#[test]
fn crafted_perturbation_steers_the_synthetic_victim() {
    let s = setup(Default::default(), 10, 8);
    let cfg = CraftConfig {
        steps: 200,
        batch_size: 32,
        resolution: s.world.cfg.shape,
        ..Default::default()
    };
    let out = craft(&s.pood, &s.cache, s.world.encoder(), &cfg, &TransformConfig::default()).unwrap();
    let victim = s.world.victim().unwrap();
    let eval = s.world.victim_set(20, 9);
    assert!(clean_accuracy(&victim, &eval).unwrap() >= 0.85);
    assert!(attack_success_rate(&victim, &eval, &out.perturbation, 8, 1).unwrap() >= 0.7);
}
