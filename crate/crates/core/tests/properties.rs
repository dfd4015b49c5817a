mod common;

use std::collections::HashSet;

use candle_core::{DType, Device, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use uapkit::backends::LinearEncoder;
use uapkit::concept::{embed_image_concept, embed_text_concept, EncoderBackend};
use uapkit::images::Shape3;
use uapkit::perturbation::{project_values, NormKind, Perturbation, PerturbationMeta};
use uapkit::probe::{robustness_score, ProbeSuite};
use uapkit::sfa::{sign_flip_attack, LabelOracle, ProgressProxy, SfaConfig};
use uapkit::surrogate::{direction_logits, DirectionBatch};
use uapkit::transform::{random_transform, sample_patches, TransformConfig};
use uapkit::victim::{asr_counts, per_class_from_scores, ClassStatus};
use uapkit::Result;

fn config() -> ProptestConfig {
    ProptestConfig {
        cases: 64,
        ..ProptestConfig::default()
    }
}

fn norm_kind() -> impl Strategy<Value = NormKind> {
    prop_oneof![Just(NormKind::Linf), Just(NormKind::L2)]
}

fn transform_config() -> impl Strategy<Value = TransformConfig> {
    (
        any::<bool>(),
        0.0f64..45.0,
        0.0f64..0.3,
        (0.5f64..1.0, 1.0f64..1.5),
        0.0f64..=1.0,
        0usize..5,
        (0.05f64..0.3, 0.3f64..0.6),
    )
        .prop_map(|(enabled, rot, tr, scale, flip, patches, frac)| TransformConfig {
            enabled,
            rot_degrees: rot,
            translate_frac: tr,
            scale_range: scale,
            hflip_prob: flip,
            patch_count: patches,
            patch_side_frac: frac,
        })
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn projection_lands_in_the_ball_and_is_idempotent(
        data in prop::collection::vec(-10.0f32..10.0, 1..300),
        eps in 0.001f64..5.0,
        norm in norm_kind(),
    ) {
        let mut v = data.clone();
        project_values(&mut v, eps, norm);
        match norm {
            NormKind::Linf => prop_assert!(v.iter().all(|x| (x.abs() as f64) <= eps + 1e-7)),
            NormKind::L2 => {
                let n = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
                prop_assert!(n <= eps + 1e-5, "norm {n} > {eps}");
            }
        }
        let mut again = v.clone();
        project_values(&mut again, eps, norm);
        for (a, b) in v.iter().zip(&again) {
            prop_assert!((a - b).abs() <= 1e-6 * a.abs().max(1e-6));
        }
    }

    #[test]
    fn linf_apply_moves_no_pixel_beyond_epsilon(
        x in prop::collection::vec(0.0f32..=1.0, 48),
        t in prop::collection::vec(-1.0f32..1.0, 48),
        eps in 0.001f64..0.5,
    ) {
        let mut p = Perturbation::zeros([3, 4, 4], eps, NormKind::Linf).unwrap();
        p.set_data(t).unwrap();
        let out = p.apply_slice(&x).unwrap();
        for (a, b) in x.iter().zip(&out) {
            prop_assert!((0.0..=1.0).contains(b));
            prop_assert!(((b - a).abs() as f64) <= eps + 1e-6);
        }
    }

    #[test]
    fn patches_are_disjoint_and_in_bounds(
        h in 8usize..80,
        w in 8usize..80,
        cfg in transform_config(),
        seed in any::<u64>(),
    ) {
        let set = sample_patches(h, w, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!(set.len() <= cfg.patch_count);
        prop_assert!(set.is_disjoint());
        for (i, a) in set.rects.iter().enumerate() {
            prop_assert!(a.in_bounds(h, w));
            for b in &set.rects[i + 1..] {
                prop_assert_eq!(a.intersection_area(b), 0);
            }
        }
    }

    #[test]
    fn transform_preserves_shape_and_is_deterministic(
        cfg in transform_config(),
        seed in any::<u64>(),
        b in 1usize..3,
        hw in 8usize..20,
    ) {
        let x = Tensor::rand(0f32, 1f32, (b, 3, hw, hw), &Device::Cpu).unwrap();
        let y1 = random_transform(&x, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let y2 = random_transform(&x, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(y1.dims(), x.dims());
        let (a, c) = (y1.flatten_all().unwrap().to_vec1::<f32>().unwrap(), y2.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        prop_assert!(a.iter().zip(&c).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn asr_is_non_decreasing_in_k(
        rows in prop::collection::vec(prop::collection::vec(-3.0f32..3.0, 6), 1..40),
        label_seed in any::<u64>(),
        target in 0usize..6,
    ) {
        let labels: Vec<usize> = (0..rows.len()).map(|i| ((label_seed >> (i % 60)) as usize + i) % 6).collect();
        let mut last = 0usize;
        for k in 1..=6 {
            let (hits, n) = asr_counts(&rows, &labels, target, k);
            prop_assert_eq!(n, labels.iter().filter(|&&l| l != target).count());
            prop_assert!(hits >= last);
            last = hits;
        }
        prop_assert_eq!(last, asr_counts(&rows, &labels, target, 6).1);
    }

    #[test]
    fn per_class_entries_sum_to_overall_asr(
        rows in prop::collection::vec(prop::collection::vec(-3.0f32..3.0, 5), 2..60),
        target in 0usize..5,
        k in 1usize..4,
    ) {
        let labels: Vec<usize> = (0..rows.len()).map(|i| (i * 7 + 3) % 5).collect();
        let (hits, n) = asr_counts(&rows, &labels, target, k);
        prop_assume!(n > 0);
        let entries = per_class_from_scores(&rows, &labels, 5, target, k);
        let weighted: f64 = entries
            .iter()
            .filter(|e| e.status == ClassStatus::Measured)
            .map(|e| e.asr.unwrap() * e.count as f64)
            .sum::<f64>();
        let measured: usize = entries.iter().filter(|e| e.status == ClassStatus::Measured).map(|e| e.count).sum();
        prop_assert_eq!(measured, n);
        prop_assert!((weighted / measured as f64 - hits as f64 / n as f64).abs() <= 1e-9);
    }

    #[test]
    fn degenerate_victim_asr_survives_target_exclusion(
        labels in prop::collection::vec(0usize..4, 1..50),
        target in 0usize..4,
        k in 1usize..4,
    ) {
        let rows: Vec<Vec<f32>> = labels.iter().map(|_| (0..4).map(|c| if c == target { 9.0 } else { 0.0 }).collect()).collect();
        let (hits, n) = asr_counts(&rows, &labels, target, k);
        prop_assume!(n > 0);
        prop_assert_eq!(hits, n);
    }

    #[test]
    fn cosine_logits_are_bounded_and_scale_invariant(
        seed in any::<u64>(),
        scale in 0.01f64..100.0,
    ) {
        let dev = Device::Cpu;
        let mk = |shape: &[usize], s: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let n: usize = shape.iter().product();
            let v: Vec<f64> = (0..n).map(|_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng)).collect();
            Tensor::from_vec(v, shape, &dev).unwrap()
        };
        let (dx, dt, dn) = (mk(&[4, 8], seed), mk(&[4, 8], seed ^ 1), mk(&[4, 3, 8], seed ^ 2));
        let base = direction_logits(&DirectionBatch::new(dx.clone(), dt.clone(), dn.clone()).unwrap()).unwrap();
        let scaled = direction_logits(&DirectionBatch::new((dx * scale).unwrap(), (dt / scale).unwrap(), (dn * scale).unwrap()).unwrap()).unwrap();
        let (a, b) = (base.target_values().unwrap(), scaled.target_values().unwrap());
        for (p, q) in a.iter().zip(&b) {
            prop_assert!((-1.0 - 1e-6..=1.0 + 1e-6).contains(p));
            prop_assert!((p - q).abs() <= 1e-6);
        }
        for (ra, rb) in base.negative_values().unwrap().iter().zip(scaled.negative_values().unwrap()) {
            for (p, q) in ra.iter().zip(&rb) {
                prop_assert!((-1.0 - 1e-6..=1.0 + 1e-6).contains(p));
                prop_assert!((p - q).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn text_concepts_ignore_template_order(perm_seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let enc = LinearEncoder::new(3, 4, 12, 5).unwrap();
        let mut templates = uapkit::concept::default_templates();
        let a = embed_text_concept("harbor ship", &enc, &templates).unwrap();
        templates.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
        let b = embed_text_concept("harbor ship", &enc, &templates).unwrap();
        prop_assert_eq!(a.len(), enc.embed_dim());
        for (p, q) in a.vector().iter().zip(b.vector()) {
            prop_assert!((p - q).abs() <= 1e-6 * p.abs().max(1e-3));
        }
    }

    #[test]
    fn image_concept_of_copies_is_the_embedding(copies in 1usize..6, seed in any::<u64>()) {
        let enc = LinearEncoder::new(3, 4, 12, seed).unwrap();
        let x = Tensor::rand(0f32, 1f32, (1, 3, 4, 4), &Device::Cpu).unwrap();
        let batch = Tensor::cat(&vec![x.clone(); copies], 0).unwrap();
        let concept = embed_image_concept(&batch, &enc).unwrap();
        let single = enc.encode_image(&x).unwrap().to_dtype(DType::F32).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        for (p, q) in concept.vector().iter().zip(&single) {
            prop_assert!((p - q).abs() <= 1e-6 * q.abs().max(1e-3));
        }
    }
}

/// Records every candidate it is asked about.
struct Recording {
    target: usize,
    accept_after: usize,
    seen: Vec<Vec<f32>>,
}

impl LabelOracle for Recording {
    fn query(&mut self, image: &[f32], _: Shape3) -> Result<usize> {
        self.seen.push(image.to_vec());
        Ok(if self.seen.len() >= self.accept_after { self.target } else { (self.target + 1) % 3 })
    }
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn sfa_counts_every_query_and_respects_epsilon(
        x in prop::collection::vec(0.0f32..=1.0, 27),
        accept_after in 1usize..40,
        max_queries in 0usize..30,
        eps in 0.01f64..0.2,
        warm in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let shape = [3, 3, 3];
        let cfg = SfaConfig { epsilon: eps, max_queries, ..Default::default() };
        let init = warm.then(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 7);
            Perturbation::init(shape, 2.0 * eps, NormKind::Linf, 0, &mut rng).unwrap()
        });
        let mut oracle = Recording { target: 1, accept_after, seen: Vec::new() };
        let r = sign_flip_attack(&mut oracle, &x, shape, init.as_ref(), 1, ProgressProxy::Disabled, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(r.queries, oracle.seen.len());
        prop_assert!(r.queries <= max_queries);
        prop_assert_eq!(r.success, max_queries >= accept_after);
        for cand in &oracle.seen {
            for (a, b) in x.iter().zip(cand) {
                prop_assert!(((a - b).abs() as f64) <= eps + 1e-6);
                prop_assert!((0.0..=1.0).contains(b));
            }
        }
        if r.success {
            prop_assert_eq!(&r.final_example, oracle.seen.last().unwrap());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

    #[test]
    fn probe_similarities_lie_in_unit_interval(seed in any::<u64>()) {
        let enc = LinearEncoder::new(3, 16, 24, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img: Vec<f32> = (0..3 * 16 * 16).map(|_| rand::Rng::random::<f32>(&mut rng)).collect();
        let suite = ProbeSuite::default();
        let s = robustness_score(&img, [3, 16, 16], &enc, &suite, 2, &mut rng).unwrap();
        prop_assert_eq!(s.per_transform.len(), suite.transforms.len());
        for v in s.per_transform.values() {
            prop_assert!((-1.0 - 1e-6..=1.0 + 1e-6).contains(v));
        }
        let mean = s.per_transform.values().sum::<f64>() / s.per_transform.len() as f64;
        prop_assert!((s.aggregate - mean).abs() <= 1e-9);
        let again = robustness_score(&img, [3, 16, 16], &enc, &suite, 2, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let first = robustness_score(&img, [3, 16, 16], &enc, &suite, 2, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(again, first);
    }
}

#[test]
fn perturbation_files_round_trip_for_any_shape() {
    let mut seen = HashSet::new();
    for (i, shape) in [[1, 1, 1], [3, 8, 8], [3, 32, 32], [1, 5, 7]].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
        let mut t = Perturbation::init(shape, 0.1, NormKind::Linf, i as u64, &mut rng).unwrap();
        t.meta = PerturbationMeta { target: "ship".into(), ..t.meta };
        let bytes = t.to_bytes().unwrap();
        assert!(seen.insert(bytes.clone()));
        assert_eq!(Perturbation::from_bytes(&bytes).unwrap().to_bytes().unwrap(), bytes);
    }
}
