use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use clipforge_core::data::{generate_corpus, CorpusSpec};
use clipforge_core::eval::{
    evaluate, recall_at_k, robustness_gap, zero_shot_classify, ClassEmbedding, EvalSet, RECALL_KS,
};
use clipforge_core::loss::clip_loss;
use clipforge_core::model::{sample_mask, ClipModel, MaskSpec, ModelConfig};
use clipforge_core::optim::{layer_scales, Schedule, ScheduleShape};
use clipforge_core::tensor::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-3.0f32..3.0, rows * cols)
}

fn unit(v: &[f32]) -> Vec<f32> {
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-6);
    v.iter().map(|x| x / n).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..9, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f32> = (0..rows * cols).map(|_| rand::Rng::random_range(&mut rng, -30.0f32..30.0)).collect();
        let y = softmax_rows(&Tensor::new(x, &[rows, cols]).unwrap());
        for r in y.data().chunks(cols) {
            prop_assert!(r.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((r.iter().map(|&p| f64::from(p)).sum::<f64>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn matmul_matches_naive_loop(a in matrix(3, 5), b in matrix(5, 4)) {
        let c = matmul(&Tensor::new(a.clone(), &[3, 5]).unwrap(), &Tensor::new(b.clone(), &[5, 4]).unwrap()).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                let want: f64 = (0..5).map(|k| f64::from(a[i * 5 + k]) * f64::from(b[k * 4 + j])).sum();
                prop_assert!((f64::from(c.data()[i * 4 + j]) - want).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn contrastive_loss_ignores_pair_order_and_logit_shift(
        logits in matrix(5, 5),
        shift in -10.0f32..10.0,
        seed in any::<u64>(),
    ) {
        let base = clip_loss(&Tensor::new(logits.clone(), &[5, 5]).unwrap()).unwrap().item().unwrap();
        let shifted: Vec<f32> = logits.iter().map(|x| x + shift).collect();
        let s = clip_loss(&Tensor::new(shifted, &[5, 5]).unwrap()).unwrap().item().unwrap();
        prop_assert!((base - s).abs() < 1e-4);

        // relabel pairs: permute rows and columns together
        let mut perm: Vec<usize> = (0..5).collect();
        rand::seq::SliceRandom::shuffle(&mut perm[..], &mut ChaCha8Rng::seed_from_u64(seed));
        let permuted: Vec<f32> = (0..25).map(|k| logits[perm[k / 5] * 5 + perm[k % 5]]).collect();
        let p = clip_loss(&Tensor::new(permuted, &[5, 5]).unwrap()).unwrap().item().unwrap();
        prop_assert!((base - p).abs() < 1e-4);
    }

    #[test]
    fn recall_matches_exhaustive_ranking(
        sim in prop::collection::vec(prop::collection::vec(0u8..6, 40), 20),
        gt_seed in any::<u64>(),
    ) {
        let sim: Vec<Vec<f64>> = sim.iter().map(|r| r.iter().map(|&x| f64::from(x)).collect()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(gt_seed);
        let gt: Vec<Vec<usize>> = (0..20)
            .map(|_| (0..rand::Rng::random_range(&mut rng, 1..4)).map(|_| rand::Rng::random_range(&mut rng, 0..40)).collect())
            .collect();
        let got = recall_at_k(&sim, &gt, &RECALL_KS).unwrap();
        for &k in &RECALL_KS {
            let hits = (0..20).filter(|&q| {
                gt[q].iter().any(|&g| {
                    (0..40).filter(|&j| sim[q][j] > sim[q][g] || (sim[q][j] == sim[q][g] && j < g)).count() < k
                })
            }).count();
            prop_assert_eq!(got[&k], 100.0 * hits as f64 / 20.0);
        }
    }

    #[test]
    fn classification_is_rotation_invariant(
        imgs in prop::collection::vec(prop::collection::vec(-1.0f32..1.0, 4), 1..8),
        classes in prop::collection::vec(prop::collection::vec(-1.0f32..1.0, 4), 2..5),
        angle in 0.0f32..std::f32::consts::TAU,
    ) {
        let rot = |v: &[f32]| {
            let (s, c) = angle.sin_cos();
            vec![c * v[0] - s * v[1], s * v[0] + c * v[1], c * v[2] - s * v[3], s * v[2] + c * v[3]]
        };
        let embed = |vs: &[Vec<f32>], f: &dyn Fn(&[f32]) -> Vec<f32>| -> Vec<ClassEmbedding> {
            vs.iter().enumerate().map(|(i, v)| ClassEmbedding {
                name: format!("c{i}"),
                templates: vec![],
                vector: unit(&f(v)),
            }).collect()
        };
        let a = zero_shot_classify(&imgs, &embed(&classes, &|v| v.to_vec()), None).unwrap();
        let rimgs: Vec<Vec<f32>> = imgs.iter().map(|v| rot(v)).collect();
        let b = zero_shot_classify(&rimgs, &embed(&classes, &rot), None).unwrap();
        // rotations preserve cosines up to rounding, so only clear winners must agree
        for (i, img) in imgs.iter().enumerate() {
            let mut cos: Vec<f32> = classes.iter().map(|c| {
                let (u, w) = (unit(img), unit(c));
                u.iter().zip(&w).map(|(x, y)| x * y).sum()
            }).collect();
            cos.sort_by(|x, y| y.total_cmp(x));
            if cos[0] - cos[1] > 1e-4 {
                prop_assert_eq!(a.predictions[i], b.predictions[i]);
            }
        }
    }

    #[test]
    fn shared_subexpressions_accumulate_gradients(x in matrix(2, 3)) {
        // f = sum(x * x) + sum(x) uses x three times
        let t = Tensor::param(x.clone(), &[2, 3]).unwrap();
        let f = add(&sum(&mul(&t, &t).unwrap()), &sum(&t)).unwrap();
        backward(&f).unwrap();
        let g = t.grad().unwrap().clone();
        for (gi, xi) in g.iter().zip(&x) {
            prop_assert!((gi - (2.0 * xi + 1.0)).abs() < 1e-5);
        }
    }

    #[test]
    fn mask_keeps_distinct_sorted_tokens(n in 1usize..300, ratio in 0.0f64..0.95, seed in any::<u64>()) {
        let spec = MaskSpec::new(ratio).unwrap();
        let kept = sample_mask(n, &spec, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(kept.len(), spec.kept(n));
        prop_assert!(!kept.is_empty() && kept.len() <= n);
        prop_assert!(kept.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(kept.iter().all(|&i| i < n));
    }

    #[test]
    fn layer_scales_rise_to_one(decay in 0.05f64..=1.0, layers in 0usize..30) {
        let s = layer_scales(decay, layers).unwrap();
        prop_assert_eq!(s.len(), layers + 2);
        prop_assert_eq!(*s.last().unwrap(), 1.0);
        prop_assert!(s.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn schedule_factor_is_bounded(warmup in 0u64..200, extra in 1u64..2000, step in 1u64..2200) {
        let total = warmup + extra;
        let s = Schedule { warmup_steps: warmup, total_steps: total, shape: ScheduleShape::Cosine };
        match s.factor(step) {
            Ok(f) => {
                prop_assert!(step <= total);
                prop_assert!((0.0..=1.0).contains(&f));
                if step <= warmup {
                    prop_assert!((f - step as f64 / warmup as f64).abs() < 1e-12);
                }
            }
            Err(_) => prop_assert!(step > total),
        }
    }

    #[test]
    fn gap_is_reference_minus_pooled_mean(r in 0.0f64..100.0, v in prop::collection::vec(0.0f64..100.0, 1..8)) {
        let g = robustness_gap(r, &v).unwrap();
        let avg = (r + v.iter().sum::<f64>()) / (v.len() + 1) as f64;
        prop_assert!((g.avg - avg).abs() < 1e-9);
        prop_assert!((g.delta - (r - avg)).abs() < 1e-9);
    }
}

#[test]
fn eval_results_do_not_depend_on_shift_seed_for_reference() {
    let mut spec = CorpusSpec::new(3, 4, 32, 8);
    spec.holdout_per_class = 0;
    let corpus = generate_corpus(&spec).unwrap();
    let mut cfg = ModelConfig::b16_shrunk();
    cfg.image.image_size = 32;
    cfg.image.patch_size = 8;
    cfg.image.layers = 1;
    cfg.text.layers = 1;
    let model = ClipModel::init(cfg, 2).unwrap();
    let set = EvalSet::from_records(&corpus.train, 32, 3).unwrap();
    let templates = vec!["a photo of a {}".to_string()];
    let a = evaluate(&model, &set, &corpus.class_names, &templates, 1).unwrap();
    let b = evaluate(&model, &set, &corpus.class_names, &templates, 2).unwrap();
    assert_eq!(a.benchmarks["holdout"], b.benchmarks["holdout"]);
    assert_eq!(a.retrieval, b.retrieval);
    let c = evaluate(&model, &set, &corpus.class_names, &templates, 1).unwrap();
    assert_eq!(a, c);
}
