use bgnn_core::graph::{knn_l2, GraphTopology};
use bgnn_core::io::{synth_dataset, PointCloudDataset, Split, SynthSpec};
use bgnn_core::model::{ArchSize, DgcnnOptions, Gradients, Model, ModelSpec, Stage, Variant};
use bgnn_core::ops::Quantizer;
use bgnn_core::training::*;
use bgnn_core::{DenseTensor, Error};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseTensor {
    DenseTensor::matrix(rows, cols, (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

fn mini(variant: Variant, points: usize) -> ModelSpec {
    let mut o = DgcnnOptions::new(variant, ArchSize::Mini, 3, points);
    o.k = 4;
    ModelSpec::dgcnn(&o)
}

fn tiny_data() -> PointCloudDataset {
    synth_dataset(&SynthSpec::new(24, 4, 2, 1)).unwrap()
}

fn quick(stage: TrainStage, epochs: usize, seed: u64) -> TrainConfig {
    let mut c = TrainConfig::preset(stage, epochs, seed);
    c.batch_size = 4;
    c
}

#[test]
fn logit_matching_term_vanishes_for_equal_logits() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let z = random(&mut r, 5, 4);
    let labels = [0, 1, 2, 3, 0];
    for t in [1.0, 3.0, 10.0] {
        let (l, _) = logit_matching_loss(&z, &z, t, 0.1, &labels).unwrap();
        assert!(l.distill.abs() <= 1e-9, "{}", l.distill);
        let (ce, _) = cross_entropy(&z, &labels).unwrap();
        assert!((l.total - 0.9 * ce).abs() < 1e-12);
    }
    let other = random(&mut r, 5, 4);
    let (l, _) = logit_matching_loss(&other, &z, 3.0, 0.1, &labels).unwrap();
    assert!(l.distill > 0.0);
}

#[test]
fn lsp_vanishes_for_identical_features_and_grows_when_perturbed() {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut r, 20, 6);
    let g = knn_l2(&x, 5).unwrap();
    for sim in [LspSimilarity::RbfL2, LspSimilarity::Hamming] {
        assert!(lsp_loss(&x, &x, &g, &g, sim).unwrap().abs() <= 1e-9);
    }
    let mut y = x.clone();
    y.data_mut()[7] += 0.5;
    y.data_mut()[30] -= 0.3;
    assert!(lsp_loss(&y, &x, &g, &g, LspSimilarity::RbfL2).unwrap() > 0.0);
    // a different student graph changes the compared neighbourhoods
    let g2 = knn_l2(&y, 5).unwrap();
    assert!(lsp_loss(&y, &x, &g2, &g, LspSimilarity::RbfL2).unwrap() > 0.0);
}

#[test]
fn lsp_vectors_are_distributions() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut r, 10, 3);
    let g = knn_l2(&x, 3).unwrap();
    for v in lsp_vectors(&x, &g, LspSimilarity::RbfL2).unwrap() {
        assert_eq!(v.len(), 3);
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(v.iter().all(|&p| p > 0.0));
    }
    // equidistant neighbours share the mass evenly
    let sq = DenseTensor::matrix(3, 1, vec![0.0, 1.0, -1.0]).unwrap();
    let star = GraphTopology::new(3, 2, vec![1, 2, 0, 2, 0, 1]).unwrap();
    let v = lsp_vectors(&sq, &star, LspSimilarity::RbfL2).unwrap();
    assert!((v[0][0] - 0.5).abs() < 1e-15 && (v[0][1] - 0.5).abs() < 1e-15);
}

#[test]
fn lsp_gradient_matches_finite_differences() {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let t = random(&mut r, 12, 4);
    let s = random(&mut r, 12, 4);
    let gs = knn_l2(&s, 3).unwrap();
    let gt = knn_l2(&t, 3).unwrap();
    let (l, g) = lsp_loss_grad(&s, &t, &gs, &gt, LspSimilarity::RbfL2).unwrap();
    assert_eq!(l, lsp_loss(&s, &t, &gs, &gt, LspSimilarity::RbfL2).unwrap());
    let eps = 1e-6;
    for e in 0..s.len() {
        let mut up = s.clone();
        up.data_mut()[e] += eps;
        let mut down = s.clone();
        down.data_mut()[e] -= eps;
        let num = (lsp_loss(&up, &t, &gs, &gt, LspSimilarity::RbfL2).unwrap()
            - lsp_loss(&down, &t, &gs, &gt, LspSimilarity::RbfL2).unwrap())
            / (2.0 * eps);
        let a = g.data()[e];
        assert!((a - num).abs() <= 1e-6 * (1.0 + a.abs()), "entry {e}: {a} vs {num}");
    }
}

#[test]
fn latent_maintenance_centres_and_clips() {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let w = DenseTensor::matrix(6, 9, (0..54).map(|_| r.random_range(-0.3..0.6)).collect()).unwrap();
    let m = latent_weight_maintenance(&w).unwrap();
    for i in 0..6 {
        let row = m.row(i);
        assert!(row.iter().all(|v| v.abs() <= 1.0));
        assert!(row.iter().sum::<f64>().abs() < 1e-12);
    }
    let big = DenseTensor::matrix(1, 2, vec![5.0, -5.0]).unwrap();
    assert_eq!(latent_weight_maintenance(&big).unwrap().data(), &[1.0, -1.0]);
}

#[test]
fn adam_first_step_by_hand() {
    let mut m = Model::new(mini(Variant::Float, 16), 1).unwrap();
    let before = m.clone();
    let mut st = TrainState::new(&m, 0);
    let mut g = Gradients::zeros(&m);
    g.layers[0].weights[0] = 0.5;
    g.layers[0].weights[1] = -2.0;
    let decay = Decay {
        weight_decay: 0.0,
        include_gamma: false,
    };
    adam_step(&mut m, &g, &mut st, 0.01, decay).unwrap();
    assert_eq!(st.step, 1);
    let w0 = before.layers().next().unwrap().latent_weights.data();
    let w1 = m.layers().next().unwrap().latent_weights.data();
    // bias-corrected moments are g and g², so the step is lr * g / (|g| + eps)
    let expect = |w: f64, g: f64| w - 0.01 * g / (g.abs() + ADAM_EPSILON);
    assert!((w1[0] - expect(w0[0], 0.5)).abs() < 1e-15);
    assert!((w1[1] - expect(w0[1], -2.0)).abs() < 1e-15);
    assert_eq!(&w1[2..], &w0[2..]);
    for (a, b) in m.layers().skip(1).zip(before.layers().skip(1)) {
        assert_eq!(a, b);
    }
    assert!((st.m[0][0] - 0.05).abs() < 1e-15);
    assert!((st.v[0][1] - 0.004).abs() < 1e-15);
}

#[test]
fn adam_keeps_binary_latents_centred_and_clipped() {
    let mut o = DgcnnOptions::new(Variant::Bf1, ArchSize::Mini, 3, 16);
    o.stage = Stage::Three;
    let mut m = Model::new(ModelSpec::dgcnn(&o), 2).unwrap();
    let mut st = TrainState::new(&m, 0);
    let mut g = Gradients::zeros(&m);
    let mut r = ChaCha8Rng::seed_from_u64(6);
    for l in &mut g.layers {
        l.weights.iter_mut().for_each(|v| *v = r.random_range(-1.0..1.0));
    }
    let decay = Decay {
        weight_decay: 1e-4,
        include_gamma: false,
    };
    for _ in 0..3 {
        adam_step(&mut m, &g, &mut st, 0.5, decay).unwrap();
    }
    for p in m.layers() {
        let w = &p.latent_weights;
        if p.quant.weights == Quantizer::Sign {
            assert!(w.data().iter().all(|v| v.abs() <= 1.0));
        }
    }
    let bad = TrainState::new(&Model::new(mini(Variant::Float, 16), 0).unwrap(), 0);
    assert!(adam_step(&mut m, &g, &mut bad.clone(), 0.1, decay).is_err());
}

#[test]
fn training_is_deterministic_per_seed() {
    let data = tiny_data();
    let run = |seed: u64| {
        let mut m = Model::new(mini(Variant::Float, 24), seed).unwrap();
        let mut st = TrainState::new(&m, seed);
        let mut lines = Vec::new();
        let rep = train(&mut m, None, &data, &quick(TrainStage::Scratch, 2, seed), &mut st, &mut |r: &MetricRecord| {
            lines.push(r.to_string())
        })
        .unwrap();
        (m, st, rep, lines)
    };
    let (a, sa, ra, la) = run(3);
    let (b, sb, rb, lb) = run(3);
    assert_eq!(a, b);
    assert_eq!(sa, sb);
    assert_eq!(ra, rb);
    assert_eq!(la, lb);
    assert_eq!(sa.epoch, 2);
    assert!(la.iter().any(|l| l.starts_with("1\ttest\taccuracy\t")));
    let (c, ..) = run(4);
    assert_ne!(a, c);
}

#[test]
fn distillation_stages_need_a_teacher() {
    let data = tiny_data();
    let mut m = Model::new(mini(Variant::Bf1, 24), 0).unwrap();
    let mut st = TrainState::new(&m, 0);
    let r = train(&mut m, None, &data, &quick(TrainStage::One, 1, 0), &mut st, &mut |_: &MetricRecord| {});
    assert!(matches!(r, Err(Error::MissingTeacher)));
}

#[test]
fn cascade_produces_progressively_binarized_students() {
    let data = tiny_data();
    let mut base = Model::new(mini(Variant::Float, 24), 0).unwrap();
    let mut st = TrainState::new(&base, 0);
    train(&mut base, None, &data, &quick(TrainStage::Scratch, 1, 0), &mut st, &mut |_: &MetricRecord| {}).unwrap();
    for teacher_init in [false, true] {
        let cfg = CascadeConfig {
            student: mini(Variant::Bf2, 24),
            stages: [
                quick(TrainStage::One, 1, 0),
                quick(TrainStage::Two, 1, 0),
                quick(TrainStage::Three, 1, 0),
            ],
            teacher_init,
            seed: 0,
        };
        let mut seen = Vec::new();
        let res = cascaded_distillation(&base, &data, &cfg, &mut |s: TrainStage, r: &MetricRecord| {
            if r.metric == "accuracy" && r.split == "test" {
                seen.push(s)
            }
        })
        .unwrap();
        assert_eq!(seen, vec![TrainStage::One, TrainStage::Two, TrainStage::Three]);
        let stages: Vec<Stage> = res.stages.iter().map(|m| m.spec().stage).collect();
        assert_eq!(stages, vec![Stage::One, Stage::Two, Stage::Three]);
        let rep = res.stages[2].binarization();
        assert_eq!(rep.fraction_excluding_final(), 1.0);
        assert!(!rep.final_layer_binarized());
        assert_eq!(res.stages[1].binarization().fraction_excluding_final(), 0.0);
        assert!(res.reports.iter().all(|r| r.final_test_accuracy.is_some()));
    }
}

#[test]
fn cascade_with_zero_epochs_hands_weights_through() {
    let data = tiny_data();
    let base = Model::new(mini(Variant::Float, 24), 0).unwrap();
    let cfg = CascadeConfig {
        student: mini(Variant::Bf1, 24),
        stages: [
            quick(TrainStage::One, 0, 1),
            quick(TrainStage::Two, 0, 1),
            quick(TrainStage::Three, 0, 1),
        ],
        teacher_init: true,
        seed: 1,
    };
    let res = cascaded_distillation(&base, &data, &cfg, &mut |_: TrainStage, _: &MetricRecord| {}).unwrap();
    let [s1, s2, s3] = &res.stages;
    assert_eq!(s1, &Model::new(ModelSpec { stage: Stage::One, ..mini(Variant::Bf1, 24) }, 1).unwrap());
    for ((a, b), c) in s1.layers().zip(s2.layers()).zip(s3.layers()) {
        assert_eq!(a.latent_weights, b.latent_weights);
        assert_eq!(b.latent_weights, c.latent_weights);
    }
    let float_student = CascadeConfig {
        student: mini(Variant::Float, 24),
        ..cfg
    };
    assert!(cascaded_distillation(&base, &data, &float_student, &mut |_: TrainStage, _: &MetricRecord| {}).is_err());
    assert!(evaluate(s3, &data, Split::Test, 8).is_ok());
}
