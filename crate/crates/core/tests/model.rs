use bgnn_core::model::{ArchSize, DgcnnOptions, ForwardOptions, GraphBatch, Model, ModelSpec, Stage, Variant};
use bgnn_core::ops::{BalanceMode, Mode, TensorRole};
use bgnn_core::DenseTensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn clouds(n: usize, points: usize, seed: u64) -> (Vec<DenseTensor>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cs = (0..n)
        .map(|_| {
            let d: Vec<f64> = (0..points * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
            DenseTensor::matrix(points, 3, d).unwrap()
        })
        .collect();
    (cs, (0..n).map(|i| i % 3).collect())
}

fn batch(n: usize, points: usize, seed: u64) -> GraphBatch {
    let (cs, labels) = clouds(n, points, seed);
    GraphBatch::new(&cs.iter().collect::<Vec<_>>(), &labels, points).unwrap()
}

/// Random BN statistics, rescale factors and slopes so that eval mode is not
/// the identity.
fn perturb(model: &mut Model, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in model.layers_mut() {
        for t in p.tensors_mut() {
            match t.role {
                TensorRole::BnVar(_) => t.data.iter_mut().for_each(|v| *v = rng.random_range(0.5..2.0)),
                TensorRole::BnMean(_) | TensorRole::BnShift(_) => t.data.iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3)),
                TensorRole::BnScale(_) | TensorRole::Gamma(_) => t.data.iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5)),
                TensorRole::PreluSlope => t.data[0] = rng.random_range(0.1..0.4),
                TensorRole::Bias => t.data.iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1)),
                TensorRole::Weight => {}
            }
        }
    }
}

fn mini(variant: Variant, points: usize, k: usize) -> DgcnnOptions {
    let mut o = DgcnnOptions::new(variant, ArchSize::Mini, 3, points);
    o.k = k;
    o
}

#[test]
fn packed_inference_matches_emulation_bitwise() {
    for (i, v) in [Variant::Rf, Variant::Bf1, Variant::Bf2].into_iter().enumerate() {
        for balance in [None, Some(BalanceMode::Mean), Some(BalanceMode::Median)] {
            let mut o = mini(v, 24, 6);
            o.edge_balance = balance;
            o.global_balance = balance;
            let mut m = Model::new(ModelSpec::dgcnn(&o), i as u64).unwrap();
            perturb(&mut m, 10 + i as u64);
            let b = batch(3, 24, 5);
            let a = m.predict(&b).unwrap();
            let p = m.predict_packed(&b).unwrap();
            assert_eq!(a, p, "{v:?} balance {balance:?}");
            a.check_finite().unwrap();
        }
    }
}

#[test]
fn float_model_packed_path_is_the_float_path() {
    let m = Model::new(ModelSpec::dgcnn(&mini(Variant::Float, 20, 5)), 3).unwrap();
    let b = batch(2, 20, 1);
    assert_eq!(m.predict(&b).unwrap(), m.predict_packed(&b).unwrap());
}

#[test]
fn batch_resamples_cyclically() {
    let c = DenseTensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let b = GraphBatch::new(&[&c], &[0], 5).unwrap();
    assert_eq!(b.points().row(4), c.row(0));
    assert_eq!(b.segments(), &[0, 5]);
    let empty = DenseTensor::matrix(0, 3, vec![]).unwrap();
    assert!(GraphBatch::new(&[&empty], &[0], 5).is_err());
}

#[test]
fn wrong_point_count_is_rejected() {
    let m = Model::new(ModelSpec::dgcnn(&mini(Variant::Rf, 20, 5)), 3).unwrap();
    assert!(m.predict(&batch(1, 16, 0)).is_err());
}

#[test]
fn predictions_do_not_depend_on_batch_composition() {
    let mut m = Model::new(ModelSpec::dgcnn(&mini(Variant::Bf2, 16, 4)), 2).unwrap();
    perturb(&mut m, 4);
    let (cs, labels) = clouds(3, 16, 9);
    let all = GraphBatch::new(&cs.iter().collect::<Vec<_>>(), &labels, 16).unwrap();
    let one = GraphBatch::new(&[&cs[1]], &[labels[1]], 16).unwrap();
    assert_eq!(m.predict(&all).unwrap().row(1), m.predict(&one).unwrap().row(0));
}

/// Loss `sum(R ⊙ logits) + sum_l sum(S_l ⊙ features_l)` in train mode.
fn probe_loss(m: &Model, b: &GraphBatch, r: &DenseTensor, s: &[DenseTensor]) -> f64 {
    let opts = ForwardOptions {
        mode: Mode::Train,
        record: false,
        dropout: None,
    };
    let (out, _, _) = m.forward(b, opts).unwrap();
    let mut l: f64 = out.logits.data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
    for (f, w) in out.features.iter().zip(s) {
        l += f.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>();
    }
    l
}

fn random_like(t: &DenseTensor, rng: &mut ChaCha8Rng) -> DenseTensor {
    let d = (0..t.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    DenseTensor::new(t.shape().to_vec(), d).unwrap()
}

fn check_gradients(mut m: Model, points: usize, seed: u64, tol: f64) {
    let b = batch(2, points, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let opts = ForwardOptions {
        mode: Mode::Train,
        record: true,
        dropout: None,
    };
    let (out, tape, _) = m.forward(&b, opts).unwrap();
    let r = random_like(&out.logits, &mut rng);
    let s: Vec<DenseTensor> = out.features.iter().map(|f| random_like(f, &mut rng)).collect();
    let ds: Vec<Option<DenseTensor>> = s.iter().cloned().map(Some).collect();
    let grads = m.backward(tape.as_ref(), &r, &ds).unwrap();
    let analytic = grads.flat();
    let eps = 1e-7;
    let total = analytic.len();
    let mut checked = 0;
    let mut flat = 0;
    let nlayers = m.layers().count();
    for li in 0..nlayers {
        let sizes: Vec<usize> = m.layers().nth(li).unwrap().trainable_mut_len();
        for (ti, &len) in sizes.iter().enumerate() {
            // A few entries per tensor keep the check fast.
            let picks: Vec<usize> = (0..len.min(4)).map(|_| rng.random_range(0..len)).collect();
            for &e in &picks {
                let bump = |m: &mut Model, d: f64| {
                    let p = m.layers_mut().nth(li).unwrap();
                    p.trainable_mut()[ti].data[e] += d;
                };
                bump(&mut m, eps);
                let up = probe_loss(&m, &b, &r, &s);
                bump(&mut m, -2.0 * eps);
                let down = probe_loss(&m, &b, &r, &s);
                bump(&mut m, eps);
                let numeric = (up - down) / (2.0 * eps);
                let a = analytic[flat + e];
                let err = (a - numeric).abs() / (1.0 + a.abs().max(numeric.abs()));
                assert!(err < tol, "layer {li} tensor {ti} entry {e}: analytic {a} numeric {numeric}");
                checked += 1;
            }
            flat += len;
        }
    }
    assert_eq!(flat, total);
    assert!(checked > 20);
}

trait TrainableLen {
    fn trainable_mut_len(&self) -> Vec<usize>;
}

impl TrainableLen for bgnn_core::ops::LayerParams {
    fn trainable_mut_len(&self) -> Vec<usize> {
        self.tensors().iter().filter(|t| t.role.trainable()).map(|t| t.data.len()).collect()
    }
}

fn surrogate(mut m: Model) -> Model {
    for p in m.layers_mut() {
        p.quant.weights = p.quant.weights.surrogate();
        p.quant.activations = p.quant.activations.surrogate();
    }
    m
}

#[test]
fn float_model_gradients_match_finite_differences() {
    let mut m = Model::new(ModelSpec::dgcnn(&mini(Variant::Float, 16, 4)), 11).unwrap();
    perturb(&mut m, 1);
    check_gradients(m, 16, 3, 1e-5);
}

#[test]
fn surrogate_binary_models_gradients_match_finite_differences() {
    for (i, v) in [Variant::Rf, Variant::Bf1, Variant::Bf2].into_iter().enumerate() {
        for stage in [Stage::One, Stage::Three] {
            let mut o = mini(v, 16, 4);
            o.edge_balance = Some(BalanceMode::Mean);
            o.global_balance = Some(BalanceMode::Mean);
            o.stage = stage;
            let mut m = Model::new(ModelSpec::dgcnn(&o), 20 + i as u64).unwrap();
            perturb(&mut m, 2);
            check_gradients(surrogate(m), 16, 4 + i as u64, 1e-4);
        }
    }
}

#[test]
fn median_balance_gradients_match_finite_differences() {
    let mut o = mini(Variant::Bf1, 16, 4);
    o.edge_balance = Some(BalanceMode::Median);
    o.global_balance = Some(BalanceMode::Median);
    o.stage = Stage::One;
    let mut m = Model::new(ModelSpec::dgcnn(&o), 5).unwrap();
    perturb(&mut m, 6);
    check_gradients(m, 16, 8, 1e-4);
}

#[test]
fn apply_bn_updates_moves_running_stats() {
    let mut m = Model::new(ModelSpec::dgcnn(&mini(Variant::Rf, 16, 4)), 1).unwrap();
    let before = m.clone();
    let (_, _, u) = m
        .forward(
            &batch(2, 16, 0),
            ForwardOptions {
                mode: Mode::Train,
                record: false,
                dropout: None,
            },
        )
        .unwrap();
    assert_eq!(u.0.len(), m.layers().count());
    m.apply_bn_updates(&u);
    assert_ne!(m.convs()[0].bn_in, before.convs()[0].bn_in);
    assert_eq!(m.convs()[0].latent_weights, before.convs()[0].latent_weights);
}

#[test]
fn dropout_only_in_training() {
    let m = Model::new(ModelSpec::dgcnn(&mini(Variant::Float, 16, 4)), 1).unwrap();
    let b = batch(2, 16, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (train, tape, _) = m.forward(&b, ForwardOptions::train(&mut rng)).unwrap();
    assert!(tape.is_some());
    let eval = m.predict(&b).unwrap();
    assert_ne!(train.logits, eval);
    assert!(m.backward(None, &eval, &[]).is_err());
}
