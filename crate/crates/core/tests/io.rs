use std::fs;

use bgnn_core::io::*;
use bgnn_core::model::{ArchSize, DgcnnOptions, GraphBatch, Model, ModelSpec, Stage, Variant};
use bgnn_core::training::TrainState;
use bgnn_core::{DenseTensor, Error};

fn spec(variant: Variant, size: ArchSize, classes: usize, points: usize, stage: Stage) -> ModelSpec {
    let mut o = DgcnnOptions::new(variant, size, classes, points);
    o.stage = stage;
    ModelSpec::dgcnn(&o)
}

fn tiny_batch(points: usize) -> GraphBatch {
    let data = synth_dataset(&SynthSpec::new(points, 1, 0, 4)).unwrap();
    let clouds: Vec<&DenseTensor> = data.clouds().iter().collect();
    GraphBatch::new(&clouds, data.labels(), points).unwrap()
}

#[test]
fn model_files_are_byte_stable() {
    for v in [Variant::Float, Variant::Rf, Variant::Bf1, Variant::Bf2] {
        for stage in [Stage::One, Stage::Three] {
            let m = Model::new(spec(v, ArchSize::Mini, 3, 32, stage), 7).unwrap();
            let bytes = save_model(&m);
            let back = load_model(&bytes).unwrap();
            assert_eq!(save_model(&back), bytes, "{v:?} {stage:?}");
            let b = tiny_batch(32);
            assert_eq!(back.predict_packed(&b).unwrap(), m.predict_packed(&b).unwrap());
            if m.spec().stage != Stage::Three {
                assert_eq!(back, m);
            }
        }
    }
}

#[test]
fn stage_three_files_keep_only_signs() {
    let m = Model::new(spec(Variant::Bf1, ArchSize::Mini, 3, 32, Stage::Three), 2).unwrap();
    let back = load_model(&save_model(&m)).unwrap();
    for (a, b) in m.layers().zip(back.layers()) {
        assert_eq!(a.effective_weights(), b.effective_weights());
    }
    let sizes = model_size(&m);
    assert_eq!(sizes.total_bytes, save_model(&m).len());
}

#[test]
fn corrupted_files_are_rejected() {
    let m = Model::new(spec(Variant::Bf2, ArchSize::Mini, 3, 32, Stage::Two), 1).unwrap();
    let good = save_model(&m);
    for pos in [20, good.len() / 2, good.len() - 5] {
        let mut b = good.clone();
        b[pos] ^= 0x10;
        assert!(matches!(load_model(&b), Err(Error::Checksum { .. })), "byte {pos}");
    }
    assert!(load_model(&good[..good.len() / 2]).is_err());
    assert!(load_model(&[]).is_err());
    let (kind, payload) = unframe(&good).unwrap();
    assert_eq!(kind, FileKind::Model);
    assert_eq!(payload.len() + 20, good.len());
    assert_eq!(&good[..4], MAGIC);
}

#[test]
fn checkpoints_roundtrip_model_and_optimizer_state() {
    let m = Model::new(spec(Variant::Rf, ArchSize::Mini, 3, 32, Stage::Three), 3).unwrap();
    let mut st = TrainState::new(&m, 9);
    st.step = 17;
    st.epoch = 2;
    st.m[0][0] = 0.125;
    st.v[1][0] = 1e-9;
    use rand::Rng;
    let _: u64 = st.rng.random();
    let bytes = save_checkpoint(&m, &st).unwrap();
    let (m2, st2) = load_checkpoint(&bytes).unwrap();
    assert_eq!(m2, m);
    assert_eq!(st2, st);
    assert_eq!(unframe(&bytes).unwrap().0, FileKind::Checkpoint);
    // a checkpoint also loads as a model; a model file is not a checkpoint
    assert_eq!(load_model(&bytes).unwrap(), m);
    assert!(load_checkpoint(&save_model(&m)).is_err());
    let mismatched = TrainState::new(&Model::new(spec(Variant::Float, ArchSize::Mini, 3, 32, Stage::Real), 0).unwrap(), 0);
    assert!(save_checkpoint(&m, &mismatched).is_err());
}

#[test]
fn dgcnn40_binary_file_is_at_most_a_tenth_of_float() {
    let float = Model::new(spec(Variant::Float, ArchSize::Full, 40, 1024, Stage::Real), 0).unwrap();
    let fb = save_model(&float).len();
    for v in [Variant::Bf1, Variant::Bf2, Variant::Rf] {
        let bin = Model::new(spec(v, ArchSize::Full, 40, 1024, Stage::Three), 0).unwrap();
        let bb = save_model(&bin).len();
        assert!(bb * 10 <= fb, "{v:?}: {bb} vs {fb}");
        assert!(bin.binarization().fraction_excluding_final() == 1.0);
    }
    // float32 payload of about 1.8M parameters
    assert!((7_000_000..7_500_000).contains(&fb), "{fb}");
}

#[test]
fn files_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let m = Model::new(spec(Variant::Bf1, ArchSize::Mini, 3, 32, Stage::Three), 5).unwrap();
    let p = dir.path().join("m.bgnn");
    write_bytes(&p, &save_model(&m)).unwrap();
    assert_eq!(read_bytes(&p).unwrap(), save_model(&m));
    assert!(matches!(read_bytes(&dir.path().join("missing")), Err(Error::Io { .. })));
}

#[test]
fn normalization_centres_and_scales_to_unit_radius() {
    let mut c = DenseTensor::matrix(3, 3, vec![1.0, 1.0, 1.0, 3.0, 1.0, 1.0, 2.0, 4.0, 1.0]).unwrap();
    normalize_unit_sphere(&mut c);
    for j in 0..3 {
        let mean: f64 = (0..3).map(|i| c.at(i, j)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-12);
    }
    let r = (0..3).map(|i| c.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()).fold(0.0, f64::max);
    assert!((r - 1.0).abs() < 1e-12);
    let mut single = DenseTensor::matrix(1, 3, vec![5.0, -2.0, 1.0]).unwrap();
    normalize_unit_sphere(&mut single);
    assert_eq!(single.data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn xyz_parsing() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.xyz");
    fs::write(&p, "# header\n0.5 -1 2e-1\n\n  3 4 5  # trailing\n").unwrap();
    let c = parse_xyz_file(&p).unwrap();
    assert_eq!(c.shape(), &[2, 3]);
    assert_eq!(c.data(), &[0.5, -1.0, 0.2, 3.0, 4.0, 5.0]);

    fs::write(&p, "").unwrap();
    assert!(matches!(parse_xyz_file(&p), Err(Error::Parse { line: 0, .. })));
    fs::write(&p, "1 2 3\n1 2\n").unwrap();
    assert!(matches!(parse_xyz_file(&p), Err(Error::Parse { line: 2, .. })));
    fs::write(&p, "1 2 nan\n").unwrap();
    assert!(matches!(parse_xyz_file(&p), Err(Error::Parse { line: 1, .. })));
    fs::write(&p, "1 2 x\n").unwrap();
    assert!(parse_xyz_file(&p).is_err());
}

#[test]
fn xyz_directories() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("a.xyz"), "0 0 0\n1 0 0\n0 1 0\n").unwrap();
    fs::write(d.join("b.xyz"), "0 0 0\n0 0 2\n").unwrap();
    fs::write(d.join(MANIFEST), "a.xyz\tplane\ttrain\nb.xyz\tline\ttest\n").unwrap();
    let ds = load_xyz_dataset(d).unwrap();
    assert_eq!(ds.class_names(), &["line".to_string(), "plane".to_string()]);
    assert_eq!(ds.labels(), &[1, 0]);
    assert_eq!(ds.indices(Split::Test), vec![1]);
    assert_eq!(ds.cloud(1).data(), &[0.0, 0.0, -1.0, 0.0, 0.0, 1.0]);

    fs::write(d.join(MANIFEST), "a.xyz\t0\ttrain\nb.xyz\t2\tval\n").unwrap();
    let ds = load_xyz_dataset(d).unwrap();
    assert_eq!(ds.classes(), 3);
    assert_eq!(ds.split(1), Split::Val);

    fs::write(d.join(MANIFEST), "c.xyz\t0\ttrain\n").unwrap();
    assert!(matches!(load_xyz_dataset(d), Err(Error::Parse { line: 1, .. })));
    fs::write(d.join(MANIFEST), "a.xyz\t0\tholdout\n").unwrap();
    assert!(load_xyz_dataset(d).is_err());
    fs::write(d.join(MANIFEST), "# nothing\n").unwrap();
    assert!(load_xyz_dataset(d).is_err());
}

#[test]
fn synthetic_task_is_deterministic_and_balanced() {
    let s = SynthSpec::new(64, 5, 2, 11);
    let a = synth_dataset(&s).unwrap();
    assert_eq!(a.clouds(), synth_dataset(&s).unwrap().clouds());
    assert_ne!(a.clouds(), synth_dataset(&SynthSpec { seed: 12, ..s.clone() }).unwrap().clouds());
    assert_eq!(a.len(), 21);
    assert_eq!(a.indices(Split::Train).len(), 15);
    for c in 0..3 {
        assert_eq!(a.indices(Split::Test).iter().filter(|&&i| a.label(i) == c).count(), 2);
    }
    for cloud in a.clouds() {
        assert_eq!(cloud.shape(), &[64, 3]);
        let r = (0..64).map(|i| cloud.row(i).iter().map(|v| v * v).sum::<f64>()).fold(0.0, f64::max);
        assert!((r.sqrt() - 1.0).abs() < 1e-12);
    }
    assert!(synth_dataset(&SynthSpec { shapes: vec![], ..s.clone() }).is_err());
}

#[test]
fn synthetic_shapes_differ_in_spread() {
    // mean distance to the centroid separates the three surfaces
    let data = synth_dataset(&SynthSpec::new(256, 10, 0, 3)).unwrap();
    let mut spread = [0.0; 3];
    for i in 0..data.len() {
        let c = data.cloud(i);
        let m: f64 = (0..256).map(|r| c.row(r).iter().map(|v| v * v).sum::<f64>().sqrt()).sum::<f64>() / 256.0;
        spread[data.label(i)] += m / 10.0;
    }
    assert!((spread[0] - spread[1]).abs() > 0.02 && (spread[0] - spread[2]).abs() > 0.02, "{spread:?}");
}
