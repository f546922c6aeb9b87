use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Labelled point clouds of `n x 3` coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloudDataset {
    clouds: Vec<DenseTensor>,
    labels: Vec<usize>,
    splits: Vec<Split>,
    class_names: Vec<String>,
}

impl PointCloudDataset {
    pub fn new(clouds: Vec<DenseTensor>, labels: Vec<usize>, splits: Vec<Split>, class_names: Vec<String>) -> Result<Self> {
        if clouds.len() != labels.len() || clouds.len() != splits.len() {
            return Err(Error::Shape("clouds, labels and splits differ in length".into()));
        }
        for (i, c) in clouds.iter().enumerate() {
            let (n, d) = c.expect_matrix("point cloud")?;
            if n == 0 {
                return Err(Error::Empty(format!("cloud {i} has no points")));
            }
            if d != 3 {
                return Err(Error::Shape(format!("cloud {i} has {d} coordinates per point")));
            }
            c.check_finite()?;
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::Shape(format!("label {l} with {} classes", class_names.len())));
        }
        Ok(Self {
            clouds,
            labels,
            splits,
            class_names,
        })
    }

    pub fn len(&self) -> usize {
        self.clouds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clouds.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn cloud(&self, i: usize) -> &DenseTensor {
        &self.clouds[i]
    }

    pub fn clouds(&self) -> &[DenseTensor] {
        &self.clouds
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn split(&self, i: usize) -> Split {
        self.splits[i]
    }

    /// Indices of the samples in `split`, in order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }
}

/// Centres a cloud on its centroid and scales it into the unit ball, so the
/// farthest point has norm 1.
pub fn normalize_unit_sphere(cloud: &mut DenseTensor) {
    let n = cloud.rows();
    if n == 0 {
        return;
    }
    let mut c = [0.0; 3];
    for r in 0..n {
        for (a, v) in c.iter_mut().zip(cloud.row(r)) {
            *a += v;
        }
    }
    c.iter_mut().for_each(|a| *a /= n as f64);
    let mut radius: f64 = 0.0;
    for r in 0..n {
        let row = cloud.row_mut(r);
        for (v, a) in row.iter_mut().zip(&c) {
            *v -= a;
        }
        radius = radius.max(row.iter().map(|v| v * v).sum::<f64>().sqrt());
    }
    if radius > 0.0 {
        cloud.data_mut().iter_mut().for_each(|v| *v /= radius);
    }
}

/// Parses one point per line as `x y z`; blank lines and `#` comments are
/// skipped.
pub fn parse_xyz_file(path: &Path) -> Result<DenseTensor> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut data = Vec::new();
    for (l, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: l + 1,
            msg,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(parse_err(format!("expected 3 coordinates, found {}", fields.len())));
        }
        for f in fields {
            let v: f64 = f.parse().map_err(|_| parse_err(format!("{f:?} is not a number")))?;
            if !v.is_finite() {
                return Err(parse_err(format!("{f:?} is not finite")));
            }
            data.push(v);
        }
    }
    if data.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: "file contains no points".into(),
        });
    }
    DenseTensor::matrix(data.len() / 3, 3, data)
}

pub const MANIFEST: &str = "manifest.tsv";

/// Loads a directory with `manifest.tsv` (`filename<TAB>label<TAB>split`)
/// and one `.xyz` text file per cloud. Clouds are normalized into the unit
/// sphere. Labels that are all integers are used as class indices; otherwise
/// classes are the sorted distinct label names.
pub fn load_xyz_dataset(dir: &Path) -> Result<PointCloudDataset> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mut entries = Vec::new();
    for (l, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: mpath.clone(),
            line: l + 1,
            msg,
        };
        let f: Vec<&str> = line.split('\t').map(str::trim).collect();
        if f.len() != 3 {
            return Err(err(format!("expected filename, label and split, found {} fields", f.len())));
        }
        let split = Split::parse(f[2]).ok_or_else(|| err(format!("unknown split {:?}", f[2])))?;
        let file = dir.join(f[0]);
        if !file.is_file() {
            return Err(err(format!("listed file {} does not exist", file.display())));
        }
        entries.push((file, f[1].to_string(), split));
    }
    if entries.is_empty() {
        return Err(Error::Parse {
            path: mpath,
            line: 0,
            msg: "manifest lists no clouds".into(),
        });
    }
    let numeric: Option<Vec<usize>> = entries.iter().map(|e| e.1.parse().ok()).collect();
    let (labels, class_names) = match numeric {
        Some(ls) => {
            let c = ls.iter().max().map_or(0, |m| m + 1);
            (ls, (0..c).map(|i| i.to_string()).collect())
        }
        None => {
            let names: Vec<String> = entries.iter().map(|e| e.1.clone()).collect::<BTreeSet<_>>().into_iter().collect();
            let ls = entries.iter().map(|e| names.iter().position(|n| *n == e.1).expect("listed")).collect();
            (ls, names)
        }
    };
    let mut clouds = Vec::with_capacity(entries.len());
    for (file, _, _) in &entries {
        let mut c = parse_xyz_file(file)?;
        normalize_unit_sphere(&mut c);
        clouds.push(c);
    }
    PointCloudDataset::new(clouds, labels, entries.iter().map(|e| e.2).collect(), class_names)
}

/// Surface shapes of the synthetic task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Sphere,
    Cube,
    /// Two parallel squares.
    TwoPlanes,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Sphere, ShapeKind::Cube, ShapeKind::TwoPlanes];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Cube => "cube",
            ShapeKind::TwoPlanes => "two_planes",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    fn sample(self, rng: &mut ChaCha8Rng) -> [f64; 3] {
        let u = |rng: &mut ChaCha8Rng| rng.random_range(-1.0..1.0);
        match self {
            ShapeKind::Sphere => {
                let n = Normal::new(0.0, 1.0).expect("unit normal");
                let v: [f64; 3] = [n.sample(rng), n.sample(rng), n.sample(rng)];
                let r = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
                v.map(|a| a / r)
            }
            ShapeKind::Cube => {
                let face = rng.random_range(0..6);
                let mut p = [u(rng), u(rng), u(rng)];
                p[face / 2] = if face % 2 == 0 { -1.0 } else { 1.0 };
                p
            }
            ShapeKind::TwoPlanes => {
                let z = if rng.random_bool(0.5) { -0.5 } else { 0.5 };
                [u(rng), u(rng), z]
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub shapes: Vec<ShapeKind>,
    pub points: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Gaussian noise on every coordinate before normalization.
    pub noise: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(points: usize, train_per_class: usize, test_per_class: usize, seed: u64) -> Self {
        Self {
            shapes: ShapeKind::ALL.to_vec(),
            points,
            train_per_class,
            test_per_class,
            noise: 0.02,
            seed,
        }
    }
}

/// Deterministic synthetic point clouds: shape surfaces under a random
/// rotation about the vertical axis, per-axis scaling in `[0.8, 1.25]` and
/// Gaussian noise, normalized into the unit sphere. Samples are ordered
/// train then test, classes interleaved.
pub fn synth_dataset(spec: &SynthSpec) -> Result<PointCloudDataset> {
    if spec.shapes.is_empty() || spec.points == 0 {
        return Err(Error::Empty("synthetic dataset needs shapes and points".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let (mut clouds, mut labels, mut splits) = (Vec::new(), Vec::new(), Vec::new());
    for (split, per) in [(Split::Train, spec.train_per_class), (Split::Test, spec.test_per_class)] {
        for _ in 0..per {
            for (c, &shape) in spec.shapes.iter().enumerate() {
                let theta = rng.random_range(0.0..std::f64::consts::TAU);
                let (s, co) = theta.sin_cos();
                let scale: [f64; 3] = [0; 3].map(|_| rng.random_range(0.8..1.25));
                let mut data = Vec::with_capacity(spec.points * 3);
                for _ in 0..spec.points {
                    let p = shape.sample(&mut rng);
                    let p = [p[0] * scale[0], p[1] * scale[1], p[2] * scale[2]];
                    let q = [co * p[0] - s * p[1], s * p[0] + co * p[1], p[2]];
                    data.extend(q.iter().map(|v| v + noise.sample(&mut rng)));
                }
                let mut cloud = DenseTensor::matrix(spec.points, 3, data)?;
                normalize_unit_sphere(&mut cloud);
                clouds.push(cloud);
                labels.push(c);
                splits.push(split);
            }
        }
    }
    let names = spec.shapes.iter().map(|s| s.name().to_string()).collect();
    PointCloudDataset::new(clouds, labels, splits, names)
}
