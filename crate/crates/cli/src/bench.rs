//! Microbenchmarks: float against binary GEMM, ℓ2 against Hamming pairwise
//! distances and float against binary end-to-end forward passes, plus the
//! serialized model sizes. Times exclude input generation and warm-up runs.

use std::hint::black_box;
use std::time::Instant;

use anyhow::Result;
use bgnn_core::bitcore::{binary_gemm, pairwise_hamming, BitMatrix, RescaleTensor};
use bgnn_core::io::{model_size, BenchSection};
use bgnn_core::linalg::{gemm_nt, pairwise_sq_l2};
use bgnn_core::model::{ArchSize, DgcnnOptions, GraphBatch, Model, ModelSpec, Variant};
use bgnn_core::profile::{self, Category};
use bgnn_core::DenseTensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

#[derive(Clone, Debug, Serialize)]
pub struct Timing {
    pub name: String,
    pub runs: usize,
    pub median_s: f64,
    pub mean_s: f64,
    pub variance_s2: f64,
    pub min_s: f64,
    pub max_s: f64,
}

/// `speedup = baseline median / candidate median`.
#[derive(Clone, Debug, Serialize)]
pub struct Comparison {
    pub name: String,
    pub baseline: String,
    pub candidate: String,
    pub baseline_median_s: f64,
    pub candidate_median_s: f64,
    pub speedup: f64,
}

/// Mean time per forward pass spent in one operation category.
#[derive(Clone, Debug, Serialize)]
pub struct CategoryTime {
    pub model: String,
    pub category: String,
    pub seconds: f64,
    pub share: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SizeEntry {
    pub model: String,
    pub float_bytes: usize,
    pub binary_bytes: usize,
    pub ratio: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Machine {
    pub os: String,
    pub arch: String,
    pub cpu: String,
    pub logical_cpus: usize,
    pub threads: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub machine: Machine,
    pub warmup: usize,
    pub timings: Vec<Timing>,
    pub comparisons: Vec<Comparison>,
    pub categories: Vec<CategoryTime>,
    pub sizes: Vec<SizeEntry>,
    /// `VmHWM` of this process, where the OS reports it.
    pub peak_rss_kib: Option<u64>,
}

pub fn machine(threads: usize) -> Machine {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|v| v.trim().to_string())
        })
        .unwrap_or_else(|| "unknown".into());
    Machine {
        os: std::env::consts::OS.into(),
        arch: std::env::consts::ARCH.into(),
        cpu,
        logical_cpus: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        threads,
    }
}

pub fn peak_rss_kib() -> Option<u64> {
    let s = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = s.lines().find(|l| l.starts_with("VmHWM:"))?;
    line.split_whitespace().nth(1)?.parse().ok()
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

pub fn measure(name: &str, runs: usize, warmup: usize, mut f: impl FnMut()) -> Timing {
    for _ in 0..warmup {
        f();
    }
    let mut t: Vec<f64> = (0..runs.max(1))
        .map(|_| {
            let s = Instant::now();
            f();
            s.elapsed().as_secs_f64()
        })
        .collect();
    t.sort_by(f64::total_cmp);
    let mean = t.iter().sum::<f64>() / t.len() as f64;
    let variance = if t.len() > 1 {
        t.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (t.len() - 1) as f64
    } else {
        0.0
    };
    Timing {
        name: name.into(),
        runs: t.len(),
        median_s: median(&t),
        mean_s: mean,
        variance_s2: variance,
        min_s: t[0],
        max_s: t[t.len() - 1],
    }
}

pub fn compare(name: &str, baseline: &Timing, candidate: &Timing) -> Comparison {
    Comparison {
        name: name.into(),
        baseline: baseline.name.clone(),
        candidate: candidate.name.clone(),
        baseline_median_s: baseline.median_s,
        candidate_median_s: candidate.median_s,
        speedup: baseline.median_s / candidate.median_s,
    }
}

fn random(len: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..len).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

fn pack(v: &[f32], rows: usize, dim: usize) -> BitMatrix {
    let d: Vec<f64> = v.iter().map(|&x| x as f64).collect();
    BitMatrix::pack_signs(&d, rows, dim)
}

/// `f32` GEMM against the packed XNOR GEMM on `m x d` times `(n x d)ᵀ`.
pub fn bench_gemm(m: usize, n: usize, d: usize, runs: usize, warmup: usize) -> Result<(Timing, Timing, Comparison)> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (a, b) = (random(m * d, &mut rng), random(n * d, &mut rng));
    let (pa, pb) = (pack(&a, m, d), pack(&b, n, d));
    let gamma = RescaleTensor::ones(n);
    binary_gemm(&pa, &pb, &gamma)?;
    let float = measure(&format!("gemm_f32_{m}x{n}x{d}"), runs, warmup, || {
        black_box(gemm_nt(black_box(&a), black_box(&b), m, d, n));
    });
    let binary = measure(&format!("gemm_xnor_{m}x{n}x{d}"), runs, warmup, || {
        black_box(binary_gemm(black_box(&pa), black_box(&pb), &gamma).expect("checked shapes"));
    });
    let c = compare("gemm", &float, &binary);
    Ok((float, binary, c))
}

/// `f32` squared-ℓ2 distance matrix against the packed Hamming matrix.
pub fn bench_pairwise(n: usize, d: usize, runs: usize, warmup: usize) -> (Timing, Timing, Comparison) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(n * d, &mut rng);
    let px = pack(&x, n, d);
    let float = measure(&format!("pairwise_l2_f32_{n}x{d}"), runs, warmup, || {
        black_box(pairwise_sq_l2(black_box(&x), n, d));
    });
    let binary = measure(&format!("pairwise_hamming_{n}x{d}"), runs, warmup, || {
        black_box(pairwise_hamming(black_box(&px)));
    });
    let c = compare("pairwise_distance", &float, &binary);
    (float, binary, c)
}

fn spec(variant: Variant, size: ArchSize, classes: usize, points: usize) -> ModelSpec {
    ModelSpec::dgcnn(&DgcnnOptions::new(variant, size, classes, points))
}

fn random_batch(batch: usize, points: usize, rng: &mut ChaCha8Rng) -> Result<GraphBatch> {
    let clouds: Vec<DenseTensor> = (0..batch)
        .map(|_| {
            let d = (0..points * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
            DenseTensor::matrix(points, 3, d)
        })
        .collect::<bgnn_core::Result<_>>()?;
    Ok(GraphBatch::new(&clouds.iter().collect::<Vec<_>>(), &vec![0; batch], points)?)
}

fn categories(model: &str, runs: usize, mut f: impl FnMut()) -> Vec<CategoryTime> {
    profile::enable();
    for _ in 0..runs {
        f();
    }
    let totals = profile::totals();
    profile::disable();
    let sum: f64 = totals.iter().map(|(_, d)| d.as_secs_f64()).sum();
    Category::ALL
        .iter()
        .map(|&c| {
            let s = totals.iter().find(|(k, _)| *k == c).map_or(0.0, |(_, d)| d.as_secs_f64());
            CategoryTime {
                model: model.into(),
                category: c.name().into(),
                seconds: s / runs as f64,
                share: if sum > 0.0 { s / sum } else { 0.0 },
            }
        })
        .collect()
}

/// Eval-mode forward of the float model against the packed stage-3 BF1
/// model of the same size.
pub fn bench_end_to_end(
    size: ArchSize,
    points: usize,
    batch: usize,
    runs: usize,
    warmup: usize,
) -> Result<(Timing, Timing, Comparison, Vec<CategoryTime>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let b = random_batch(batch, points, &mut rng)?;
    let float = Model::new(spec(Variant::Float, size, 40, points), 1)?;
    let binary = Model::new(spec(Variant::Bf1, size, 40, points), 1)?;
    let name = size.name();
    let ft = measure(&format!("forward_float_{name}"), runs, warmup, || {
        black_box(float.predict(black_box(&b)).expect("valid batch"));
    });
    let bt = measure(&format!("forward_bf1_packed_{name}"), runs, warmup, || {
        black_box(binary.predict_packed(black_box(&b)).expect("valid batch"));
    });
    let c = compare(&format!("end_to_end_{name}"), &ft, &bt);
    let reps = runs.clamp(1, 5);
    let mut cats = categories(&ft.name, reps, || {
        black_box(float.predict(&b).expect("valid batch"));
    });
    cats.extend(categories(&bt.name, reps, || {
        black_box(binary.predict_packed(&b).expect("valid batch"));
    }));
    Ok((ft, bt, c, cats))
}

/// Deployment file sizes of the 40-class DGCNN, float against stage-3 BF1.
pub fn model_sizes(size: ArchSize, points: usize) -> Result<SizeEntry> {
    let f = model_size(&Model::new(spec(Variant::Float, size, 40, points), 0)?).total_bytes;
    let b = model_size(&Model::new(spec(Variant::Bf1, size, 40, points), 0)?).total_bytes;
    Ok(SizeEntry {
        model: format!("dgcnn40_{}", size.name()),
        float_bytes: f,
        binary_bytes: b,
        ratio: f as f64 / b as f64,
    })
}

pub fn run_bench(cfg: &BenchSection, threads: usize) -> Result<BenchReport> {
    let (runs, warmup) = (cfg.runs, cfg.warmup);
    let mut timings = Vec::new();
    let mut comparisons = Vec::new();
    let mut categories = Vec::new();
    let [m, n, d] = cfg.gemm;
    let (a, b, c) = bench_gemm(m, n, d, runs, warmup)?;
    timings.extend([a, b]);
    comparisons.push(c);
    let [pn, pd] = cfg.pairwise;
    let (a, b, c) = bench_pairwise(pn, pd, runs, warmup);
    timings.extend([a, b]);
    comparisons.push(c);
    let mut sizes = vec![model_sizes(ArchSize::Mini, cfg.points)?];
    let mut archs = vec![ArchSize::Mini];
    if cfg.full_model {
        archs.push(ArchSize::Full);
        sizes.push(model_sizes(ArchSize::Full, cfg.points)?);
    }
    for size in archs {
        let (a, b, c, cats) = bench_end_to_end(size, cfg.points, cfg.batch, runs, warmup)?;
        timings.extend([a, b]);
        comparisons.push(c);
        categories.extend(cats);
    }
    Ok(BenchReport {
        machine: machine(threads),
        warmup,
        timings,
        comparisons,
        categories,
        sizes,
        peak_rss_kib: peak_rss_kib(),
    })
}

impl BenchReport {
    /// One tab-separated table with a `kind` column per row type.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("kind\tname\tbaseline\tvalue\tmedian_s\tvariance_s2\truns\n");
        for t in &self.timings {
            s.push_str(&format!(
                "timing\t{}\t\t\t{}\t{}\t{}\n",
                t.name, t.median_s, t.variance_s2, t.runs
            ));
        }
        for c in &self.comparisons {
            s.push_str(&format!(
                "speedup\t{}\t{}\t{}\t{}\t\t\n",
                c.candidate, c.baseline, c.speedup, c.candidate_median_s
            ));
        }
        for c in &self.categories {
            s.push_str(&format!(
                "category\t{}/{}\t\t{}\t{}\t\t\n",
                c.model, c.category, c.share, c.seconds
            ));
        }
        for z in &self.sizes {
            s.push_str(&format!(
                "size_ratio\t{}\t{} bytes\t{}\t\t\t\n",
                z.model, z.float_bytes, z.ratio
            ));
        }
        if let Some(kib) = self.peak_rss_kib {
            s.push_str(&format!("memory\tpeak_rss_kib\t\t{kib}\t\t\t\n"));
        }
        s
    }
}
