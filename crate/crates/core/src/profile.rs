//! Opt-in wall-clock accounting by operation category, used by the benchmark
//! harness to attribute forward-pass time. Accounting is per thread and
//! costs one branch when disabled; parallel kernels are timed as a whole on
//! the calling thread.

use std::cell::{Cell, RefCell};
use std::time::{Duration, Instant};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    /// Pairwise distance or score matrices.
    Knn,
    /// Neighbour selection from the distance matrix.
    TopK,
    /// Building edge features, concatenation and packing.
    Gather,
    /// Dense and binary matrix products.
    Gemm,
    /// Rescaling, normalization, activations, aggregation and quantization.
    BnAct,
    /// Global pooling.
    Pool,
    /// MLP classifier head.
    Classifier,
}

impl Category {
    pub const ALL: [Category; 7] = [
        Category::Knn,
        Category::TopK,
        Category::Gather,
        Category::Gemm,
        Category::BnAct,
        Category::Pool,
        Category::Classifier,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::Knn => "knn",
            Category::TopK => "topk",
            Category::Gather => "gather_concat",
            Category::Gemm => "gemm",
            Category::BnAct => "bn_activation",
            Category::Pool => "pool",
            Category::Classifier => "classifier",
        }
    }
}

thread_local! {
    static ENABLED: Cell<bool> = const { Cell::new(false) };
    static DEPTH: Cell<u32> = const { Cell::new(0) };
    static TOTALS: RefCell<[Duration; 7]> = const { RefCell::new([Duration::ZERO; 7]) };
}

/// Starts accounting on this thread and clears previous totals.
pub fn enable() {
    ENABLED.with(|e| e.set(true));
    reset();
}

pub fn disable() {
    ENABLED.with(|e| e.set(false));
}

pub fn reset() {
    TOTALS.with(|t| *t.borrow_mut() = [Duration::ZERO; 7]);
}

pub fn totals() -> Vec<(Category, Duration)> {
    TOTALS.with(|t| {
        let t = t.borrow();
        Category::ALL.iter().map(|&c| (c, t[c as usize])).collect()
    })
}

/// Runs `f`, charging its time to `cat`. Nested calls are charged to the
/// outermost category only.
#[inline]
pub fn time<T>(cat: Category, f: impl FnOnce() -> T) -> T {
    if !ENABLED.with(|e| e.get()) || DEPTH.with(|d| d.get()) > 0 {
        return f();
    }
    DEPTH.with(|d| d.set(1));
    let start = Instant::now();
    let out = f();
    let dt = start.elapsed();
    DEPTH.with(|d| d.set(0));
    TOTALS.with(|t| t.borrow_mut()[cat as usize] += dt);
    out
}
