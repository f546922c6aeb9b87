//! Fixed-degree neighbour graphs and exact k-NN construction.
//!
//! Every search is exhaustive. Candidates are ranked by `(distance, index)`,
//! so ties go to the smaller node index and the result does not depend on
//! the order candidates are visited in. A node is never its own neighbour.

use std::cmp::Ordering;

use rayon::prelude::*;

use crate::bitcore::{pairwise_hamming, BitMatrix};
use crate::error::{Error, Result};
use crate::linalg;
use crate::profile::{self, Category};
use crate::tensor::DenseTensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GraphTopology {
    n: usize,
    k: usize,
    neighbours: Vec<usize>,
}

impl GraphTopology {
    pub fn new(n: usize, k: usize, neighbours: Vec<usize>) -> Result<Self> {
        if neighbours.len() != n * k {
            return Err(Error::Graph(format!(
                "{n} nodes with {k} neighbours need {} entries, got {}",
                n * k,
                neighbours.len()
            )));
        }
        for (e, &j) in neighbours.iter().enumerate() {
            let i = e / k.max(1);
            if j >= n {
                return Err(Error::Graph(format!("node {i} lists out-of-range neighbour {j}")));
            }
            if j == i {
                return Err(Error::Graph(format!("node {i} lists itself")));
            }
        }
        Ok(Self { n, k, neighbours })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn neighbours(&self, i: usize) -> &[usize] {
        &self.neighbours[i * self.k..(i + 1) * self.k]
    }

    /// Flat `n * k` neighbour list; edge `e` runs from node `e / k`.
    pub fn edges(&self) -> &[usize] {
        &self.neighbours
    }

    /// `N_self(i) ∪ N_other(i)`: this graph's neighbours in order, then the
    /// other graph's neighbours not already present.
    pub fn union_neighbours(&self, other: &GraphTopology, i: usize) -> Vec<usize> {
        let mut out = self.neighbours(i).to_vec();
        for &j in other.neighbours(i) {
            if !out.contains(&j) {
                out.push(j);
            }
        }
        out
    }

    /// Stacks per-segment graphs into one graph over all nodes, offsetting
    /// indices by each segment's start.
    pub fn stack(parts: &[GraphTopology]) -> Result<Self> {
        let k = parts.first().map_or(0, |p| p.k);
        if parts.iter().any(|p| p.k != k) {
            return Err(Error::Graph("stacked graphs must share k".into()));
        }
        let mut neighbours = Vec::with_capacity(parts.iter().map(|p| p.neighbours.len()).sum());
        let mut offset = 0;
        for p in parts {
            neighbours.extend(p.neighbours.iter().map(|&j| j + offset));
            offset += p.n;
        }
        Ok(Self {
            n: offset,
            k,
            neighbours,
        })
    }
}

fn check_k(n: usize, k: usize) -> Result<()> {
    if k == 0 || k >= n {
        return Err(Error::InvalidK { k, n });
    }
    Ok(())
}

/// Canonical total order on distances: `-0.0` and `+0.0` compare equal.
#[inline]
fn rank(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    (a.0 + 0.0).total_cmp(&(b.0 + 0.0)).then(a.1.cmp(&b.1))
}

/// The `k` candidates with smallest `(score, index)`, ascending.
fn select_k(mut cand: Vec<(f64, usize)>, k: usize) -> impl Iterator<Item = usize> {
    if cand.len() > k {
        cand.select_nth_unstable_by(k - 1, rank);
        cand.truncate(k);
    }
    cand.sort_unstable_by(rank);
    cand.into_iter().map(|(_, j)| j)
}

/// k-NN from a dense `n x n` score matrix where smaller means closer. The
/// diagonal is ignored.
pub fn knn_from_scores(scores: &[f64], n: usize, k: usize) -> Result<GraphTopology> {
    check_k(n, k)?;
    if scores.len() != n * n {
        return Err(Error::Shape(format!("score matrix must be {n}x{n}")));
    }
    if let Some(index) = scores.iter().position(|v| v.is_nan()) {
        return Err(Error::NonFinite {
            index,
            value: f64::NAN,
        });
    }
    let neighbours: Vec<usize> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            let row = &scores[i * n..(i + 1) * n];
            let cand = (0..n).filter(|&j| j != i).map(|j| (row[j], j)).collect();
            select_k(cand, k)
        })
        .collect();
    Ok(GraphTopology { n, k, neighbours })
}

/// Squared euclidean distances between all rows, summed per coordinate in
/// index order; row-major `n x n`.
pub fn sq_l2_matrix(features: &DenseTensor) -> Vec<f64> {
    let (n, d) = (features.rows(), features.cols());
    let x = features.data();
    let mut out = vec![0.0; n * n];
    out.par_chunks_mut(n.max(1)).enumerate().for_each(|(i, row)| {
        let xi = &x[i * d..(i + 1) * d];
        for (j, o) in row.iter_mut().enumerate() {
            let xj = &x[j * d..(j + 1) * d];
            *o = xi.iter().zip(xj).map(|(a, b)| (a - b) * (a - b)).sum();
        }
    });
    out
}

/// Exact k-NN under squared euclidean distance.
pub fn knn_l2(features: &DenseTensor, k: usize) -> Result<GraphTopology> {
    let n = features.rows();
    check_k(n, k)?;
    features.check_finite()?;
    let dist = profile::time(Category::Knn, || sq_l2_matrix(features));
    profile::time(Category::TopK, || knn_from_scores(&dist, n, k))
}

/// Exact k-NN under Hamming distance on packed codes.
pub fn knn_hamming(features: &BitMatrix, k: usize) -> Result<GraphTopology> {
    let n = features.rows();
    check_k(n, k)?;
    let dist = profile::time(Category::Knn, || pairwise_hamming(features));
    let neighbours: Vec<usize> = profile::time(Category::TopK, || {
        (0..n)
            .into_par_iter()
            .flat_map_iter(|i| {
                let row = &dist[i * n..(i + 1) * n];
                let mut cand: Vec<(u32, usize)> = (0..n).filter(|&j| j != i).map(|j| (row[j], j)).collect();
                if cand.len() > k {
                    cand.select_nth_unstable(k - 1);
                    cand.truncate(k);
                }
                cand.sort_unstable();
                cand.into_iter().map(|(_, j)| j)
            })
            .collect()
    });
    Ok(GraphTopology { n, k, neighbours })
}

/// The training-time Hamming score `-(X X^T - d I)`. For ±1 rows the
/// off-diagonal entries equal `2 H_ij - d`, which orders neighbours exactly
/// like the Hamming distance. With `strict`, non-±1 input is rejected.
pub fn knn_score_matmul(features: &DenseTensor, strict: bool) -> Result<DenseTensor> {
    if strict {
        features.check_binary()?;
    } else {
        features.check_finite()?;
    }
    let (n, d) = (features.rows(), features.cols());
    let mut s = linalg::gemm_nt(features.data(), features.data(), n, d, n);
    for i in 0..n {
        for j in 0..n {
            let v = &mut s[i * n + j];
            *v = if i == j { -(*v - d as f64) } else { -*v };
        }
    }
    DenseTensor::matrix(n, n, s)
}

/// Which metric builds a dynamic graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KnnMetric {
    L2,
    /// Relaxed Hamming distance through [`knn_score_matmul`]; on packed codes
    /// this is the exact Hamming k-NN.
    HammingMatmul,
}

/// k-NN within each segment `[offsets[s], offsets[s + 1])` of the rows,
/// returned as one graph over all rows with global indices.
pub fn knn_segments(
    features: &DenseTensor,
    offsets: &[usize],
    k: usize,
    metric: KnnMetric,
) -> Result<GraphTopology> {
    let d = features.cols();
    let parts = offsets
        .windows(2)
        .map(|w| {
            let seg = DenseTensor::matrix(
                w[1] - w[0],
                d,
                features.data()[w[0] * d..w[1] * d].to_vec(),
            )?;
            match metric {
                KnnMetric::L2 => knn_l2(&seg, k),
                KnnMetric::HammingMatmul => {
                    let n = seg.rows();
                    check_k(n, k)?;
                    let s = profile::time(Category::Knn, || knn_score_matmul(&seg, false))?;
                    profile::time(Category::TopK, || knn_from_scores(s.data(), n, k))
                }
            }
        })
        .collect::<Result<Vec<_>>>()?;
    GraphTopology::stack(&parts)
}

/// Hamming k-NN within each segment of packed rows.
pub fn knn_hamming_segments(features: &BitMatrix, offsets: &[usize], k: usize) -> Result<GraphTopology> {
    let parts = offsets
        .windows(2)
        .map(|w| knn_hamming(&features.slice_rows(w[0], w[1]), k))
        .collect::<Result<Vec<_>>>()?;
    GraphTopology::stack(&parts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collinear_points() {
        let x = DenseTensor::matrix(3, 1, vec![0.0, 1.0, 10.0]).unwrap();
        let g = knn_l2(&x, 1).unwrap();
        assert_eq!(g.edges(), &[1, 0, 1]);
    }

    #[test]
    fn duplicates_tie_to_smaller_index() {
        let x = DenseTensor::matrix(4, 2, vec![0.0; 8]).unwrap();
        let g = knn_l2(&x, 2).unwrap();
        assert_eq!(g.neighbours(0), &[1, 2]);
        assert_eq!(g.neighbours(2), &[0, 1]);
        assert_eq!(g.neighbours(3), &[0, 1]);
        let b = BitMatrix::new(4, 5);
        assert_eq!(knn_hamming(&b, 2).unwrap(), g);
    }

    #[test]
    fn k_out_of_range_is_an_error() {
        let x = DenseTensor::matrix(3, 1, vec![0.0, 1.0, 2.0]).unwrap();
        assert!(matches!(knn_l2(&x, 3), Err(Error::InvalidK { k: 3, n: 3 })));
        assert!(matches!(knn_l2(&x, 0), Err(Error::InvalidK { .. })));
        assert!(knn_hamming(&BitMatrix::new(1, 4), 1).is_err());
    }

    #[test]
    fn matmul_score_printed_example() {
        let x = DenseTensor::from_rows(&[[1.0, 1.0], [1.0, -1.0]]).unwrap();
        let s = knn_score_matmul(&x, true).unwrap();
        assert_eq!(s.data(), &[0.0, 0.0, 0.0, 0.0]);
        let bad = DenseTensor::from_rows(&[[1.0, 0.5]]).unwrap();
        assert!(knn_score_matmul(&bad, true).is_err());
        assert!(knn_score_matmul(&bad, false).is_ok());
    }

    #[test]
    fn topology_validation() {
        assert!(GraphTopology::new(2, 1, vec![1, 0]).is_ok());
        assert!(GraphTopology::new(2, 1, vec![0, 0]).is_err());
        assert!(GraphTopology::new(2, 1, vec![1, 2]).is_err());
        assert!(GraphTopology::new(2, 1, vec![1]).is_err());
    }

    #[test]
    fn union_keeps_order_without_duplicates() {
        let a = GraphTopology::new(4, 2, vec![1, 2, 0, 2, 0, 1, 0, 1]).unwrap();
        let b = GraphTopology::new(4, 2, vec![3, 2, 0, 3, 3, 1, 2, 1]).unwrap();
        assert_eq!(a.union_neighbours(&b, 0), vec![1, 2, 3]);
        assert_eq!(a.union_neighbours(&a, 0), vec![1, 2]);
    }

    #[test]
    fn segments_stay_within_their_graph() {
        let x = DenseTensor::matrix(5, 1, vec![0.0, 1.0, 5.0, 5.5, 9.0]).unwrap();
        let g = knn_segments(&x, &[0, 2, 5], 1, KnnMetric::L2).unwrap();
        assert_eq!(g.edges(), &[1, 0, 3, 2, 3]);
    }
}
