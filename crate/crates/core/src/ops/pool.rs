use super::dense::dense_forward;
use super::params::{LayerParams, Mode};
use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

#[derive(Clone, Debug)]
pub(crate) struct PoolCache {
    argmax: Vec<usize>,
    segments: Vec<usize>,
    rows: usize,
}

/// Per-graph `[max ‖ mean]` over the node rows of each segment, giving
/// `graphs x 2c`.
pub(crate) fn global_pool_forward(x: &DenseTensor, segments: &[usize]) -> Result<(DenseTensor, PoolCache)> {
    crate::profile::time(crate::profile::Category::Pool, || pool_impl(x, segments))
}

fn pool_impl(x: &DenseTensor, segments: &[usize]) -> Result<(DenseTensor, PoolCache)> {
    let c = x.cols();
    let graphs = segments.len().saturating_sub(1);
    if segments.last().copied() != Some(x.rows()) || segments.first().copied() != Some(0) {
        return Err(Error::Shape("pool segments do not cover the node rows".into()));
    }
    let mut out = vec![0.0; graphs * 2 * c];
    let mut argmax = vec![0usize; graphs * c];
    for (gi, w) in segments.windows(2).enumerate() {
        let (lo, hi) = (w[0], w[1]);
        if hi <= lo {
            return Err(Error::Empty(format!("graph {gi} has no nodes")));
        }
        let o = &mut out[gi * 2 * c..(gi + 1) * 2 * c];
        let am = &mut argmax[gi * c..(gi + 1) * c];
        o[..c].copy_from_slice(x.row(lo));
        am.fill(lo);
        let mut sum = x.row(lo).to_vec();
        for r in lo + 1..hi {
            for (j, &v) in x.row(r).iter().enumerate() {
                if v > o[j] {
                    o[j] = v;
                    am[j] = r;
                }
                sum[j] += v;
            }
        }
        let n = (hi - lo) as f64;
        for j in 0..c {
            o[c + j] = sum[j] / n;
        }
    }
    let cache = PoolCache {
        argmax,
        segments: segments.to_vec(),
        rows: x.rows(),
    };
    Ok((DenseTensor::matrix(graphs, 2 * c, out)?, cache))
}

pub(crate) fn global_pool_backward(cache: &PoolCache, g: &DenseTensor) -> DenseTensor {
    let c = g.cols() / 2;
    let mut dx = vec![0.0; cache.rows * c];
    for (gi, w) in cache.segments.windows(2).enumerate() {
        let (lo, hi) = (w[0], w[1]);
        let gr = g.row(gi);
        let inv = 1.0 / (hi - lo) as f64;
        for j in 0..c {
            dx[cache.argmax[gi * c + j] * c + j] += gr[j];
        }
        for r in lo..hi {
            for j in 0..c {
                dx[r * c + j] += gr[c + j] * inv;
            }
        }
    }
    DenseTensor::matrix(cache.rows, c, dx).expect("pool input shape")
}

/// Eval-mode graph classification head: per-graph max and average pooling,
/// concatenated, then the MLP blocks in `head` (dropout is inactive at
/// inference).
pub fn global_pool_classify(node_embeddings: &DenseTensor, segments: &[usize], head: &[LayerParams]) -> Result<DenseTensor> {
    let (mut h, _) = global_pool_forward(node_embeddings, segments)?;
    for p in head {
        p.validate()?;
        h = dense_forward(&h, p, Mode::Eval, false)?.y;
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_node_max_equals_mean() {
        let x = DenseTensor::matrix(1, 3, vec![0.5, -2.0, 1.0]).unwrap();
        let (p, _) = global_pool_forward(&x, &[0, 1]).unwrap();
        assert_eq!(&p.data()[..3], &p.data()[3..]);
    }

    #[test]
    fn empty_graph_is_an_error() {
        let x = DenseTensor::matrix(2, 1, vec![0.0, 1.0]).unwrap();
        assert!(global_pool_forward(&x, &[0, 0, 2]).is_err());
    }

    #[test]
    fn duplicated_nodes_leave_pooling_unchanged() {
        let x = DenseTensor::matrix(3, 2, vec![1.0, -1.0, 2.5, 0.0, -3.0, 4.0]).unwrap();
        let mut d = x.data().to_vec();
        d.extend_from_slice(x.data());
        let x2 = DenseTensor::matrix(6, 2, d).unwrap();
        let (a, _) = global_pool_forward(&x, &[0, 3]).unwrap();
        let (b, _) = global_pool_forward(&x2, &[0, 6]).unwrap();
        assert_eq!(a, b);
    }
}
