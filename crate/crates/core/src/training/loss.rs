use crate::error::{Error, Result};
use crate::graph::GraphTopology;
use crate::tensor::DenseTensor;

fn log_softmax(z: &[f64], t: f64) -> Vec<f64> {
    let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b / t));
    let lse = m + z.iter().map(|&v| (v / t - m).exp()).sum::<f64>().ln();
    z.iter().map(|&v| v / t - lse).collect()
}

fn check_labels(logits: &DenseTensor, labels: &[usize]) -> Result<(usize, usize)> {
    let (b, c) = logits.expect_matrix("logits")?;
    if labels.len() != b {
        return Err(Error::Shape(format!("{b} logit rows but {} labels", labels.len())));
    }
    if b == 0 {
        return Err(Error::Empty("loss over an empty batch".into()));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Shape(format!("label {l} with {c} classes")));
    }
    Ok((b, c))
}

/// Mean cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy(logits: &DenseTensor, labels: &[usize]) -> Result<(f64, DenseTensor)> {
    let (b, c) = check_labels(logits, labels)?;
    let mut loss = 0.0;
    let mut g = vec![0.0; b * c];
    for (r, &y) in labels.iter().enumerate() {
        let lp = log_softmax(logits.row(r), 1.0);
        loss -= lp[y];
        for j in 0..c {
            g[r * c + j] = (lp[j].exp() - f64::from(u8::from(j == y))) / b as f64;
        }
    }
    Ok((loss / b as f64, DenseTensor::matrix(b, c, g)?))
}

/// Components of a distillation objective, batch means.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub task: f64,
    pub distill: f64,
}

/// `(1 - α) CE(student, labels) + α T² KL(softmax(teacher/T) ‖ softmax(student/T))`
/// with its gradient on the student logits.
pub fn logit_matching_loss(
    student: &DenseTensor,
    teacher: &DenseTensor,
    temperature: f64,
    alpha: f64,
    labels: &[usize],
) -> Result<(LossValue, DenseTensor)> {
    if student.shape() != teacher.shape() {
        return Err(Error::Shape(format!(
            "student logits {:?} vs teacher {:?}",
            student.shape(),
            teacher.shape()
        )));
    }
    if temperature <= 0.0 || !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("temperature {temperature} and alpha {alpha} out of range")));
    }
    let (ce, mut g) = cross_entropy(student, labels)?;
    let (b, c) = (student.rows(), student.cols());
    let t = temperature;
    let mut kl = 0.0;
    for (r, gr) in g.data_mut().chunks_exact_mut(c).enumerate() {
        let ls = log_softmax(student.row(r), t);
        let lt = log_softmax(teacher.row(r), t);
        for j in 0..c {
            let pt = lt[j].exp();
            kl += pt * (lt[j] - ls[j]);
            gr[j] = (1.0 - alpha) * gr[j] + alpha * t * (ls[j].exp() - pt) / b as f64;
        }
    }
    let distill = t * t * kl / b as f64;
    let value = LossValue {
        total: (1.0 - alpha) * ce + alpha * distill,
        task: ce,
        distill,
    };
    Ok((value, g))
}

/// Similarity behind local structure vectors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Deserialize, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LspSimilarity {
    /// `exp(-‖a - b‖²)`.
    RbfL2,
    /// `exp(-H(a, b))` with `H = ½ Σ (1 - a_k b_k)`, smooth in real inputs.
    Hamming,
}

impl LspSimilarity {
    fn value(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            LspSimilarity::RbfL2 => (-a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()).exp(),
            LspSimilarity::Hamming => (-0.5 * a.iter().zip(b).map(|(x, y)| 1.0 - x * y).sum::<f64>()).exp(),
        }
    }

    /// Adds `w · ∂SIM/∂a` to `ga` and `w · ∂SIM/∂b` to `gb`.
    fn grad(self, a: &[f64], b: &[f64], s: f64, w: f64, ga: &mut [f64], gb: &mut [f64]) {
        for k in 0..a.len() {
            let (da, db) = match self {
                LspSimilarity::RbfL2 => {
                    let d = -2.0 * s * (a[k] - b[k]);
                    (d, -d)
                }
                LspSimilarity::Hamming => (0.5 * s * b[k], 0.5 * s * a[k]),
            };
            ga[k] += w * da;
            gb[k] += w * db;
        }
    }
}

fn softmax(s: &[f64]) -> Vec<f64> {
    let m = s.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn sims(x: &DenseTensor, i: usize, nbrs: &[usize], sim: LspSimilarity) -> Vec<f64> {
    nbrs.iter().map(|&j| sim.value(x.row(i), x.row(j))).collect()
}

/// Local structure vectors: for every node, the softmax of its similarities
/// to its neighbours, in neighbour order.
pub fn lsp_vectors(x: &DenseTensor, topo: &GraphTopology, sim: LspSimilarity) -> Result<Vec<Vec<f64>>> {
    let (n, _) = x.expect_matrix("features")?;
    if n != topo.n() {
        return Err(Error::Shape(format!("{n} feature rows for a {}-node graph", topo.n())));
    }
    if topo.k() == 0 {
        return Err(Error::Empty("local structure over an empty neighbourhood".into()));
    }
    Ok((0..n).map(|i| softmax(&sims(x, i, topo.neighbours(i), sim))).collect())
}

fn check_pair(s: &DenseTensor, t: &DenseTensor, gs: &GraphTopology, gt: &GraphTopology) -> Result<usize> {
    let (n, _) = s.expect_matrix("student features")?;
    let (nt, _) = t.expect_matrix("teacher features")?;
    if n != nt || gs.n() != n || gt.n() != n {
        return Err(Error::Shape(format!(
            "student ({n} nodes, graph {}) and teacher ({nt} nodes, graph {}) differ",
            gs.n(),
            gt.n()
        )));
    }
    if n == 0 || gs.k() == 0 || gt.k() == 0 {
        return Err(Error::Empty("local structure over an empty neighbourhood".into()));
    }
    Ok(n)
}

/// Mean over nodes of `KL(LS^s_i ‖ LS^t_i)`, both vectors taken over the
/// union of the student and teacher neighbourhoods.
pub fn lsp_loss(
    student_x: &DenseTensor,
    teacher_x: &DenseTensor,
    topo_s: &GraphTopology,
    topo_t: &GraphTopology,
    sim: LspSimilarity,
) -> Result<f64> {
    Ok(lsp_impl(student_x, teacher_x, topo_s, topo_t, sim, false)?.0)
}

/// [`lsp_loss`] with its gradient on the student features.
pub fn lsp_loss_grad(
    student_x: &DenseTensor,
    teacher_x: &DenseTensor,
    topo_s: &GraphTopology,
    topo_t: &GraphTopology,
    sim: LspSimilarity,
) -> Result<(f64, DenseTensor)> {
    let (l, g) = lsp_impl(student_x, teacher_x, topo_s, topo_t, sim, true)?;
    Ok((l, g.expect("gradient requested")))
}

fn lsp_impl(
    s: &DenseTensor,
    t: &DenseTensor,
    gs: &GraphTopology,
    gt: &GraphTopology,
    sim: LspSimilarity,
    want_grad: bool,
) -> Result<(f64, Option<DenseTensor>)> {
    let n = check_pair(s, t, gs, gt)?;
    let d = s.cols();
    let mut grad = want_grad.then(|| vec![0.0; n * d]);
    let mut total = 0.0;
    for i in 0..n {
        let u = gs.union_neighbours(gt, i);
        let ss = sims(s, i, &u, sim);
        let p = softmax(&ss);
        let q = softmax(&sims(t, i, &u, sim));
        let li: f64 = p.iter().zip(&q).map(|(a, b)| a * (a.ln() - b.ln())).sum();
        total += li;
        if let Some(g) = &mut grad {
            for (m, &j) in u.iter().enumerate() {
                // d L_i / d s_m for a softmax-parameterized KL.
                let w = p[m] * (p[m].ln() - q[m].ln() - li) / n as f64;
                let (lo, hi) = (i.min(j), i.max(j));
                let (head, tail) = g.split_at_mut(hi * d);
                let (gl, gh) = (&mut head[lo * d..(lo + 1) * d], &mut tail[..d]);
                let (gi, gj) = if i < j { (gl, gh) } else { (gh, gl) };
                sim.grad(s.row(i), s.row(j), ss[m], w, gi, gj);
            }
        }
    }
    let g = grad.map(|g| DenseTensor::matrix(n, d, g)).transpose()?;
    Ok((total / n as f64, g))
}
