use rand_chacha::ChaCha8Rng;

use super::spec::LayerKind;
use super::Model;
use crate::bitcore::BitMatrix;
use crate::error::{Error, Result};
use crate::graph::{knn_hamming_segments, knn_segments, GraphTopology, KnnMetric};
use crate::ops::{
    balance_segments, balance_segments_backward, dense_backward, dense_forward, dense_forward_packed, dropout,
    edge_backward, edge_forward, edge_forward_packed, global_pool_backward, global_pool_forward, sage_backward,
    sage_forward, Adjacency, BalanceCache, BnUpdate, DenseCache, EdgeCache, EdgeKind, LayerGrads, LayerParams, Mode,
    PackedInput, PoolCache, Quantizer, SageCache,
};
use crate::profile::{self, Category};
use crate::tensor::DenseTensor;

/// A batch of point clouds stacked into one node matrix. Every cloud is
/// resampled to the same node count: the first `points` rows, repeating
/// from the start when the cloud is smaller.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphBatch {
    points: DenseTensor,
    segments: Vec<usize>,
    labels: Vec<usize>,
}

impl GraphBatch {
    pub fn new(clouds: &[&DenseTensor], labels: &[usize], points: usize) -> Result<Self> {
        if clouds.len() != labels.len() {
            return Err(Error::Shape(format!("{} clouds but {} labels", clouds.len(), labels.len())));
        }
        if clouds.is_empty() || points == 0 {
            return Err(Error::Empty("batch without graphs or points".into()));
        }
        let d = clouds[0].cols();
        let mut data = Vec::with_capacity(clouds.len() * points * d);
        let mut segments = vec![0];
        for (c, cloud) in clouds.iter().enumerate() {
            let (n, cd) = cloud.expect_matrix("point cloud")?;
            if n == 0 {
                return Err(Error::Empty(format!("cloud {c} has no points")));
            }
            if cd != d {
                return Err(Error::Shape(format!("cloud {c} has {cd} coordinates, expected {d}")));
            }
            for r in 0..points {
                data.extend_from_slice(cloud.row(r % n));
            }
            segments.push(segments.last().unwrap() + points);
        }
        Ok(Self {
            points: DenseTensor::matrix(clouds.len() * points, d, data)?,
            segments,
            labels: labels.to_vec(),
        })
    }

    pub fn points(&self) -> &DenseTensor {
        &self.points
    }

    pub fn segments(&self) -> &[usize] {
        &self.segments
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn graphs(&self) -> usize {
        self.segments.len() - 1
    }
}

pub struct ForwardOptions<'a> {
    pub mode: Mode,
    /// Keep what the backward pass needs.
    pub record: bool,
    /// Dropout in the head; `None` disables it.
    pub dropout: Option<&'a mut ChaCha8Rng>,
}

impl<'a> ForwardOptions<'a> {
    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            record: false,
            dropout: None,
        }
    }

    pub fn train(rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            mode: Mode::Train,
            record: true,
            dropout: Some(rng),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: DenseTensor,
    /// Output of every graph layer.
    pub features: Vec<DenseTensor>,
    /// Graph each graph layer was applied on.
    pub graphs: Vec<GraphTopology>,
}

#[derive(Clone, Debug)]
enum ConvCache {
    Edge(EdgeCache),
    Sage(SageCache),
}

/// Recorded forward pass.
#[derive(Clone, Debug)]
pub struct Tape {
    convs: Vec<ConvCache>,
    widths: Vec<usize>,
    embed: DenseCache,
    pool: PoolCache,
    balance: Option<BalanceCache>,
    head: Vec<DenseCache>,
    masks: Vec<Option<Vec<f64>>>,
}

/// Batch statistics of one training forward pass, per layer in canonical
/// order.
#[derive(Clone, Debug, Default)]
pub struct BnUpdates(pub Vec<Vec<BnUpdate>>);

/// Gradients of every trainable tensor, per layer in canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrads>,
}

impl Gradients {
    pub fn zeros(model: &Model) -> Self {
        Self {
            layers: model.layers().map(LayerParams::zero_grads).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.tensors_mut().into_iter().zip(b.tensors()) {
                x.iter_mut().zip(y).for_each(|(p, q)| *p += q);
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.layers {
            for x in a.tensors_mut() {
                x.iter_mut().for_each(|p| *p *= s);
            }
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.tensors().into_iter().flatten().copied().collect::<Vec<_>>())
            .collect()
    }
}

/// Pooled vectors are balanced per graph across channels.
fn balance_rows(x: &mut DenseTensor, mode: crate::ops::BalanceMode) -> BalanceCache {
    let (b, c) = (x.rows(), x.cols());
    let mut t = x.transpose().into_data();
    let cache = balance_segments(&mut t, b, &[0, c], mode);
    *x = DenseTensor::matrix(c, b, t).expect("shape").transpose();
    cache
}

fn balance_rows_backward(g: &mut DenseTensor, cache: &BalanceCache) {
    let (b, c) = (g.rows(), g.cols());
    let mut t = g.transpose().into_data();
    balance_segments_backward(&mut t, b, &[0, c], cache);
    *g = DenseTensor::matrix(c, b, t).expect("shape").transpose();
}

impl Model {
    fn check_input(&self, batch: &GraphBatch) -> Result<()> {
        if batch.points.cols() != self.spec.in_dim {
            return Err(Error::Shape(format!(
                "model takes {}-dim points, batch has {}",
                self.spec.in_dim,
                batch.points.cols()
            )));
        }
        if batch.segments.windows(2).any(|w| w[1] - w[0] != self.spec.points) {
            return Err(Error::Shape(format!("model expects {} points per graph", self.spec.points)));
        }
        Ok(())
    }

    fn layer_graph(&self, h: &DenseTensor, segments: &[usize], metric: KnnMetric) -> Result<GraphTopology> {
        knn_segments(h, segments, self.spec.k, metric)
    }

    pub fn forward(&self, batch: &GraphBatch, mut opts: ForwardOptions<'_>) -> Result<(ForwardOutput, Option<Tape>, BnUpdates)> {
        self.check_input(batch)?;
        let (mode, record) = (opts.mode, opts.record);
        let seg = batch.segments();
        let mut updates = Vec::new();
        let mut caches = Vec::new();
        let mut features = Vec::new();
        let mut graphs = Vec::new();
        let mut h = batch.points.clone();
        for (ls, p) in self.spec.convs.iter().zip(&self.convs) {
            let topo = self.layer_graph(&h, seg, p.flags.knn_metric)?;
            let (y, cache, u) = match ls.kind.edge_kind() {
                Some(kind) => {
                    let out = edge_forward(kind, &h, &topo, seg, p, mode, record)?;
                    (out.y, out.cache.map(ConvCache::Edge), out.updates)
                }
                None => {
                    let out = sage_forward(&h, &Adjacency::from(&topo), p, mode, record)?;
                    (out.y, out.cache.map(ConvCache::Sage), out.updates)
                }
            };
            caches.extend(cache);
            graphs.push(topo);
            updates.push(u);
            features.push(y.clone());
            h = y;
        }
        let cat = profile::time(Category::Gather, || DenseTensor::concat_cols(&features.iter().collect::<Vec<_>>()))?;
        let e = dense_forward(&cat, &self.embed, mode, record)?;
        updates.push(e.updates);
        let (mut pooled, pool) = global_pool_forward(&e.y, seg)?;
        let balance = self.spec.global_balance.map(|m| balance_rows(&mut pooled, m));
        let mut head_caches = Vec::new();
        let mut masks = Vec::new();
        let last = self.head.len() - 1;
        let mut z = pooled;
        profile::time(Category::Classifier, || -> Result<()> {
            for (l, p) in self.head.iter().enumerate() {
                let out = dense_forward(&z, p, mode, record)?;
                updates.push(out.updates);
                head_caches.extend(out.cache);
                z = out.y;
                let mask = match (&mut opts.dropout, l < last && self.spec.dropout > 0.0) {
                    (Some(rng), true) => Some(dropout(z.data_mut(), self.spec.dropout, *rng)),
                    _ => None,
                };
                masks.push(mask);
            }
            Ok(())
        })?;
        let tape = match (record, e.cache) {
            (true, Some(embed)) => Some(Tape {
                convs: caches,
                widths: features.iter().map(|f| f.cols()).collect(),
                embed,
                pool,
                balance,
                head: head_caches,
                masks,
            }),
            _ => None,
        };
        Ok((ForwardOutput { logits: z, features, graphs }, tape, BnUpdates(updates)))
    }

    pub fn apply_bn_updates(&mut self, updates: &BnUpdates) {
        for (p, u) in self.layers_mut().zip(&updates.0) {
            p.apply_bn_updates(u);
        }
    }

    /// Eval-mode logits through real arithmetic.
    pub fn predict(&self, batch: &GraphBatch) -> Result<DenseTensor> {
        Ok(self.forward(batch, ForwardOptions::eval())?.0.logits)
    }

    /// Eval-mode logits with XNOR/popcount kernels for every layer whose
    /// weights are binarized, and Hamming k-NN on packed codes where the
    /// graph is built in Hamming space. Bitwise equal to [`Model::predict`].
    pub fn predict_packed(&self, batch: &GraphBatch) -> Result<DenseTensor> {
        self.check_input(batch)?;
        let seg = batch.segments();
        let mut features = Vec::new();
        let mut h = batch.points.clone();
        for (ls, p) in self.spec.convs.iter().zip(&self.convs) {
            let binary = p.quant.weights == Quantizer::Sign;
            let packed_graph = binary && p.flags.knn_metric == KnnMetric::HammingMatmul && h.check_binary().is_ok();
            let bits = packed_graph.then(|| profile::time(Category::Gather, || BitMatrix::pack(&h))).transpose()?;
            let topo = match &bits {
                Some(b) => knn_hamming_segments(b, seg, self.spec.k)?,
                None => self.layer_graph(&h, seg, p.flags.knn_metric)?,
            };
            let y = match (ls.kind.edge_kind(), binary, &bits) {
                (Some(EdgeKind::Bin), true, _) => edge_forward_packed(EdgeKind::Bin, PackedInput::Real(&h), &topo, seg, p)?,
                (Some(EdgeKind::Xor), true, Some(b)) => edge_forward_packed(EdgeKind::Xor, PackedInput::Bits(b), &topo, seg, p)?,
                (Some(kind), _, _) => edge_forward(kind, &h, &topo, seg, p, Mode::Eval, false)?.y,
                (None, true, _) if ls.kind == LayerKind::BinSage => crate::ops::binsage(&h, &Adjacency::from(&topo), p)?,
                (None, _, _) => sage_forward(&h, &Adjacency::from(&topo), p, Mode::Eval, false)?.y,
            };
            features.push(y.clone());
            h = y;
        }
        let dense = |x: &DenseTensor, p: &LayerParams| -> Result<DenseTensor> {
            if p.quant.weights == Quantizer::Sign {
                dense_forward_packed(x, p)
            } else {
                Ok(dense_forward(x, p, Mode::Eval, false)?.y)
            }
        };
        let cat = profile::time(Category::Gather, || DenseTensor::concat_cols(&features.iter().collect::<Vec<_>>()))?;
        let e = dense(&cat, &self.embed)?;
        let (mut z, _) = global_pool_forward(&e, seg)?;
        if let Some(m) = self.spec.global_balance {
            balance_rows(&mut z, m);
        }
        profile::time(Category::Classifier, || {
            for p in &self.head {
                z = dense(&z, p)?;
            }
            Ok(z)
        })
    }

    /// Reverse pass. `dlogits` is the loss gradient on the logits and
    /// `dfeatures[l]`, when present, an extra gradient on graph layer `l`'s
    /// output.
    pub fn backward(&self, tape: Option<&Tape>, dlogits: &DenseTensor, dfeatures: &[Option<DenseTensor>]) -> Result<Gradients> {
        let tape = tape.ok_or(Error::MissingTape)?;
        let mut grads: Vec<LayerGrads> = Vec::new();
        let mut head_grads = Vec::new();
        let mut g = dlogits.clone();
        for (l, p) in self.head.iter().enumerate().rev() {
            if let Some(mask) = &tape.masks[l] {
                g.data_mut().iter_mut().zip(mask).for_each(|(a, m)| *a *= m);
            }
            let (dx, lg) = dense_backward(p, &tape.head[l], &g);
            head_grads.push(lg);
            g = dx;
        }
        head_grads.reverse();
        if let Some(b) = &tape.balance {
            balance_rows_backward(&mut g, b);
        }
        let g = global_pool_backward(&tape.pool, &g);
        let (dcat, embed_grads) = dense_backward(&self.embed, &tape.embed, &g);
        let mut parts = dcat.split_cols(&tape.widths)?;
        let mut carry: Option<DenseTensor> = None;
        let mut conv_grads = Vec::new();
        for l in (0..self.convs.len()).rev() {
            let mut g = std::mem::replace(&mut parts[l], DenseTensor::zeros(vec![0]));
            if let Some(Some(extra)) = dfeatures.get(l) {
                g.add_assign(extra)?;
            }
            if let Some(c) = carry.take() {
                g.add_assign(&c)?;
            }
            let (dx, lg) = match &tape.convs[l] {
                ConvCache::Edge(c) => edge_backward(&self.convs[l], c, &g),
                ConvCache::Sage(c) => sage_backward(&self.convs[l], c, &g),
            };
            conv_grads.push(lg);
            carry = Some(dx);
        }
        conv_grads.reverse();
        grads.extend(conv_grads);
        grads.push(embed_grads);
        grads.extend(head_grads);
        Ok(Gradients { layers: grads })
    }
}
