use crate::error::{Error, Result};
use crate::graph::KnnMetric;
use crate::ops::{Activation, BalanceMode, BnPlacement, EdgeKind, LayerFlags, Quantization, Quantizer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerKind {
    EdgeConv,
    BinEdgeConv,
    XorEdgeConvBf1,
    XorEdgeConvBf2,
    Sage,
    BinSage,
    Dense,
    BinaryDense,
}

impl LayerKind {
    pub const ALL: [LayerKind; 8] = [
        LayerKind::EdgeConv,
        LayerKind::BinEdgeConv,
        LayerKind::XorEdgeConvBf1,
        LayerKind::XorEdgeConvBf2,
        LayerKind::Sage,
        LayerKind::BinSage,
        LayerKind::Dense,
        LayerKind::BinaryDense,
    ];

    pub fn code(self) -> u8 {
        Self::ALL.iter().position(|&k| k == self).expect("listed") as u8
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }

    pub fn edge_kind(self) -> Option<EdgeKind> {
        match self {
            LayerKind::EdgeConv => Some(EdgeKind::Float),
            LayerKind::BinEdgeConv => Some(EdgeKind::Bin),
            LayerKind::XorEdgeConvBf1 | LayerKind::XorEdgeConvBf2 => Some(EdgeKind::Xor),
            _ => None,
        }
    }

    pub fn is_graph_conv(self) -> bool {
        !matches!(self, LayerKind::Dense | LayerKind::BinaryDense)
    }

    /// Graph layers see `[x_i ‖ message]`, twice the node feature width.
    pub fn weight_cols(self, in_dim: usize) -> usize {
        if self.is_graph_conv() {
            2 * in_dim
        } else {
            in_dim
        }
    }

    pub fn is_binary(self) -> bool {
        !matches!(self, LayerKind::EdgeConv | LayerKind::Sage | LayerKind::Dense)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RescaleKind {
    None,
    ChannelWise,
    /// Channel, point and neighbour-slot factors.
    Rank1 { height: usize, width: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    /// Node feature width for graph layers, input width for dense layers.
    pub in_dim: usize,
    pub out_dim: usize,
    pub flags: LayerFlags,
    pub rescale: RescaleKind,
    pub bn_in: bool,
    pub bn_out: bool,
    pub bias: bool,
}

impl LayerSpec {
    pub fn weight_shape(&self) -> (usize, usize) {
        (self.out_dim, self.kind.weight_cols(self.in_dim))
    }

    pub fn bn_in_channels(&self) -> usize {
        self.weight_shape().1
    }
}

/// Which network family a model belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Real-valued DGCNN.
    Float,
    /// BinEdgeConv layers with real node features and an ℓ2 dynamic graph.
    Rf,
    /// XorEdgeConv, batch norm after aggregation, Hamming dynamic graph.
    Bf1,
    /// XorEdgeConv, batch norm on each edge message before aggregation.
    Bf2,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Float => "float",
            Variant::Rf => "rf",
            Variant::Bf1 => "bf1",
            Variant::Bf2 => "bf2",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Variant::Float, Variant::Rf, Variant::Bf1, Variant::Bf2]
            .into_iter()
            .find(|v| v.name() == s)
    }
}

/// Quantization regime of the binary sites.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    /// No quantization anywhere.
    Real,
    /// Activations through tanh, real weights.
    One,
    /// Sign activations, real weights.
    Two,
    /// Sign activations and weights, except the final classifier's weights.
    Three,
}

impl Stage {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<Self> {
        [Stage::Real, Stage::One, Stage::Two, Stage::Three].get(c as usize).copied()
    }

    /// Quantizers for a layer with the given binarization flags.
    pub fn quantization(self, flags: &LayerFlags) -> Quantization {
        let binary_acts = flags.binary_inputs || flags.binary_outputs;
        let activations = match (self, binary_acts) {
            (Stage::One, true) => Quantizer::Tanh,
            (Stage::Two | Stage::Three, true) => Quantizer::Sign,
            _ => Quantizer::Identity,
        };
        let weights = if self == Stage::Three && flags.binary_weights {
            Quantizer::Sign
        } else {
            Quantizer::Identity
        };
        Quantization { weights, activations }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArchSize {
    /// Two graph layers (32, 64), 256-dim embedding, MLP 128/64/classes;
    /// for desk-scale experiments.
    Mini,
    /// Four graph layers (64, 64, 128, 256), 1024-dim embedding, MLP
    /// 512/256/classes.
    Full,
}

impl ArchSize {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mini" => Some(ArchSize::Mini),
            "full" => Some(ArchSize::Full),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ArchSize::Mini => "mini",
            ArchSize::Full => "full",
        }
    }

    pub fn conv_widths(self) -> &'static [usize] {
        match self {
            ArchSize::Mini => &[32, 64],
            ArchSize::Full => &[64, 64, 128, 256],
        }
    }

    pub fn embedding(self) -> usize {
        match self {
            ArchSize::Mini => 256,
            ArchSize::Full => 1024,
        }
    }

    pub fn hidden(self) -> &'static [usize] {
        match self {
            ArchSize::Mini => &[128, 64],
            ArchSize::Full => &[512, 256],
        }
    }

    pub fn default_k(self) -> usize {
        match self {
            ArchSize::Mini => 10,
            ArchSize::Full => 20,
        }
    }
}

/// Full description of a point-cloud classifier: graph layers, the
/// embedding layer over their concatenated outputs, and the MLP head.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub variant: Variant,
    pub stage: Stage,
    pub in_dim: usize,
    pub classes: usize,
    pub k: usize,
    /// Nodes per graph; batches resample clouds to this size.
    pub points: usize,
    pub dropout: f64,
    pub global_balance: Option<BalanceMode>,
    pub convs: Vec<LayerSpec>,
    pub embed: LayerSpec,
    pub head: Vec<LayerSpec>,
}

pub struct DgcnnOptions {
    pub variant: Variant,
    pub size: ArchSize,
    pub classes: usize,
    pub points: usize,
    pub k: usize,
    pub stage: Stage,
    pub edge_balance: Option<BalanceMode>,
    pub global_balance: Option<BalanceMode>,
    /// Binary-model activation; the float model always uses ReLU.
    pub activation: Activation,
}

impl DgcnnOptions {
    pub fn new(variant: Variant, size: ArchSize, classes: usize, points: usize) -> Self {
        Self {
            variant,
            size,
            classes,
            points,
            k: size.default_k(),
            stage: if variant == Variant::Float { Stage::Real } else { Stage::Three },
            edge_balance: None,
            global_balance: None,
            activation: Activation::PRelu,
        }
    }
}

impl ModelSpec {
    pub fn dgcnn(o: &DgcnnOptions) -> Self {
        let widths = o.size.conv_widths();
        let float = o.variant == Variant::Float;
        let bf = matches!(o.variant, Variant::Bf1 | Variant::Bf2);
        let placement = if o.variant == Variant::Bf2 {
            BnPlacement::PreAggregation
        } else {
            BnPlacement::PostAggregation
        };
        let mut convs = Vec::new();
        let mut d = 3;
        for (l, &w) in widths.iter().enumerate() {
            let spec = if float {
                LayerSpec {
                    kind: LayerKind::EdgeConv,
                    in_dim: d,
                    out_dim: w,
                    flags: LayerFlags::default(),
                    rescale: RescaleKind::None,
                    bn_in: false,
                    bn_out: true,
                    bias: false,
                }
            } else if bf && l > 0 {
                LayerSpec {
                    kind: if o.variant == Variant::Bf1 {
                        LayerKind::XorEdgeConvBf1
                    } else {
                        LayerKind::XorEdgeConvBf2
                    },
                    in_dim: d,
                    out_dim: w,
                    flags: LayerFlags {
                        binary_weights: true,
                        binary_inputs: true,
                        binary_outputs: true,
                        bn_placement: placement,
                        activation: o.activation,
                        edge_balance: o.edge_balance,
                        knn_metric: KnnMetric::HammingMatmul,
                    },
                    rescale: RescaleKind::ChannelWise,
                    bn_in: false,
                    bn_out: true,
                    bias: false,
                }
            } else {
                LayerSpec {
                    kind: LayerKind::BinEdgeConv,
                    in_dim: d,
                    out_dim: w,
                    flags: LayerFlags {
                        binary_weights: true,
                        binary_inputs: true,
                        binary_outputs: bf,
                        bn_placement: placement,
                        activation: o.activation,
                        edge_balance: if bf { o.edge_balance } else { None },
                        knn_metric: KnnMetric::L2,
                    },
                    rescale: if bf {
                        RescaleKind::ChannelWise
                    } else {
                        RescaleKind::Rank1 {
                            height: o.points,
                            width: o.k,
                        }
                    },
                    bn_in: true,
                    bn_out: bf,
                    bias: false,
                }
            };
            convs.push(spec);
            d = w;
        }
        let cat: usize = widths.iter().sum();
        let emb = o.size.embedding();
        let embed = if float {
            float_dense(cat, emb)
        } else {
            binary_dense(cat, emb, o.activation)
        };
        let mut head = Vec::new();
        let mut d = 2 * emb;
        for &h in o.size.hidden() {
            head.push(if float {
                float_dense(d, h)
            } else {
                binary_dense(d, h, o.activation)
            });
            d = h;
        }
        head.push(LayerSpec {
            kind: if float { LayerKind::Dense } else { LayerKind::BinaryDense },
            in_dim: d,
            out_dim: o.classes,
            flags: LayerFlags {
                binary_inputs: !float,
                activation: Activation::None,
                ..LayerFlags::default()
            },
            rescale: RescaleKind::None,
            bn_in: !float,
            bn_out: false,
            bias: true,
        });
        ModelSpec {
            variant: o.variant,
            stage: if float { Stage::Real } else { o.stage },
            in_dim: 3,
            classes: o.classes,
            k: o.k,
            points: o.points,
            dropout: 0.5,
            global_balance: o.global_balance,
            convs,
            embed,
            head,
        }
    }

    pub fn layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.convs.iter().chain(std::iter::once(&self.embed)).chain(&self.head)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Spec(m));
        if self.convs.is_empty() {
            return err("at least one graph layer is required".into());
        }
        if self.head.is_empty() {
            return err("a classifier head is required".into());
        }
        if self.k == 0 || self.k >= self.points {
            return err(format!("k = {} needs 1 <= k < points = {}", self.k, self.points));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        let mut d = self.in_dim;
        let mut prev_binary = false;
        for (l, c) in self.convs.iter().enumerate() {
            if !c.kind.is_graph_conv() {
                return err(format!("layer {l} is not a graph layer"));
            }
            if c.in_dim != d {
                return err(format!("graph layer {l} expects width {}, previous produces {d}", c.in_dim));
            }
            if c.kind.edge_kind() == Some(EdgeKind::Xor) && !prev_binary {
                return err(format!("XorEdgeConv layer {l} must follow a binary-feature layer"));
            }
            if let RescaleKind::Rank1 { height, width } = c.rescale {
                if height != self.points || width != self.k {
                    return err(format!("rank-1 rescale of layer {l} must be {} x {}", self.points, self.k));
                }
            }
            self.check_flags(c, l)?;
            prev_binary = c.flags.binary_outputs;
            d = c.out_dim;
        }
        let cat: usize = self.convs.iter().map(|c| c.out_dim).sum();
        if self.embed.in_dim != cat || self.embed.kind.is_graph_conv() {
            return err(format!("embedding must be dense over {cat} concatenated features"));
        }
        let mut d = 2 * self.embed.out_dim;
        for (l, h) in self.head.iter().enumerate() {
            if h.kind.is_graph_conv() || h.in_dim != d {
                return err(format!("head layer {l} must be dense over {d} inputs"));
            }
            if matches!(h.rescale, RescaleKind::Rank1 { .. }) {
                return err(format!("head layer {l} cannot use rank-1 rescaling"));
            }
            d = h.out_dim;
        }
        let last = self.head.last().expect("non-empty");
        if last.out_dim != self.classes || last.flags.activation != Activation::None || last.flags.binary_outputs {
            return err("the final layer must map to class logits without activation".into());
        }
        if self.classes < 2 {
            return err("at least two classes are required".into());
        }
        Ok(())
    }

    fn check_flags(&self, c: &LayerSpec, l: usize) -> Result<()> {
        let f = &c.flags;
        let ok = match c.kind {
            LayerKind::EdgeConv | LayerKind::Sage | LayerKind::Dense => {
                !f.binary_weights && !f.binary_inputs && !f.binary_outputs
            }
            LayerKind::BinEdgeConv | LayerKind::BinSage => f.binary_weights && f.binary_inputs,
            LayerKind::XorEdgeConvBf1 => {
                f.binary_weights && f.binary_inputs && f.binary_outputs && f.bn_placement == BnPlacement::PostAggregation
            }
            LayerKind::XorEdgeConvBf2 => {
                f.binary_weights && f.binary_inputs && f.binary_outputs && f.bn_placement == BnPlacement::PreAggregation
            }
            LayerKind::BinaryDense => f.binary_inputs,
        };
        if !ok {
            return Err(Error::Spec(format!("layer {l} flags do not fit a {:?} layer", c.kind)));
        }
        if c.kind.edge_kind() == Some(EdgeKind::Xor) && c.bn_in {
            return Err(Error::Spec(format!("XorEdgeConv layer {l} cannot normalize its binary input")));
        }
        Ok(())
    }

    pub fn quantization(&self, layer: &LayerSpec) -> Quantization {
        self.stage.quantization(&layer.flags)
    }
}

fn float_dense(i: usize, o: usize) -> LayerSpec {
    LayerSpec {
        kind: LayerKind::Dense,
        in_dim: i,
        out_dim: o,
        flags: LayerFlags::default(),
        rescale: RescaleKind::None,
        bn_in: false,
        bn_out: true,
        bias: false,
    }
}

fn binary_dense(i: usize, o: usize, act: Activation) -> LayerSpec {
    LayerSpec {
        kind: LayerKind::BinaryDense,
        in_dim: i,
        out_dim: o,
        flags: LayerFlags {
            binary_weights: true,
            binary_inputs: true,
            activation: act,
            ..LayerFlags::default()
        },
        rescale: RescaleKind::ChannelWise,
        bn_in: true,
        bn_out: false,
        bias: false,
    }
}
