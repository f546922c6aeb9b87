//! Model file layout, all integers little-endian:
//!
//! ```text
//! "BGNN" | u16 version | u8 kind | u8 reserved | u64 payload length | payload | u32 CRC32(payload)
//! ```
//!
//! The payload holds the model description followed by every layer's
//! tensors in canonical order, each as `u8 tag | u64 count | data`:
//! tag 0 is `count` little-endian `f32`, tag 1 is `count` sign bits packed
//! LSB-first into `ceil(count / 64)` `u64` words (bit set = +1), tag 2 is
//! `count` `f64`. Deployment files store the weights of sign-quantized
//! layers with tag 1 and every other tensor with tag 0. Checkpoints store
//! everything with tag 2 and append the optimizer state.

use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::bitcore::BitMatrix;
use crate::error::{Error, Result};
use crate::graph::KnnMetric;
use crate::model::{LayerKind, LayerSpec, Model, ModelSpec, RescaleKind, Stage, Variant};
use crate::ops::{Activation, BalanceMode, BnPlacement, LayerFlags, Quantizer, TensorRole};
use crate::training::TrainState;

pub const MAGIC: [u8; 4] = *b"BGNN";
pub const FORMAT_VERSION: u16 = 1;
const HEADER_LEN: usize = 16;

const TAG_F32: u8 = 0;
const TAG_SIGNS: u8 = 1;
const TAG_F64: u8 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FileKind {
    /// Deployment model: signs only for binarized weights.
    Model,
    /// Training checkpoint: exact latent weights and optimizer state.
    Checkpoint,
}

impl FileKind {
    fn code(self) -> u8 {
        match self {
            FileKind::Model => 0,
            FileKind::Checkpoint => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(FileKind::Model),
            1 => Ok(FileKind::Checkpoint),
            _ => Err(Error::Format(format!("unknown file kind {c}"))),
        }
    }
}

/// Byte totals of a deployment file, by tensor encoding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SizeBreakdown {
    pub total_bytes: usize,
    /// Number of weights stored as single bits.
    pub sign_bits: usize,
    pub real_values: usize,
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bool(&mut self, v: bool) {
        self.u8(v as u8);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("size does not fit in memory".into()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn bool(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(Error::Format(format!("invalid boolean byte {b}"))),
        }
    }
    /// A count of items of `size` bytes each, checked against what is left.
    fn count(&mut self, size: usize) -> Result<usize> {
        let n = self.usize()?;
        if n.saturating_mul(size) > self.buf.len() - self.pos {
            return Err(Error::Format(format!("count {n} exceeds the remaining payload")));
        }
        Ok(n)
    }
    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn enum_err(what: &str, c: u8) -> Error {
    Error::Format(format!("unknown {what} code {c}"))
}

fn balance_code(b: Option<BalanceMode>) -> u8 {
    match b {
        None => 0,
        Some(BalanceMode::Mean) => 1,
        Some(BalanceMode::Median) => 2,
    }
}

fn balance_from(c: u8) -> Result<Option<BalanceMode>> {
    match c {
        0 => Ok(None),
        1 => Ok(Some(BalanceMode::Mean)),
        2 => Ok(Some(BalanceMode::Median)),
        _ => Err(enum_err("balance", c)),
    }
}

fn write_layer_spec(w: &mut Writer, l: &LayerSpec) {
    w.u8(l.kind.code());
    w.usize(l.in_dim);
    w.usize(l.out_dim);
    let f = &l.flags;
    w.bool(f.binary_weights);
    w.bool(f.binary_inputs);
    w.bool(f.binary_outputs);
    w.u8(match f.bn_placement {
        BnPlacement::PreAggregation => 0,
        BnPlacement::PostAggregation => 1,
    });
    w.u8(match f.activation {
        Activation::PRelu => 0,
        Activation::Relu => 1,
        Activation::None => 2,
    });
    w.u8(balance_code(f.edge_balance));
    w.u8(match f.knn_metric {
        KnnMetric::L2 => 0,
        KnnMetric::HammingMatmul => 1,
    });
    match l.rescale {
        RescaleKind::None => w.u8(0),
        RescaleKind::ChannelWise => w.u8(1),
        RescaleKind::Rank1 { height, width } => {
            w.u8(2);
            w.usize(height);
            w.usize(width);
        }
    }
    w.bool(l.bn_in);
    w.bool(l.bn_out);
    w.bool(l.bias);
}

fn read_layer_spec(r: &mut Reader<'_>) -> Result<LayerSpec> {
    let c = r.u8()?;
    let kind = LayerKind::from_code(c).ok_or_else(|| enum_err("layer kind", c))?;
    let in_dim = r.usize()?;
    let out_dim = r.usize()?;
    let binary_weights = r.bool()?;
    let binary_inputs = r.bool()?;
    let binary_outputs = r.bool()?;
    let bn_placement = match r.u8()? {
        0 => BnPlacement::PreAggregation,
        1 => BnPlacement::PostAggregation,
        c => return Err(enum_err("batch norm placement", c)),
    };
    let activation = match r.u8()? {
        0 => Activation::PRelu,
        1 => Activation::Relu,
        2 => Activation::None,
        c => return Err(enum_err("activation", c)),
    };
    let edge_balance = balance_from(r.u8()?)?;
    let knn_metric = match r.u8()? {
        0 => KnnMetric::L2,
        1 => KnnMetric::HammingMatmul,
        c => return Err(enum_err("metric", c)),
    };
    let rescale = match r.u8()? {
        0 => RescaleKind::None,
        1 => RescaleKind::ChannelWise,
        2 => RescaleKind::Rank1 {
            height: r.usize()?,
            width: r.usize()?,
        },
        c => return Err(enum_err("rescale", c)),
    };
    Ok(LayerSpec {
        kind,
        in_dim,
        out_dim,
        flags: LayerFlags {
            binary_weights,
            binary_inputs,
            binary_outputs,
            bn_placement,
            activation,
            edge_balance,
            knn_metric,
        },
        rescale,
        bn_in: r.bool()?,
        bn_out: r.bool()?,
        bias: r.bool()?,
    })
}

fn write_spec(w: &mut Writer, s: &ModelSpec) {
    w.u8(match s.variant {
        Variant::Float => 0,
        Variant::Rf => 1,
        Variant::Bf1 => 2,
        Variant::Bf2 => 3,
    });
    w.u8(s.stage.code());
    w.usize(s.in_dim);
    w.usize(s.classes);
    w.usize(s.k);
    w.usize(s.points);
    w.f64(s.dropout);
    w.u8(balance_code(s.global_balance));
    w.usize(s.convs.len());
    s.convs.iter().for_each(|l| write_layer_spec(w, l));
    write_layer_spec(w, &s.embed);
    w.usize(s.head.len());
    s.head.iter().for_each(|l| write_layer_spec(w, l));
}

fn read_spec(r: &mut Reader<'_>) -> Result<ModelSpec> {
    let variant = match r.u8()? {
        0 => Variant::Float,
        1 => Variant::Rf,
        2 => Variant::Bf1,
        3 => Variant::Bf2,
        c => return Err(enum_err("variant", c)),
    };
    let c = r.u8()?;
    let stage = Stage::from_code(c).ok_or_else(|| enum_err("stage", c))?;
    let in_dim = r.usize()?;
    let classes = r.usize()?;
    let k = r.usize()?;
    let points = r.usize()?;
    let dropout = r.f64()?;
    let global_balance = balance_from(r.u8()?)?;
    let n = r.count(1)?;
    let convs = (0..n).map(|_| read_layer_spec(r)).collect::<Result<_>>()?;
    let embed = read_layer_spec(r)?;
    let n = r.count(1)?;
    let head = (0..n).map(|_| read_layer_spec(r)).collect::<Result<_>>()?;
    let spec = ModelSpec {
        variant,
        stage,
        in_dim,
        classes,
        k,
        points,
        dropout,
        global_balance,
        convs,
        embed,
        head,
    };
    spec.validate().map_err(|e| Error::Format(format!("stored model description is invalid: {e}")))?;
    Ok(spec)
}

fn write_tensors(w: &mut Writer, model: &Model, kind: FileKind, sizes: &mut SizeBreakdown) {
    for p in model.layers() {
        let binary = p.quant.weights == Quantizer::Sign;
        for t in p.tensors() {
            if kind == FileKind::Checkpoint {
                w.u8(TAG_F64);
                w.usize(t.data.len());
                t.data.iter().for_each(|&v| w.f64(v));
            } else if binary && t.role == TensorRole::Weight {
                w.u8(TAG_SIGNS);
                w.usize(t.data.len());
                let bits = BitMatrix::pack_signs(t.data, 1, t.data.len());
                bits.words().iter().for_each(|&x| w.u64(x));
                sizes.sign_bits += t.data.len();
            } else {
                w.u8(TAG_F32);
                w.usize(t.data.len());
                t.data.iter().for_each(|&v| w.0.extend_from_slice(&(v as f32).to_le_bytes()));
                sizes.real_values += t.data.len();
            }
        }
    }
}

fn read_tensors(r: &mut Reader<'_>, model: &mut Model, kind: FileKind) -> Result<()> {
    for (l, p) in model.layers_mut().enumerate() {
        let binary = p.quant.weights == Quantizer::Sign;
        for t in p.tensors_mut() {
            let tag = r.u8()?;
            let n = r.usize()?;
            if n != t.data.len() {
                return Err(Error::Format(format!(
                    "layer {l} {:?}: {n} values stored, {} expected",
                    t.role,
                    t.data.len()
                )));
            }
            let expected = match kind {
                FileKind::Checkpoint => TAG_F64,
                FileKind::Model if binary && t.role == TensorRole::Weight => TAG_SIGNS,
                FileKind::Model => TAG_F32,
            };
            if tag != expected {
                return Err(Error::Format(format!("layer {l} {:?}: tensor tag {tag}, expected {expected}", t.role)));
            }
            match tag {
                TAG_F64 => {
                    for v in t.data.iter_mut() {
                        *v = r.f64()?;
                    }
                }
                TAG_F32 => {
                    for v in t.data.iter_mut() {
                        *v = f32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes")) as f64;
                    }
                }
                _ => {
                    let words = (0..n.div_ceil(64)).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
                    let bits = BitMatrix::from_words(1, n, words)?;
                    for (j, v) in t.data.iter_mut().enumerate() {
                        *v = bits.get(0, j) as f64;
                    }
                }
            }
        }
    }
    Ok(())
}

fn frame(kind: FileKind, payload: Vec<u8>) -> Vec<u8> {
    let mut out = Vec::with_capacity(payload.len() + HEADER_LEN + 4);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(kind.code());
    out.push(0);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    let crc = crc32fast::hash(&payload);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Checks magic, version, length and checksum; returns the payload.
pub fn unframe(bytes: &[u8]) -> Result<(FileKind, &[u8])> {
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        let mut m = [0u8; 4];
        let n = bytes.len().min(4);
        m[..n].copy_from_slice(&bytes[..n]);
        return Err(Error::BadMagic(m));
    }
    if bytes.len() < HEADER_LEN + 4 {
        return Err(Error::Format("file shorter than its header".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(Error::BadVersion(version));
    }
    let kind = FileKind::from_code(bytes[6])?;
    if bytes[7] != 0 {
        return Err(Error::Format("reserved header byte is not zero".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    if len != (bytes.len() - HEADER_LEN - 4) as u64 {
        return Err(Error::Format(format!(
            "payload length {len} does not match the file size {}",
            bytes.len()
        )));
    }
    let payload = &bytes[HEADER_LEN..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    Ok((kind, payload))
}

fn encode_model(model: &Model) -> (Vec<u8>, SizeBreakdown) {
    let mut w = Writer::default();
    let mut sizes = SizeBreakdown::default();
    write_spec(&mut w, model.spec());
    write_tensors(&mut w, model, FileKind::Model, &mut sizes);
    let bytes = frame(FileKind::Model, w.0);
    sizes.total_bytes = bytes.len();
    (bytes, sizes)
}

/// Deployment file. Real values are narrowed to `f32` and sign-quantized
/// weights keep only their signs, so the loaded model equals `model` after
/// [`Model::round_to_f32`] and replacing binarized latents by ±1.
pub fn save_model(model: &Model) -> Vec<u8> {
    encode_model(model).0
}

pub fn model_size(model: &Model) -> SizeBreakdown {
    encode_model(model).1
}

fn decode_model(r: &mut Reader<'_>, kind: FileKind) -> Result<Model> {
    let spec = read_spec(r)?;
    let mut model = Model::new(spec, 0)?;
    read_tensors(r, &mut model, kind)?;
    // Re-validate the filled-in parameters.
    Model::from_parts(
        model.spec().clone(),
        model.convs().to_vec(),
        model.embed().clone(),
        model.head().to_vec(),
    )
    .map_err(|e| Error::Format(format!("stored parameters are invalid: {e}")))
}

/// Loads a deployment file or the model part of a checkpoint.
pub fn load_model(bytes: &[u8]) -> Result<Model> {
    let (kind, payload) = unframe(bytes)?;
    let mut r = Reader { buf: payload, pos: 0 };
    let model = decode_model(&mut r, kind)?;
    if kind == FileKind::Model {
        r.done()?;
    }
    Ok(model)
}

/// Exact training state: latent weights in full precision, Adam moments,
/// step and epoch counters and the RNG position.
pub fn save_checkpoint(model: &Model, state: &TrainState) -> Result<Vec<u8>> {
    state.check(model)?;
    let mut w = Writer::default();
    write_spec(&mut w, model.spec());
    write_tensors(&mut w, model, FileKind::Checkpoint, &mut SizeBreakdown::default());
    w.usize(state.m.len());
    for (m, v) in state.m.iter().zip(&state.v) {
        w.usize(m.len());
        m.iter().chain(v).for_each(|&x| w.f64(x));
    }
    w.u64(state.step);
    w.usize(state.epoch);
    w.0.extend_from_slice(&state.rng.get_seed());
    w.u64(state.rng.get_stream());
    w.0.extend_from_slice(&state.rng.get_word_pos().to_le_bytes());
    Ok(frame(FileKind::Checkpoint, w.0))
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<(Model, TrainState)> {
    let (kind, payload) = unframe(bytes)?;
    if kind != FileKind::Checkpoint {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let mut r = Reader { buf: payload, pos: 0 };
    let model = decode_model(&mut r, kind)?;
    let n = r.count(8)?;
    let (mut m, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        let len = r.count(16)?;
        m.push((0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?);
        v.push((0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?);
    }
    let step = r.u64()?;
    let epoch = r.usize()?;
    let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let stream = r.u64()?;
    let pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
    r.done()?;
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(pos);
    let state = TrainState { m, v, step, epoch, rng };
    state.check(&model)?;
    Ok((model, state))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ArchSize, DgcnnOptions};

    fn model(v: Variant) -> Model {
        Model::new(ModelSpec::dgcnn(&DgcnnOptions::new(v, ArchSize::Mini, 3, 16)), 1).unwrap()
    }

    #[test]
    fn header_fields() {
        let b = save_model(&model(Variant::Bf1));
        assert_eq!(&b[..4], b"BGNN");
        assert_eq!(u16::from_le_bytes([b[4], b[5]]), 1);
        assert_eq!(b[6], 0);
        assert_eq!(u64::from_le_bytes(b[8..16].try_into().unwrap()) as usize, b.len() - 20);
    }

    #[test]
    fn distinct_errors() {
        let good = save_model(&model(Variant::Rf));
        let mut b = good.clone();
        b[0] = b'X';
        assert!(matches!(load_model(&b), Err(Error::BadMagic(_))));
        let mut b = good.clone();
        b[4] = 9;
        assert!(matches!(load_model(&b), Err(Error::BadVersion(9))));
        let mut b = good.clone();
        b[40] ^= 1;
        assert!(matches!(load_model(&b), Err(Error::Checksum { .. })));
        assert!(matches!(load_model(&good[..good.len() - 1]), Err(Error::Format(_))));
        assert!(matches!(load_model(b"BG"), Err(Error::BadMagic(_))));
    }

    #[test]
    fn sign_bits_equal_binary_parameter_count() {
        let m = model(Variant::Bf2);
        let expected: usize = m
            .layers()
            .filter(|p| p.quant.weights == Quantizer::Sign)
            .map(|p| p.latent_weights.len())
            .sum();
        assert!(expected > 0);
        assert_eq!(model_size(&m).sign_bits, expected);
        assert_eq!(model_size(&model(Variant::Float)).sign_bits, 0);
    }
}
