//! Layer-specific activation compression.
//!
//! Four schemes share one container type, [`CompressedTensor`]:
//!
//! * symmetric 4-bit group quantization (flat groups or one group per channel),
//! * asymmetric 4-bit group quantization with a per-group offset,
//! * outlier-separated compression: channels whose absolute sum is a Z-score
//!   outlier are stored raw as f16, the rest is symmetric-quantized in place,
//! * dropout-mask bit packing (lossless, 8 flags per byte).
//!
//! Activations are FP16 tensors laid out row-major (row = token, column =
//! channel); sizes and ratios are accounted against 2 bytes per element.

mod bitmask;
mod format;
mod measure;
mod outlier;
mod quant;

use half::f16;
use thiserror::Error;

use crate::profile::LayerKind;

pub use bitmask::{pack_bitmask, unpack_bitmask};
pub use format::HEADER_BYTES;
pub use measure::{measure_codec, CodecMeasurement};
pub use outlier::{channel_abs_sums, compress_outlier_separated, detect_outlier_channels};
pub use quant::{quantize_asymmetric, quantize_per_channel, quantize_symmetric};

pub const DEFAULT_GROUP_SIZE: u32 = 128;
pub const DEFAULT_Z_THRESHOLD: f64 = 3.0;
pub const CODE_MIN: i8 = -8;
pub const CODE_MAX: i8 = 7;
/// Bytes per element of the uncompressed FP16 activation.
pub const ACTIVATION_ELEMENT_BYTES: usize = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("non-finite input value at element {index}")]
    NonFiniteInput { index: usize },
    #[error("invalid shape {rows}x{cols} for {len} values")]
    InvalidShape { rows: usize, cols: usize, len: usize },
    #[error("group size must be positive")]
    InvalidGroupSize,
    #[error("{flagged} of {cols} channels flagged as outliers; outlier separation is not applicable")]
    TooManyOutliers { flagged: usize, cols: usize },
    #[error("mask byte {index} is {value}, expected 0 or 1")]
    NonBinaryMask { index: usize, value: u8 },
    #[error("corrupt payload: {0}")]
    CorruptPayload(String),
}

pub(crate) fn corrupt(msg: impl Into<String>) -> CodecError {
    CodecError::CorruptPayload(msg.into())
}

/// Dense row-major activation tensor with finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f32>,
}

impl ActivationMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f32>) -> Result<Self, CodecError> {
        if rows == 0 || cols == 0 || rows.checked_mul(cols) != Some(values.len()) {
            return Err(CodecError::InvalidShape { rows, cols, len: values.len() });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(CodecError::NonFiniteInput { index });
        }
        Ok(Self { rows, cols, values })
    }

    pub fn from_f16(rows: usize, cols: usize, values: &[f16]) -> Result<Self, CodecError> {
        Self::new(rows, cols, values.iter().map(|v| v.to_f32()).collect())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0);
        Self { rows, cols, values: vec![0.0; rows * cols] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.cols + col]
    }

    pub fn column(&self, col: usize) -> impl Iterator<Item = f32> + '_ {
        self.values.iter().skip(col).step_by(self.cols).copied()
    }

    /// Size of the uncompressed FP16 tensor.
    pub fn original_bytes(&self) -> usize {
        self.values.len() * ACTIVATION_ELEMENT_BYTES
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scheme {
    SymmetricGroup,
    AsymmetricGroup,
    OutlierSeparated,
    BitMask,
}

impl Scheme {
    pub(crate) fn tag(self) -> u8 {
        match self {
            Scheme::SymmetricGroup => 0,
            Scheme::AsymmetricGroup => 1,
            Scheme::OutlierSeparated => 2,
            Scheme::BitMask => 3,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => Scheme::SymmetricGroup,
            1 => Scheme::AsymmetricGroup,
            2 => Scheme::OutlierSeparated,
            3 => Scheme::BitMask,
            _ => return None,
        })
    }
}

/// How elements are assigned to quantization groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GroupLayout {
    /// Consecutive runs of the row-major flattened tensor; the last may be partial.
    Flat(u32),
    /// One group per column, visited by strided access (no transpose).
    PerChannel,
}

impl GroupLayout {
    pub fn group_count(self, rows: usize, cols: usize) -> usize {
        match self {
            GroupLayout::Flat(g) => (rows * cols).div_ceil(g as usize),
            GroupLayout::PerChannel => cols,
        }
    }

    /// Group index of the element at flat position `index`.
    pub fn group_of(self, index: usize, cols: usize) -> usize {
        match self {
            GroupLayout::Flat(g) => index / g as usize,
            GroupLayout::PerChannel => index % cols,
        }
    }
}

/// Per-group quantization parameters. Codes live in the tensor's shared
/// nibble payload, in element order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantGroup {
    pub scale: f32,
    /// Present only for asymmetric groups.
    pub offset: Option<f32>,
}

/// Raw f16 copies of outlier channels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OutlierPack {
    pub channel_indices: Vec<u32>,
    /// `rows` values per index, one column after another.
    pub channel_values: Vec<f16>,
}

impl OutlierPack {
    pub fn len(&self) -> usize {
        self.channel_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channel_indices.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedTensor {
    pub scheme: Scheme,
    pub rows: usize,
    pub cols: usize,
    pub layout: GroupLayout,
    pub groups: Vec<QuantGroup>,
    /// Two 4-bit two's-complement codes per byte (earlier element in the low
    /// nibble), or for [`Scheme::BitMask`] eight flags per byte, LSB first.
    pub packed: Vec<u8>,
    pub outliers: Option<OutlierPack>,
}

impl CompressedTensor {
    pub fn element_count(&self) -> usize {
        self.rows * self.cols
    }

    /// Bytes of the uncompressed input: 2 per activation, 1 per mask flag.
    pub fn original_bytes(&self) -> usize {
        match self.scheme {
            Scheme::BitMask => self.element_count(),
            _ => self.element_count() * ACTIVATION_ELEMENT_BYTES,
        }
    }

    /// Scales, offsets, packed codes and outlier channels; excludes the fixed header.
    pub fn payload_bytes(&self) -> usize {
        let per_group = match self.scheme {
            Scheme::AsymmetricGroup => 8,
            _ => 4,
        };
        let outliers = self.outliers.as_ref().map_or(0, |o| o.channel_indices.len() * 4 + o.channel_values.len() * 2);
        self.groups.len() * per_group + self.packed.len() + outliers
    }

    /// Length of the binary encoding.
    pub fn compressed_size_bytes(&self) -> usize {
        HEADER_BYTES + self.payload_bytes()
    }

    /// Original size over payload size.
    pub fn ratio(&self) -> f64 {
        self.original_bytes() as f64 / self.payload_bytes() as f64
    }

    pub fn outlier_count(&self) -> usize {
        self.outliers.as_ref().map_or(0, OutlierPack::len)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        format::encode(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        format::decode(bytes)
    }

    /// Unpacked 4-bit codes in element order.
    pub fn codes(&self) -> Result<Vec<i8>, CodecError> {
        if self.scheme == Scheme::BitMask {
            return Err(corrupt("bit masks carry no quantization codes"));
        }
        quant::unpack_nibbles(&self.packed, self.element_count())
    }
}

/// Closed-form payload size (header excluded) for a scheme applied to a
/// `rows`×`cols` tensor with `outliers` raw channels.
pub fn payload_size(scheme: Scheme, layout: GroupLayout, rows: usize, cols: usize, outliers: usize) -> usize {
    let n = rows * cols;
    match scheme {
        Scheme::BitMask => n.div_ceil(8),
        Scheme::SymmetricGroup => 4 * layout.group_count(rows, cols) + n.div_ceil(2),
        Scheme::AsymmetricGroup => 8 * layout.group_count(rows, cols) + n.div_ceil(2),
        Scheme::OutlierSeparated => {
            4 * layout.group_count(rows, cols) + n.div_ceil(2) + 4 * outliers + 2 * rows * outliers
        }
    }
}

/// Compression rate (compressed / original) of an outlier-separated tensor
/// with `outliers` raw channels.
pub fn outlier_separated_rate(rows: usize, cols: usize, group_size: u32, outliers: usize) -> f64 {
    let payload = payload_size(Scheme::OutlierSeparated, GroupLayout::Flat(group_size), rows, cols, outliers);
    payload as f64 / (rows * cols * ACTIVATION_ELEMENT_BYTES) as f64
}

/// A scheme together with its parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CodecScheme {
    Symmetric { layout: GroupLayout },
    Asymmetric { group_size: u32 },
    OutlierSeparated { z_threshold: f64, group_size: u32 },
    BitMask,
}

impl CodecScheme {
    pub fn scheme(&self) -> Scheme {
        match self {
            CodecScheme::Symmetric { .. } => Scheme::SymmetricGroup,
            CodecScheme::Asymmetric { .. } => Scheme::AsymmetricGroup,
            CodecScheme::OutlierSeparated { .. } => Scheme::OutlierSeparated,
            CodecScheme::BitMask => Scheme::BitMask,
        }
    }
}

/// Default compression scheme for each layer kind.
pub fn scheme_for(kind: LayerKind) -> CodecScheme {
    match kind {
        LayerKind::Linear | LayerKind::LayerNorm | LayerKind::Gelu => {
            CodecScheme::OutlierSeparated { z_threshold: DEFAULT_Z_THRESHOLD, group_size: DEFAULT_GROUP_SIZE }
        }
        LayerKind::QkvMatrix => CodecScheme::Symmetric { layout: GroupLayout::PerChannel },
        LayerKind::Softmax | LayerKind::Score => CodecScheme::Asymmetric { group_size: DEFAULT_GROUP_SIZE },
        LayerKind::DropoutMask => CodecScheme::BitMask,
        LayerKind::Other => CodecScheme::Symmetric { layout: GroupLayout::Flat(DEFAULT_GROUP_SIZE) },
    }
}

/// Mask bytes from a 0/1-valued matrix.
pub fn mask_from_matrix(x: &ActivationMatrix) -> Result<Vec<u8>, CodecError> {
    x.values()
        .iter()
        .enumerate()
        .map(|(index, &v)| {
            if v == 0.0 {
                Ok(0)
            } else if v == 1.0 {
                Ok(1)
            } else {
                Err(CodecError::NonBinaryMask { index, value: v.clamp(0.0, 255.0) as u8 })
            }
        })
        .collect()
}

/// Compresses `x` with the given scheme.
pub fn compress(x: &ActivationMatrix, scheme: &CodecScheme) -> Result<CompressedTensor, CodecError> {
    match *scheme {
        CodecScheme::Symmetric { layout: GroupLayout::Flat(g) } => quantize_symmetric(x, g),
        CodecScheme::Symmetric { layout: GroupLayout::PerChannel } => Ok(quantize_per_channel(x)),
        CodecScheme::Asymmetric { group_size } => quantize_asymmetric(x, group_size),
        CodecScheme::OutlierSeparated { z_threshold, group_size } => {
            compress_outlier_separated(x, z_threshold, group_size)
        }
        CodecScheme::BitMask => {
            let mut ct = pack_bitmask(&mask_from_matrix(x)?)?;
            ct.rows = x.rows();
            ct.cols = x.cols();
            Ok(ct)
        }
    }
}

/// Reconstructs every element at full precision. Values are exact
/// `code * scale + offset` products (or the raw f16 outlier values).
pub fn dequantize_exact(ct: &CompressedTensor) -> Result<Vec<f64>, CodecError> {
    let n = ct.element_count();
    if ct.scheme == Scheme::BitMask {
        return Ok(unpack_bitmask(ct)?.into_iter().map(f64::from).collect());
    }
    format::check_consistency(ct)?;
    let codes = quant::unpack_nibbles(&ct.packed, n)?;
    let mut out: Vec<f64> = codes
        .iter()
        .enumerate()
        .map(|(i, &code)| {
            let group = &ct.groups[ct.layout.group_of(i, ct.cols)];
            code as f64 * group.scale as f64 + group.offset.map_or(0.0, f64::from)
        })
        .collect();
    if let Some(pack) = &ct.outliers {
        for (k, &col) in pack.channel_indices.iter().enumerate() {
            let column = &pack.channel_values[k * ct.rows..(k + 1) * ct.rows];
            for (row, v) in column.iter().enumerate() {
                out[row * ct.cols + col as usize] = v.to_f64();
            }
        }
    }
    Ok(out)
}

/// Inverse of the compression schemes; values are rounded once to f32.
pub fn dequantize(ct: &CompressedTensor) -> Result<ActivationMatrix, CodecError> {
    let values = dequantize_exact(ct)?.into_iter().map(|v| v as f32).collect();
    ActivationMatrix::new(ct.rows, ct.cols, values)
}
