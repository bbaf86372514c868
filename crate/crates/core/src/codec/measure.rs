use std::time::Instant;

use super::{compress, dequantize, ActivationMatrix, CodecError, CodecScheme};

/// Timing and size of one compress/decompress cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct CodecMeasurement {
    pub compress_ms: f64,
    pub decompress_ms: f64,
    pub original_bytes: usize,
    pub payload_bytes: usize,
    pub outlier_channels: usize,
    /// original / payload
    pub ratio: f64,
}

impl CodecMeasurement {
    /// Value for an operator profile's `compression_rate` field.
    pub fn compression_rate(&self) -> f64 {
        self.payload_bytes as f64 / self.original_bytes as f64
    }
}

/// Wall-clock timing of one compression and one decompression of `x`.
pub fn measure_codec(x: &ActivationMatrix, scheme: &CodecScheme) -> Result<CodecMeasurement, CodecError> {
    let start = Instant::now();
    let ct = compress(x, scheme)?;
    let compress_ms = start.elapsed().as_secs_f64() * 1e3;

    let start = Instant::now();
    let restored = dequantize(&ct)?;
    let decompress_ms = start.elapsed().as_secs_f64() * 1e3;
    debug_assert_eq!(restored.len(), x.len());

    Ok(CodecMeasurement {
        compress_ms,
        decompress_ms,
        original_bytes: ct.original_bytes(),
        payload_bytes: ct.payload_bytes(),
        outlier_channels: ct.outlier_count(),
        ratio: ct.ratio(),
    })
}
