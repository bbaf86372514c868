use half::f16;

use super::quant::quantize_with;
use super::{ActivationMatrix, CodecError, CompressedTensor, GroupLayout, OutlierPack, Scheme};

/// Sum of absolute values of each column.
pub fn channel_abs_sums(x: &ActivationMatrix) -> Vec<f64> {
    let cols = x.cols();
    let mut sums = vec![0.0f64; cols];
    for row in x.values().chunks_exact(cols) {
        for (s, v) in sums.iter_mut().zip(row) {
            *s += v.abs() as f64;
        }
    }
    sums
}

/// Channels whose absolute-sum Z-score `(S_i - mean) / std` exceeds
/// `z_threshold`. The standard deviation is the population one over
/// channels; identical sums (zero deviation) yield no outliers.
pub fn detect_outlier_channels(x: &ActivationMatrix, z_threshold: f64) -> Vec<usize> {
    let sums = channel_abs_sums(x);
    if sums.iter().all(|&s| s == sums[0]) {
        return Vec::new();
    }
    let n = sums.len() as f64;
    let mean = sums.iter().sum::<f64>() / n;
    let variance = sums.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    let std = variance.sqrt();
    if std == 0.0 {
        return Vec::new();
    }
    sums.iter().enumerate().filter(|(_, &s)| (s - mean) / std > z_threshold).map(|(i, _)| i).collect()
}

/// Copies outlier channels out raw (f16), zeroes them in a working copy and
/// symmetric-quantizes the copy in its original row-major layout.
pub fn compress_outlier_separated(
    x: &ActivationMatrix,
    z_threshold: f64,
    group_size: u32,
) -> Result<CompressedTensor, CodecError> {
    if group_size == 0 {
        return Err(CodecError::InvalidGroupSize);
    }
    let (rows, cols) = (x.rows(), x.cols());
    let flagged = detect_outlier_channels(x, z_threshold);
    if flagged.len() * 2 > cols {
        return Err(CodecError::TooManyOutliers { flagged: flagged.len(), cols });
    }

    let mut pack = OutlierPack {
        channel_indices: Vec::with_capacity(flagged.len()),
        channel_values: Vec::with_capacity(flagged.len() * rows),
    };
    let mut working = x.values().to_vec();
    for &c in &flagged {
        pack.channel_indices.push(c as u32);
        pack.channel_values.extend(x.column(c).map(f16::from_f32));
        for r in 0..rows {
            working[r * cols + c] = 0.0;
        }
    }

    let layout = GroupLayout::Flat(group_size);
    let (groups, packed) = quantize_with(&working, rows, cols, layout, false);
    Ok(CompressedTensor { scheme: Scheme::OutlierSeparated, rows, cols, layout, groups, packed, outliers: Some(pack) })
}
