//! Operator profiles for one transformer block.
//!
//! A [`ModelProfile`] describes the `N` operators of a single block in chain
//! order, together with the constants that the planner needs: number of
//! identical blocks, static memory (parameters, gradients, optimizer state),
//! the device memory budget and the base FP+BP step time. Profiles are read
//! from JSON files and validated on load; once loaded they are immutable.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Operator role inside a transformer block. Selects the compression scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Linear,
    LayerNorm,
    Gelu,
    QkvMatrix,
    Softmax,
    Score,
    DropoutMask,
    Other,
}

impl LayerKind {
    pub const ALL: [LayerKind; 8] = [
        LayerKind::Linear,
        LayerKind::LayerNorm,
        LayerKind::Gelu,
        LayerKind::QkvMatrix,
        LayerKind::Softmax,
        LayerKind::Score,
        LayerKind::DropoutMask,
        LayerKind::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Linear => "linear",
            LayerKind::LayerNorm => "layer_norm",
            LayerKind::Gelu => "gelu",
            LayerKind::QkvMatrix => "qkv_matrix",
            LayerKind::Softmax => "softmax",
            LayerKind::Score => "score",
            LayerKind::DropoutMask => "dropout_mask",
            LayerKind::Other => "other",
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LayerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LayerKind::ALL.iter().copied().find(|k| k.as_str() == s).ok_or_else(|| format!("unknown layer kind `{s}`"))
    }
}

/// Measured characteristics of one operator's output activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorProfile {
    /// 1-based position in the block.
    pub id: u32,
    pub name: String,
    pub kind: LayerKind,
    /// Activation size at the reference batch.
    pub mem_bytes: u64,
    /// Time to recompute this activation from the previous layer.
    #[serde(rename = "compute_time_ms")]
    pub compute_time: f64,
    #[serde(rename = "compress_time_ms")]
    pub compress_time: f64,
    #[serde(rename = "decompress_time_ms")]
    pub decompress_time: f64,
    /// Compressed size divided by original size.
    pub compression_rate: f64,
}

impl OperatorProfile {
    /// Bytes left resident when the activation is compressed.
    pub fn compressed_bytes(&self) -> u64 {
        let raw = (self.mem_bytes as f64 * self.compression_rate).ceil() as u64;
        raw.min(self.mem_bytes)
    }

    /// Compression plus decompression time.
    pub fn codec_time(&self) -> f64 {
        self.compress_time + self.decompress_time
    }
}

/// The operators of one block plus global memory constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelProfile {
    pub n_layers: u32,
    pub static_mem_bytes: u64,
    pub mem_budget_bytes: u64,
    pub reference_batch: u32,
    #[serde(rename = "base_step_time_ms")]
    pub base_step_time: f64,
    pub operators: Vec<OperatorProfile>,
}

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("failed to read profile {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed profile: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid profile: {0}")]
    Validation(String),
}

fn invalid(msg: impl Into<String>) -> ProfileError {
    ProfileError::Validation(msg.into())
}

fn check_time(op: &OperatorProfile, field: &str, value: f64) -> Result<(), ProfileError> {
    if !value.is_finite() || value < 0.0 {
        return Err(invalid(format!(
            "operator {}: `{field}` must be a finite non-negative number, got {value}",
            op.id
        )));
    }
    Ok(())
}

impl ModelProfile {
    pub fn len(&self) -> usize {
        self.operators.len()
    }

    pub fn is_empty(&self) -> bool {
        self.operators.is_empty()
    }

    /// Checks every structural and numeric invariant of the profile.
    pub fn validate(&self) -> Result<(), ProfileError> {
        if self.operators.is_empty() {
            return Err(invalid("`operators` must not be empty"));
        }
        if self.n_layers == 0 {
            return Err(invalid("`n_layers` must be positive"));
        }
        if self.reference_batch == 0 {
            return Err(invalid("`reference_batch` must be positive"));
        }
        if !self.base_step_time.is_finite() || self.base_step_time < 0.0 {
            return Err(invalid(format!(
                "`base_step_time_ms` must be a finite non-negative number, got {}",
                self.base_step_time
            )));
        }
        if self.mem_budget_bytes <= self.static_mem_bytes {
            return Err(invalid(format!(
                "`mem_budget_bytes` ({}) must exceed `static_mem_bytes` ({})",
                self.mem_budget_bytes, self.static_mem_bytes
            )));
        }
        for (pos, op) in self.operators.iter().enumerate() {
            let expected = pos as u32 + 1;
            if op.id != expected {
                return Err(invalid(format!(
                    "operator at position {expected}: `id` must be {expected}, got {}",
                    op.id
                )));
            }
            if op.mem_bytes == 0 {
                return Err(invalid(format!("operator {}: `mem_bytes` must be positive", op.id)));
            }
            check_time(op, "compute_time_ms", op.compute_time)?;
            check_time(op, "compress_time_ms", op.compress_time)?;
            check_time(op, "decompress_time_ms", op.decompress_time)?;
            let rate = op.compression_rate;
            if !(rate.is_finite() && rate > 0.0 && rate <= 1.0) {
                return Err(invalid(format!("operator {}: `compression_rate` must lie in (0, 1], got {rate}", op.id)));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, ProfileError> {
        let profile: ModelProfile = serde_json::from_str(text)?;
        profile.validate()?;
        Ok(profile)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("profile serialization cannot fail")
    }

    /// Total activation bytes of one block when everything is retained.
    pub fn block_bytes(&self) -> u64 {
        self.operators.iter().map(|op| op.mem_bytes).sum()
    }

    /// Memory left for activations of all blocks.
    pub fn activation_capacity(&self) -> u64 {
        self.mem_budget_bytes.saturating_sub(self.static_mem_bytes)
    }

    pub fn with_budget(mut self, budget: u64) -> Self {
        self.mem_budget_bytes = budget;
        self
    }
}

/// Reads and validates a profile file.
pub fn load_profile(path: impl AsRef<Path>) -> Result<ModelProfile, ProfileError> {
    let path = path.as_ref();
    let text =
        fs::read_to_string(path).map_err(|source| ProfileError::Io { path: path.display().to_string(), source })?;
    ModelProfile::from_json(&text)
}

pub fn save_profile(profile: &ModelProfile, path: impl AsRef<Path>) -> Result<(), ProfileError> {
    let path = path.as_ref();
    fs::write(path, profile.to_json() + "\n")
        .map_err(|source| ProfileError::Io { path: path.display().to_string(), source })
}

fn scale_bytes(bytes: u64, batch: u32, reference: u32) -> u64 {
    let scaled = (bytes as u128 * batch as u128).div_ceil(reference as u128);
    u64::try_from(scaled).unwrap_or(u64::MAX)
}

/// Rescales per-operator memory and times (and the base step time) linearly
/// from the profile's reference batch to `batch`. Memory rounds up to whole
/// bytes. Static memory and the budget are batch independent.
pub fn scale_profile(profile: &ModelProfile, batch: u32) -> ModelProfile {
    assert!(batch >= 1, "batch must be positive");
    let reference = profile.reference_batch;
    if batch == reference {
        return profile.clone();
    }
    let factor = batch as f64 / reference as f64;
    let operators = profile
        .operators
        .iter()
        .map(|op| OperatorProfile {
            mem_bytes: scale_bytes(op.mem_bytes, batch, reference),
            compute_time: op.compute_time * factor,
            compress_time: op.compress_time * factor,
            decompress_time: op.decompress_time * factor,
            ..op.clone()
        })
        .collect();
    ModelProfile {
        reference_batch: batch,
        base_step_time: profile.base_step_time * factor,
        operators,
        ..profile.clone()
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub const MIB: u64 = 1 << 20;

    fn op(id: u32, kind: LayerKind, mem: u64, recompute: f64, codec: f64, rate: f64) -> OperatorProfile {
        OperatorProfile {
            id,
            name: format!("op{id}"),
            kind,
            mem_bytes: mem,
            compute_time: recompute,
            compress_time: codec / 2.0,
            decompress_time: codec / 2.0,
            compression_rate: rate,
        }
    }

    /// The four tensors of the motivating comparison table, sizes in MiB.
    pub fn table_rows() -> Vec<OperatorProfile> {
        vec![
            op(1, LayerKind::QkvMatrix, 96 * MIB, 0.36, 0.37, 24.0 / 96.0),
            op(2, LayerKind::Gelu, 42 * MIB, 1.02, 0.16, 11.8 / 42.0),
            op(3, LayerKind::Linear, 42 * MIB, 0.58, 0.16, 11.8 / 42.0),
            op(4, LayerKind::Softmax, 21 * MIB / 2, 0.04, 0.04, 2.6 / 10.5),
        ]
    }

    pub fn table_profile() -> ModelProfile {
        ModelProfile {
            n_layers: 1,
            static_mem_bytes: 0,
            mem_budget_bytes: 1 << 40,
            reference_batch: 8,
            base_step_time: 10.0,
            operators: table_rows(),
        }
    }

    #[test]
    fn loads_table_rows() {
        let json = table_profile().to_json();
        let p = ModelProfile::from_json(&json).unwrap();
        assert_eq!(p.len(), 4);
        let sizes: Vec<f64> = p.operators.iter().map(|o| o.mem_bytes as f64 / MIB as f64).collect();
        assert_eq!(sizes, vec![96.0, 42.0, 42.0, 10.5]);
    }

    #[test]
    fn rejects_empty_operator_list() {
        let mut p = table_profile();
        p.operators.clear();
        let err = ModelProfile::from_json(&p.to_json()).unwrap_err();
        assert!(matches!(err, ProfileError::Validation(ref m) if m.contains("operators")), "{err}");
    }

    #[test]
    fn rejects_rate_above_one() {
        let mut p = table_profile();
        p.operators[2].compression_rate = 1.2;
        let err = p.validate().unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("compression_rate") && msg.contains("operator 3"), "{msg}");
    }

    #[test]
    fn rejects_gap_in_ids() {
        let mut p = table_profile();
        p.operators[1].id = 7;
        assert!(p.validate().unwrap_err().to_string().contains("`id` must be 2"));
    }

    #[test]
    fn rejects_budget_below_static() {
        let mut p = table_profile();
        p.static_mem_bytes = p.mem_budget_bytes;
        assert!(p.validate().is_err());
    }

    #[test]
    fn rejects_negative_time_and_zero_size() {
        let mut p = table_profile();
        p.operators[0].decompress_time = -1.0;
        assert!(p.validate().unwrap_err().to_string().contains("decompress_time_ms"));
        let mut p = table_profile();
        p.operators[3].mem_bytes = 0;
        assert!(p.validate().unwrap_err().to_string().contains("operator 4"));
    }

    #[test]
    fn rejects_unknown_fields() {
        let json = table_profile().to_json().replacen("\"n_layers\"", "\"bogus\": 1, \"n_layers\"", 1);
        assert!(matches!(ModelProfile::from_json(&json), Err(ProfileError::Parse(_))));
    }

    #[test]
    fn malformed_json_is_parse_error() {
        assert!(matches!(ModelProfile::from_json("{not json"), Err(ProfileError::Parse(_))));
    }

    #[test]
    fn scale_identity() {
        let p = table_profile();
        assert_eq!(scale_profile(&p, p.reference_batch), p);
    }

    #[test]
    fn scale_is_linear() {
        let mut p = table_profile();
        p.reference_batch = 2;
        p.operators[0].mem_bytes = 10;
        let s = scale_profile(&p, 4);
        assert_eq!(s.operators[0].mem_bytes, 20);
        assert_eq!(s.reference_batch, 4);
        assert_eq!(s.base_step_time, 20.0);
        assert_eq!(s.static_mem_bytes, p.static_mem_bytes);
        assert_eq!(s.mem_budget_bytes, p.mem_budget_bytes);
    }

    #[test]
    fn scale_table_rows_by_two() {
        let p = table_profile();
        let s = scale_profile(&p, 2 * p.reference_batch);
        let sizes: Vec<f64> = s.operators.iter().map(|o| o.mem_bytes as f64 / MIB as f64).collect();
        assert_eq!(sizes, vec![192.0, 84.0, 84.0, 21.0]);
        assert!((s.operators[1].compute_time - 2.04).abs() < 1e-12);
    }

    #[test]
    fn save_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        let p = table_profile();
        save_profile(&p, &path).unwrap();
        assert_eq!(load_profile(&path).unwrap(), p);
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(load_profile("/nonexistent/profile.json"), Err(ProfileError::Io { .. })));
    }

    proptest::proptest! {
        #[test]
        fn scaling_composes(a in 1u32..64, b in 1u32..64, mem in 1u64..1_000_000) {
            let mut p = table_profile();
            p.reference_batch = 1;
            p.operators[0].mem_bytes = mem;
            let twice = scale_profile(&scale_profile(&p, a), b);
            let once = scale_profile(&p, b);
            proptest::prop_assert_eq!(twice.operators[0].mem_bytes, once.operators[0].mem_bytes);
            proptest::prop_assert_eq!(twice.reference_batch, b);
            let rel = (twice.base_step_time - once.base_step_time).abs() / once.base_step_time;
            proptest::prop_assert!(rel < 1e-12);
        }

        #[test]
        fn json_round_trip_preserves_profile(budget in 1u64..u64::MAX / 2, batch in 1u32..128) {
            let mut p = table_profile();
            p.mem_budget_bytes = budget.max(1);
            p.reference_batch = batch;
            let back = ModelProfile::from_json(&p.to_json()).unwrap();
            proptest::prop_assert_eq!(back, p);
        }
    }
}
