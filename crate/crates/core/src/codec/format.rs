//! Binary encoding of [`CompressedTensor`].
//!
//! ```text
//! "ADC1" | scheme u8 | rows u32 | cols u32 | group_size u32 | group_count u32 | outlier_count u32
//! per group: scale f32 [offset f32 when asymmetric]
//! packed codes (two per byte) or mask bits
//! outlier indices: u32 each
//! outlier values: f16 each, one full column per index
//! ```
//!
//! All integers and floats are little-endian. `group_size` 0 marks
//! per-channel groups (and is unused for bit masks).

use half::f16;

use super::{corrupt, CodecError, CompressedTensor, GroupLayout, OutlierPack, QuantGroup, Scheme};

pub const MAGIC: &[u8; 4] = b"ADC1";
pub const HEADER_BYTES: usize = 4 + 1 + 5 * 4;

fn layout_tag(ct: &CompressedTensor) -> u32 {
    match (ct.scheme, ct.layout) {
        (Scheme::BitMask, _) | (_, GroupLayout::PerChannel) => 0,
        (_, GroupLayout::Flat(g)) => g,
    }
}

pub(crate) fn encode(ct: &CompressedTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(ct.compressed_size_bytes());
    out.extend_from_slice(MAGIC);
    out.push(ct.scheme.tag());
    for v in [ct.rows as u32, ct.cols as u32, layout_tag(ct), ct.groups.len() as u32, ct.outlier_count() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for g in &ct.groups {
        out.extend_from_slice(&g.scale.to_le_bytes());
        if let Some(offset) = g.offset {
            out.extend_from_slice(&offset.to_le_bytes());
        }
    }
    out.extend_from_slice(&ct.packed);
    if let Some(pack) = &ct.outliers {
        for &i in &pack.channel_indices {
            out.extend_from_slice(&i.to_le_bytes());
        }
        for v in &pack.channel_values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            corrupt(format!("truncated: need {n} bytes at offset {}, have {}", self.pos, self.bytes.len()))
        })?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, CodecError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub(crate) fn decode(bytes: &[u8]) -> Result<CompressedTensor, CodecError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let tag = r.take(1)?[0];
    let scheme = Scheme::from_tag(tag).ok_or_else(|| corrupt(format!("unknown scheme tag {tag}")))?;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let group_size = r.u32()?;
    let group_count = r.u32()? as usize;
    let outlier_count = r.u32()? as usize;
    let n = rows.checked_mul(cols).ok_or_else(|| corrupt("shape overflows"))?;

    let layout = match (scheme, group_size) {
        (Scheme::BitMask, _) => GroupLayout::Flat(0),
        (_, 0) => GroupLayout::PerChannel,
        (_, g) => GroupLayout::Flat(g),
    };
    let asymmetric = scheme == Scheme::AsymmetricGroup;
    // bound allocations by the input length before trusting header counts
    let per_group = if asymmetric { 8 } else { 4 };
    if group_count.saturating_mul(per_group) > bytes.len() || outlier_count.saturating_mul(4) > bytes.len() {
        return Err(corrupt("header counts exceed payload length"));
    }
    let mut groups = Vec::with_capacity(group_count);
    for _ in 0..group_count {
        let scale = r.f32()?;
        let offset = if asymmetric { Some(r.f32()?) } else { None };
        groups.push(QuantGroup { scale, offset });
    }
    let packed_len = if scheme == Scheme::BitMask { n.div_ceil(8) } else { n.div_ceil(2) };
    let packed = r.take(packed_len)?.to_vec();

    let outliers = if scheme == Scheme::OutlierSeparated {
        let mut pack = OutlierPack::default();
        for _ in 0..outlier_count {
            pack.channel_indices.push(r.u32()?);
        }
        let raw = r.take(
            outlier_count
                .checked_mul(rows)
                .and_then(|v| v.checked_mul(2))
                .ok_or_else(|| corrupt("outlier size overflows"))?,
        )?;
        pack.channel_values = raw.chunks_exact(2).map(|b| f16::from_le_bytes([b[0], b[1]])).collect();
        Some(pack)
    } else {
        if outlier_count != 0 {
            return Err(corrupt("outliers present for a scheme without outlier separation"));
        }
        None
    };
    if r.pos != bytes.len() {
        return Err(corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    let ct = CompressedTensor { scheme, rows, cols, layout, groups, packed, outliers };
    if scheme != Scheme::BitMask {
        check_consistency(&ct)?;
    }
    Ok(ct)
}

/// Structural checks shared by decoding and dequantization.
pub(crate) fn check_consistency(ct: &CompressedTensor) -> Result<(), CodecError> {
    if let GroupLayout::Flat(0) = ct.layout {
        return Err(corrupt("group size 0 with flat layout"));
    }
    let expected = ct.layout.group_count(ct.rows, ct.cols);
    if ct.groups.len() != expected {
        return Err(corrupt(format!("expected {expected} groups, found {}", ct.groups.len())));
    }
    for (i, g) in ct.groups.iter().enumerate() {
        if !(g.scale.is_finite() && g.scale >= 0.0) {
            return Err(corrupt(format!("group {i} has invalid scale {}", g.scale)));
        }
        if (ct.scheme == Scheme::AsymmetricGroup) != g.offset.is_some() {
            return Err(corrupt(format!("group {i} offset does not match scheme")));
        }
        if g.offset.is_some_and(|o| !o.is_finite()) {
            return Err(corrupt(format!("group {i} has non-finite offset")));
        }
    }
    if ct.packed.len() != ct.element_count().div_ceil(2) {
        return Err(corrupt("packed code length does not match shape"));
    }
    match (&ct.outliers, ct.scheme) {
        (Some(pack), Scheme::OutlierSeparated) => {
            if pack.channel_values.len() != pack.channel_indices.len() * ct.rows {
                return Err(corrupt("outlier value count does not match indices"));
            }
            if !pack.channel_indices.windows(2).all(|w| w[0] < w[1]) {
                return Err(corrupt("outlier indices not strictly increasing"));
            }
            if pack.channel_indices.last().is_some_and(|&c| c as usize >= ct.cols) {
                return Err(corrupt("outlier index out of range"));
            }
        }
        (None, Scheme::OutlierSeparated) => return Err(corrupt("missing outlier pack")),
        (Some(_), _) => return Err(corrupt("unexpected outlier pack")),
        (None, _) => {}
    }
    Ok(())
}
