use super::{corrupt, CodecError, CompressedTensor, GroupLayout, Scheme};

/// Packs a 0/1 byte mask into bits, eight per byte, least significant bit first.
pub fn pack_bitmask(mask: &[u8]) -> Result<CompressedTensor, CodecError> {
    if let Some(index) = mask.iter().position(|&b| b > 1) {
        return Err(CodecError::NonBinaryMask { index, value: mask[index] });
    }
    let packed =
        mask.chunks(8).map(|chunk| chunk.iter().enumerate().fold(0u8, |acc, (bit, &b)| acc | (b << bit))).collect();
    Ok(CompressedTensor {
        scheme: Scheme::BitMask,
        rows: 1,
        cols: mask.len(),
        layout: GroupLayout::Flat(0),
        groups: Vec::new(),
        packed,
        outliers: None,
    })
}

pub fn unpack_bitmask(ct: &CompressedTensor) -> Result<Vec<u8>, CodecError> {
    if ct.scheme != Scheme::BitMask {
        return Err(corrupt("not a bit mask"));
    }
    let n = ct.element_count();
    if ct.packed.len() != n.div_ceil(8) {
        return Err(corrupt(format!("expected {} mask bytes, found {}", n.div_ceil(8), ct.packed.len())));
    }
    if !n.is_multiple_of(8) && ct.packed[ct.packed.len() - 1] >> (n % 8) != 0 {
        return Err(corrupt("non-zero mask padding bits"));
    }
    Ok((0..n).map(|i| (ct.packed[i / 8] >> (i % 8)) & 1).collect())
}
