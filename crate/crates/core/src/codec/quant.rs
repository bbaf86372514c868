use super::{
    corrupt, ActivationMatrix, CodecError, CompressedTensor, GroupLayout, QuantGroup, Scheme, CODE_MAX, CODE_MIN,
};

/// `round_half_to_even(value)` clipped to the signed 4-bit range.
#[inline]
pub(crate) fn to_code(value: f64) -> i8 {
    value.round_ties_even().clamp(CODE_MIN as f64, CODE_MAX as f64) as i8
}

pub(crate) fn pack_nibbles(codes: &[i8]) -> Vec<u8> {
    codes
        .chunks(2)
        .map(|pair| {
            let lo = pair[0] as u8 & 0x0f;
            let hi = pair.get(1).map_or(0, |&c| c as u8 & 0x0f);
            lo | (hi << 4)
        })
        .collect()
}

#[inline]
fn sign_extend(nibble: u8) -> i8 {
    ((nibble << 4) as i8) >> 4
}

pub(crate) fn unpack_nibbles(packed: &[u8], count: usize) -> Result<Vec<i8>, CodecError> {
    if packed.len() != count.div_ceil(2) {
        return Err(corrupt(format!(
            "expected {} packed bytes for {count} codes, found {}",
            count.div_ceil(2),
            packed.len()
        )));
    }
    if count % 2 == 1 && packed[packed.len() - 1] >> 4 != 0 {
        return Err(corrupt("non-zero padding nibble"));
    }
    let mut codes = Vec::with_capacity(count);
    for &byte in packed {
        codes.push(sign_extend(byte & 0x0f));
        codes.push(sign_extend(byte >> 4));
    }
    codes.truncate(count);
    Ok(codes)
}

fn symmetric_group(values: &[f32], idx: impl Iterator<Item = usize> + Clone, codes: &mut [i8]) -> QuantGroup {
    let max_abs = idx.clone().map(|i| values[i].abs()).fold(0.0f32, f32::max);
    let scale = max_abs / 8.0;
    if scale > 0.0 {
        for i in idx {
            codes[i] = to_code(values[i] as f64 / scale as f64);
        }
    }
    QuantGroup { scale, offset: None }
}

fn asymmetric_group(values: &[f32], idx: impl Iterator<Item = usize> + Clone, codes: &mut [i8]) -> QuantGroup {
    let (lo, hi) =
        idx.clone().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), i| (lo.min(values[i]), hi.max(values[i])));
    let offset = ((hi as f64 + lo as f64) / 2.0) as f32;
    let scale = ((hi as f64 - lo as f64) / 16.0) as f32;
    if scale > 0.0 {
        for i in idx {
            codes[i] = to_code((values[i] as f64 - offset as f64) / scale as f64);
        }
    }
    QuantGroup { scale, offset: Some(offset) }
}

pub(crate) fn quantize_with(
    values: &[f32],
    rows: usize,
    cols: usize,
    layout: GroupLayout,
    asymmetric: bool,
) -> (Vec<QuantGroup>, Vec<u8>) {
    let mut codes = vec![0i8; values.len()];
    let groups = (0..layout.group_count(rows, cols))
        .map(|g| match layout {
            GroupLayout::Flat(size) => {
                let start = g * size as usize;
                let range = start..(start + size as usize).min(values.len());
                if asymmetric {
                    asymmetric_group(values, range, &mut codes)
                } else {
                    symmetric_group(values, range, &mut codes)
                }
            }
            GroupLayout::PerChannel => {
                let strided = (0..rows).map(move |r| r * cols + g);
                if asymmetric {
                    asymmetric_group(values, strided, &mut codes)
                } else {
                    symmetric_group(values, strided, &mut codes)
                }
            }
        })
        .collect();
    (groups, pack_nibbles(&codes))
}

/// Symmetric 4-bit quantization over consecutive groups of the row-major
/// flattened tensor: `scale = max|x| / 8`, `code = clip(round(x / scale), -8, 7)`.
pub fn quantize_symmetric(x: &ActivationMatrix, group_size: u32) -> Result<CompressedTensor, CodecError> {
    if group_size == 0 {
        return Err(CodecError::InvalidGroupSize);
    }
    let layout = GroupLayout::Flat(group_size);
    let (groups, packed) = quantize_with(x.values(), x.rows(), x.cols(), layout, false);
    Ok(CompressedTensor {
        scheme: Scheme::SymmetricGroup,
        rows: x.rows(),
        cols: x.cols(),
        layout,
        groups,
        packed,
        outliers: None,
    })
}

/// Symmetric quantization with one scale per channel (column).
pub fn quantize_per_channel(x: &ActivationMatrix) -> CompressedTensor {
    let layout = GroupLayout::PerChannel;
    let (groups, packed) = quantize_with(x.values(), x.rows(), x.cols(), layout, false);
    CompressedTensor {
        scheme: Scheme::SymmetricGroup,
        rows: x.rows(),
        cols: x.cols(),
        layout,
        groups,
        packed,
        outliers: None,
    }
}

/// Asymmetric 4-bit quantization: `offset = (max + min) / 2`,
/// `scale = (max - min) / 16`, `code = clip(round((x - offset) / scale), -8, 7)`.
/// The group maximum maps to code 8 and is clipped to 7.
pub fn quantize_asymmetric(x: &ActivationMatrix, group_size: u32) -> Result<CompressedTensor, CodecError> {
    if group_size == 0 {
        return Err(CodecError::InvalidGroupSize);
    }
    let layout = GroupLayout::Flat(group_size);
    let (groups, packed) = quantize_with(x.values(), x.rows(), x.cols(), layout, true);
    Ok(CompressedTensor {
        scheme: Scheme::AsymmetricGroup,
        rows: x.rows(),
        cols: x.cols(),
        layout,
        groups,
        packed,
        outliers: None,
    })
}

#[cfg(test)]
mod tests {
    use super::super::{dequantize, dequantize_exact, payload_size};
    use super::*;
    use proptest::prelude::*;

    fn row(values: &[f32]) -> ActivationMatrix {
        ActivationMatrix::new(1, values.len(), values.to_vec()).unwrap()
    }

    #[test]
    fn symmetric_example_vector() {
        let ct = quantize_symmetric(&row(&[-2.0, -1.0, 0.0, 1.0, 2.0]), 128).unwrap();
        assert_eq!(ct.groups, vec![QuantGroup { scale: 0.25, offset: None }]);
        assert_eq!(ct.codes().unwrap(), vec![-8, -4, 0, 4, 7]);
        assert_eq!(dequantize(&ct).unwrap().values(), &[-2.0, -1.0, 0.0, 1.0, 1.75]);
    }

    #[test]
    fn symmetric_zero_group() {
        let x = ActivationMatrix::zeros(3, 7);
        let ct = quantize_symmetric(&x, 4).unwrap();
        assert!(ct.groups.iter().all(|g| g.scale == 0.0));
        assert!(ct.codes().unwrap().iter().all(|&c| c == 0));
        assert_eq!(dequantize(&ct).unwrap(), x);
    }

    #[test]
    fn asymmetric_example_vector() {
        let ct = quantize_asymmetric(&row(&[1.0, 2.0, 3.0]), 128).unwrap();
        assert_eq!(ct.groups, vec![QuantGroup { scale: 0.125, offset: Some(2.0) }]);
        assert_eq!(ct.codes().unwrap(), vec![-8, 0, 7]);
        assert_eq!(dequantize(&ct).unwrap().values(), &[1.0, 2.0, 2.875]);
    }

    #[test]
    fn asymmetric_constant_group_is_exact() {
        let x = row(&[0.5, 0.5, 0.5]);
        let ct = quantize_asymmetric(&x, 128).unwrap();
        assert_eq!(ct.groups[0], QuantGroup { scale: 0.0, offset: Some(0.5) });
        assert_eq!(dequantize(&ct).unwrap(), x);
    }

    #[test]
    fn dequantize_hand_built_asymmetric() {
        let ct = CompressedTensor {
            scheme: Scheme::AsymmetricGroup,
            rows: 1,
            cols: 3,
            layout: GroupLayout::Flat(128),
            groups: vec![QuantGroup { scale: 0.125, offset: Some(2.0) }],
            packed: pack_nibbles(&[-8, 0, 7]),
            outliers: None,
        };
        assert_eq!(dequantize(&ct).unwrap().values(), &[1.0, 2.0, 2.875]);
    }

    #[test]
    fn zero_group_size_rejected() {
        assert_eq!(quantize_symmetric(&row(&[1.0]), 0).unwrap_err(), CodecError::InvalidGroupSize);
        assert_eq!(quantize_asymmetric(&row(&[1.0]), 0).unwrap_err(), CodecError::InvalidGroupSize);
    }

    #[test]
    fn nibble_layout_low_first() {
        assert_eq!(pack_nibbles(&[1, -1, -8]), vec![0xf1, 0x08]);
        assert_eq!(unpack_nibbles(&[0xf1, 0x08], 3).unwrap(), vec![1, -1, -8]);
        assert!(unpack_nibbles(&[0xf1, 0x18], 3).is_err());
        assert!(unpack_nibbles(&[0xf1], 3).is_err());
    }

    #[test]
    fn per_channel_groups_are_columns() {
        // column 0 small, column 1 large: each gets its own scale
        let x = ActivationMatrix::new(2, 2, vec![1.0, -80.0, -0.5, 40.0]).unwrap();
        let ct = quantize_per_channel(&x);
        assert_eq!(ct.groups.len(), 2);
        assert_eq!(ct.groups[0].scale, 0.125);
        assert_eq!(ct.groups[1].scale, 10.0);
        assert_eq!(ct.codes().unwrap(), vec![7, -8, -4, 4]);
    }

    #[test]
    fn partial_last_group() {
        let x = ActivationMatrix::new(1, 5, vec![1.0, 2.0, 3.0, 4.0, 100.0]).unwrap();
        let ct = quantize_symmetric(&x, 2).unwrap();
        assert_eq!(ct.groups.len(), 3);
        assert_eq!(ct.groups[2].scale, 12.5);
        assert_eq!(ct.payload_bytes(), payload_size(Scheme::SymmetricGroup, ct.layout, 1, 5, 0));
    }

    fn check_bound(x: &ActivationMatrix, ct: &CompressedTensor) -> Result<(), TestCaseError> {
        let exact = dequantize_exact(ct).unwrap();
        for (i, (&v, &r)) in x.values().iter().zip(&exact).enumerate() {
            let g = ct.groups[ct.layout.group_of(i, ct.cols)];
            let q = (v as f64 - g.offset.map_or(0.0, f64::from)) / g.scale as f64;
            let clipped = g.scale > 0.0 && !(-8.0..=7.0).contains(&q.round_ties_even());
            if !clipped {
                prop_assert!((v as f64 - r).abs() <= g.scale as f64 / 2.0, "element {i}: {v} vs {r}");
            }
        }
        Ok(())
    }

    fn matrix() -> impl Strategy<Value = ActivationMatrix> {
        (1usize..12, 1usize..40).prop_flat_map(|(r, c)| {
            proptest::collection::vec(-50.0f32..50.0, r * c).prop_map(move |v| ActivationMatrix::new(r, c, v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn symmetric_round_trip_bound(x in matrix(), g in 1u32..200) {
            check_bound(&x, &quantize_symmetric(&x, g).unwrap())?;
        }

        #[test]
        fn asymmetric_round_trip_bound(x in matrix(), g in 1u32..200) {
            check_bound(&x, &quantize_asymmetric(&x, g).unwrap())?;
        }

        #[test]
        fn per_channel_round_trip_bound(x in matrix()) {
            check_bound(&x, &quantize_per_channel(&x))?;
        }

        #[test]
        fn requantizing_stays_within_one_scale(x in matrix(), g in 1u32..200, asym in any::<bool>()) {
            let first = if asym { quantize_asymmetric(&x, g) } else { quantize_symmetric(&x, g) }.unwrap();
            let once = dequantize(&first).unwrap();
            let second = if asym { quantize_asymmetric(&once, g) } else { quantize_symmetric(&once, g) }.unwrap();
            let twice = dequantize_exact(&second).unwrap();
            for (i, (&a, &b)) in once.values().iter().zip(&twice).enumerate() {
                let scale = first.groups[first.layout.group_of(i, first.cols)].scale as f64;
                prop_assert!((a as f64 - b).abs() <= scale * (1.0 + 1e-6), "element {}", i);
            }
        }

        #[test]
        fn nibble_round_trip(codes in proptest::collection::vec(-8i8..=7, 0..300)) {
            prop_assert_eq!(unpack_nibbles(&pack_nibbles(&codes), codes.len()).unwrap(), codes);
        }

        #[test]
        fn payload_matches_closed_form(x in matrix(), g in 1u32..200) {
            let s = quantize_symmetric(&x, g).unwrap();
            prop_assert_eq!(s.payload_bytes(), payload_size(Scheme::SymmetricGroup, s.layout, x.rows(), x.cols(), 0));
            let a = quantize_asymmetric(&x, g).unwrap();
            prop_assert_eq!(a.payload_bytes(), payload_size(Scheme::AsymmetricGroup, a.layout, x.rows(), x.cols(), 0));
        }
    }
}
