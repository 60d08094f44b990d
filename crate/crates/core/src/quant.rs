//! Group-quantized weight tensors.
//!
//! Weights are stored output-major: each row is one output channel, and
//! scale groups run along the input dimension of that row. Quantization is
//! symmetric (no zero-points): each group gets one scale
//! delta = max|w| / 2^(N-1) and codes are clamp(round(w / delta)) into
//! [-2^(N-1), 2^(N-1)-1], with round-half-away-from-zero ties.
//!
//! An optional per-input-channel scale vector s is carried alongside: the
//! stored codes then represent w[i][j] * s[j], and dequantization divides
//! the factor back out, so `dequantize` always approximates the original
//! weight matrix regardless of how the codes were produced.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use serde::{Deserialize, Serialize};

/// Bit-packed group-quantized matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizedTensor {
    rows: usize,
    cols: usize,
    bit_width: u8,
    group_size: usize,
    packed_codes: Vec<u8>,
    group_scales: Vec<f32>,
    channel_scale: Option<Vec<f32>>,
}

/// Bit-widths the format supports.
pub const SUPPORTED_BITS: [u8; 3] = [3, 4, 8];

/// Smallest representable code at bit-width `n`.
pub fn code_min(n: u8) -> i32 {
    -(1 << (n - 1))
}

/// Largest representable code at bit-width `n`.
pub fn code_max(n: u8) -> i32 {
    (1 << (n - 1)) - 1
}

/// Number of scale groups in one row of width `cols`.
pub fn groups_per_row(cols: usize, group_size: usize) -> usize {
    cols.div_ceil(group_size)
}

impl QuantizedTensor {
    /// Assemble from unpacked codes, validating every format invariant.
    pub fn new(
        rows: usize,
        cols: usize,
        bit_width: u8,
        group_size: usize,
        codes: &[i8],
        group_scales: Vec<f32>,
        channel_scale: Option<Vec<f32>>,
    ) -> Result<Self> {
        if !SUPPORTED_BITS.contains(&bit_width) {
            return Err(Error::InvalidQuantized(format!(
                "unsupported bit width {bit_width}"
            )));
        }
        if group_size == 0 {
            return Err(Error::InvalidQuantized("group_size must be >= 1".into()));
        }
        if codes.len() != rows * cols {
            return Err(Error::InvalidQuantized(format!(
                "expected {} codes, got {}",
                rows * cols,
                codes.len()
            )));
        }
        let (lo, hi) = (code_min(bit_width), code_max(bit_width));
        if let Some(bad) = codes.iter().find(|&&c| (c as i32) < lo || (c as i32) > hi) {
            return Err(Error::InvalidQuantized(format!(
                "code {bad} outside [{lo}, {hi}] at {bit_width} bits"
            )));
        }
        let expected_scales = rows * groups_per_row(cols, group_size);
        if group_scales.len() != expected_scales {
            return Err(Error::InvalidQuantized(format!(
                "expected {expected_scales} group scales, got {}",
                group_scales.len()
            )));
        }
        if group_scales.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::InvalidQuantized(
                "group scales must be finite and >= 0".into(),
            ));
        }
        if let Some(cs) = &channel_scale {
            if cs.len() != cols {
                return Err(Error::InvalidQuantized(format!(
                    "channel scale length {} != cols {cols}",
                    cs.len()
                )));
            }
            for (j, &s) in cs.iter().enumerate() {
                if !s.is_finite() || s <= 0.0 {
                    return Err(Error::NonPositiveScale {
                        layer: "<unattached>".into(),
                        channel: j,
                    });
                }
            }
        }
        Ok(QuantizedTensor {
            rows,
            cols,
            bit_width,
            group_size,
            packed_codes: pack_codes(codes, bit_width),
            group_scales,
            channel_scale,
        })
    }

    /// Reassemble from already-packed bytes (checkpoint load path); runs the
    /// same invariant checks as `new` after unpacking.
    pub fn from_packed(
        rows: usize,
        cols: usize,
        bit_width: u8,
        group_size: usize,
        packed_codes: Vec<u8>,
        group_scales: Vec<f32>,
        channel_scale: Option<Vec<f32>>,
    ) -> Result<Self> {
        let expected = packed_len(rows * cols, bit_width);
        if packed_codes.len() != expected {
            return Err(Error::InvalidQuantized(format!(
                "expected {expected} packed bytes, got {}",
                packed_codes.len()
            )));
        }
        let codes = unpack_codes(&packed_codes, rows * cols, bit_width);
        let t = QuantizedTensor::new(
            rows,
            cols,
            bit_width,
            group_size,
            &codes,
            group_scales,
            channel_scale,
        )?;
        // Repacking must reproduce the input bytes exactly; a mismatch means
        // stray bits in padding positions.
        if t.packed_codes != packed_codes {
            return Err(Error::InvalidQuantized(
                "packed code bytes contain stray padding bits".into(),
            ));
        }
        Ok(t)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn bit_width(&self) -> u8 {
        self.bit_width
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn packed_codes(&self) -> &[u8] {
        &self.packed_codes
    }

    pub fn group_scales(&self) -> &[f32] {
        &self.group_scales
    }

    pub fn channel_scale(&self) -> Option<&[f32]> {
        self.channel_scale.as_deref()
    }

    /// Code at (i, j), sign-extended.
    pub fn code(&self, i: usize, j: usize) -> i8 {
        let idx = i * self.cols + j;
        match self.bit_width {
            4 => {
                let byte = self.packed_codes[idx / 2];
                let nibble = if idx.is_multiple_of(2) { byte & 0x0F } else { byte >> 4 };
                ((nibble << 4) as i8) >> 4
            }
            _ => self.packed_codes[idx] as i8,
        }
    }

    /// All codes, unpacked row-major.
    pub fn codes(&self) -> Vec<i8> {
        unpack_codes(&self.packed_codes, self.rows * self.cols, self.bit_width)
    }

    /// Scale of the group containing column `j` of row `i`.
    pub fn scale_at(&self, i: usize, j: usize) -> f32 {
        let gpr = groups_per_row(self.cols, self.group_size);
        self.group_scales[i * gpr + j / self.group_size]
    }

    /// Reconstruct the approximated weight matrix:
    /// element (i, j) = code * group scale, divided by channel_scale[j]
    /// when a channel scale is present.
    pub fn dequantize(&self) -> Matrix {
        let gpr = groups_per_row(self.cols, self.group_size);
        let mut out = Matrix::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            let scales = &self.group_scales[i * gpr..(i + 1) * gpr];
            let row = out.row_mut(i);
            for (j, o) in row.iter_mut().enumerate() {
                let v = self.code(i, j) as f32 * scales[j / self.group_size];
                *o = match &self.channel_scale {
                    Some(cs) => v / cs[j],
                    None => v,
                };
            }
        }
        out
    }

    /// Bytes of payload this tensor serializes to (codes + scales), used by
    /// the compression accounting.
    pub fn payload_bytes(&self) -> usize {
        self.packed_codes.len()
            + self.group_scales.len() * 4
            + self.channel_scale.as_ref().map_or(0, |cs| cs.len() * 4)
    }
}

/// Packed byte count for `n` codes at `bits` per code.
pub fn packed_len(n: usize, bits: u8) -> usize {
    match bits {
        4 => n.div_ceil(2),
        _ => n,
    }
}

fn pack_codes(codes: &[i8], bits: u8) -> Vec<u8> {
    match bits {
        4 => {
            let mut out = vec![0u8; codes.len().div_ceil(2)];
            for (idx, &c) in codes.iter().enumerate() {
                let nibble = (c as u8) & 0x0F;
                if idx % 2 == 0 {
                    out[idx / 2] |= nibble;
                } else {
                    out[idx / 2] |= nibble << 4;
                }
            }
            out
        }
        // 3-bit codes are stored one per byte, padded; 8-bit fills the byte.
        _ => codes.iter().map(|&c| c as u8).collect(),
    }
}

fn unpack_codes(packed: &[u8], n: usize, bits: u8) -> Vec<i8> {
    match bits {
        4 => {
            let mut out = Vec::with_capacity(n);
            for idx in 0..n {
                let byte = packed[idx / 2];
                let nibble = if idx.is_multiple_of(2) { byte & 0x0F } else { byte >> 4 };
                out.push(((nibble << 4) as i8) >> 4);
            }
            out
        }
        _ => packed[..n].iter().map(|&b| b as i8).collect(),
    }
}

/// Quantize one group in place: absmax scale, round-half-away codes,
/// clamped to the representable range. An all-zero group gets scale 0 and
/// all-zero codes.
fn quantize_group(group: &[f32], bits: u8, codes: &mut Vec<i8>) -> f32 {
    let absmax = group.iter().fold(0.0f32, |m, &v| m.max(v.abs()));
    if absmax == 0.0 {
        codes.extend(std::iter::repeat_n(0, group.len()));
        return 0.0;
    }
    let delta = absmax / (1 << (bits - 1)) as f32;
    let (lo, hi) = (code_min(bits), code_max(bits));
    for &v in group {
        // f32::round ties away from zero, matching the documented mode.
        let c = (v / delta).round() as i32;
        codes.push(c.clamp(lo, hi) as i8);
    }
    delta
}

/// Round-to-nearest group quantization with per-group absmax scales and no
/// channel scaling.
pub fn quantize_rtn(w: &Matrix, bits: u8, group_size: usize) -> Result<QuantizedTensor> {
    quantize_with_channel_scale(w, bits, group_size, None)
}

/// Quantize `w * diag(s)` (column j scaled by s[j]) and record `s` so that
/// dequantization undoes the scaling. `s = None` is plain RTN.
pub fn quantize_with_channel_scale(
    w: &Matrix,
    bits: u8,
    group_size: usize,
    s: Option<&[f32]>,
) -> Result<QuantizedTensor> {
    if let Some(s) = s {
        if s.len() != w.cols() {
            return Err(Error::Shape(format!(
                "channel scale length {} != weight cols {}",
                s.len(),
                w.cols()
            )));
        }
    }
    let mut codes = Vec::with_capacity(w.rows() * w.cols());
    let mut scales = Vec::with_capacity(w.rows() * groups_per_row(w.cols(), group_size));
    let mut scaled_row = vec![0.0f32; w.cols()];
    for i in 0..w.rows() {
        let row = w.row(i);
        match s {
            Some(s) => {
                for (dst, (&v, &sj)) in scaled_row.iter_mut().zip(row.iter().zip(s.iter())) {
                    *dst = v * sj;
                }
            }
            None => scaled_row.copy_from_slice(row),
        }
        for group in scaled_row.chunks(group_size) {
            scales.push(quantize_group(group, bits, &mut codes));
        }
    }
    QuantizedTensor::new(
        w.rows(),
        w.cols(),
        bits,
        group_size,
        &codes,
        scales,
        s.map(|s| s.to_vec()),
    )
}

/// `x * dequantize(q)`, fused: channel scaling is applied once per output
/// column instead of materializing the dequantized matrix.
pub fn quantized_matmul(x: &Matrix, q: &QuantizedTensor) -> Result<Matrix> {
    if x.cols() != q.rows() {
        return Err(Error::Shape(format!(
            "quantized_matmul {}x{} * {}x{}",
            x.rows(),
            x.cols(),
            q.rows(),
            q.cols()
        )));
    }
    let gpr = groups_per_row(q.cols(), q.group_size());
    let mut out = Matrix::zeros(x.rows(), q.cols());
    for i in 0..x.rows() {
        let x_row = x.row(i);
        let out_row = out.row_mut(i);
        for (k, &a) in x_row.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            let scales = &q.group_scales()[k * gpr..(k + 1) * gpr];
            for (j, o) in out_row.iter_mut().enumerate() {
                *o += a * q.code(k, j) as f32 * scales[j / q.group_size()];
            }
        }
        if let Some(cs) = q.channel_scale() {
            for (o, &s) in out_row.iter_mut().zip(cs.iter()) {
                *o /= s;
            }
        }
    }
    Ok(out)
}

/// `x * dequantize(q)^T`, the linear-layer orientation. The channel scaling
/// is fused into `x` (each input column divided by s[j]) so the group loop
/// runs on bare codes; this realizes scaled-weight quantization applied to
/// inversely scaled activations without materializing either factor.
pub fn quantized_matmul_nt(x: &Matrix, q: &QuantizedTensor) -> Result<Matrix> {
    if x.cols() != q.cols() {
        return Err(Error::Shape(format!(
            "quantized_matmul_nt {}x{} * ({}x{})^T",
            x.rows(),
            x.cols(),
            q.rows(),
            q.cols()
        )));
    }
    let gpr = groups_per_row(q.cols(), q.group_size());
    let mut out = Matrix::zeros(x.rows(), q.rows());
    let mut x_scaled = vec![0.0f32; q.cols()];
    for i in 0..x.rows() {
        let x_row = x.row(i);
        match q.channel_scale() {
            Some(cs) => {
                for (dst, (&v, &s)) in x_scaled.iter_mut().zip(x_row.iter().zip(cs.iter())) {
                    *dst = v / s;
                }
            }
            None => x_scaled.copy_from_slice(x_row),
        }
        let out_row = out.row_mut(i);
        for (r, o) in out_row.iter_mut().enumerate() {
            let scales = &q.group_scales()[r * gpr..(r + 1) * gpr];
            let mut acc = 0.0f32;
            for (g, chunk) in x_scaled.chunks(q.group_size()).enumerate() {
                let base = g * q.group_size();
                let mut part = 0.0f32;
                for (dj, &xv) in chunk.iter().enumerate() {
                    part += xv * q.code(r, base + dj) as f32;
                }
                acc += part * scales[g];
            }
            *o = acc;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rtn_worked_scalar_example() {
        // One group of four weights at 4 bits: absmax 1.0, scale 1/8.
        let w = Matrix::from_vec(1, 4, vec![0.5, -1.0, 0.25, 0.75]).unwrap();
        let q = quantize_rtn(&w, 4, 64).unwrap();
        assert_eq!(q.group_scales(), &[0.125]);
        assert_eq!(q.codes(), vec![4, -8, 2, 6]);
        // Every element here is an exact multiple of the scale.
        let d = q.dequantize();
        assert_eq!(d.data(), &[0.5, -1.0, 0.25, 0.75]);
    }

    #[test]
    fn dequantize_scalar_example() {
        let q = QuantizedTensor::new(1, 2, 4, 64, &[4, -8], vec![0.125], None).unwrap();
        assert_eq!(q.dequantize().data(), &[0.5, -1.0]);
    }

    #[test]
    fn all_zero_group_gets_zero_scale_and_dequantizes_to_zeros() {
        let w = Matrix::zeros(2, 8);
        let q = quantize_rtn(&w, 4, 4).unwrap();
        assert!(q.group_scales().iter().all(|&s| s == 0.0));
        assert!(q.dequantize().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn out_of_range_code_rejected_at_construction() {
        // 8 is outside the 4-bit range [-8, 7].
        let err = QuantizedTensor::new(1, 1, 4, 64, &[8], vec![1.0], None);
        assert!(matches!(err, Err(Error::InvalidQuantized(_))));
        let ok = QuantizedTensor::new(1, 1, 4, 64, &[-8], vec![1.0], None);
        assert!(ok.is_ok());
    }

    #[test]
    fn wrong_scale_count_rejected() {
        let err = QuantizedTensor::new(1, 4, 4, 2, &[0, 0, 0, 0], vec![1.0], None);
        assert!(matches!(err, Err(Error::InvalidQuantized(_))));
    }

    #[test]
    fn non_positive_channel_scale_rejected() {
        let err = QuantizedTensor::new(1, 2, 4, 64, &[1, 1], vec![0.5], Some(vec![1.0, 0.0]));
        assert!(matches!(err, Err(Error::NonPositiveScale { .. })));
    }

    #[test]
    fn nibble_packing_round_trips_odd_lengths() {
        let codes: Vec<i8> = vec![-8, 7, 0, -1, 3];
        let q = QuantizedTensor::new(1, 5, 4, 64, &codes, vec![1.0], None).unwrap();
        assert_eq!(q.packed_codes().len(), 3);
        // Low nibble first: first byte holds codes[0] (low) and codes[1] (high).
        assert_eq!(q.packed_codes()[0], 0x78);
        assert_eq!(q.codes(), codes);
        for (j, &c) in codes.iter().enumerate() {
            assert_eq!(q.code(0, j), c);
        }
    }

    #[test]
    fn three_bit_range_and_bytes() {
        let codes: Vec<i8> = vec![-4, 3, 0, -1];
        let q = QuantizedTensor::new(1, 4, 3, 64, &codes, vec![1.0], None).unwrap();
        assert_eq!(q.packed_codes().len(), 4);
        assert_eq!(q.codes(), codes);
        assert!(QuantizedTensor::new(1, 1, 3, 64, &[4], vec![1.0], None).is_err());
    }

    #[test]
    fn from_packed_round_trip_and_stray_bit_detection() {
        let w = Matrix::from_vec(2, 6, (0..12).map(|i| (i as f32 - 6.0) * 0.1).collect()).unwrap();
        let q = quantize_rtn(&w, 4, 4).unwrap();
        let rebuilt = QuantizedTensor::from_packed(
            q.rows(),
            q.cols(),
            q.bit_width(),
            q.group_size(),
            q.packed_codes().to_vec(),
            q.group_scales().to_vec(),
            None,
        )
        .unwrap();
        assert_eq!(rebuilt, q);

        // 5 codes -> high nibble of byte 2 is padding and must stay clear.
        let q5 = QuantizedTensor::new(1, 5, 4, 64, &[1, 1, 1, 1, 1], vec![1.0], None).unwrap();
        let mut bytes = q5.packed_codes().to_vec();
        bytes[2] |= 0xF0;
        assert!(QuantizedTensor::from_packed(1, 5, 4, 64, bytes, vec![1.0], None).is_err());
    }

    fn rand_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::random(rows, cols, 2.0, &mut rng)
    }

    #[test]
    fn round_trip_error_bounded_by_half_scale_when_clamp_free() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for bits in [3u8, 4, 8] {
            for _ in 0..300 {
                // One group exactly (group_size 64 below).
                let n = rng.gen_range(1..=64);
                let mut w: Vec<f32> = (0..n).map(|_| rng.gen_range(-3.0f32..3.0)).collect();
                // Force the absmax onto a negative element so the boundary
                // code -2^(N-1) is representable and nothing clamps.
                let max = w.iter().fold(0.0f32, |m, &v| m.max(v.abs()));
                w[0] = -(max.max(0.5) * 1.5);
                let m = Matrix::from_vec(1, n, w.clone()).unwrap();
                let q = quantize_rtn(&m, bits, 64).unwrap();
                let delta = q.group_scales()[0];
                let d = q.dequantize();
                for (orig, deq) in w.iter().zip(d.data().iter()) {
                    assert!(
                        (orig - deq).abs() <= delta / 2.0 + 1e-7,
                        "bits={bits} err {} > delta/2 {}",
                        (orig - deq).abs(),
                        delta / 2.0
                    );
                }
            }
        }
    }

    #[test]
    fn absmax_element_error_half_scale_unclamped_full_scale_clamped() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..500 {
            let n = rng.gen_range(1..=64);
            let w: Vec<f32> = (0..n).map(|_| rng.gen_range(-3.0f32..3.0)).collect();
            let m = Matrix::from_vec(1, n, w.clone()).unwrap();
            let q = quantize_rtn(&m, 4, 64).unwrap();
            let delta = q.group_scales()[0];
            if delta == 0.0 {
                continue;
            }
            let d = q.dequantize();
            let (jmax, _) = w
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
                .unwrap();
            let err = (w[jmax] - d.get(0, jmax)).abs();
            if w[jmax] < 0.0 {
                // Boundary code representable: error only from scale rounding.
                assert!(err <= delta / 2.0 + 1e-6, "err {err} delta {delta}");
            } else {
                // Positive absmax rounds to 2^(N-1) and clamps one level down.
                assert!(err <= delta + 1e-6, "err {err} delta {delta}");
            }
        }
    }

    #[test]
    fn requantization_idempotent_when_boundary_code_present() {
        // With the absmax on a negative element the dequantized group has an
        // exactly representable absmax, so a second quantization reproduces
        // codes and scale bit-for-bit.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for bits in [3u8, 4, 8] {
            for _ in 0..200 {
                let n = rng.gen_range(1..=64);
                let mut w: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
                let max = w.iter().fold(0.0f32, |m, &v| m.max(v.abs()));
                w[n / 2] = -(max.max(0.25) * 2.0);
                let m = Matrix::from_vec(1, n, w).unwrap();
                let q1 = quantize_rtn(&m, bits, 64).unwrap();
                let q2 = quantize_rtn(&q1.dequantize(), bits, 64).unwrap();
                assert_eq!(q1.codes(), q2.codes());
                assert_eq!(q1.group_scales(), q2.group_scales());
            }
        }
    }

    /// Dequantize-then-multiply reference for the fused paths.
    fn matmul_via_dequant(x: &Matrix, q: &QuantizedTensor, transposed: bool) -> Matrix {
        let d = q.dequantize();
        if transposed {
            x.matmul_nt(&d).unwrap()
        } else {
            x.matmul(&d).unwrap()
        }
    }

    fn assert_close_rel(got: &Matrix, want: &Matrix, tol: f32) {
        let scale = want
            .data()
            .iter()
            .fold(0.0f32, |m, &v| m.max(v.abs()))
            .max(1e-3);
        for (g, w) in got.data().iter().zip(want.data().iter()) {
            assert!(
                (g - w).abs() <= tol * scale,
                "got {g}, want {w}, scale {scale}"
            );
        }
    }

    #[test]
    fn quantized_matmul_zero_input_gives_zero() {
        let q = quantize_rtn(&rand_matrix(4, 4, 1), 4, 2).unwrap();
        let x = Matrix::zeros(3, 4);
        let y = quantized_matmul(&x, &q).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn quantized_matmul_identity_channel_scale_matches_plain() {
        let w = rand_matrix(4, 4, 2);
        let plain = quantize_rtn(&w, 4, 2).unwrap();
        let scaled = quantize_with_channel_scale(&w, 4, 2, Some(&[1.0; 4])).unwrap();
        let x = rand_matrix(3, 4, 3);
        let a = quantized_matmul(&x, &plain).unwrap();
        let b = quantized_matmul(&x, &scaled).unwrap();
        assert_close_rel(&a, &b, 1e-6);
    }

    #[test]
    fn quantized_matmul_matches_dequantize_oracle_100_cases() {
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows = rng.gen_range(1..=12);
            let cols = rng.gen_range(1..=12);
            let m = rng.gen_range(1..=8);
            let gs = rng.gen_range(1..=8);
            let bits = [3u8, 4, 8][rng.gen_range(0..3)];
            let w = Matrix::random(rows, cols, 1.5, &mut rng);
            let s: Vec<f32> = (0..cols).map(|_| rng.gen_range(0.2f32..5.0)).collect();
            let use_scale = rng.gen_bool(0.5);
            let q =
                quantize_with_channel_scale(&w, bits, gs, use_scale.then_some(s.as_slice()))
                    .unwrap();

            let x = Matrix::random(m, rows, 1.0, &mut rng);
            assert_close_rel(
                &quantized_matmul(&x, &q).unwrap(),
                &matmul_via_dequant(&x, &q, false),
                1e-5,
            );

            let xt = Matrix::random(m, cols, 1.0, &mut rng);
            assert_close_rel(
                &quantized_matmul_nt(&xt, &q).unwrap(),
                &matmul_via_dequant(&xt, &q, true),
                1e-5,
            );
        }
    }

    #[test]
    fn quantized_matmul_with_sqrt_stat_scale_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let w = Matrix::random(8, 8, 1.0, &mut rng);
        let sx: Vec<f32> = (0..8).map(|_| rng.gen_range(0.1f32..20.0)).collect();
        let s: Vec<f32> = sx.iter().map(|v| v.sqrt()).collect();
        let q = quantize_with_channel_scale(&w, 4, 4, Some(&s)).unwrap();
        let x = Matrix::random(8, 8, 1.0, &mut rng);
        assert_close_rel(
            &quantized_matmul(&x, &q).unwrap(),
            &matmul_via_dequant(&x, &q, false),
            1e-5,
        );
    }

    #[test]
    fn shape_errors() {
        let q = quantize_rtn(&rand_matrix(4, 6, 5), 4, 3).unwrap();
        assert!(quantized_matmul(&Matrix::zeros(2, 5), &q).is_err());
        assert!(quantized_matmul_nt(&Matrix::zeros(2, 5), &q).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn codes_always_in_range(
            seed in 0u64..10_000,
            bits in prop::sample::select(vec![3u8, 4, 8]),
            gs in 1usize..16,
        ) {
            let w = rand_matrix(3, 13, seed);
            let q = quantize_rtn(&w, bits, gs).unwrap();
            let (lo, hi) = (code_min(bits), code_max(bits));
            prop_assert!(q.codes().iter().all(|&c| (c as i32) >= lo && (c as i32) <= hi));
            prop_assert_eq!(q.group_scales().len(), 3 * groups_per_row(13, gs));
        }

        #[test]
        fn pack_unpack_identity(
            codes in prop::collection::vec(-8i8..=7, 1..40),
        ) {
            let n = codes.len();
            let q = QuantizedTensor::new(
                1, n, 4, 64, &codes,
                vec![1.0; groups_per_row(n, 64)], None,
            ).unwrap();
            prop_assert_eq!(q.codes(), codes);
        }
    }
}
