//! Fixed-point tensors and the bit-level fault primitives.
//!
//! A [`QuantTensor`] stores `N_q`-bit two's-complement integers together with a
//! power-of-two scale, so `real = value * 2^scale_exp`. Faults are modelled as
//! independent per-bit XOR flips restricted to the `b` least significant bits.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SUPPORTED_BIT_WIDTHS: [u32; 3] = [8, 16, 32];

const MAGIC: &[u8; 4] = b"AFQT";
const FORMAT_VERSION: u32 = 1;

pub fn check_bit_width(bit_width: u32) -> Result<()> {
    if SUPPORTED_BIT_WIDTHS.contains(&bit_width) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "unsupported bit width {bit_width} (expected 8, 16 or 32)"
        )))
    }
}

/// Smallest and largest value representable in `bit_width` bits.
pub fn value_range(bit_width: u32) -> (i64, i64) {
    let half = 1i64 << (bit_width - 1);
    (-half, half - 1)
}

pub(crate) fn saturate(value: i64, bit_width: u32) -> i32 {
    let (lo, hi) = value_range(bit_width);
    value.clamp(lo, hi) as i32
}

/// Arithmetic shift with round-half-to-even. Positive `shift` divides by
/// `2^shift`, negative multiplies. The result is not saturated.
pub fn shift_round_half_even(value: i64, shift: i32) -> i64 {
    if shift <= 0 {
        let left = (-shift) as u32;
        return value
            .checked_shl(left)
            .filter(|v| v >> left == value)
            .unwrap_or(if value < 0 { i64::MIN } else { i64::MAX });
    }
    let shift = (shift as u32).min(100);
    let value = value as i128;
    let floor = value >> shift;
    let rem = value - (floor << shift);
    let half = 1i128 << (shift - 1);
    let rounded = if rem > half || (rem == half && floor & 1 == 1) {
        floor + 1
    } else {
        floor
    };
    rounded as i64
}

/// Integer division rounding half to even. `divisor` must be positive.
pub fn div_round_half_even(value: i64, divisor: i64) -> i64 {
    debug_assert!(divisor > 0);
    let floor = value.div_euclid(divisor);
    let rem2 = 2 * value.rem_euclid(divisor);
    if rem2 > divisor || (rem2 == divisor && floor & 1 == 1) {
        floor + 1
    } else {
        floor
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantTensor {
    shape: Vec<usize>,
    values: Vec<i32>,
    bit_width: u32,
    scale_exp: i32,
}

impl QuantTensor {
    pub fn new(shape: Vec<usize>, values: Vec<i32>, bit_width: u32, scale_exp: i32) -> Result<Self> {
        check_bit_width(bit_width)?;
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "tensor shape must have positive dims, got {shape:?}"
            )));
        }
        let len: usize = shape.iter().product();
        if len != values.len() {
            return Err(Error::InvalidArgument(format!(
                "shape {shape:?} holds {len} values, got {}",
                values.len()
            )));
        }
        let (lo, hi) = value_range(bit_width);
        if let Some(i) = values.iter().position(|&v| (v as i64) < lo || (v as i64) > hi) {
            return Err(Error::InvalidArgument(format!(
                "value {} at index {i} does not fit in {bit_width} bits",
                values[i]
            )));
        }
        Ok(Self {
            shape,
            values,
            bit_width,
            scale_exp,
        })
    }

    pub fn zeros(shape: Vec<usize>, bit_width: u32, scale_exp: i32) -> Result<Self> {
        let len = shape.iter().product();
        Self::new(shape, vec![0; len], bit_width, scale_exp)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[i32] {
        &self.values
    }

    pub fn bit_width(&self) -> u32 {
        self.bit_width
    }

    pub fn scale_exp(&self) -> i32 {
        self.scale_exp
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Same values under a new shape with the same element count.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.values.len() || shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Builds a tensor from values already known to be in range.
    pub(crate) fn from_parts_unchecked(shape: Vec<usize>, values: Vec<i32>, bit_width: u32, scale_exp: i32) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Self {
            shape,
            values,
            bit_width,
            scale_exp,
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut buf = Vec::with_capacity(24 + 4 * self.shape.len() + 4 * self.values.len());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&self.bit_width.to_le_bytes());
        buf.extend_from_slice(&self.scale_exp.to_le_bytes());
        buf.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &self.values {
            match self.bit_width {
                8 => buf.extend_from_slice(&(v as i8).to_le_bytes()),
                16 => buf.extend_from_slice(&(v as i16).to_le_bytes()),
                _ => buf.extend_from_slice(&v.to_le_bytes()),
            }
        }
        w.write_all(&buf)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = ByteCursor { bytes, pos: 0 };
        if cursor.take(4)? != MAGIC {
            return Err(Error::TensorFormat("bad magic, expected AFQT".into()));
        }
        let version = cursor.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::TensorFormat(format!("unsupported version {version}")));
        }
        let bit_width = cursor.u32()?;
        check_bit_width(bit_width).map_err(|e| Error::TensorFormat(e.to_string()))?;
        let scale_exp = cursor.u32()? as i32;
        let rank = cursor.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cursor.u32()? as usize);
        }
        let len: usize = shape.iter().product();
        let width = (bit_width / 8) as usize;
        let raw = cursor.take(len * width)?;
        let values = raw
            .chunks_exact(width)
            .map(|c| match width {
                1 => c[0] as i8 as i32,
                2 => i16::from_le_bytes([c[0], c[1]]) as i32,
                _ => i32::from_le_bytes([c[0], c[1], c[2], c[3]]),
            })
            .collect();
        if cursor.pos != bytes.len() {
            return Err(Error::TensorFormat(format!(
                "{} trailing bytes",
                bytes.len() - cursor.pos
            )));
        }
        Self::new(shape, values, bit_width, scale_exp).map_err(|e| Error::TensorFormat(e.to_string()))
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| Error::TensorFormat(e.to_string()))?;
        Self::from_bytes(&bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::TensorFormat(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::TensorFormat("truncated tensor data".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Seed plus sub-stream selector for a deterministic random source.
///
/// Identical `(seed, stream_id)` pairs always yield identical draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self { seed, stream_id }
    }

    /// Child stream keyed by `tag`; distinct tags give unrelated streams.
    pub fn derive(&self, tag: u64) -> Self {
        Self {
            seed: self.seed,
            stream_id: mix64(self.stream_id ^ mix64(tag.wrapping_add(0x6a09_e667_f3bc_c909))),
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn quantize(real_values: &[f64], shape: Vec<usize>, bit_width: u32, scale_exp: i32) -> Result<QuantTensor> {
    check_bit_width(bit_width)?;
    let factor = 2f64.powi(-scale_exp);
    let mut values = Vec::with_capacity(real_values.len());
    for (index, &x) in real_values.iter().enumerate() {
        if !x.is_finite() {
            return Err(Error::NonFinite { index });
        }
        let scaled = (x * factor).round_ties_even();
        let (lo, hi) = value_range(bit_width);
        values.push(scaled.clamp(lo as f64, hi as f64) as i32);
    }
    QuantTensor::new(shape, values, bit_width, scale_exp)
}

pub fn dequantize(tensor: &QuantTensor) -> Vec<f64> {
    let factor = 2f64.powi(tensor.scale_exp);
    tensor.values.iter().map(|&v| v as f64 * factor).collect()
}

/// Flips bit `bit` of the `bit_width`-bit two's-complement pattern of `value`.
pub fn flip_bit(value: i32, bit: u32, bit_width: u32) -> Result<i32> {
    check_bit_width(bit_width)?;
    if bit >= bit_width {
        return Err(Error::InvalidArgument(format!(
            "bit index {bit} out of range for {bit_width}-bit values"
        )));
    }
    Ok(xor_pattern(value, 1u32 << bit, bit_width))
}

#[inline]
fn xor_pattern(value: i32, mask: u32, bit_width: u32) -> i32 {
    let unused = 32 - bit_width;
    let pattern = (value as u32) ^ mask;
    ((pattern << unused) as i32) >> unused
}

fn check_fault_args(fault_rate: f64, faulty_bits: u32, bit_width: u32) -> Result<()> {
    if !(0.0..=1.0).contains(&fault_rate) {
        return Err(Error::InvalidArgument(format!(
            "fault rate {fault_rate} outside [0, 1]"
        )));
    }
    if faulty_bits == 0 || faulty_bits > bit_width {
        return Err(Error::InvalidArgument(format!(
            "faulty bit count {faulty_bits} outside [1, {bit_width}]"
        )));
    }
    Ok(())
}

/// Copies `tensor` and flips each of its `faulty_bits` low bits independently
/// with probability `fault_rate`. Returns the faulty copy and the flip count.
pub fn inject_faults<R: Rng + ?Sized>(
    tensor: &QuantTensor,
    fault_rate: f64,
    faulty_bits: u32,
    rng: &mut R,
) -> Result<(QuantTensor, u64)> {
    inject_faults_budgeted(tensor, fault_rate, faulty_bits, rng, None)
}

/// As [`inject_faults`], but stops applying flips once `remaining` reaches
/// zero. Draws are still consumed so the stream position does not depend on
/// the budget. Flips are accepted in (element, bit) order.
pub fn inject_faults_budgeted<R: Rng + ?Sized>(
    tensor: &QuantTensor,
    fault_rate: f64,
    faulty_bits: u32,
    rng: &mut R,
    mut remaining: Option<&mut u64>,
) -> Result<(QuantTensor, u64)> {
    check_fault_args(fault_rate, faulty_bits, tensor.bit_width)?;
    let mut out = tensor.clone();
    if fault_rate == 0.0 {
        return Ok((out, 0));
    }
    let mut flips = 0u64;
    for value in out.values.iter_mut() {
        let mut mask = 0u32;
        for bit in 0..faulty_bits {
            if rng.random::<f64>() < fault_rate {
                match remaining.as_deref_mut() {
                    Some(0) => {}
                    Some(left) => {
                        *left -= 1;
                        mask |= 1 << bit;
                    }
                    None => mask |= 1 << bit,
                }
            }
        }
        if mask != 0 {
            flips += mask.count_ones() as u64;
            *value = xor_pattern(*value, mask, tensor.bit_width);
        }
    }
    Ok((out, flips))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize(&[0.0], vec![1], 16, -8).unwrap().values(), &[0]);
        assert_eq!(quantize(&[1.0], vec![1], 16, -8).unwrap().values(), &[256]);
        assert_eq!(quantize(&[1000.0], vec![1], 8, 0).unwrap().values(), &[127]);
        assert_eq!(quantize(&[-1000.0], vec![1], 8, 0).unwrap().values(), &[-128]);
    }

    #[test]
    fn quantize_rounds_half_to_even() {
        let t = quantize(&[0.5, 1.5, 2.5, -0.5, -1.5], vec![5], 16, 0).unwrap();
        assert_eq!(t.values(), &[0, 2, 2, 0, -2]);
    }

    #[test]
    fn quantize_rejects_non_finite_with_index() {
        let err = quantize(&[0.0, 1.0, f64::NAN], vec![3], 16, 0).unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 2 }));
        assert!(quantize(&[f64::INFINITY], vec![1], 16, 0).is_err());
        assert!(quantize(&[1.0], vec![1], 12, 0).is_err());
    }

    #[test]
    fn dequantize_examples() {
        let t = QuantTensor::new(vec![1], vec![256], 16, -8).unwrap();
        assert_eq!(dequantize(&t), vec![1.0]);
        let t = QuantTensor::new(vec![1], vec![0], 16, -8).unwrap();
        assert_eq!(dequantize(&t), vec![0.0]);
        let t = QuantTensor::new(vec![1], vec![-1], 16, 0).unwrap();
        assert_eq!(dequantize(&t), vec![-1.0]);
    }

    #[test]
    fn flip_bit_examples() {
        assert_eq!(flip_bit(0, 0, 16).unwrap(), 1);
        assert_eq!(flip_bit(5, 0, 16).unwrap(), 4);
        let oracle = (0xFFFFu16 ^ 0x0008) as i16 as i32;
        assert_eq!(flip_bit(-1, 3, 16).unwrap(), oracle);
        assert_eq!(oracle, -9);
        // sign bit of an 8-bit value
        assert_eq!(flip_bit(0, 7, 8).unwrap(), -128);
        assert_eq!(flip_bit(i32::MIN, 31, 32).unwrap(), 0);
        assert!(flip_bit(0, 16, 16).is_err());
    }

    #[test]
    fn tensor_invariants_enforced() {
        assert!(QuantTensor::new(vec![2], vec![1], 16, 0).is_err());
        assert!(QuantTensor::new(vec![1], vec![128], 8, 0).is_err());
        assert!(QuantTensor::new(vec![0], vec![], 8, 0).is_err());
        assert!(QuantTensor::new(vec![1], vec![-128], 8, 0).is_ok());
    }

    #[test]
    fn zero_rate_is_identity() {
        let t = QuantTensor::new(vec![4], vec![1, -2, 300, -7], 16, -4).unwrap();
        let mut rng = RngStream::new(1, 2).rng();
        let (f, n) = inject_faults(&t, 0.0, 4, &mut rng).unwrap();
        assert_eq!(f, t);
        assert_eq!(n, 0);
    }

    #[test]
    fn full_rate_sets_low_nibble() {
        let t = QuantTensor::zeros(vec![10], 16, 0).unwrap();
        let mut rng = RngStream::new(1, 2).rng();
        let (f, n) = inject_faults(&t, 1.0, 4, &mut rng).unwrap();
        assert!(f.values().iter().all(|&v| v == 15));
        assert_eq!(n, 40);
    }

    #[test]
    fn rejects_bad_fault_args() {
        let t = QuantTensor::zeros(vec![1], 16, 0).unwrap();
        let mut rng = RngStream::new(0, 0).rng();
        assert!(inject_faults(&t, 1.5, 4, &mut rng).is_err());
        assert!(inject_faults(&t, -0.1, 4, &mut rng).is_err());
        assert!(inject_faults(&t, 0.1, 0, &mut rng).is_err());
        assert!(inject_faults(&t, 0.1, 17, &mut rng).is_err());
    }

    #[test]
    fn flip_fraction_matches_rate() {
        let n = 100_000usize;
        let t = QuantTensor::zeros(vec![n], 16, 0).unwrap();
        let fr = 0.2;
        let mut rng = RngStream::new(42, 0).rng();
        let (_, flips) = inject_faults(&t, fr, 4, &mut rng).unwrap();
        let frac = flips as f64 / (4 * n) as f64;
        assert!((0.195..=0.205).contains(&frac), "fraction {frac}");
    }

    #[test]
    fn budget_caps_flips_in_order() {
        let t = QuantTensor::zeros(vec![8], 16, 0).unwrap();
        let mut left = 5u64;
        let mut rng = RngStream::new(0, 0).rng();
        let (f, n) = inject_faults_budgeted(&t, 1.0, 4, &mut rng, Some(&mut left)).unwrap();
        assert_eq!(n, 5);
        assert_eq!(left, 0);
        assert_eq!(&f.values()[..3], &[15, 1, 0]);
    }

    #[test]
    fn binary_format_layout() {
        let t = QuantTensor::new(vec![2], vec![-2, 3], 16, -3).unwrap();
        let bytes = t.to_bytes();
        assert_eq!(&bytes[..4], b"AFQT");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 16);
        assert_eq!(i32::from_le_bytes(bytes[12..16].try_into().unwrap()), -3);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[20..24].try_into().unwrap()), 2);
        assert_eq!(&bytes[24..], &[0xFE, 0xFF, 0x03, 0x00]);
        assert!(QuantTensor::from_bytes(&bytes[..25]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(QuantTensor::from_bytes(&bad).is_err());
    }

    #[test]
    fn shift_rounding() {
        assert_eq!(shift_round_half_even(5, 1), 2);
        assert_eq!(shift_round_half_even(7, 1), 4);
        assert_eq!(shift_round_half_even(-5, 1), -2);
        assert_eq!(shift_round_half_even(-7, 1), -4);
        assert_eq!(shift_round_half_even(6, 2), 2);
        assert_eq!(shift_round_half_even(3, -2), 12);
        assert_eq!(div_round_half_even(5, 2), 2);
        assert_eq!(div_round_half_even(-7, 2), -4);
        assert_eq!(div_round_half_even(10, 3), 3);
        assert_eq!(div_round_half_even(-10, 3), -3);
    }

    fn tensor_strategy() -> impl Strategy<Value = QuantTensor> {
        prop::sample::select(SUPPORTED_BIT_WIDTHS.to_vec()).prop_flat_map(|bw| {
            let (lo, hi) = value_range(bw);
            prop::collection::vec((lo as i32)..=(hi as i32), 1..64)
                .prop_map(move |v| QuantTensor::new(vec![v.len()], v, bw, -4).unwrap())
        })
    }

    proptest! {
        #[test]
        fn injected_values_stay_in_range_and_low_bits(
            t in tensor_strategy(),
            fr in 0.0f64..=1.0,
            b in 1u32..=8,
            seed in any::<u64>(),
            stream in any::<u64>(),
        ) {
            let b = b.min(t.bit_width());
            let (f, flips) = inject_faults(&t, fr, b, &mut RngStream::new(seed, stream).rng()).unwrap();
            let (lo, hi) = value_range(t.bit_width());
            let mut counted = 0u64;
            for (&o, &x) in t.values().iter().zip(f.values()) {
                prop_assert!((x as i64) >= lo && (x as i64) <= hi);
                let diff = (o as u32 ^ x as u32) & (u32::MAX >> (32 - t.bit_width()));
                prop_assert_eq!(diff >> b, 0);
                counted += diff.count_ones() as u64;
            }
            prop_assert_eq!(counted, flips);
        }

        #[test]
        fn replaying_stream_restores_tensor(
            t in tensor_strategy(),
            fr in 0.0f64..=1.0,
            seed in any::<u64>(),
        ) {
            let s = RngStream::new(seed, 9);
            let (once, _) = inject_faults(&t, fr, 4, &mut s.rng()).unwrap();
            let (again, _) = inject_faults(&t, fr, 4, &mut s.rng()).unwrap();
            prop_assert_eq!(&once, &again);
            let (twice, _) = inject_faults(&once, fr, 4, &mut s.rng()).unwrap();
            prop_assert_eq!(twice, t);
        }

        #[test]
        fn dequantize_inverts_quantize(x in -100.0f64..100.0, s in -10i32..2) {
            let t = quantize(&[x], vec![1], 32, s).unwrap();
            let back = dequantize(&t)[0];
            prop_assert!((back - x).abs() <= 2f64.powi(s - 1));
        }

        #[test]
        fn binary_round_trip(t in tensor_strategy()) {
            prop_assert_eq!(QuantTensor::from_bytes(&t.to_bytes()).unwrap(), t);
        }

        #[test]
        fn flip_bit_changes_exactly_one_bit(v in -32768i32..=32767, i in 0u32..16) {
            let f = flip_bit(v, i, 16).unwrap();
            prop_assert!((-32768..=32767).contains(&f));
            prop_assert_eq!((v as u32 ^ f as u32) & 0xFFFF, 1 << i);
        }
    }
}
