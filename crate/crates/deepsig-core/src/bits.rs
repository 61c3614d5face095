//! Bit-level helpers shared by the payload protocol.
//!
//! Bitstrings are `Vec<u8>` with one bit per element (values 0 or 1).
//! Packed forms are MSB-first within each byte; a final partial byte is
//! zero-padded.

/// Pack a bitstring into bytes, MSB-first, zero-padding the last byte.
pub fn pack_bits(bits: &[u8]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        debug_assert!(b <= 1, "bit values must be 0 or 1");
        if b != 0 {
            out[i / 8] |= 0x80 >> (i % 8);
        }
    }
    out
}

/// Unpack `n` bits from bytes, MSB-first.
pub fn unpack_bits(bytes: &[u8], n: usize) -> Vec<u8> {
    assert!(n <= bytes.len() * 8, "not enough bytes for {n} bits");
    (0..n).map(|i| (bytes[i / 8] >> (7 - i % 8)) & 1).collect()
}

/// Append `width` bits of `value`, most significant bit first.
pub fn push_uint(bits: &mut Vec<u8>, value: u64, width: usize) {
    assert!(width <= 64);
    assert!(
        width == 64 || value < (1u64 << width),
        "value {value} overflows {width}-bit field"
    );
    for i in (0..width).rev() {
        bits.push(((value >> i) & 1) as u8);
    }
}

/// Read `width` bits as a big-endian unsigned integer, advancing `pos`.
pub fn read_uint(bits: &[u8], pos: &mut usize, width: usize) -> u64 {
    let mut v = 0u64;
    for _ in 0..width {
        v = (v << 1) | u64::from(bits[*pos]);
        *pos += 1;
    }
    v
}

/// Hamming distance between equal-length bitstrings.
pub fn hamming(a: &[u8], b: &[u8]) -> usize {
    assert_eq!(a.len(), b.len(), "bitstring length mismatch");
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}
