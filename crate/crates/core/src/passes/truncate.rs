//! Lossy 32-to-16-bit wire format: the upper half of an f32 encoding.
//!
//! Sign, all 8 exponent bits and the top 7 mantissa bits survive; the low 16
//! bits are dropped and refilled with zeros on receipt, without rounding.

const NAN_QUIET_BIT: u32 = 0x0040_0000;

/// Upper 16 bits of `x`. A NaN whose surviving mantissa bits would all be
/// zero gets its quiet bit set so it stays a NaN rather than becoming an
/// infinity.
pub fn to_wire16(x: f32) -> u16 {
    let mut bits = x.to_bits();
    if x.is_nan() && bits & 0x007F_0000 == 0 {
        bits |= NAN_QUIET_BIT;
    }
    (bits >> 16) as u16
}

pub fn from_wire16(h: u16) -> f32 {
    f32::from_bits((h as u32) << 16)
}

/// Truncation round trip: `from_wire16(to_wire16(x))`.
pub fn truncate16_f32(x: f32) -> f32 {
    from_wire16(to_wire16(x))
}
