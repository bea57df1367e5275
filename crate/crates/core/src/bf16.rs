//! bfloat16 words: 1 sign bit, 8 exponent bits, 7 mantissa bits.
//!
//! bf16 is the upper half of an IEEE 754 f32, so widening is exact and
//! narrowing only has to round away the low 16 mantissa bits. All arithmetic
//! in this crate runs in f32; bf16 is a storage format.

/// A bfloat16 value stored as its raw 16-bit pattern.
#[derive(Copy, Clone, PartialEq, Eq, Debug, Default)]
#[repr(transparent)]
pub struct Bf16Word(pub u16);

impl Bf16Word {
    pub const ZERO: Self = Self(0x0000);
    pub const ONE: Self = Self(0x3F80);

    #[inline(always)]
    pub const fn from_bits(bits: u16) -> Self {
        Self(bits)
    }

    #[inline(always)]
    pub const fn to_bits(self) -> u16 {
        self.0
    }

    /// Round an f32 to the nearest bf16 (ties to even).
    #[inline]
    pub fn from_f32(x: f32) -> Self {
        let bits = x.to_bits();
        if x.is_nan() {
            // Keep NaNs quiet; rounding could otherwise collapse a payload to inf.
            let sign = ((bits >> 16) as u16) & 0x8000;
            return Self(sign | 0x7FC0);
        }
        let round = bits.wrapping_add(0x7FFF + ((bits >> 16) & 1));
        Self((round >> 16) as u16)
    }

    /// Widen to f32. Exact: the low 16 mantissa bits are zero-filled.
    #[inline(always)]
    pub fn to_f32(self) -> f32 {
        f32::from_bits((self.0 as u32) << 16)
    }

    /// The 8-bit biased exponent field.
    #[inline(always)]
    pub const fn exponent(self) -> u16 {
        (self.0 >> 7) & 0xFF
    }

    /// The 7-bit mantissa field.
    #[inline(always)]
    pub const fn mantissa(self) -> u16 {
        self.0 & 0x7F
    }

    /// Sign bit (1 = negative).
    #[inline(always)]
    pub const fn sign(self) -> u16 {
        self.0 >> 15
    }
}

/// Round-trip an f32 through bf16, yielding the nearest representable value.
#[inline]
pub fn round_f32_to_bf16(x: f32) -> f32 {
    Bf16Word::from_f32(x).to_f32()
}

/// One unit in the last place of `x` at bf16 precision (7-bit mantissa).
///
/// Used for tolerance checks of the form "exact up to one bf16 ulp".
pub fn bf16_ulp(x: f32) -> f32 {
    let e = Bf16Word::from_f32(x.abs()).exponent() as i32;
    if e == 0 {
        2f32.powi(-126 - 7) // subnormal spacing
    } else {
        2f32.powi(e - 127 - 7)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn widen_narrow_identity_on_bf16_values() {
        for bits in [0x0000u16, 0x3F80, 0xBF80, 0x3F00, 0x0080, 0x7F7F, 0x4780] {
            let w = Bf16Word::from_bits(bits);
            assert_eq!(Bf16Word::from_f32(w.to_f32()), w);
        }
    }

    #[test]
    fn rne_rounds_ties_to_even() {
        // 1.0 + 2^-8 sits exactly between bf16(1.0) and the next value up;
        // the even mantissa (0x00) wins.
        let x = f32::from_bits(0x3F80_8000);
        assert_eq!(Bf16Word::from_f32(x).to_bits(), 0x3F80);
        // One bit more rounds up.
        let y = f32::from_bits(0x3F80_8001);
        assert_eq!(Bf16Word::from_f32(y).to_bits(), 0x3F81);
    }

    #[test]
    fn known_values() {
        assert_eq!(Bf16Word::from_f32(1.0).to_bits(), 0x3F80);
        assert_eq!(Bf16Word::from_f32(-1.0).to_bits(), 0xBF80);
        assert_eq!(Bf16Word::from_f32(0.5).to_bits(), 0x3F00);
        assert_eq!(Bf16Word::from_f32(0.55).to_bits(), 0x3F0D);
        assert_eq!(Bf16Word::from_f32(0.55).to_f32(), 0.55078125);
    }

    #[test]
    fn nan_stays_nan() {
        assert!(Bf16Word::from_f32(f32::NAN).to_f32().is_nan());
    }
}
