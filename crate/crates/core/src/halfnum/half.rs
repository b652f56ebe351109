use std::fmt;
use std::ops::Add;

/// IEEE 754 binary16 value, stored as its bit pattern.
///
/// Conversions are done in software so results do not depend on the host's
/// half-precision support.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Half(u16);

impl Half {
    pub const ZERO: Half = Half(0);
    pub const ONE: Half = Half(0x3C00);
    pub const INFINITY: Half = Half(0x7C00);
    pub const NEG_INFINITY: Half = Half(0xFC00);
    pub const NAN: Half = Half(0x7E00);
    pub const MAX: Half = Half(0x7BFF);
    /// Smallest positive subnormal, 2^-24.
    pub const MIN_POSITIVE_SUBNORMAL: Half = Half(0x0001);

    pub const fn from_bits(bits: u16) -> Self {
        Half(bits)
    }

    pub const fn to_bits(self) -> u16 {
        self.0
    }

    /// Nearest binary16 value, ties to even. Overflow goes to ±inf and any
    /// NaN becomes the canonical quiet NaN `0x7E00`.
    pub fn from_f64(x: f64) -> Self {
        if x.is_nan() {
            return Half::NAN;
        }
        let bits = x.to_bits();
        let sign = ((bits >> 48) & 0x8000) as u16;
        let biased = ((bits >> 52) & 0x7FF) as i32;
        let mant = bits & ((1u64 << 52) - 1);

        if biased == 0x7FF {
            return Half(sign | 0x7C00);
        }
        if biased == 0 {
            // f64 subnormals are far below half's smallest subnormal.
            return Half(sign);
        }
        let e = biased - 1023;
        if e >= 16 {
            return Half(sign | 0x7C00);
        }

        if e >= -14 {
            // Normal range: keep 10 of the 52 fraction bits.
            let keep = mant >> 42;
            let rem = mant & ((1u64 << 42) - 1);
            let halfway = 1u64 << 41;
            let round_up = rem > halfway || (rem == halfway && keep & 1 == 1);
            // A carry out of the fraction bumps the exponent, and from the top
            // binade it lands exactly on the infinity encoding.
            let magnitude = (((e + 15) as u64) << 10) + keep + round_up as u64;
            return Half(sign | magnitude as u16);
        }

        // Subnormal range: count units of 2^-24.
        let sig = (1u64 << 52) | mant;
        let shift = (28 - e) as u32;
        if shift >= 54 {
            // value < 2^-25, strictly below the rounding midpoint.
            return Half(sign);
        }
        let keep = sig >> shift;
        let rem = sig & ((1u64 << shift) - 1);
        let halfway = 1u64 << (shift - 1);
        let round_up = rem > halfway || (rem == halfway && keep & 1 == 1);
        Half(sign | (keep + round_up as u64) as u16)
    }

    pub fn to_f64(self) -> f64 {
        let sign = if self.0 & 0x8000 != 0 { -1.0 } else { 1.0 };
        let exp = ((self.0 >> 10) & 0x1F) as i32;
        let frac = (self.0 & 0x3FF) as f64;
        match exp {
            0 => sign * frac * 2f64.powi(-24),
            31 if frac == 0.0 => sign * f64::INFINITY,
            31 => f64::NAN,
            _ => sign * (1024.0 + frac) * 2f64.powi(exp - 25),
        }
    }

    pub fn is_nan(self) -> bool {
        self.0 & 0x7C00 == 0x7C00 && self.0 & 0x3FF != 0
    }

    pub fn is_finite(self) -> bool {
        self.0 & 0x7C00 != 0x7C00
    }
}

impl Add for Half {
    type Output = Half;

    /// Correctly rounded: the f64 sum of two halves is exact, so only the
    /// final conversion rounds.
    fn add(self, rhs: Half) -> Half {
        Half::from_f64(self.to_f64() + rhs.to_f64())
    }
}

impl From<Half> for f64 {
    fn from(h: Half) -> f64 {
        h.to_f64()
    }
}

impl fmt::Debug for Half {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Half({:#06x} = {})", self.0, self.to_f64())
    }
}

impl fmt::Display for Half {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.to_f64(), f)
    }
}

/// Rounds `x` to the nearest binary16 value.
pub fn half_round(x: f64) -> Half {
    Half::from_f64(x)
}

/// `x` rounded through binary16 and widened back.
pub fn round16(x: f64) -> f64 {
    Half::from_f64(x).to_f64()
}

/// Spacing of binary16 values at the magnitude of `x` (2^-24 in the
/// subnormal range).
pub fn ulp16(x: f64) -> f64 {
    let a = x.abs();
    if a < 2f64.powi(-14) {
        return 2f64.powi(-24);
    }
    let e = ((a.to_bits() >> 52) & 0x7FF) as i32 - 1023;
    2f64.powi(e - 10)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_values() {
        assert_eq!(half_round(1.0).to_bits(), 0x3C00);
        assert_eq!(half_round(-2.0).to_bits(), 0xC000);
        assert_eq!(half_round(0.0).to_bits(), 0x0000);
        assert_eq!(half_round(-0.0).to_bits(), 0x8000);
        assert_eq!(half_round(65504.0).to_bits(), 0x7BFF);
        assert_eq!(half_round(2f64.powi(-24)).to_bits(), 0x0001);
        assert_eq!(half_round(2f64.powi(-14)).to_bits(), 0x0400);
    }

    #[test]
    fn ties_go_to_even() {
        // 2049 sits halfway between 2048 and 2050.
        assert_eq!(half_round(2049.0).to_f64(), 2048.0);
        assert_eq!(half_round(2051.0).to_f64(), 2052.0);
        assert_eq!(half_round(1.0 + 2f64.powi(-11)).to_f64(), 1.0);
        // Half of the smallest subnormal rounds to zero, 1.5 units to 2.
        assert_eq!(half_round(2f64.powi(-25)).to_bits(), 0);
        assert_eq!(half_round(3.0 * 2f64.powi(-25)).to_bits(), 2);
    }

    #[test]
    fn overflow_threshold() {
        // Midpoint between MAX (65504) and the next binade step (65536).
        assert_eq!(half_round(65519.99).to_bits(), 0x7BFF);
        assert_eq!(half_round(65520.0), Half::INFINITY);
        assert_eq!(half_round(-65520.0), Half::NEG_INFINITY);
        assert_eq!(half_round(f64::INFINITY), Half::INFINITY);
    }

    #[test]
    fn nan_is_canonical() {
        assert_eq!(half_round(f64::NAN).to_bits(), 0x7E00);
        assert!(Half::NAN.is_nan());
        assert!(Half::from_bits(0x7C01).to_f64().is_nan());
    }

    #[test]
    fn add_rounds_once() {
        let one = Half::ONE;
        let tiny = half_round(2f64.powi(-11));
        assert_eq!((one + tiny).to_f64(), 1.0);
        assert_eq!((tiny + tiny).to_f64(), 2f64.powi(-10));
        assert_eq!((one + (tiny + tiny)).to_f64(), 1.0 + 2f64.powi(-10));
    }

    #[test]
    fn ulp_spacing() {
        assert_eq!(ulp16(1.0), 2f64.powi(-10));
        assert_eq!(ulp16(1.999), 2f64.powi(-10));
        assert_eq!(ulp16(2048.0), 2.0);
        assert_eq!(ulp16(1e-6), 2f64.powi(-24));
    }
}
