//! IEEE 754 binary16 stored as a bare bit pattern, with round-to-nearest-
//! even conversions. Everything here is exact bit manipulation; the only
//! rounding happens in `f32_to_half`.

/// Shift right with round-to-nearest, ties-to-even, including the carry
/// into higher bits that rounding can produce.
fn round_shift_rne(v: u32, shift: u32) -> u32 {
    if shift == 0 {
        return v;
    }
    let shift = shift.min(31);
    let kept = v >> shift;
    let rem = v & ((1u32 << shift) - 1);
    let half = 1u32 << (shift - 1);
    kept + u32::from(rem > half || (rem == half && kept & 1 == 1))
}

pub const HALF_MAX: f32 = 65504.0;
pub const POS_INF: u16 = 0x7C00;
pub const QUIET_NAN: u16 = 0x7E00;

pub fn f32_to_half(x: f32) -> u16 {
    let bits = x.to_bits();
    let sign = ((bits >> 16) & 0x8000) as u16;
    let exp = ((bits >> 23) & 0xFF) as i32;
    let man = bits & 0x007F_FFFF;
    if exp == 255 {
        return if man == 0 { sign | POS_INF } else { sign | QUIET_NAN };
    }
    let e = exp - 127 + 15;
    if e <= 0 {
        // Subnormal target range. The implicit 1 joins the mantissa and the
        // whole significand shifts into units of 2^-24 (the half subnormal
        // ulp); rounding may carry into the smallest normal, which is the
        // correct result by construction.
        if exp == 0 && man == 0 {
            return sign; // ±0 stays signed
        }
        let significand = man | 0x0080_0000;
        return sign | round_shift_rne(significand, (14 - e) as u32) as u16;
    }
    // Normal range: exponent and mantissa rounded as one field so the
    // mantissa carry can bump the exponent, overflowing to infinity when
    // the value rounds past 65504.
    let q = ((e as u32) << 23) | man;
    let r = round_shift_rne(q, 13);
    if r >= u32::from(POS_INF) {
        sign | POS_INF
    } else {
        sign | r as u16
    }
}

pub fn half_to_f32(h: u16) -> f32 {
    let sign = u32::from(h >> 15) << 31;
    let exp = u32::from((h >> 10) & 0x1F);
    let man = u32::from(h & 0x3FF);
    let bits = match (exp, man) {
        (0, 0) => sign,
        (0, _) => {
            // Subnormal: normalize by shifting the leading 1 into place.
            let mut e = 113u32; // biased f32 exponent of 2^-14
            let mut m = man;
            while m & 0x400 == 0 {
                m <<= 1;
                e -= 1;
            }
            sign | (e << 23) | ((m & 0x3FF) << 13)
        }
        (31, 0) => sign | 0x7F80_0000,
        (31, _) => sign | 0x7FC0_0000 | (man << 13),
        _ => sign | ((exp + 112) << 23) | (man << 13),
    };
    f32::from_bits(bits)
}
