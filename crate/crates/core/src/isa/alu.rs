//! Flag tables shared by the reference interpreter and the VM handlers.
//!
//! Where the architecture leaves a flag undefined the subset still fixes a
//! deterministic value, so the oracle and the VM agree bit for bit. AF is the
//! only flag treated as undefined by comparisons (see the harness mask).

use super::Width;
use serde::{Deserialize, Serialize};

/// The six modelled status flags.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Flags {
    pub cf: bool,
    pub pf: bool,
    pub af: bool,
    pub zf: bool,
    pub sf: bool,
    pub of: bool,
}

impl Flags {
    /// Packs the flags at their RFLAGS bit positions.
    pub fn to_bits(self) -> u64 {
        (self.cf as u64)
            | (self.pf as u64) << 2
            | (self.af as u64) << 4
            | (self.zf as u64) << 6
            | (self.sf as u64) << 7
            | (self.of as u64) << 11
    }

    pub fn from_bits(b: u64) -> Flags {
        Flags {
            cf: b & 1 != 0,
            pf: b & (1 << 2) != 0,
            af: b & (1 << 4) != 0,
            zf: b & (1 << 6) != 0,
            sf: b & (1 << 7) != 0,
            of: b & (1 << 11) != 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DivideError;

fn parity(r: u64) -> bool {
    (r as u8).count_ones() % 2 == 0
}

fn szp(w: Width, r: u64, f: &mut Flags) {
    f.zf = r & w.mask() == 0;
    f.sf = r & w.sign_bit() != 0;
    f.pf = parity(r);
}

/// Evaluates condition code `cc` against `f`.
pub fn cond_holds(cc: u8, f: &Flags) -> bool {
    let base = match cc >> 1 {
        0 => f.of,
        1 => f.cf,
        2 => f.zf,
        3 => f.cf || f.zf,
        4 => f.sf,
        5 => f.pf,
        6 => f.sf != f.of,
        _ => f.zf || (f.sf != f.of),
    };
    base ^ (cc & 1 == 1)
}

/// Width-parameterised arithmetic with full flag effects.
pub struct Alu;

impl Alu {
    pub fn add(w: Width, a: u64, b: u64, carry_in: bool, f: &Flags) -> (u64, Flags) {
        let m = w.mask();
        let (a, b) = (a & m, b & m);
        let wide = a as u128 + b as u128 + carry_in as u128;
        let r = (wide as u64) & m;
        let mut out = *f;
        out.cf = wide > m as u128;
        out.of = (!(a ^ b) & (a ^ r)) & w.sign_bit() != 0;
        out.af = (a ^ b ^ r) & 0x10 != 0;
        szp(w, r, &mut out);
        (r, out)
    }

    pub fn sub(w: Width, a: u64, b: u64, borrow_in: bool, f: &Flags) -> (u64, Flags) {
        let m = w.mask();
        let (a, b) = (a & m, b & m);
        let r = a.wrapping_sub(b).wrapping_sub(borrow_in as u64) & m;
        let mut out = *f;
        out.cf = (a as u128) < b as u128 + borrow_in as u128;
        out.of = ((a ^ b) & (a ^ r)) & w.sign_bit() != 0;
        out.af = (a ^ b ^ r) & 0x10 != 0;
        szp(w, r, &mut out);
        (r, out)
    }

    /// AND/OR/XOR/TEST flag effects on an already computed result.
    pub fn logic(w: Width, r: u64, f: &Flags) -> (u64, Flags) {
        let r = r & w.mask();
        let mut out = *f;
        out.cf = false;
        out.of = false;
        out.af = false;
        szp(w, r, &mut out);
        (r, out)
    }

    pub fn inc(w: Width, a: u64, f: &Flags) -> (u64, Flags) {
        let (r, mut out) = Self::add(w, a, 1, false, f);
        out.cf = f.cf;
        (r, out)
    }

    pub fn dec(w: Width, a: u64, f: &Flags) -> (u64, Flags) {
        let (r, mut out) = Self::sub(w, a, 1, false, f);
        out.cf = f.cf;
        (r, out)
    }

    pub fn neg(w: Width, a: u64, f: &Flags) -> (u64, Flags) {
        let (r, mut out) = Self::sub(w, 0, a, false, f);
        out.cf = a & w.mask() != 0;
        (r, out)
    }

    fn count_mask(w: Width, count: u64) -> u32 {
        (count & if w == Width::W64 { 0x3F } else { 0x1F }) as u32
    }

    pub fn shl(w: Width, a: u64, count: u64, f: &Flags) -> (u64, Flags) {
        let a = a & w.mask();
        let n = Self::count_mask(w, count);
        if n == 0 {
            return (a, *f);
        }
        let wide = (a as u128) << n;
        let r = (wide as u64) & w.mask();
        let mut out = *f;
        out.cf = (wide >> w.bits()) & 1 != 0;
        out.of = (r & w.sign_bit() != 0) != out.cf;
        out.af = false;
        szp(w, r, &mut out);
        (r, out)
    }

    pub fn shr(w: Width, a: u64, count: u64, f: &Flags) -> (u64, Flags) {
        let a = a & w.mask();
        let n = Self::count_mask(w, count);
        if n == 0 {
            return (a, *f);
        }
        let r = if n >= 64 { 0 } else { a >> n };
        let mut out = *f;
        out.cf = if n > 64 { false } else { ((a as u128) >> (n - 1)) & 1 != 0 };
        out.of = a & w.sign_bit() != 0;
        out.af = false;
        szp(w, r, &mut out);
        (r, out)
    }

    pub fn sar(w: Width, a: u64, count: u64, f: &Flags) -> (u64, Flags) {
        let a = a & w.mask();
        let n = Self::count_mask(w, count);
        if n == 0 {
            return (a, *f);
        }
        let s = w.sext(a) as i64;
        let r = (s >> n.min(63)) as u64 & w.mask();
        let mut out = *f;
        out.cf = (s >> (n - 1).min(63)) & 1 != 0;
        out.of = false;
        out.af = false;
        szp(w, r, &mut out);
        (r, out)
    }

    pub fn rol(w: Width, a: u64, count: u64, f: &Flags) -> (u64, Flags) {
        let a = a & w.mask();
        let n = Self::count_mask(w, count);
        if n == 0 {
            return (a, *f);
        }
        let k = n % w.bits();
        let r = if k == 0 { a } else { ((a << k) | (a >> (w.bits() - k))) & w.mask() };
        let mut out = *f;
        out.cf = r & 1 != 0;
        out.of = (r & w.sign_bit() != 0) != out.cf;
        (r, out)
    }

    pub fn ror(w: Width, a: u64, count: u64, f: &Flags) -> (u64, Flags) {
        let a = a & w.mask();
        let n = Self::count_mask(w, count);
        if n == 0 {
            return (a, *f);
        }
        let k = n % w.bits();
        let r = if k == 0 { a } else { ((a >> k) | (a << (w.bits() - k))) & w.mask() };
        let mut out = *f;
        let msb = r & w.sign_bit() != 0;
        let msb1 = r & (w.sign_bit() >> 1) != 0;
        out.cf = msb;
        out.of = msb != msb1;
        (r, out)
    }

    fn mul_flags(w: Width, lo: u64, overflow: bool, f: &Flags) -> Flags {
        let mut out = *f;
        out.cf = overflow;
        out.of = overflow;
        out.af = false;
        szp(w, lo, &mut out);
        out
    }

    /// Unsigned widening multiply; returns (low, high) halves.
    pub fn mul_wide(w: Width, a: u64, b: u64, f: &Flags) -> (u64, u64, Flags) {
        let p = (a & w.mask()) as u128 * (b & w.mask()) as u128;
        let lo = (p as u64) & w.mask();
        let hi = ((p >> w.bits()) as u64) & w.mask();
        (lo, hi, Self::mul_flags(w, lo, hi != 0, f))
    }

    /// Signed widening multiply; returns (low, high) halves.
    pub fn imul_wide(w: Width, a: u64, b: u64, f: &Flags) -> (u64, u64, Flags) {
        let p = (w.sext(a) as i64 as i128) * (w.sext(b) as i64 as i128);
        let lo = (p as u64) & w.mask();
        let hi = ((p >> w.bits()) as u64) & w.mask();
        let overflow = p != w.sext(lo) as i64 as i128;
        (lo, hi, Self::mul_flags(w, lo, overflow, f))
    }

    /// Signed truncating multiply (two- and three-operand IMUL).
    pub fn imul_trunc(w: Width, a: u64, b: u64, f: &Flags) -> (u64, Flags) {
        let (lo, _, out) = Self::imul_wide(w, a, b, f);
        (lo, out)
    }

    /// Unsigned divide of `hi:lo` by `d`; returns (quotient, remainder).
    pub fn div(w: Width, hi: u64, lo: u64, d: u64) -> Result<(u64, u64), DivideError> {
        let d = (d & w.mask()) as u128;
        if d == 0 {
            return Err(DivideError);
        }
        let n = ((hi & w.mask()) as u128) << w.bits() | (lo & w.mask()) as u128;
        let q = n / d;
        if q > w.mask() as u128 {
            return Err(DivideError);
        }
        Ok((q as u64, (n % d) as u64))
    }

    /// Signed divide of `hi:lo` by `d`; returns (quotient, remainder).
    pub fn idiv(w: Width, hi: u64, lo: u64, d: u64) -> Result<(u64, u64), DivideError> {
        let d = w.sext(d) as i64 as i128;
        if d == 0 {
            return Err(DivideError);
        }
        let bits = w.bits();
        let raw = ((hi & w.mask()) as u128) << bits | (lo & w.mask()) as u128;
        // sign-extend the 2*bits dividend
        let shift = 128 - 2 * bits;
        let n = ((raw << shift) as i128) >> shift;
        let q = n.checked_div(d).ok_or(DivideError)?;
        let min = -(1i128 << (bits - 1));
        let max = (1i128 << (bits - 1)) - 1;
        if q < min || q > max {
            return Err(DivideError);
        }
        let r = n % d;
        Ok((q as u64 & w.mask(), r as u64 & w.mask()))
    }

    pub fn bt(w: Width, a: u64, bit: u64, f: &Flags) -> Flags {
        let n = bit % w.bits() as u64;
        let mut out = *f;
        out.cf = (a >> n) & 1 != 0;
        out
    }

    pub fn bswap(w: Width, a: u64) -> u64 {
        match w {
            Width::W64 => a.swap_bytes(),
            _ => (a as u32).swap_bytes() as u64,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const F0: Flags = Flags { cf: false, pf: false, af: false, zf: false, sf: false, of: false };

    #[test]
    fn add_small_and_wrap() {
        let (r, f) = Alu::add(Width::W64, 1, 2, false, &F0);
        assert_eq!(r, 3);
        assert!(!f.zf && !f.cf && !f.of);
        let (r, f) = Alu::add(Width::W64, u64::MAX, 1, false, &F0);
        assert_eq!(r, 0);
        assert!(f.cf && f.zf && !f.of && f.af);
    }

    #[test]
    fn shl_msb_out() {
        let (r, f) = Alu::shl(Width::W64, 0x8000_0000_0000_0000, 1, &F0);
        assert_eq!(r, 0);
        assert!(f.cf && f.of && f.zf);
    }

    #[test]
    fn shift_count_zero_preserves_flags() {
        let f = Flags { cf: true, of: true, ..F0 };
        let (r, out) = Alu::shr(Width::W32, 0x1234, 0x20, &f);
        assert_eq!(r, 0x1234);
        assert_eq!(out, f);
    }

    #[test]
    fn conditions() {
        let z = Flags { zf: true, ..F0 };
        assert!(cond_holds(4, &z)); // E
        assert!(!cond_holds(5, &z)); // NE
        let lt = Flags { sf: true, ..F0 };
        assert!(cond_holds(12, &lt)); // L
        assert!(!cond_holds(15, &lt)); // G
    }

    #[test]
    fn division_errors() {
        assert_eq!(Alu::div(Width::W64, 0, 5, 0), Err(DivideError));
        assert_eq!(Alu::div(Width::W8, 0x1, 0x00, 1), Err(DivideError));
        assert_eq!(Alu::idiv(Width::W64, u64::MAX, 0x8000_0000_0000_0000, u64::MAX), Err(DivideError));
        assert_eq!(Alu::idiv(Width::W32, u64::MAX, (-7i64) as u64, 2), Ok(((-3i64) as u64 & 0xFFFF_FFFF, (-1i64) as u64 & 0xFFFF_FFFF)));
    }

    #[test]
    fn flag_bits_roundtrip() {
        let f = Flags { cf: true, pf: false, af: true, zf: false, sf: true, of: true };
        assert_eq!(Flags::from_bits(f.to_bits()), f);
    }
}
