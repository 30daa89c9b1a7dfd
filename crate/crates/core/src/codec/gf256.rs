//! Arithmetic in GF(2^8) with reduction polynomial x^8 + x^4 + x^3 + x + 1
//! (0x11B), plus the bulk slice kernels used by the fountain code.
//!
//! Tables are generated at compile time from the generator 0x03. The bulk
//! kernel `mul_add_slice` uses split-nibble shuffles on x86_64 when AVX2 or
//! SSSE3 is available and falls back to a full 64 KiB product table.

use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Sub};

pub const POLY: u16 = 0x11B;
const GENERATOR: u8 = 0x03;

const fn xtime_mul(mut a: u8, mut b: u8) -> u8 {
    let mut p = 0u8;
    while b != 0 {
        if b & 1 != 0 {
            p ^= a;
        }
        let hi = a & 0x80;
        a <<= 1;
        if hi != 0 {
            a ^= (POLY & 0xFF) as u8;
        }
        b >>= 1;
    }
    p
}

const fn build_exp() -> [u8; 512] {
    let mut exp = [0u8; 512];
    let mut x = 1u8;
    let mut i = 0;
    while i < 255 {
        exp[i] = x;
        exp[i + 255] = x;
        x = xtime_mul(x, GENERATOR);
        i += 1;
    }
    exp[510] = exp[0];
    exp[511] = exp[1];
    exp
}

const fn build_log(exp: &[u8; 512]) -> [u8; 256] {
    let mut log = [0u8; 256];
    let mut i = 0;
    while i < 255 {
        log[exp[i] as usize] = i as u8;
        i += 1;
    }
    log
}

const fn build_mul(exp: &[u8; 512], log: &[u8; 256]) -> [[u8; 256]; 256] {
    let mut t = [[0u8; 256]; 256];
    let mut a = 1;
    while a < 256 {
        let mut b = 1;
        while b < 256 {
            t[a][b] = exp[log[a] as usize + log[b] as usize];
            b += 1;
        }
        a += 1;
    }
    t
}

static EXP: [u8; 512] = build_exp();
static LOG: [u8; 256] = build_log(&EXP);
static MUL: [[u8; 256]; 256] = build_mul(&EXP, &LOG);

/// An element of GF(256).
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Gf256(pub u8);

impl Gf256 {
    pub const ZERO: Gf256 = Gf256(0);
    pub const ONE: Gf256 = Gf256(1);

    pub fn is_zero(self) -> bool {
        self.0 == 0
    }

    /// Multiplicative inverse; `None` for zero.
    pub fn inv(self) -> Option<Gf256> {
        if self.0 == 0 {
            None
        } else {
            Some(Gf256(EXP[255 - LOG[self.0 as usize] as usize]))
        }
    }

    pub fn pow(self, mut e: u32) -> Gf256 {
        if self.0 == 0 {
            return if e == 0 { Gf256::ONE } else { Gf256::ZERO };
        }
        e %= 255;
        Gf256(EXP[(LOG[self.0 as usize] as u32 * e % 255) as usize])
    }
}

impl fmt::Debug for Gf256 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Gf256({:#04x})", self.0)
    }
}

impl Add for Gf256 {
    type Output = Gf256;
    #[allow(clippy::suspicious_arithmetic_impl)]
    fn add(self, rhs: Gf256) -> Gf256 {
        Gf256(self.0 ^ rhs.0)
    }
}

impl AddAssign for Gf256 {
    #[allow(clippy::suspicious_op_assign_impl)]
    fn add_assign(&mut self, rhs: Gf256) {
        self.0 ^= rhs.0;
    }
}

impl Sub for Gf256 {
    type Output = Gf256;
    #[allow(clippy::suspicious_arithmetic_impl)]
    fn sub(self, rhs: Gf256) -> Gf256 {
        Gf256(self.0 ^ rhs.0)
    }
}

impl Mul for Gf256 {
    type Output = Gf256;
    fn mul(self, rhs: Gf256) -> Gf256 {
        Gf256(MUL[self.0 as usize][rhs.0 as usize])
    }
}

impl MulAssign for Gf256 {
    fn mul_assign(&mut self, rhs: Gf256) {
        *self = *self * rhs;
    }
}

impl Div for Gf256 {
    type Output = Gf256;
    /// Panics on division by zero.
    fn div(self, rhs: Gf256) -> Gf256 {
        self * rhs.inv().expect("division by zero in GF(256)")
    }
}

/// `dst ^= src`.
pub fn add_slice(dst: &mut [u8], src: &[u8]) {
    assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d ^= *s;
    }
}

/// `dst *= c` in place.
pub fn mul_slice(dst: &mut [u8], c: Gf256) {
    match c.0 {
        0 => dst.fill(0),
        1 => {}
        _ => {
            let row = &MUL[c.0 as usize];
            for d in dst.iter_mut() {
                *d = row[*d as usize];
            }
        }
    }
}

/// `dst ^= c * src`, the inner loop of both encoding and decoding.
pub fn mul_add_slice(dst: &mut [u8], src: &[u8], c: Gf256) {
    assert_eq!(dst.len(), src.len());
    match c.0 {
        0 => {}
        1 => add_slice(dst, src),
        _ => {
            #[cfg(target_arch = "x86_64")]
            {
                if std::is_x86_feature_detected!("avx2") {
                    // SAFETY: feature presence checked at runtime.
                    unsafe { simd::mul_add_avx2(dst, src, c.0) };
                    return;
                }
                if std::is_x86_feature_detected!("ssse3") {
                    // SAFETY: feature presence checked at runtime.
                    unsafe { simd::mul_add_ssse3(dst, src, c.0) };
                    return;
                }
            }
            mul_add_scalar(dst, src, c.0);
        }
    }
}

fn mul_add_scalar(dst: &mut [u8], src: &[u8], c: u8) {
    let row = &MUL[c as usize];
    for (d, s) in dst.iter_mut().zip(src) {
        *d ^= row[*s as usize];
    }
}

/// Products of `c` with every low nibble and every high nibble.
fn nibble_tables(c: u8) -> ([u8; 16], [u8; 16]) {
    let row = &MUL[c as usize];
    let mut lo = [0u8; 16];
    let mut hi = [0u8; 16];
    for i in 0..16 {
        lo[i] = row[i];
        hi[i] = row[i << 4];
    }
    (lo, hi)
}

#[cfg(target_arch = "x86_64")]
mod simd {
    use super::{mul_add_scalar, nibble_tables};
    use std::arch::x86_64::*;

    #[target_feature(enable = "avx2")]
    pub unsafe fn mul_add_avx2(dst: &mut [u8], src: &[u8], c: u8) {
        let (lo, hi) = nibble_tables(c);
        let lo128 = _mm_loadu_si128(lo.as_ptr() as *const __m128i);
        let hi128 = _mm_loadu_si128(hi.as_ptr() as *const __m128i);
        let tlo = _mm256_broadcastsi128_si256(lo128);
        let thi = _mm256_broadcastsi128_si256(hi128);
        let mask = _mm256_set1_epi8(0x0F);
        let n = dst.len() / 32 * 32;
        let mut i = 0;
        while i < n {
            let s = _mm256_loadu_si256(src.as_ptr().add(i) as *const __m256i);
            let d = _mm256_loadu_si256(dst.as_ptr().add(i) as *const __m256i);
            let l = _mm256_and_si256(s, mask);
            let h = _mm256_and_si256(_mm256_srli_epi64(s, 4), mask);
            let p = _mm256_xor_si256(_mm256_shuffle_epi8(tlo, l), _mm256_shuffle_epi8(thi, h));
            _mm256_storeu_si256(dst.as_mut_ptr().add(i) as *mut __m256i, _mm256_xor_si256(d, p));
            i += 32;
        }
        mul_add_scalar(&mut dst[n..], &src[n..], c);
    }

    #[target_feature(enable = "ssse3")]
    pub unsafe fn mul_add_ssse3(dst: &mut [u8], src: &[u8], c: u8) {
        let (lo, hi) = nibble_tables(c);
        let tlo = _mm_loadu_si128(lo.as_ptr() as *const __m128i);
        let thi = _mm_loadu_si128(hi.as_ptr() as *const __m128i);
        let mask = _mm_set1_epi8(0x0F);
        let n = dst.len() / 16 * 16;
        let mut i = 0;
        while i < n {
            let s = _mm_loadu_si128(src.as_ptr().add(i) as *const __m128i);
            let d = _mm_loadu_si128(dst.as_ptr().add(i) as *const __m128i);
            let l = _mm_and_si128(s, mask);
            let h = _mm_and_si128(_mm_srli_epi64(s, 4), mask);
            let p = _mm_xor_si128(_mm_shuffle_epi8(tlo, l), _mm_shuffle_epi8(thi, h));
            _mm_storeu_si128(dst.as_mut_ptr().add(i) as *mut __m128i, _mm_xor_si128(d, p));
            i += 16;
        }
        mul_add_scalar(&mut dst[n..], &src[n..], c);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Shift-and-add reference, independent of the log tables.
    fn slow_mul(a: u8, b: u8) -> u8 {
        let (mut a, mut b, mut p) = (a as u16, b as u16, 0u16);
        while b != 0 {
            if b & 1 != 0 {
                p ^= a;
            }
            a <<= 1;
            if a & 0x100 != 0 {
                a ^= POLY;
            }
            b >>= 1;
        }
        p as u8
    }

    #[test]
    fn doubling_0x80_reduces_to_0x1b() {
        assert_eq!(Gf256(0x02) * Gf256(0x80), Gf256(0x1B));
        assert_eq!(slow_mul(0x02, 0x80), 0x1B);
    }

    #[test]
    fn table_matches_shift_and_add() {
        for a in 0..=255u8 {
            for b in 0..=255u8 {
                assert_eq!((Gf256(a) * Gf256(b)).0, slow_mul(a, b), "{a} * {b}");
            }
        }
    }

    #[test]
    fn generator_has_full_order() {
        let g = Gf256(GENERATOR);
        let mut seen = std::collections::HashSet::new();
        let mut x = Gf256::ONE;
        for _ in 0..255 {
            seen.insert(x.0);
            x *= g;
        }
        assert_eq!(seen.len(), 255);
        assert_eq!(x, Gf256::ONE);
    }

    #[test]
    fn inverses() {
        assert_eq!(Gf256(0).inv(), None);
        for a in 1..=255u8 {
            let inv = Gf256(a).inv().unwrap();
            assert_eq!(Gf256(a) * inv, Gf256::ONE);
        }
        assert_eq!(Gf256(0x53).inv(), Some(Gf256(0xCA)));
    }

    #[test]
    fn kernels_agree_with_scalar() {
        let src: Vec<u8> = (0..1000u32).map(|i| (i * 7 + 3) as u8).collect();
        for c in [0u8, 1, 2, 0x1d, 0x80, 0xff] {
            let mut a: Vec<u8> = (0..1000u32).map(|i| (i * 13) as u8).collect();
            let mut b = a.clone();
            mul_add_slice(&mut a, &src, Gf256(c));
            for (d, s) in b.iter_mut().zip(&src) {
                *d ^= slow_mul(c, *s);
            }
            assert_eq!(a, b, "c = {c:#x}");
        }
    }

    #[test]
    fn pow_matches_repeated_mul() {
        let a = Gf256(0x57);
        let mut acc = Gf256::ONE;
        for e in 0..600 {
            assert_eq!(a.pow(e), acc);
            acc *= a;
        }
    }
}
