//! GF(2^8) arithmetic with the primitive polynomial x^8+x^4+x^3+x^2+1.

/// Primitive polynomial 0x11D, the conventional generator for GF(256).
pub const PRIMITIVE_POLY: u16 = 0x11D;

/// Field order minus one: the multiplicative group size.
pub const GROUP_ORDER: usize = 255;

/// Log/antilog tables for GF(256).
pub struct Gf256 {
    exp: [u8; 512],
    log: [u8; 256],
}

impl Gf256 {
    pub fn new() -> Self {
        let mut exp = [0u8; 512];
        let mut log = [0u8; 256];
        let mut x: u16 = 1;
        for i in 0..GROUP_ORDER {
            exp[i] = x as u8;
            log[x as usize] = i as u8;
            x <<= 1;
            if x & 0x100 != 0 {
                x ^= PRIMITIVE_POLY;
            }
        }
        // Duplicate so exp lookups never need an explicit mod 255.
        for i in GROUP_ORDER..512 {
            exp[i] = exp[i - GROUP_ORDER];
        }
        Self { exp, log }
    }

    /// alpha^i for any exponent.
    #[inline]
    pub fn alpha_pow(&self, i: usize) -> u8 {
        self.exp[i % GROUP_ORDER]
    }

    #[inline]
    pub fn mul(&self, a: u8, b: u8) -> u8 {
        if a == 0 || b == 0 {
            0
        } else {
            self.exp[self.log[a as usize] as usize + self.log[b as usize] as usize]
        }
    }

    #[inline]
    pub fn inv(&self, a: u8) -> u8 {
        assert_ne!(a, 0, "zero has no inverse");
        self.exp[GROUP_ORDER - self.log[a as usize] as usize]
    }

    /// Discrete log base alpha; undefined for zero.
    #[inline]
    pub fn log(&self, a: u8) -> usize {
        assert_ne!(a, 0);
        self.log[a as usize] as usize
    }
}

impl Default for Gf256 {
    fn default() -> Self {
        Self::new()
    }
}
