//! Binary BCH codes of length 255 with Berlekamp-Massey decoding.

use std::sync::LazyLock;

use super::gf256::{Gf256, GROUP_ORDER};

/// Code length; fixed by the field order.
pub const BCH_N: usize = 255;

/// Correction capabilities selectable for the payload body; the wire
/// selector is the index into this table.
pub const BODY_T_TABLE: [usize; 5] = [8, 12, 16, 20, 24];

/// Designed t of the fixed metadata code: the strongest 255-bit code whose
/// message length still covers the 96-bit record (k = 99).
pub const METADATA_T: usize = 23;

/// Wire selector for a body correction capability.
pub fn body_selector(t: usize) -> Option<usize> {
    BODY_T_TABLE.iter().position(|&x| x == t)
}

static BODY_CODES: LazyLock<[BchCode; 5]> =
    LazyLock::new(|| BODY_T_TABLE.map(BchCode::new));

static METADATA_CODE: LazyLock<BchCode> = LazyLock::new(|| BchCode::new(METADATA_T));

/// The body code for a correction capability from BODY_T_TABLE.
pub fn body_code(t: usize) -> &'static BchCode {
    &BODY_CODES[body_selector(t).expect("t must come from BODY_T_TABLE")]
}

/// The fixed code protecting the metadata record.
pub fn metadata_code() -> &'static BchCode {
    &METADATA_CODE
}

/// A binary narrow-sense BCH code over GF(256), built for a designed
/// correction capability `t`.
pub struct BchCode {
    gf: Gf256,
    k: usize,
    t: usize,
    /// Generator polynomial bits, ascending degree; length n-k+1.
    generator: Vec<u8>,
}

impl BchCode {
    /// Builds the code correcting up to `t` bit errors per 255-bit block.
    pub fn new(t: usize) -> Self {
        assert!(t >= 1 && 2 * t < BCH_N, "designed distance out of range");
        let gf = Gf256::new();

        // Cyclotomic cosets of the exponents 1..=2t; the generator is the
        // product of the distinct minimal polynomials.
        let mut covered = [false; GROUP_ORDER];
        let mut generator = vec![1u8];
        for s in 1..=2 * t {
            if covered[s % GROUP_ORDER] {
                continue;
            }
            let mut coset = Vec::new();
            let mut e = s % GROUP_ORDER;
            loop {
                covered[e] = true;
                coset.push(e);
                e = (e * 2) % GROUP_ORDER;
                if e == s % GROUP_ORDER {
                    break;
                }
            }
            let min_poly = minimal_poly(&gf, &coset);
            generator = gf2_mul(&generator, &min_poly);
        }

        let k = BCH_N - (generator.len() - 1);
        Self { gf, k, t, generator }
    }

    pub fn n(&self) -> usize {
        BCH_N
    }

    /// Message bits per block.
    pub fn k(&self) -> usize {
        self.k
    }

    /// Correctable errors per block.
    pub fn t(&self) -> usize {
        self.t
    }

    /// Systematic encode: output is `msg` followed by n-k parity bits.
    /// Bit i of the output is the coefficient of x^(n-1-i).
    pub fn encode(&self, msg: &[u8]) -> Vec<u8> {
        assert_eq!(msg.len(), self.k, "message must be exactly k bits");
        let parity_len = BCH_N - self.k;
        // Long division of m(x)*x^(n-k) by g(x), tracking only the remainder.
        let mut rem = vec![0u8; parity_len];
        for &bit in msg {
            let feedback = bit ^ rem[parity_len - 1];
            // Shift up one degree, folding in g when the top bit pops out.
            for j in (1..parity_len).rev() {
                rem[j] = rem[j - 1] ^ (feedback & self.generator[j]);
            }
            rem[0] = feedback & self.generator[0];
        }
        let mut out = Vec::with_capacity(BCH_N);
        out.extend_from_slice(msg);
        // Parity bits in descending degree to match the codeword bit order.
        for j in (0..parity_len).rev() {
            out.push(rem[j]);
        }
        out
    }

    /// Decodes one 255-bit block. Returns the message bits and the number of
    /// corrected errors, or None when more than t errors are present (as far
    /// as that is detectable).
    pub fn decode(&self, recv: &[u8]) -> Option<(Vec<u8>, usize)> {
        assert_eq!(recv.len(), BCH_N, "block must be exactly n bits");
        let syn = self.syndromes(recv);
        if syn.iter().all(|&s| s == 0) {
            return Some((recv[..self.k].to_vec(), 0));
        }

        let sigma = self.berlekamp_massey(&syn)?;
        let deg = sigma.len() - 1;

        // Chien search: bit index i holds the coefficient of x^(n-1-i), so an
        // error there corresponds to a root of sigma at alpha^-(n-1-i).
        let mut error_positions = Vec::new();
        for i in 0..BCH_N {
            let e = BCH_N - 1 - i;
            let x = self.gf.alpha_pow(GROUP_ORDER - (e % GROUP_ORDER));
            if self.eval_poly(&sigma, x) == 0 {
                error_positions.push(i);
            }
        }
        if error_positions.len() != deg {
            return None;
        }

        let mut fixed = recv.to_vec();
        for &i in &error_positions {
            fixed[i] ^= 1;
        }
        // The flipped word must be a true codeword, not just BM-consistent.
        if self.syndromes(&fixed).iter().any(|&s| s != 0) {
            return None;
        }
        Some((fixed[..self.k].to_vec(), deg))
    }

    fn syndromes(&self, recv: &[u8]) -> Vec<u8> {
        // S_j = r(alpha^j) via Horner over descending-degree coefficients.
        (1..=2 * self.t)
            .map(|j| {
                let a = self.gf.alpha_pow(j);
                recv.iter().fold(0u8, |acc, &b| self.gf.mul(acc, a) ^ b)
            })
            .collect()
    }

    /// Error-locator polynomial (ascending coefficients), or None when its
    /// degree exceeds t.
    fn berlekamp_massey(&self, syn: &[u8]) -> Option<Vec<u8>> {
        let gf = &self.gf;
        let mut sigma = vec![1u8];
        let mut prev = vec![1u8];
        let mut l = 0usize;
        let mut m = 1usize;
        let mut b = 1u8;
        for i in 0..syn.len() {
            let mut d = syn[i];
            for j in 1..=l.min(sigma.len() - 1) {
                d ^= gf.mul(sigma[j], syn[i - j]);
            }
            if d == 0 {
                m += 1;
            } else if 2 * l <= i {
                let tmp = sigma.clone();
                let coeff = gf.mul(d, gf.inv(b));
                sigma = poly_add_scaled(gf, &sigma, &prev, coeff, m);
                prev = tmp;
                l = i + 1 - l;
                b = d;
                m = 1;
            } else {
                let coeff = gf.mul(d, gf.inv(b));
                sigma = poly_add_scaled(gf, &sigma, &prev, coeff, m);
                m += 1;
            }
        }
        // Trim trailing zeros; the reported degree must be the true one.
        while sigma.len() > 1 && *sigma.last().unwrap() == 0 {
            sigma.pop();
        }
        if sigma.len() - 1 > self.t || l != sigma.len() - 1 {
            return None;
        }
        Some(sigma)
    }

    fn eval_poly(&self, poly: &[u8], x: u8) -> u8 {
        poly.iter().rev().fold(0u8, |acc, &c| self.gf.mul(acc, x) ^ c)
    }
}

/// sigma + coeff * x^shift * prev over GF(256) coefficients.
fn poly_add_scaled(gf: &Gf256, sigma: &[u8], prev: &[u8], coeff: u8, shift: usize) -> Vec<u8> {
    let len = sigma.len().max(prev.len() + shift);
    let mut out = vec![0u8; len];
    out[..sigma.len()].copy_from_slice(sigma);
    for (j, &p) in prev.iter().enumerate() {
        out[j + shift] ^= gf.mul(coeff, p);
    }
    out
}

/// Minimal polynomial of { alpha^e : e in coset }, computed over GF(256);
/// the result has GF(2) coefficients.
fn minimal_poly(gf: &Gf256, coset: &[usize]) -> Vec<u8> {
    let mut poly = vec![1u8];
    for &e in coset {
        let root = gf.alpha_pow(e);
        // poly *= (x + root)
        let mut next = vec![0u8; poly.len() + 1];
        for (i, &c) in poly.iter().enumerate() {
            next[i + 1] ^= c;
            next[i] ^= gf.mul(c, root);
        }
        poly = next;
    }
    for &c in &poly {
        assert!(c <= 1, "minimal polynomial must have binary coefficients");
    }
    poly
}

/// GF(2)[x] product of bit-coefficient polynomials.
fn gf2_mul(a: &[u8], b: &[u8]) -> Vec<u8> {
    let mut out = vec![0u8; a.len() + b.len() - 1];
    for (i, &ai) in a.iter().enumerate() {
        if ai == 0 {
            continue;
        }
        for (j, &bj) in b.iter().enumerate() {
            out[i + j] ^= bj;
        }
    }
    out
}
