//! The 96-bit metadata record that frames the hidden payload.
//!
//! Field widths (MSB-first): fec selector 4, coded-body length 20,
//! latent width 13, latent height 13, grid stride 4, grid height 13,
//! grid width 13, border 8, aux 8. The aux byte packs the quantized
//! scale numerator minus one (4 bits) and the original dims' remainders
//! modulo the stride (2 bits each), which together make the record
//! self-contained: original, scaled, and latent dimensions are all
//! integer-exact derivations from it.

use thiserror::Error;

use super::bch::{body_selector, metadata_code, BODY_T_TABLE};
use crate::bits::{push_uint, read_uint};

/// Record length in bits before FEC.
pub const METADATA_BITS: usize = 96;

/// Scale quantization denominator: s is carried as scale_q / 16.
pub const SCALE_DENOM: usize = 16;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetadataError {
    #[error("{field} = {value} exceeds its field width (max {max})")]
    FieldOverflow { field: &'static str, value: usize, max: usize },
    #[error("unknown fec selector {0}")]
    BadSelector(usize),
    #[error("stride {0} unsupported (must be 1, 2, or 4)")]
    BadStride(usize),
    #[error("{0}")]
    Inconsistent(&'static str),
}

/// Decoded view of the record. `latent_*` are the codebook-index grid dims
/// of the scaled image; `grid_*` are interior payload cells (border excluded).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Metadata {
    pub fec_t: usize,
    pub coded_body_len: usize,
    pub latent_w: usize,
    pub latent_h: usize,
    pub stride: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub border: usize,
    /// Scale numerator: effective scale is scale_q / 16, in (0, 1].
    pub scale_q: usize,
    /// Original height mod stride.
    pub h_rem: usize,
    /// Original width mod stride.
    pub w_rem: usize,
}

/// Length after the bicubic pre-scale by scale_q/16, round-half-up.
pub fn scaled_dim(n: usize, scale_q: usize) -> usize {
    (n * scale_q + SCALE_DENOM / 2) / SCALE_DENOM
}

impl Metadata {
    /// Original image dims. The padded canvas is stride * (grid + 2*border)
    /// per side; the remainders give back the exact pre-padding size.
    pub fn original_dims(&self) -> (usize, usize) {
        let unpad = |cells: usize, rem: usize| {
            let padded = self.stride * (cells + 2 * self.border);
            padded - (self.stride - rem) % self.stride
        };
        (unpad(self.grid_h, self.h_rem), unpad(self.grid_w, self.w_rem))
    }

    /// Dims of the scaled image that was content-encoded.
    pub fn scaled_dims(&self) -> (usize, usize) {
        let (h, w) = self.original_dims();
        (scaled_dim(h, self.scale_q), scaled_dim(w, self.scale_q))
    }

    /// Latent bit budget: z_b length given bits per codebook index.
    pub fn latent_bits(&self, bits_per_index: usize) -> usize {
        self.latent_h * self.latent_w * bits_per_index
    }

    /// Cross-field checks that FEC alone cannot guarantee. `spatial_down`
    /// is the content codec's total downsampling factor S.
    pub fn validate(&self, spatial_down: usize) -> Result<(), MetadataError> {
        if !matches!(self.stride, 1 | 2 | 4) {
            return Err(MetadataError::BadStride(self.stride));
        }
        if self.scale_q == 0 || self.scale_q > SCALE_DENOM {
            return Err(MetadataError::Inconsistent("scale out of (0, 1]"));
        }
        if self.h_rem >= self.stride || self.w_rem >= self.stride {
            return Err(MetadataError::Inconsistent("remainder not below stride"));
        }
        if self.coded_body_len == 0 || self.coded_body_len % super::bch::BCH_N != 0 {
            return Err(MetadataError::Inconsistent("coded body not whole blocks"));
        }
        if self.grid_h == 0 || self.grid_w == 0 {
            return Err(MetadataError::Inconsistent("empty interior"));
        }
        let (hs, ws) = self.scaled_dims();
        let ceil_div = |a: usize, b: usize| a.div_ceil(b);
        if ceil_div(hs, spatial_down) != self.latent_h
            || ceil_div(ws, spatial_down) != self.latent_w
        {
            return Err(MetadataError::Inconsistent("latent dims disagree with scaled dims"));
        }
        Ok(())
    }

    pub fn to_bits(&self) -> Result<Vec<u8>, MetadataError> {
        let selector =
            body_selector(self.fec_t).ok_or(MetadataError::BadSelector(self.fec_t))?;
        if !matches!(self.stride, 1 | 2 | 4) {
            return Err(MetadataError::BadStride(self.stride));
        }
        let aux = (self.scale_q - 1) << 4 | self.h_rem << 2 | self.w_rem;
        let fields: [(&'static str, usize, usize); 9] = [
            ("fec selector", selector, 4),
            ("coded body length", self.coded_body_len, 20),
            ("latent width", self.latent_w, 13),
            ("latent height", self.latent_h, 13),
            ("grid stride", self.stride, 4),
            ("grid height", self.grid_h, 13),
            ("grid width", self.grid_w, 13),
            ("border", self.border, 8),
            ("aux", aux, 8),
        ];
        let mut bits = Vec::with_capacity(METADATA_BITS);
        for (field, value, width) in fields {
            if value >= 1 << width {
                return Err(MetadataError::FieldOverflow { field, value, max: (1 << width) - 1 });
            }
            push_uint(&mut bits, value as u64, width);
        }
        debug_assert_eq!(bits.len(), METADATA_BITS);
        Ok(bits)
    }

    pub fn from_bits(bits: &[u8]) -> Result<Self, MetadataError> {
        assert_eq!(bits.len(), METADATA_BITS, "record must be exactly 96 bits");
        let mut pos = 0;
        let mut take = |w: usize| read_uint(bits, &mut pos, w) as usize;
        let selector = take(4);
        let coded_body_len = take(20);
        let latent_w = take(13);
        let latent_h = take(13);
        let stride = take(4);
        let grid_h = take(13);
        let grid_w = take(13);
        let border = take(8);
        let aux = take(8);
        let fec_t = *BODY_T_TABLE.get(selector).ok_or(MetadataError::BadSelector(selector))?;
        Ok(Self {
            fec_t,
            coded_body_len,
            latent_w,
            latent_h,
            stride,
            grid_h,
            grid_w,
            border,
            scale_q: (aux >> 4) + 1,
            h_rem: (aux >> 2) & 0b11,
            w_rem: aux & 0b11,
        })
    }
}

/// FEC-codes the record with the fixed metadata code: 96 record bits are
/// zero-padded to the code's message length, yielding one 255-bit block.
pub fn encode_metadata(meta: &Metadata) -> Result<Vec<u8>, MetadataError> {
    let code = metadata_code();
    let mut msg = meta.to_bits()?;
    msg.resize(code.k(), 0);
    Ok(code.encode(&msg))
}

/// Decodes one coded metadata block; None when beyond the code's capability.
pub fn decode_metadata(coded: &[u8]) -> Option<Metadata> {
    let code = metadata_code();
    if coded.len() != code.n() {
        return None;
    }
    let (msg, _) = code.decode(coded)?;
    // Zero padding must survive: non-zero tail means a miscorrected block.
    if msg[METADATA_BITS..].iter().any(|&b| b != 0) {
        return None;
    }
    Metadata::from_bits(&msg[..METADATA_BITS]).ok()
}
