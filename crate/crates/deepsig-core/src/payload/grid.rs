//! 2D layout of the hidden payload.
//!
//! The grid covers the image at one cell per stride x stride pixel block.
//! A border of cells on every side carries random bits (it absorbs crop
//! offsets); the interior holds, from its top-left corner: the 13x13
//! marker, a 13x20 metadata block beside it, and the FEC-coded body
//! spread over the remaining cells row-major. Body bits are interleaved
//! across code blocks so a localized loss (crop, occlusion) degrades many
//! blocks slightly instead of killing a few outright. Leftover interior
//! cells are random padding.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use thiserror::Error;

use super::bch::{body_code, BCH_N, BODY_T_TABLE};
use super::keys::SIGNATURE_BITS;
use super::marker::{locate_marker, MARKER, MARKER_SIDE};
use super::metadata::{decode_metadata, encode_metadata, Metadata, MetadataError, SCALE_DENOM};
use crate::bits::{pack_bits, unpack_bits};
use crate::num::Scalar;

/// Metadata block shape in cells; 255 coded bits + 5 padding cells.
pub const META_BLOCK_COLS: usize = 20;
/// Interior columns spanned by the marker + metadata band.
pub const BAND_COLS: usize = MARKER_SIDE + META_BLOCK_COLS;
/// Interior cells the body can never use.
pub const RESERVED_CELLS: usize = MARKER_SIDE * BAND_COLS;

/// Layout knobs fixed at sign time.
#[derive(Debug, Clone)]
pub struct GridConfig {
    /// Pixels per cell side (2^n for n payload downsampling steps).
    pub stride: usize,
    /// Border cells per side.
    pub border: usize,
    /// Content scale numerator over 16.
    pub scale_q: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        // scale 13/16 and a 3-cell border make the capacity precondition
        // land exactly on the 233x233 minimum: 232 and below never fit
        // (including the smaller-latent window near 224), 233 and up do.
        Self { stride: 4, border: 3, scale_q: 13 }
    }
}

/// What the parser needs to know about the content codec.
#[derive(Debug, Clone)]
pub struct ProtocolContext {
    /// Content codec total downsampling factor S.
    pub spatial_down: usize,
    /// Bits per codebook index (log2 of the codebook size).
    pub bits_per_index: usize,
}

impl Default for ProtocolContext {
    fn default() -> Self {
        Self { spatial_down: 16, bits_per_index: 8 }
    }
}

#[derive(Debug, Error)]
pub enum CapacityError {
    #[error(
        "payload needs {required} interior cells but only {available} fit; \
         use a larger image or a smaller content scale"
    )]
    TooSmall { required: usize, available: usize },
    #[error("interior of {h}x{w} cells cannot hold the 13x{BAND_COLS} marker and metadata band")]
    TooNarrow { h: usize, w: usize },
    #[error("watermark length {got} disagrees with latent dims (expected {expected})")]
    BadPayloadLength { got: usize, expected: usize },
    #[error(transparent)]
    Metadata(#[from] MetadataError),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseFailure {
    #[error("no marker found")]
    MarkerNotFound,
    #[error("metadata block unreadable")]
    MetadataDecodeFailure,
    #[error("coded body unreadable")]
    BodyDecodeFailure,
}

/// A composed payload: the bit grid plus the metadata that shaped it.
#[derive(Debug, Clone)]
pub struct PayloadGrid {
    pub bits: Array2<u8>,
    pub meta: Metadata,
}

/// Result of parsing a (possibly noisy) extracted grid.
#[derive(Debug, Clone)]
pub struct ParsedPayload {
    pub meta: Metadata,
    pub z_b: Vec<u8>,
    pub s_b: Vec<u8>,
    /// Marker cell position in the parsed grid.
    pub marker_pos: (usize, usize),
    /// Body + metadata bit errors the FEC repaired.
    pub corrected: usize,
}

impl ParsedPayload {
    pub fn w_b(&self) -> Vec<u8> {
        let mut v = self.z_b.clone();
        v.extend_from_slice(&self.s_b);
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Border,
    Marker,
    Meta,
    Body,
    Pad,
}

/// Interior body cells in fill order, as absolute grid coordinates:
/// row-major over the interior, skipping the marker + metadata band.
fn body_cells(
    origin: (usize, usize),
    interior: (usize, usize),
) -> impl Iterator<Item = (usize, usize)> {
    let (oy, ox) = origin;
    let (ih, iw) = interior;
    (0..ih).flat_map(move |iy| {
        let skip = if iy < MARKER_SIDE { BAND_COLS } else { 0 };
        (skip..iw).map(move |ix| (oy + iy, ox + ix))
    })
}

/// Picks the strongest FEC that fits: largest t whose coded body obeys both
/// the interior budget and the metadata length field.
fn choose_body_code(w_b_len: usize, interior_cells: usize) -> Option<(usize, usize)> {
    for &t in BODY_T_TABLE.iter().rev() {
        let k = body_code(t).k();
        let coded = w_b_len.div_ceil(k) * BCH_N;
        let fits_interior =
            coded <= interior_cells.saturating_sub(RESERVED_CELLS)
            && MARKER_SIDE * MARKER_SIDE + BCH_N + coded <= interior_cells;
        if fits_interior && coded < (1 << 20) {
            return Some((t, coded));
        }
    }
    None
}

/// Derives the full metadata record for an image/latent pair, including the
/// FEC selection for a `w_b_len`-bit body. This is the single source of the
/// grid geometry both composing and capacity queries use.
pub fn build_metadata(
    image_dims: (usize, usize),
    latent_dims: (usize, usize),
    w_b_len: usize,
    cfg: &GridConfig,
    ctx: &ProtocolContext,
) -> Result<Metadata, CapacityError> {
    let (h, w) = image_dims;
    let cells_h = h.div_ceil(cfg.stride);
    let cells_w = w.div_ceil(cfg.stride);
    let interior_h = cells_h.saturating_sub(2 * cfg.border);
    let interior_w = cells_w.saturating_sub(2 * cfg.border);
    if interior_h < MARKER_SIDE || interior_w < BAND_COLS {
        return Err(CapacityError::TooNarrow { h: interior_h, w: interior_w });
    }
    let interior = interior_h * interior_w;
    let (fec_t, coded_body_len) = choose_body_code(w_b_len, interior).ok_or_else(|| {
        let weakest = w_b_len.div_ceil(body_code(BODY_T_TABLE[0]).k()) * BCH_N;
        CapacityError::TooSmall { required: weakest + RESERVED_CELLS, available: interior }
    })?;

    let meta = Metadata {
        fec_t,
        coded_body_len,
        latent_w: latent_dims.1,
        latent_h: latent_dims.0,
        stride: cfg.stride,
        grid_h: interior_h,
        grid_w: interior_w,
        border: cfg.border,
        scale_q: cfg.scale_q,
        h_rem: h % cfg.stride,
        w_rem: w % cfg.stride,
    };
    meta.validate(ctx.spatial_down)?;
    Ok(meta)
}

/// Frames `w_b` (binarized latent followed by its signature) into a payload
/// grid for an image of the given dimensions.
pub fn compose_payload<R: Rng>(
    w_b: &[u8],
    image_dims: (usize, usize),
    latent_dims: (usize, usize),
    cfg: &GridConfig,
    ctx: &ProtocolContext,
    rng: &mut R,
) -> Result<PayloadGrid, CapacityError> {
    let (lat_h, lat_w) = latent_dims;
    let expected = lat_h * lat_w * ctx.bits_per_index + SIGNATURE_BITS;
    if w_b.len() != expected {
        return Err(CapacityError::BadPayloadLength { got: w_b.len(), expected });
    }
    let meta = build_metadata(image_dims, latent_dims, w_b.len(), cfg, ctx)?;
    let (cells_h, cells_w) = (meta.grid_h + 2 * cfg.border, meta.grid_w + 2 * cfg.border);
    let (interior_h, interior_w) = (meta.grid_h, meta.grid_w);
    let (fec_t, coded_body_len) = (meta.fec_t, meta.coded_body_len);
    let coded_meta = encode_metadata(&meta)?;

    // Random bits everywhere first: border, padding, and the metadata
    // block's 5 spare cells all come from the same pass.
    let mut bits = Array2::<u8>::zeros((cells_h, cells_w));
    bits.mapv_inplace(|_| rng.gen_range(0..2));

    let (oy, ox) = (cfg.border, cfg.border);
    for my in 0..MARKER_SIDE {
        for mx in 0..MARKER_SIDE {
            bits[[oy + my, ox + mx]] = MARKER[my][mx];
        }
    }
    for (i, &b) in coded_meta.iter().enumerate() {
        let (row, col) = (i / META_BLOCK_COLS, i % META_BLOCK_COLS);
        bits[[oy + row, ox + MARKER_SIDE + col]] = b;
    }

    // Systematic body blocks over the rng-padded message, interleaved so
    // cell c carries bit c/B of block c%B.
    let code = body_code(fec_t);
    let blocks = coded_body_len / BCH_N;
    let mut msg = w_b.to_vec();
    msg.resize(blocks * code.k(), 0);
    for slot in msg[w_b.len()..].iter_mut() {
        *slot = rng.gen_range(0..2);
    }
    let coded: Vec<Vec<u8>> =
        msg.chunks(code.k()).map(|m| code.encode(m)).collect();
    for (c, cell) in body_cells((oy, ox), (interior_h, interior_w)).enumerate() {
        if c >= coded_body_len {
            break;
        }
        bits[cell] = coded[c % blocks][c / blocks];
    }

    Ok(PayloadGrid { bits, meta })
}

/// Parses an extracted grid: locate the marker, decode the metadata beside
/// it, then slice and decode the body it describes.
pub fn parse_payload<F: Scalar>(
    grid: ArrayView2<F>,
    ctx: &ProtocolContext,
) -> Result<ParsedPayload, ParseFailure> {
    let (gh, gw) = grid.dim();
    let (my, mx, _) = locate_marker(grid).ok_or(ParseFailure::MarkerNotFound)?;

    let half = F::from_f64_c(0.5);
    let hard = |y: usize, x: usize| u8::from(grid[[y, x]] >= half);

    if my + MARKER_SIDE > gh || mx + BAND_COLS > gw {
        return Err(ParseFailure::MetadataDecodeFailure);
    }
    let coded_meta: Vec<u8> = (0..BCH_N)
        .map(|i| hard(my + i / META_BLOCK_COLS, mx + MARKER_SIDE + i % META_BLOCK_COLS))
        .collect();
    let meta = decode_metadata(&coded_meta).ok_or(ParseFailure::MetadataDecodeFailure)?;
    meta.validate(ctx.spatial_down).map_err(|_| ParseFailure::MetadataDecodeFailure)?;

    // Framing: the body must hold exactly the latent plus one signature.
    let z_len = meta.latent_bits(ctx.bits_per_index);
    let w_b_len = z_len + SIGNATURE_BITS;
    let code = body_code(meta.fec_t);
    let blocks = meta.coded_body_len / BCH_N;
    if blocks == 0 || w_b_len.div_ceil(code.k()) != blocks {
        return Err(ParseFailure::MetadataDecodeFailure);
    }
    if my + meta.grid_h > gh || mx + meta.grid_w > gw {
        return Err(ParseFailure::BodyDecodeFailure);
    }

    let cells: Vec<u8> = body_cells((my, mx), (meta.grid_h, meta.grid_w))
        .take(meta.coded_body_len)
        .map(|(y, x)| hard(y, x))
        .collect();
    if cells.len() < meta.coded_body_len {
        return Err(ParseFailure::BodyDecodeFailure);
    }

    let mut msg = Vec::with_capacity(blocks * code.k());
    let mut corrected = 0usize;
    for b in 0..blocks {
        let block: Vec<u8> = (0..BCH_N).map(|j| cells[j * blocks + b]).collect();
        let (m, fixed) = code.decode(&block).ok_or(ParseFailure::BodyDecodeFailure)?;
        msg.push(m);
        corrected += fixed;
    }
    let mut w_b = Vec::with_capacity(w_b_len);
    for m in &msg {
        w_b.extend_from_slice(m);
    }
    w_b.truncate(w_b_len);

    let s_b = w_b.split_off(z_len);
    Ok(ParsedPayload { meta, z_b: w_b, s_b, marker_pos: (my, mx), corrected })
}

impl PayloadGrid {
    pub fn to_soft<F: Scalar>(&self) -> Array2<F> {
        self.bits.mapv(|b| F::from_usize_c(b as usize))
    }

    /// Which role each cell plays; regions are disjoint by construction and
    /// this map is the reference for structural tests.
    pub fn region_map(&self) -> Array2<Region> {
        let meta = &self.meta;
        let (ch, cw) = self.bits.dim();
        let mut map = Array2::from_elem((ch, cw), Region::Border);
        let (oy, ox) = (meta.border, meta.border);
        let mut body_left = meta.coded_body_len;
        for iy in 0..meta.grid_h {
            for ix in 0..meta.grid_w {
                let r = if iy < MARKER_SIDE && ix < MARKER_SIDE {
                    Region::Marker
                } else if iy < MARKER_SIDE && ix < BAND_COLS {
                    Region::Meta
                } else if body_left > 0 {
                    body_left -= 1;
                    Region::Body
                } else {
                    Region::Pad
                };
                map[[oy + iy, ox + ix]] = r;
            }
        }
        map
    }

    /// Writes the packed golden-file form: magic, u32 BE dims, then bits
    /// packed MSB-first row-major.
    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let (h, w) = self.bits.dim();
        let mut buf = Vec::with_capacity(16 + h * w / 8);
        buf.extend_from_slice(b"DSPG");
        buf.extend_from_slice(&(h as u32).to_be_bytes());
        buf.extend_from_slice(&(w as u32).to_be_bytes());
        let flat: Vec<u8> = self.bits.iter().copied().collect();
        buf.extend_from_slice(&pack_bits(&flat));
        fs::write(path, buf)
    }
}

/// Reads a golden grid file back into a bare bit matrix.
pub fn load_grid_bits(path: &Path) -> std::io::Result<Array2<u8>> {
    let buf = fs::read(path)?;
    let bad = |m: &str| std::io::Error::new(std::io::ErrorKind::InvalidData, m.to_string());
    if buf.len() < 12 || &buf[..4] != b"DSPG" {
        return Err(bad("not a payload grid file"));
    }
    let h = u32::from_be_bytes(buf[4..8].try_into().unwrap()) as usize;
    let w = u32::from_be_bytes(buf[8..12].try_into().unwrap()) as usize;
    if buf.len() != 12 + (h * w).div_ceil(8) {
        return Err(bad("truncated payload grid file"));
    }
    let flat = unpack_bits(&buf[12..], h * w);
    Ok(Array2::from_shape_vec((h, w), flat).expect("shape matches length"))
}

/// Smallest square image side the configuration can sign, assuming square
/// latents; used for error guidance.
pub fn min_viable_square(cfg: &GridConfig, ctx: &ProtocolContext) -> usize {
    for side in (MARKER_SIDE * cfg.stride).. {
        let scaled = (side * cfg.scale_q + SCALE_DENOM / 2) / SCALE_DENOM;
        let lat = scaled.div_ceil(ctx.spatial_down);
        let w_b_len = lat * lat * ctx.bits_per_index + SIGNATURE_BITS;
        let cells = side.div_ceil(cfg.stride);
        let interior = cells.saturating_sub(2 * cfg.border);
        if interior < BAND_COLS {
            continue;
        }
        if choose_body_code(w_b_len, interior * interior).is_some() {
            return side;
        }
    }
    unreachable!("capacity grows faster than payload")
}
