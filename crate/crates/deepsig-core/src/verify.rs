//! The verifier pipeline: watermark recovery with a 16-offset crop search,
//! signature checking, latent change map, tampering score, and the final
//! authenticity decision. Signing lives here too — it is the pipeline run
//! in reverse and shares all the geometry.

use base64::Engine;
use ed25519_dalek::VerifyingKey;
use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::content::{binarize_indices, ContentCodec, ContentError};
use crate::imageops;
use crate::num::Scalar;
use crate::payload::grid::{
    compose_payload, parse_payload, CapacityError, GridConfig, ParsedPayload, PayloadGrid,
    ProtocolContext,
};
use crate::payload::keys::{sign_latent, verify_latent, KeyPair};
use crate::payload::metadata::Metadata;
use crate::watermark::{WatermarkCodec, WatermarkError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Status {
    NoWatermark,
    InvalidSignature,
    Tampered,
    Authentic,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Status::NoWatermark => "no_watermark",
            Status::InvalidSignature => "invalid_signature",
            Status::Tampered => "tampered",
            Status::Authentic => "authentic",
        }
    }

    pub fn exit_code(self) -> i32 {
        match self {
            Status::Authentic => 0,
            Status::Tampered => 2,
            Status::InvalidSignature => 3,
            Status::NoWatermark => 4,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Thresholds {
    pub tau_ts: f64,
    pub beta_g: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { tau_ts: 0.7, beta_g: 3.0 }
    }
}

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("received image {received:?} is larger than the recorded original {original:?}")]
    ReceivedLargerThanOriginal { received: (usize, usize), original: (usize, usize) },
    #[error("no latent cell is fully covered by the received pixels; tampering score undefined")]
    EmptyValidity,
    #[error("latent dims differ: {a:?} vs {b:?}")]
    DimMismatch { a: (usize, usize, usize), b: (usize, usize, usize) },
    #[error("content codec: {0}")]
    Content(#[from] ContentError),
    #[error("watermark codec: {0}")]
    Watermark(#[from] WatermarkError),
    #[error("payload does not fit: {0}")]
    Capacity(#[from] CapacityError),
}

/// First structural parse over the 16 offsets in row-major order
/// (0,0)…(3,3), without cryptographic checks.
pub fn recover_watermark<F: Scalar>(
    img: ArrayView3<F>,
    wm: &WatermarkCodec<F>,
    ctx: &ProtocolContext,
) -> Option<(ParsedPayload, (usize, usize))> {
    search_offsets(img, wm, ctx, |_| true)
}

pub enum WatermarkDecision {
    /// Parse and signature both good.
    Verified { parsed: ParsedPayload, offset: (usize, usize) },
    /// Some offset parsed structurally but no parse passed the signature.
    InvalidSignature,
    NoWatermark,
}

/// Offset search with the acceptance rule: a parse is accepted only if its
/// signature verifies, so a miscorrected parse at a wrong offset cannot
/// shadow the true one at a later offset.
pub fn verify_watermark<F: Scalar>(
    img: ArrayView3<F>,
    wm: &WatermarkCodec<F>,
    key: &VerifyingKey,
    ctx: &ProtocolContext,
) -> WatermarkDecision {
    let mut parsed_any = false;
    let hit = search_offsets(img, wm, ctx, |p| {
        parsed_any = true;
        verify_latent(key, &p.z_b, &p.s_b)
    });
    match hit {
        Some((parsed, offset)) => WatermarkDecision::Verified { parsed, offset },
        None if parsed_any => WatermarkDecision::InvalidSignature,
        None => WatermarkDecision::NoWatermark,
    }
}

fn search_offsets<F: Scalar>(
    img: ArrayView3<F>,
    wm: &WatermarkCodec<F>,
    ctx: &ProtocolContext,
    mut accept: impl FnMut(&ParsedPayload) -> bool,
) -> Option<(ParsedPayload, (usize, usize))> {
    let cell = wm.config.cell();
    for dy in 0..cell {
        for dx in 0..cell {
            let Ok(soft) = wm.extract_soft(img, (dy, dx)) else {
                continue;
            };
            if let Ok(parsed) = parse_payload(soft.view(), ctx) {
                if accept(&parsed) {
                    return Some((parsed, (dy, dx)));
                }
            }
        }
    }
    None
}

/// Places a (possibly cropped) received image on a mid-gray canvas of the
/// original size recorded in the metadata. The crop position comes from the
/// extraction offset and where the marker landed in the parsed grid: the
/// marker's top-left pixel sits at stride·border in the original, so
/// received pixel 0 maps to original pixel stride·(border − marker) − offset.
///
/// Also returns the latent-cell validity mask: a cell is valid when its
/// pixel footprint (plus a 2px guard for resampling support) is fully
/// covered by received pixels.
pub fn pad_cropped<F: Scalar>(
    img: ArrayView3<F>,
    meta: &Metadata,
    offset: (usize, usize),
    marker_pos: (usize, usize),
    spatial_down: usize,
) -> Result<(Array3<F>, Array2<bool>), VerifyError> {
    let (_, rh, rw) = img.dim();
    let (oh, ow) = meta.original_dims();
    if rh > oh || rw > ow {
        return Err(VerifyError::ReceivedLargerThanOriginal {
            received: (rh, rw),
            original: (oh, ow),
        });
    }
    let s = meta.stride as i64;
    let place = |marker: usize, off: usize| -> i64 {
        s * (meta.border as i64 - marker as i64) - off as i64
    };
    let dy = place(marker_pos.0, offset.0);
    let dx = place(marker_pos.1, offset.1);

    // A negative placement would mean the received image extends before the
    // original's top-left; slice that part away defensively.
    let src_y = (-dy).max(0) as usize;
    let src_x = (-dx).max(0) as usize;
    let dst_y = dy.max(0) as usize;
    let dst_x = dx.max(0) as usize;
    let copy_h = (rh - src_y).min(oh.saturating_sub(dst_y));
    let copy_w = (rw - src_x).min(ow.saturating_sub(dst_x));

    let mut canvas = Array3::from_elem((3, oh, ow), F::from_f64_c(0.5));
    canvas
        .slice_mut(ndarray::s![.., dst_y..dst_y + copy_h, dst_x..dst_x + copy_w])
        .assign(&img.slice(ndarray::s![.., src_y..src_y + copy_h, src_x..src_x + copy_w]));

    // Latent cell (i, j) covers scaled rows [S·i, S·(i+1)) which map back to
    // original rows scaled by 16/scale_q; bicubic taps reach 2px further.
    let guard = 2.0;
    let inv = 16.0 / meta.scale_q as f64;
    let span = spatial_down as f64 * inv;
    let covered = |start: usize, len: usize, limit: usize, i: usize| -> bool {
        let lo = (i as f64 * span - guard).max(0.0);
        let hi = ((i + 1) as f64 * span + guard).min(limit as f64);
        lo >= start as f64 - 1e-9 && hi <= (start + len) as f64 + 1e-9
    };
    let valid = Array2::from_shape_fn((meta.latent_h, meta.latent_w), |(i, j)| {
        covered(dst_y, copy_h, oh, i) && covered(dst_x, copy_w, ow, j)
    });
    Ok((canvas, valid))
}

/// Per-cell cosine dissimilarity 1 − |cos(z_q, z_e′)|. Conventions: both
/// vectors zero → 0, exactly one zero → 1, masked-out cells → 0.
pub fn change_map<F: Scalar>(
    z_q: ArrayView3<F>,
    z_e: ArrayView3<F>,
    valid: &Array2<bool>,
) -> Result<Array2<F>, VerifyError> {
    if z_q.dim() != z_e.dim() {
        return Err(VerifyError::DimMismatch { a: z_q.dim(), b: z_e.dim() });
    }
    let (d, h, w) = z_q.dim();
    assert_eq!(valid.dim(), (h, w), "validity mask dims");
    let mut out = Array2::<F>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            if !valid[(y, x)] {
                continue;
            }
            let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
            for di in 0..d {
                let a = z_q[(di, y, x)].as_f64();
                let b = z_e[(di, y, x)].as_f64();
                dot += a * b;
                na += a * a;
                nb += b * b;
            }
            let v = if na == 0.0 && nb == 0.0 {
                0.0
            } else if na == 0.0 || nb == 0.0 {
                1.0
            } else {
                1.0 - (dot / (na.sqrt() * nb.sqrt())).abs().min(1.0)
            };
            out[(y, x)] = F::from_f64_c(v);
        }
    }
    Ok(out)
}

/// TS = max(max over valid cells, min(β_g · mean over valid cells, 1)).
pub fn tampering_score<F: Scalar>(
    z_cm: ArrayView2<F>,
    beta_g: f64,
    valid: &Array2<bool>,
) -> Result<f64, VerifyError> {
    assert_eq!(z_cm.dim(), valid.dim(), "mask dims");
    let (mut max, mut sum, mut count) = (0.0f64, 0.0f64, 0usize);
    for (v, &ok) in z_cm.iter().zip(valid.iter()) {
        if !ok {
            continue;
        }
        let v = v.as_f64();
        max = max.max(v);
        sum += v;
        count += 1;
    }
    if count == 0 {
        return Err(VerifyError::EmptyValidity);
    }
    let ts_local = max;
    let ts_global = (beta_g * sum / count as f64).min(1.0);
    Ok(ts_local.max(ts_global))
}

/// Nearest-neighbor heat overlay of the change map on the image: alpha and
/// hue both scale with the cell score, zero score leaves pixels untouched.
pub fn overlay_changemap<F: Scalar>(
    img: ArrayView3<F>,
    z_cm: ArrayView2<F>,
    scale_q: usize,
    spatial_down: usize,
) -> Array3<F> {
    let (_, h, w) = img.dim();
    let (lh, lw) = z_cm.dim();
    let cell_of = |p: usize, n: usize| -> usize {
        (p * scale_q / (crate::payload::metadata::SCALE_DENOM * spatial_down)).min(n - 1)
    };
    Array3::from_shape_fn((3, h, w), |(c, y, x)| {
        let v = z_cm[(cell_of(y, lh), cell_of(x, lw))].as_f64().clamp(0.0, 1.0);
        let heat = match c {
            0 => 1.0,
            1 => 1.0 - v,
            _ => 0.0,
        };
        let alpha = 0.6 * v;
        let base = img[(c, y, x)].as_f64();
        F::from_f64_c(base + alpha * (heat - base))
    })
}

/// Thresholds the change map per cell and paints each suprathreshold cell's
/// pixel footprint; the binary mask used for localization IoU.
pub fn changemap_to_mask<F: Scalar>(
    z_cm: ArrayView2<F>,
    threshold: f64,
    scale_q: usize,
    spatial_down: usize,
    image_dims: (usize, usize),
) -> Array2<bool> {
    assert!((0.0..1.0).contains(&threshold) && threshold > 0.0, "threshold must be in (0,1)");
    let (h, w) = image_dims;
    let (lh, lw) = z_cm.dim();
    let cell_of = |p: usize, n: usize| -> usize {
        (p * scale_q / (crate::payload::metadata::SCALE_DENOM * spatial_down)).min(n - 1)
    };
    Array2::from_shape_fn((h, w), |(y, x)| {
        z_cm[(cell_of(y, lh), cell_of(x, lw))].as_f64() > threshold
    })
}

#[derive(Clone, Debug)]
pub struct VerificationReport<F> {
    pub status: Status,
    pub ts: Option<f64>,
    pub tau_ts: f64,
    pub z_cm: Option<Array2<F>>,
    pub validity: Option<Array2<bool>>,
    pub metadata: Option<Metadata>,
    pub reconstruction: Option<Array3<F>>,
    pub offset: Option<(usize, usize)>,
    pub corrected: Option<usize>,
}

impl<F: Scalar> VerificationReport<F> {
    fn failure(status: Status, tau_ts: f64) -> Self {
        Self {
            status,
            ts: None,
            tau_ts,
            z_cm: None,
            validity: None,
            metadata: None,
            reconstruction: None,
            offset: None,
            corrected: None,
        }
    }

    /// JSON document; images ride along as base64 PNGs when requested.
    pub fn to_json(&self, include_images: bool) -> serde_json::Value {
        let mut doc = serde_json::json!({
            "status": self.status.as_str(),
            "ts": self.ts,
            "tau_ts": self.tau_ts,
            "offset": self.offset.map(|(y, x)| vec![y, x]),
            "corrected_bits": self.corrected,
        });
        if let Some(meta) = &self.metadata {
            let (oh, ow) = meta.original_dims();
            doc["metadata"] = serde_json::json!({
                "original_height": oh,
                "original_width": ow,
                "latent_height": meta.latent_h,
                "latent_width": meta.latent_w,
                "stride": meta.stride,
                "border": meta.border,
                "scale_q": meta.scale_q,
                "fec_t": meta.fec_t,
            });
        }
        if let Some(z_cm) = &self.z_cm {
            doc["change_map"] = serde_json::json!({
                "height": z_cm.dim().0,
                "width": z_cm.dim().1,
                "max": z_cm.iter().fold(0.0f64, |m, v| m.max(v.as_f64())),
            });
            if include_images {
                let gray = Array3::from_shape_fn((3, z_cm.dim().0, z_cm.dim().1), |(_, y, x)| {
                    z_cm[(y, x)]
                });
                doc["change_map_png"] = serde_json::Value::String(
                    base64::engine::general_purpose::STANDARD
                        .encode(imageops::encode_png_bytes(gray.view())),
                );
            }
        }
        if include_images {
            if let Some(rec) = &self.reconstruction {
                doc["reconstruction_png"] = serde_json::Value::String(
                    base64::engine::general_purpose::STANDARD
                        .encode(imageops::encode_png_bytes(rec.view())),
                );
            }
        }
        doc
    }
}

/// Everything verification needs besides the image: frozen models, the
/// verifying key, and decision thresholds.
pub struct Verifier<'a, F> {
    pub content: &'a ContentCodec<F>,
    pub watermark: &'a WatermarkCodec<F>,
    pub key: VerifyingKey,
    pub thresholds: Thresholds,
}

impl<'a, F: Scalar> Verifier<'a, F> {
    pub(crate) fn context(&self) -> ProtocolContext {
        ProtocolContext {
            spatial_down: self.content.config.stride,
            bits_per_index: self.content.config.bits_per_index(),
        }
    }

    /// Full pipeline. Statuses cover every verification outcome; `Err` is
    /// reserved for geometric impossibilities (received larger than the
    /// recorded original, or no fully-received latent cell to score).
    pub fn verify_image(&self, img: ArrayView3<F>) -> Result<VerificationReport<F>, VerifyError> {
        let ctx = self.context();
        let (parsed, offset) = match verify_watermark(img, self.watermark, &self.key, &ctx) {
            WatermarkDecision::Verified { parsed, offset } => (parsed, offset),
            WatermarkDecision::InvalidSignature => {
                return Ok(VerificationReport::failure(
                    Status::InvalidSignature,
                    self.thresholds.tau_ts,
                ))
            }
            WatermarkDecision::NoWatermark => {
                return Ok(VerificationReport::failure(
                    Status::NoWatermark,
                    self.thresholds.tau_ts,
                ))
            }
        };
        self.assess(img, parsed, offset)
    }

    /// Post-crypto half: geometry, re-encoding, change map, decision.
    pub(crate) fn assess(
        &self,
        img: ArrayView3<F>,
        parsed: ParsedPayload,
        offset: (usize, usize),
    ) -> Result<VerificationReport<F>, VerifyError> {
        let meta = &parsed.meta;
        let spatial_down = self.content.config.stride;
        let (canvas, valid) =
            pad_cropped(img, meta, offset, parsed.marker_pos, spatial_down)?;

        let z_i = crate::content::debinarize_indices(
            &parsed.z_b,
            meta.latent_h,
            meta.latent_w,
            self.content.config.codebook_size,
        )?;
        let z_q = self.content.gather(z_i.view());
        let enc = self.content.encode_image(canvas.view(), meta.scale_q)?;

        let z_cm = change_map(z_q.view(), enc.z_e.view(), &valid)?;
        let ts = tampering_score(z_cm.view(), self.thresholds.beta_g, &valid)?;
        let status = if ts > self.thresholds.tau_ts { Status::Tampered } else { Status::Authentic };
        let reconstruction = self.content.reconstruct_from_bits(&parsed.z_b, meta)?;

        Ok(VerificationReport {
            status,
            ts: Some(ts),
            tau_ts: self.thresholds.tau_ts,
            z_cm: Some(z_cm),
            validity: Some(valid),
            metadata: Some(parsed.meta),
            reconstruction: Some(reconstruction),
            offset: Some(offset),
            corrected: Some(parsed.corrected),
        })
    }
}

/// Signing outcome: the watermarked image plus everything a self-check or
/// diagnostic wants to see.
pub struct SignOutcome<F> {
    pub image: Array3<F>,
    pub grid: PayloadGrid,
    pub psnr: f64,
}

/// Sign an image: content-encode, quantize, sign the binarized indices,
/// frame the payload, embed. The image is replicate-padded to whole cells
/// for embedding and cropped back, so any size the capacity admits works.
pub fn sign_image<F: Scalar>(
    img: ArrayView3<F>,
    content: &ContentCodec<F>,
    watermark: &WatermarkCodec<F>,
    key: &KeyPair,
    grid_cfg: &GridConfig,
    alpha: f64,
    rng: &mut impl Rng,
) -> Result<SignOutcome<F>, VerifyError> {
    let (_, h, w) = img.dim();
    let ctx = ProtocolContext {
        spatial_down: content.config.stride,
        bits_per_index: content.config.bits_per_index(),
    };
    let enc = content.encode_image(img, grid_cfg.scale_q)?;
    let (z_i, _) = content.quantize(enc.z_e.view());
    let mut w_b = binarize_indices(z_i.view(), content.config.codebook_size);
    let s_b = sign_latent(key, &w_b);
    w_b.extend_from_slice(&s_b);

    let grid = compose_payload(&w_b, (h, w), z_i.dim(), grid_cfg, &ctx, rng)?;

    let cell = watermark.config.cell();
    assert_eq!(cell, grid_cfg.stride, "watermark stride disagrees with grid stride");
    let (ph, pw) = (h.div_ceil(cell) * cell, w.div_ceil(cell) * cell);
    let padded = imageops::replicate_pad(img, ph - h, pw - w);
    let soft = grid.to_soft::<F>();
    let embedded = watermark.embed_image(padded.view(), soft.view(), alpha)?;
    let image = imageops::crop(embedded.view(), h, w);
    let psnr = crate::eval::psnr(img, image.view());
    Ok(SignOutcome { image, grid, psnr })
}
