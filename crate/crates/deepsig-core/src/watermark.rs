//! Residual watermark codec: a trainable embedder hides a bit grid in an
//! image at 1/(2ⁿ)² bits per pixel, a strided extractor recovers it after
//! benign transformations. Training balances imperceptibility against bit
//! error rate with a PI controller on the message-loss weight.

use ndarray::{Array2, Array3, Array4, ArrayView2, ArrayView3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, VarId};
use crate::imageops;
use crate::nn::{self, Adam, Conv2dLayer, ParamSet, TrainRng};
use crate::num::Scalar;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WatermarkConfig {
    /// Upsampling blocks n; the payload grid covers the image at stride 2ⁿ.
    pub n: usize,
    /// Residual strength α. [0.5, 2.0] is accepted; [0.8, 1.5] is the
    /// documented reasonable range.
    pub alpha: f64,
    /// Hidden channel width of embedder and extractor.
    pub width: usize,
}

impl Default for WatermarkConfig {
    fn default() -> Self {
        Self { n: 2, alpha: 1.0, width: 16 }
    }
}

impl WatermarkConfig {
    /// Pixels per grid cell side, 2ⁿ.
    pub fn cell(&self) -> usize {
        1 << self.n
    }

    /// Bits per pixel, 1/(2ⁿ)².
    pub fn capacity(&self) -> f64 {
        1.0 / (self.cell() * self.cell()) as f64
    }

    pub fn validate(&self) -> Result<(), WatermarkError> {
        if self.n < 1 {
            return Err(WatermarkError::BadConfig("n must be >= 1".into()));
        }
        if !(0.5..=2.0).contains(&self.alpha) {
            return Err(WatermarkError::BadConfig(format!(
                "alpha {} outside accepted [0.5, 2.0]",
                self.alpha
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum WatermarkError {
    #[error("config: {0}")]
    BadConfig(String),
    #[error("payload grid {got:?} does not match image cells {expected:?}")]
    GridMismatch { expected: (usize, usize), got: (usize, usize) },
    #[error("image {got:?} is smaller than one {cell}px grid cell")]
    TooSmall { got: (usize, usize), cell: usize },
    #[error("offset {0:?} outside [0, {1})²")]
    BadOffset((usize, usize), usize),
    #[error("training diverged (non-finite loss) at step {step}")]
    Diverged { step: u64 },
    #[error("archive: {0}")]
    Archive(#[from] nn::ArchiveError),
    #[error("archive config: {0}")]
    Config(#[from] serde_json::Error),
}

pub struct WatermarkCodec<F> {
    pub config: WatermarkConfig,
    pub params: ParamSet<F>,
    emb: Vec<Conv2dLayer>,
    ext: Vec<Conv2dLayer>,
}

impl<F: Scalar> WatermarkCodec<F> {
    pub fn new(config: WatermarkConfig, seed: u64) -> Self {
        let mut rng = TrainRng::new(seed);
        let mut params = ParamSet::new();
        let (emb, ext) = Self::build_layers(&config, &mut params, &mut rng);
        Self { config, params, emb, ext }
    }

    fn build_layers(
        config: &WatermarkConfig,
        params: &mut ParamSet<F>,
        rng: &mut TrainRng,
    ) -> (Vec<Conv2dLayer>, Vec<Conv2dLayer>) {
        let w = config.width;
        // Embedder input is the image concatenated with the payload grid
        // upsampled to pixel resolution; output is a 3-channel residual.
        let emb = vec![
            Conv2dLayer::new(params, rng, "emb.0", 4, w, 3, 1, 1),
            Conv2dLayer::new(params, rng, "emb.1", w, w, 3, 1, 1),
            Conv2dLayer::new(params, rng, "emb.2", w, w, 3, 1, 1),
            Conv2dLayer::new(params, rng, "emb.3", w, 3, 3, 1, 1),
        ];
        // Extractor downsamples by 2 per block back to the grid resolution
        // and emits one logit per cell.
        let mut ext = Vec::new();
        let mut ci = 3;
        for i in 0..config.n {
            ext.push(Conv2dLayer::new(params, rng, &format!("ext.{i}"), ci, w, 4, 2, 1));
            ci = w;
        }
        ext.push(Conv2dLayer::new(params, rng, "ext.mid", ci, w, 3, 1, 1));
        ext.push(Conv2dLayer::new(params, rng, "ext.out", w, 1, 3, 1, 1));
        (emb, ext)
    }

    fn from_params(config: WatermarkConfig, params: ParamSet<F>) -> Self {
        let mut probe = ParamSet::<F>::new();
        let mut rng = TrainRng::new(0);
        let (emb, ext) = Self::build_layers(&config, &mut probe, &mut rng);
        assert_eq!(probe.len(), params.len(), "archive layout mismatch");
        for i in 0..probe.len() {
            assert_eq!(probe.name(i), params.name(i), "archive layout mismatch");
            assert_eq!(probe.get(i).dim(), params.get(i).dim(), "archive shape mismatch");
        }
        Self { config, params, emb, ext }
    }

    /// x_w = clamp(x + α·R(x, w)); the pre-clamp sum is exactly linear in α.
    /// `straight_through` selects the training clamp (gradients pass).
    pub fn embed_var(
        &self,
        tape: &mut Tape<F>,
        vars: &[VarId],
        x: VarId,
        payload: VarId,
        alpha: F,
        straight_through: bool,
    ) -> (VarId, VarId) {
        let up = tape.upsample_nearest(payload, self.config.cell());
        let mut h = tape.concat(x, up);
        for (i, layer) in self.emb.iter().enumerate() {
            h = layer.forward(tape, vars, h);
            if i + 1 < self.emb.len() {
                h = tape.leaky_relu(h, F::from_f64_c(0.2));
            }
        }
        let residual = h;
        let scaled = tape.mul_scalar(residual, alpha);
        let sum = tape.add(x, scaled);
        let x_w = tape.clamp(sum, F::zero(), F::one(), straight_through);
        (x_w, residual)
    }

    pub fn extract_var(&self, tape: &mut Tape<F>, vars: &[VarId], x: VarId) -> VarId {
        let mut h = x;
        for (i, layer) in self.ext.iter().enumerate() {
            h = layer.forward(tape, vars, h);
            if i + 1 < self.ext.len() {
                h = tape.leaky_relu(h, F::from_f64_c(0.2));
            }
        }
        h
    }

    /// Frozen-weights embedding of a payload grid (values in [0,1], hard
    /// bits as 0/1). Image dims must be divisible by 2ⁿ and the grid must
    /// cover it exactly.
    pub fn embed_image(
        &self,
        img: ArrayView3<F>,
        grid: ArrayView2<F>,
        alpha: f64,
    ) -> Result<Array3<F>, WatermarkError> {
        let cell = self.config.cell();
        let (_, h, w) = img.dim();
        if h % cell != 0 || w % cell != 0 || grid.dim() != (h / cell, w / cell) {
            return Err(WatermarkError::GridMismatch {
                expected: (h / cell, w / cell),
                got: grid.dim(),
            });
        }
        let mut tape = Tape::new();
        let vars = self.params.inject_frozen(&mut tape);
        let x = tape.constant(imageops::to_batch(img));
        let (gh, gw) = grid.dim();
        let p = tape.constant(
            grid.to_owned().into_shape_with_order((1, 1, gh, gw)).expect("contiguous"),
        );
        let (x_w, _) = self.embed_var(&mut tape, &vars, x, p, F::from_f64_c(alpha), false);
        Ok(imageops::from_batch(tape.value(x_w).to_owned()))
    }

    /// Soft bits (sigmoid of logits) at a pixel offset: the first `dy` rows
    /// and `dx` columns are dropped so cell boundaries at that phase align
    /// with the extractor stride, then the tail is replicate-padded back to
    /// a whole cell. Hard bits are soft > 0.5.
    pub fn extract_soft(
        &self,
        img: ArrayView3<F>,
        offset: (usize, usize),
    ) -> Result<Array2<F>, WatermarkError> {
        let cell = self.config.cell();
        let (dy, dx) = offset;
        if dy >= cell || dx >= cell {
            return Err(WatermarkError::BadOffset(offset, cell));
        }
        let (_, h, w) = img.dim();
        if h <= dy || w <= dx || h - dy < cell || w - dx < cell {
            return Err(WatermarkError::TooSmall { got: (h, w), cell });
        }
        let shifted = img.slice(ndarray::s![.., dy.., dx..]);
        let (sh, sw) = (h - dy, w - dx);
        let (ph, pw) = (sh.div_ceil(cell) * cell, sw.div_ceil(cell) * cell);
        let padded = imageops::replicate_pad(shifted, ph - sh, pw - sw);
        let mut tape = Tape::new();
        let vars = self.params.inject_frozen(&mut tape);
        let x = tape.constant(imageops::to_batch(padded.view()));
        let logits = self.extract_var(&mut tape, &vars, x);
        let soft = tape.sigmoid(logits);
        let v = tape.value(soft).to_owned();
        Ok(v.remove_axis(Axis(0)).remove_axis(Axis(0)))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), WatermarkError> {
        let cfg = serde_json::to_string(&self.config)?;
        self.params.save(path, &cfg)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, WatermarkError> {
        let (params, cfg) = ParamSet::load(path)?;
        let config: WatermarkConfig = serde_json::from_str(&cfg)?;
        Ok(Self::from_params(config, params))
    }
}

/// Patch discriminator judging clean vs watermarked; only used in training.
pub struct Discriminator<F> {
    pub params: ParamSet<F>,
    layers: Vec<Conv2dLayer>,
}

impl<F: Scalar> Discriminator<F> {
    pub fn new(width: usize, seed: u64) -> Self {
        let mut rng = TrainRng::new(seed);
        let mut params = ParamSet::new();
        let layers = Self::build_layers(width, &mut params, &mut rng);
        Self { params, layers }
    }

    fn build_layers(width: usize, params: &mut ParamSet<F>, rng: &mut TrainRng) -> Vec<Conv2dLayer> {
        vec![
            Conv2dLayer::new(params, rng, "disc.0", 3, width, 4, 2, 1),
            Conv2dLayer::new(params, rng, "disc.1", width, width, 4, 2, 1),
            Conv2dLayer::new(params, rng, "disc.2", width, 1, 3, 1, 1),
        ]
    }

    fn from_params(width: usize, params: ParamSet<F>) -> Self {
        let mut probe = ParamSet::<F>::new();
        let mut rng = TrainRng::new(0);
        let layers = Self::build_layers(width, &mut probe, &mut rng);
        assert_eq!(probe.len(), params.len(), "archive layout mismatch");
        for i in 0..probe.len() {
            assert_eq!(probe.name(i), params.name(i), "archive layout mismatch");
            assert_eq!(probe.get(i).dim(), params.get(i).dim(), "archive shape mismatch");
        }
        Self { params, layers }
    }

    pub fn forward_var(&self, tape: &mut Tape<F>, vars: &[VarId], x: VarId) -> VarId {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, vars, h);
            if i + 1 < self.layers.len() {
                h = tape.leaky_relu(h, F::from_f64_c(0.2));
            }
        }
        h
    }
}

// ---------------------------------------------------------------------------
// Noise layer

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Identity,
    JpegReal,
    JpegDifferentiable,
    Contrast,
    Saturation,
    Crop,
    Cropout,
}

impl NoiseKind {
    pub fn name(self) -> &'static str {
        match self {
            NoiseKind::Identity => "identity",
            NoiseKind::JpegReal => "jpeg_real",
            NoiseKind::JpegDifferentiable => "jpeg_differentiable",
            NoiseKind::Contrast => "contrast",
            NoiseKind::Saturation => "saturation",
            NoiseKind::Crop => "crop",
            NoiseKind::Cropout => "cropout",
        }
    }
}

/// A single benign transformation. `strength` is the JPEG quality factor,
/// the contrast/saturation interpolation factor, or the crop/cropout area
/// fraction, depending on the kind.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub strength: f64,
}

impl NoiseSpec {
    pub fn identity() -> Self {
        Self { kind: NoiseKind::Identity, strength: 0.0 }
    }

    pub fn validate(&self) -> Result<(), WatermarkError> {
        let ok = match self.kind {
            NoiseKind::Identity => true,
            NoiseKind::JpegReal | NoiseKind::JpegDifferentiable => {
                (10.0..=100.0).contains(&self.strength)
            }
            NoiseKind::Contrast | NoiseKind::Saturation => self.strength >= 0.0,
            NoiseKind::Crop | NoiseKind::Cropout => (0.0..1.0).contains(&self.strength),
        };
        if ok {
            Ok(())
        } else {
            Err(WatermarkError::BadConfig(format!(
                "{} strength {} out of range",
                self.kind.name(),
                self.strength
            )))
        }
    }
}

impl std::fmt::Display for NoiseSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.kind == NoiseKind::Identity {
            write!(f, "identity")
        } else {
            write!(f, "{}:{}", self.kind.name(), self.strength)
        }
    }
}

impl std::str::FromStr for NoiseSpec {
    type Err = WatermarkError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind_s, strength_s) = match s.split_once(':') {
            Some((k, v)) => (k, Some(v)),
            None => (s, None),
        };
        let kind = match kind_s {
            "identity" => NoiseKind::Identity,
            "jpeg_real" => NoiseKind::JpegReal,
            "jpeg_differentiable" => NoiseKind::JpegDifferentiable,
            "contrast" => NoiseKind::Contrast,
            "saturation" => NoiseKind::Saturation,
            "crop" => NoiseKind::Crop,
            "cropout" => NoiseKind::Cropout,
            other => {
                return Err(WatermarkError::BadConfig(format!("unknown noise kind {other:?}")))
            }
        };
        let strength = match strength_s {
            Some(v) => v
                .parse::<f64>()
                .map_err(|e| WatermarkError::BadConfig(format!("noise strength {v:?}: {e}")))?,
            None => 0.0,
        };
        let spec = Self { kind, strength };
        spec.validate()?;
        Ok(spec)
    }
}

/// Applies one transformation. Identity is bit-exact; interpolation factors
/// of exactly 0 and 1 hit their documented endpoints exactly. Crop returns a
/// smaller image (rows/columns physically removed); cropout overwrites a
/// random rectangle with mid-gray. The rng is only consulted for crop and
/// cropout placement.
pub fn apply_noise<F: Scalar>(
    img: ArrayView3<F>,
    spec: NoiseSpec,
    rng: &mut impl Rng,
) -> Array3<F> {
    spec.validate().expect("invalid noise spec");
    let (c, h, w) = img.dim();
    assert_eq!(c, 3);
    match spec.kind {
        NoiseKind::Identity => img.to_owned(),
        NoiseKind::JpegReal => imageops::jpeg_roundtrip(img, spec.strength.round() as u8),
        NoiseKind::JpegDifferentiable => differentiable_jpeg(img, spec.strength),
        NoiseKind::Contrast => {
            let f = spec.strength;
            if f == 1.0 {
                return img.to_owned();
            }
            let half = F::from_f64_c(0.5);
            if f == 0.0 {
                return Array3::from_elem(img.raw_dim(), half);
            }
            let ff = F::from_f64_c(f);
            let mut out = img.mapv(|v| half + ff * (v - half));
            imageops::clamp01(&mut out);
            out
        }
        NoiseKind::Saturation => {
            let f = spec.strength;
            if f == 1.0 {
                return img.to_owned();
            }
            let l = imageops::luma(img);
            if f == 0.0 {
                return Array3::from_shape_fn(img.raw_dim(), |(_, y, x)| l[(y, x)]);
            }
            let ff = F::from_f64_c(f);
            let mut out = Array3::from_shape_fn(img.raw_dim(), |(ch, y, x)| {
                l[(y, x)] + ff * (img[(ch, y, x)] - l[(y, x)])
            });
            imageops::clamp01(&mut out);
            out
        }
        NoiseKind::Crop => {
            // Keep a random window whose area is (1 − fraction) of the
            // original; rows/columns outside it are removed.
            let keep = (1.0 - spec.strength).sqrt();
            let kh = ((h as f64 * keep).round() as usize).clamp(1, h);
            let kw = ((w as f64 * keep).round() as usize).clamp(1, w);
            let y0 = rng.gen_range(0..=h - kh);
            let x0 = rng.gen_range(0..=w - kw);
            img.slice(ndarray::s![.., y0..y0 + kh, x0..x0 + kw]).to_owned()
        }
        NoiseKind::Cropout => {
            let side = spec.strength.sqrt();
            let rh = ((h as f64 * side).round() as usize).clamp(1, h);
            let rw = ((w as f64 * side).round() as usize).clamp(1, w);
            let y0 = rng.gen_range(0..=h - rh);
            let x0 = rng.gen_range(0..=w - rw);
            let mut out = img.to_owned();
            out.slice_mut(ndarray::s![.., y0..y0 + rh, x0..x0 + rw])
                .fill(F::from_f64_c(0.5));
            out
        }
    }
}

// ---------------------------------------------------------------------------
// Differentiable JPEG

/// JPEG Annex K base quantization tables.
const LUMA_QUANT: [[u16; 8]; 8] = [
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
];
const CHROMA_QUANT: [[u16; 8]; 8] = [
    [17, 18, 24, 47, 99, 99, 99, 99],
    [18, 21, 26, 66, 99, 99, 99, 99],
    [24, 26, 56, 99, 99, 99, 99, 99],
    [47, 66, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
];

/// Quality scaling from the reference implementation: the base table is
/// scaled by 5000/q below 50 and 200−2q at and above, floored, and clamped
/// to [1, 255]. Quality 100 therefore yields an all-ones table.
fn scaled_quant(base: &[[u16; 8]; 8], quality: f64) -> [[f64; 8]; 8] {
    assert!((10.0..=100.0).contains(&quality), "jpeg quality {quality} outside [10, 100]");
    let scale = if quality < 50.0 { 5000.0 / quality } else { 200.0 - 2.0 * quality };
    let mut out = [[0.0; 8]; 8];
    for (row, base_row) in out.iter_mut().zip(base.iter()) {
        for (v, &b) in row.iter_mut().zip(base_row.iter()) {
            *v = ((f64::from(b) * scale + 50.0) / 100.0).floor().clamp(1.0, 255.0);
        }
    }
    out
}

/// Smooth JPEG surrogate on the tape: YCbCr (4:4:4), blockwise orthonormal
/// DCT, soft rounding of coefficient/step ratios, inverse transform. Input
/// dims must be multiples of 8.
pub fn differentiable_jpeg_var<F: Scalar>(tape: &mut Tape<F>, x: VarId, quality: f64) -> VarId {
    let (n, c, h, w) = tape.value(x).dim();
    assert_eq!(c, 3);
    assert!(h % 8 == 0 && w % 8 == 0, "differentiable jpeg needs dims divisible by 8");

    // [0,1] RGB -> JPEG-domain YCbCr: Y in [-128, 127], Cb/Cr centered at 0.
    let mut fwd = [[F::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            fwd[i][j] = F::from_f64_c(imageops::RGB_TO_YCBCR[i][j] * 255.0);
        }
    }
    let ycc = tape.pixel_linear(x, fwd, [F::from_f64_c(-128.0), F::zero(), F::zero()]);

    let coeffs = tape.dct8(ycc, false);

    let luma = scaled_quant(&LUMA_QUANT, quality);
    let chroma = scaled_quant(&CHROMA_QUANT, quality);
    let q = Array4::from_shape_fn((n, 3, h, w), |(_, ch, y, xx)| {
        let t = if ch == 0 { &luma } else { &chroma };
        F::from_f64_c(t[y % 8][xx % 8])
    });
    let qv = tape.constant(q);
    let ratio = tape.div(coeffs, qv);
    let rounded = tape.soft_round(ratio);
    let dequant = tape.mul(rounded, qv);

    let pixels = tape.dct8(dequant, true);

    let mut inv = [[F::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            inv[i][j] = F::from_f64_c(imageops::YCBCR_TO_RGB[i][j] / 255.0);
        }
    }
    // Undo the -128 luma shift: every row of the inverse matrix has 1 in the
    // Y column, so the folded bias is 128/255 per channel.
    let b = F::from_f64_c(128.0 / 255.0);
    let rgb = tape.pixel_linear(pixels, inv, [b, b, b]);
    tape.clamp(rgb, F::zero(), F::one(), true)
}

/// Frozen-path differentiable JPEG on a single image; pads to 8-pixel
/// blocks with edge replication and crops back.
pub fn differentiable_jpeg<F: Scalar>(img: ArrayView3<F>, quality: f64) -> Array3<F> {
    let (_, h, w) = img.dim();
    let (ph, pw) = (h.div_ceil(8) * 8, w.div_ceil(8) * 8);
    let padded = imageops::replicate_pad(img, ph - h, pw - w);
    let mut tape = Tape::new();
    let x = tape.constant(imageops::to_batch(padded.view()));
    let out = differentiable_jpeg_var(&mut tape, x, quality);
    let full = imageops::from_batch(tape.value(out).to_owned());
    imageops::crop(full.view(), h, w)
}

// ---------------------------------------------------------------------------
// PI controller

pub const BETA_W_MIN: f64 = 1e-3;
pub const BETA_W_MAX: f64 = 1e4;
/// Feedforward constant c_ff: β_w rests at K_f·c_ff when the error is zero.
pub const PI_FEEDFORWARD: f64 = 1.0;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PiGains {
    pub k_f: f64,
    pub k_p: f64,
    pub k_i: f64,
    pub target: f64,
}

impl Default for PiGains {
    fn default() -> Self {
        Self { k_f: 1.0, k_p: 100.0, k_i: 1.0, target: 0.03 }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PiState {
    pub beta_w: f64,
    pub integral: f64,
    pub gains: PiGains,
}

impl PiState {
    pub fn new(gains: PiGains) -> Self {
        let beta_w = (gains.k_f * PI_FEEDFORWARD).clamp(BETA_W_MIN, BETA_W_MAX);
        Self { beta_w, integral: 0.0, gains }
    }
}

/// β_w = clamp(K_f·c_ff + K_p·e + K_i·Σe) with e = BER − target. Holding the
/// integral fixed, β_w is non-decreasing in the measured BER.
pub fn pi_update(state: &mut PiState, measured_ber: f64) -> f64 {
    assert!((0.0..=0.5).contains(&measured_ber), "BER {measured_ber} outside [0, 0.5]");
    let g = state.gains;
    let e = measured_ber - g.target;
    state.integral += e;
    state.beta_w =
        (g.k_f * PI_FEEDFORWARD + g.k_p * e + g.k_i * state.integral).clamp(BETA_W_MIN, BETA_W_MAX);
    state.beta_w
}

// ---------------------------------------------------------------------------
// Training

/// Noise branch menu for training; JPEG qualities are drawn per batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainNoise {
    Identity,
    JpegDifferentiable,
    JpegReal,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WatermarkTrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub crop: usize,
    pub lr: f64,
    pub seed: u64,
    pub beta_a: f64,
    pub disc_width: usize,
    /// Branches sampled uniformly per batch.
    pub branches: Vec<TrainNoise>,
    /// JPEG quality range, drawn uniformly.
    pub quality: (f64, f64),
}

impl Default for WatermarkTrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch: 2,
            crop: 64,
            lr: 1e-3,
            seed: 0,
            beta_a: 1e-3,
            disc_width: 16,
            branches: vec![TrainNoise::Identity, TrainNoise::JpegDifferentiable, TrainNoise::JpegReal],
            quality: (50.0, 100.0),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct WatermarkStepStats {
    pub step: u64,
    pub loss: f64,
    pub l_img: f64,
    pub l_msg: f64,
    pub l_adv: f64,
    pub l_disc: f64,
    /// Minibatch BER after the sampled noise — the controller input.
    pub ber: f64,
    /// Minibatch BER on the un-noised watermarked image.
    pub ber_clean: f64,
    /// Weight used in this step's loss (pre-update).
    pub beta_w: f64,
    pub branch: TrainNoise,
    pub quality: Option<f64>,
}

pub struct WatermarkTrainer<F> {
    pub codec: WatermarkCodec<F>,
    pub disc: Discriminator<F>,
    pub tcfg: WatermarkTrainConfig,
    pub pi: PiState,
    opt_g: Adam<F>,
    opt_d: Adam<F>,
    rng: TrainRng,
    pub step: u64,
}

impl<F: Scalar> WatermarkTrainer<F> {
    pub fn new(config: WatermarkConfig, tcfg: WatermarkTrainConfig, gains: PiGains) -> Self {
        config.validate().expect("invalid watermark config");
        let codec = WatermarkCodec::new(config, tcfg.seed);
        let disc = Discriminator::new(tcfg.disc_width, tcfg.seed.wrapping_add(1));
        let opt_g = Adam::new(tcfg.lr, &codec.params);
        let opt_d = Adam::new(tcfg.lr, &disc.params);
        let rng = TrainRng::new(tcfg.seed.wrapping_add(2));
        let pi = PiState::new(gains);
        Self { codec, disc, tcfg, pi, opt_g, opt_d, rng, step: 0 }
    }

    /// Replaces batch items with their real-JPEG round trips, value-only.
    fn jpeg_batch(x: &Array4<F>, quality: u8) -> Array4<F> {
        let mut out = x.clone();
        for b in 0..x.dim().0 {
            let img = x.index_axis(Axis(0), b).to_owned();
            out.index_axis_mut(Axis(0), b)
                .assign(&imageops::jpeg_roundtrip(img.view(), quality));
        }
        out
    }

    fn batch_ber(logits: &Array4<F>, payload: &Array4<F>) -> f64 {
        let half = F::from_f64_c(0.5);
        let wrong = logits
            .iter()
            .zip(payload.iter())
            .filter(|&(&l, &p)| (l > F::zero()) != (p > half))
            .count();
        wrong as f64 / logits.len() as f64
    }

    pub fn train_step(&mut self, images: &[Array3<F>]) -> WatermarkStepStats {
        let cell = self.codec.config.cell();
        let crop = self.tcfg.crop;
        assert!(crop % cell == 0, "crop must be a multiple of the cell size");
        let jpeg_branches = self
            .tcfg
            .branches
            .iter()
            .any(|b| *b != TrainNoise::Identity);
        assert!(
            !jpeg_branches || crop % 8 == 0,
            "JPEG branches need 8-divisible crops"
        );
        let g = crop / cell;
        let alpha = F::from_f64_c(self.codec.config.alpha);

        // Draw order is fixed for checkpoint reproducibility: crops, payload,
        // branch, quality.
        let x_val = nn::sample_crops(&mut self.rng, images, self.tcfg.batch, crop);
        let payload_val = Array4::from_shape_fn((self.tcfg.batch, 1, g, g), |_| {
            if self.rng.gen::<bool>() {
                F::one()
            } else {
                F::zero()
            }
        });
        let branch = self.tcfg.branches[self.rng.gen_range(0..self.tcfg.branches.len())];
        let quality = if branch == TrainNoise::Identity {
            None
        } else {
            Some(self.rng.gen_range(self.tcfg.quality.0..self.tcfg.quality.1))
        };

        // Discriminator half-step on clean vs watermarked, embedder frozen.
        let l_disc = if self.tcfg.beta_a > 0.0 {
            let mut tape = Tape::new();
            let gvars = self.codec.params.inject_frozen(&mut tape);
            let dvars = self.disc.params.inject(&mut tape);
            let x = tape.constant(x_val.clone());
            let p = tape.constant(payload_val.clone());
            let (x_w, _) = self.codec.embed_var(&mut tape, &gvars, x, p, alpha, false);
            let real_logits = self.disc.forward_var(&mut tape, &dvars, x);
            let fake_logits = self.disc.forward_var(&mut tape, &dvars, x_w);
            let shape = tape.value(real_logits).raw_dim();
            let ones = tape.constant(Array4::from_elem(shape.clone(), F::one()));
            let zeros = tape.constant(Array4::zeros(shape));
            let l_real = tape.bce_with_logits(real_logits, ones);
            let l_fake = tape.bce_with_logits(fake_logits, zeros);
            let sum = tape.add(l_real, l_fake);
            let l = tape.mul_scalar(sum, F::from_f64_c(0.5));
            let val = tape.scalar(l).as_f64();
            let mut grads = tape.backward(l);
            self.opt_d.step(&mut self.disc.params, &dvars, &mut grads);
            val
        } else {
            0.0
        };

        // Embedder/extractor step.
        let mut tape = Tape::new();
        let gvars = self.codec.params.inject(&mut tape);
        let x = tape.constant(x_val);
        let p = tape.constant(payload_val.clone());
        let (x_w, _) = self.codec.embed_var(&mut tape, &gvars, x, p, alpha, true);
        let x_n = match branch {
            TrainNoise::Identity => x_w,
            TrainNoise::JpegDifferentiable => {
                differentiable_jpeg_var(&mut tape, x_w, quality.unwrap())
            }
            TrainNoise::JpegReal => {
                // Straight-through: forward value is the codec output, the
                // gradient treats it as the identity.
                let v = tape.value(x_w).to_owned();
                let j = Self::jpeg_batch(&v, quality.unwrap().round() as u8);
                let delta = tape.constant(j - &v);
                tape.add(x_w, delta)
            }
        };
        let logits = self.codec.extract_var(&mut tape, &gvars, x_n);
        let soft = tape.sigmoid(logits);
        let l_msg = tape.mse(soft, p);
        let l_img = tape.mse(x_w, x);
        let (l_adv, adv_val) = if self.tcfg.beta_a > 0.0 {
            let dvars = self.disc.params.inject_frozen(&mut tape);
            let d_logits = self.disc.forward_var(&mut tape, &dvars, x_w);
            let shape = tape.value(d_logits).raw_dim();
            let ones = tape.constant(Array4::from_elem(shape, F::one()));
            // Non-saturating generator objective −log A(x_w).
            let l = tape.bce_with_logits(d_logits, ones);
            (Some(l), tape.scalar(l).as_f64())
        } else {
            (None, 0.0)
        };

        let beta_w = self.pi.beta_w;
        let msg_term = tape.mul_scalar(l_msg, F::from_f64_c(beta_w));
        let mut loss = tape.add(l_img, msg_term);
        if let Some(l_adv) = l_adv {
            let adv_term = tape.mul_scalar(l_adv, F::from_f64_c(self.tcfg.beta_a));
            loss = tape.add(loss, adv_term);
        }

        let ber = Self::batch_ber(tape.value(logits), &payload_val);
        let ber_clean = if branch == TrainNoise::Identity {
            ber
        } else {
            let clean_logits = self.codec.extract_var(&mut tape, &gvars, x_w);
            Self::batch_ber(tape.value(clean_logits), &payload_val)
        };

        let stats = WatermarkStepStats {
            step: self.step + 1,
            loss: tape.scalar(loss).as_f64(),
            l_img: tape.scalar(l_img).as_f64(),
            l_msg: tape.scalar(l_msg).as_f64(),
            l_adv: adv_val,
            l_disc,
            ber,
            ber_clean,
            beta_w,
            branch,
            quality,
        };

        let mut grads = tape.backward(loss);
        self.opt_g.step(&mut self.codec.params, &gvars, &mut grads);
        pi_update(&mut self.pi, ber.min(0.5));
        self.step += 1;
        stats
    }

    pub fn save_checkpoint(&self, path: &std::path::Path) -> Result<(), WatermarkError> {
        let mut combined = ParamSet::<F>::new();
        for i in 0..self.codec.params.len() {
            combined.add(&format!("gen.{}", self.codec.params.name(i)), self.codec.params.get(i).clone());
        }
        for i in 0..self.disc.params.len() {
            combined.add(&format!("disc.{}", self.disc.params.name(i)), self.disc.params.get(i).clone());
        }
        let (gm, gv) = self.opt_g.moments();
        for (i, m) in gm.iter().enumerate() {
            combined.add(&format!("opt_g.m.{i}"), m.clone());
        }
        for (i, v) in gv.iter().enumerate() {
            combined.add(&format!("opt_g.v.{i}"), v.clone());
        }
        let (dm, dv) = self.opt_d.moments();
        for (i, m) in dm.iter().enumerate() {
            combined.add(&format!("opt_d.m.{i}"), m.clone());
        }
        for (i, v) in dv.iter().enumerate() {
            combined.add(&format!("opt_d.v.{i}"), v.clone());
        }
        let (seed, pos) = self.rng.checkpoint();
        let header = serde_json::json!({
            "codec": self.codec.config,
            "train": self.tcfg,
            "gains": self.pi.gains,
            "pi_beta_w": self.pi.beta_w,
            "pi_integral": self.pi.integral,
            "step": self.step,
            "rng_seed": seed,
            "rng_pos_hi": (pos >> 64) as u64,
            "rng_pos_lo": pos as u64,
            "adam_g_t": self.opt_g.t(),
            "adam_d_t": self.opt_d.t(),
            "lr": self.tcfg.lr,
        });
        combined.save(path, &header.to_string())?;
        Ok(())
    }

    pub fn load_checkpoint(path: &std::path::Path) -> Result<Self, WatermarkError> {
        let (combined, header) = ParamSet::<F>::load(path)?;
        let h: serde_json::Value = serde_json::from_str(&header)?;
        let config: WatermarkConfig = serde_json::from_value(h["codec"].clone())?;
        let tcfg: WatermarkTrainConfig = serde_json::from_value(h["train"].clone())?;
        let gains: PiGains = serde_json::from_value(h["gains"].clone())?;
        let step = h["step"].as_u64().unwrap_or(0);
        let seed = h["rng_seed"].as_u64().unwrap_or(0);
        let pos =
            (u128::from(h["rng_pos_hi"].as_u64().unwrap_or(0)) << 64) | u128::from(h["rng_pos_lo"].as_u64().unwrap_or(0));
        let lr = h["lr"].as_f64().unwrap_or(tcfg.lr);

        let mut gen = ParamSet::<F>::new();
        let mut disc = ParamSet::<F>::new();
        let (mut gm, mut gv, mut dm, mut dv) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for i in 0..combined.len() {
            let name = combined.name(i);
            let value = combined.get(i).clone();
            if let Some(rest) = name.strip_prefix("gen.") {
                gen.add(rest, value);
            } else if let Some(rest) = name.strip_prefix("disc.") {
                disc.add(rest, value);
            } else if name.starts_with("opt_g.m.") {
                gm.push(value);
            } else if name.starts_with("opt_g.v.") {
                gv.push(value);
            } else if name.starts_with("opt_d.m.") {
                dm.push(value);
            } else if name.starts_with("opt_d.v.") {
                dv.push(value);
            }
        }
        let codec = WatermarkCodec::from_params(config, gen);
        let disc = Discriminator::from_params(tcfg.disc_width, disc);
        let pi = PiState {
            beta_w: h["pi_beta_w"].as_f64().unwrap_or(1.0),
            integral: h["pi_integral"].as_f64().unwrap_or(0.0),
            gains,
        };
        Ok(Self {
            codec,
            disc,
            tcfg,
            pi,
            opt_g: Adam::from_raw(lr, h["adam_g_t"].as_u64().unwrap_or(0), gm, gv),
            opt_d: Adam::from_raw(lr, h["adam_d_t"].as_u64().unwrap_or(0), dm, dv),
            rng: TrainRng::restore(seed, pos),
            step,
        })
    }
}

/// Full run from fresh weights; `log` sees every step.
pub fn train_watermark_codec<F: Scalar>(
    images: &[Array3<F>],
    config: WatermarkConfig,
    tcfg: WatermarkTrainConfig,
    gains: PiGains,
    log: &mut dyn FnMut(&WatermarkStepStats),
) -> Result<(WatermarkCodec<F>, Discriminator<F>), WatermarkError> {
    let trainer = WatermarkTrainer::new(config, tcfg, gains);
    train_watermark_from(trainer, images, log)
}

/// Drives an existing trainer (fresh or resumed) to its configured step
/// count, with a divergence guard.
pub fn train_watermark_from<F: Scalar>(
    mut trainer: WatermarkTrainer<F>,
    images: &[Array3<F>],
    log: &mut dyn FnMut(&WatermarkStepStats),
) -> Result<(WatermarkCodec<F>, Discriminator<F>), WatermarkError> {
    while trainer.step < trainer.tcfg.steps {
        let stats = trainer.train_step(images);
        log(&stats);
        if !stats.loss.is_finite() {
            return Err(WatermarkError::Diverged { step: stats.step });
        }
    }
    Ok((trainer.codec, trainer.disc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::synth_image;
    use crate::Real;
    use ndarray::Array1;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_image(seed: u64, h: usize, w: usize) -> Array3<Real> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((3, h, w), |_| rng.gen_range(0.0..1.0))
    }

    fn rand_grid(seed: u64, h: usize, w: usize) -> Array2<Real> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((h, w), |_| if rng.gen::<bool>() { 1.0 } else { 0.0 })
    }

    #[test]
    fn alpha_zero_is_the_identity() {
        let codec = WatermarkCodec::<Real>::new(WatermarkConfig::default(), 1);
        let img = rand_image(2, 32, 48);
        let grid = rand_grid(3, 8, 12);
        let out = codec.embed_image(img.view(), grid.view(), 0.0).unwrap();
        assert_eq!(out, img, "alpha = 0 must return the input bit-exactly");
    }

    #[test]
    fn pre_clamp_residual_is_linear_in_alpha() {
        let codec = WatermarkCodec::<Real>::new(WatermarkConfig::default(), 4);
        let img = rand_image(5, 32, 32);
        let grid = rand_grid(6, 8, 8);
        let mut tape = Tape::new();
        let vars = codec.params.inject_frozen(&mut tape);
        let x = tape.constant(imageops::to_batch(img.view()));
        let p = tape.constant(grid.into_shape_with_order((1, 1, 8, 8)).unwrap());
        let (_, r) = codec.embed_var(&mut tape, &vars, x, p, 1.0, false);
        let (xv, rv) = (tape.value(x).clone(), tape.value(r).clone());
        // x + 1.2r − x = 1.5 · (x + 0.8r − x), elementwise, before clamping.
        let lo = (&xv + &rv.mapv(|v| v * 0.8)) - &xv;
        let hi = (&xv + &rv.mapv(|v| v * 1.2)) - &xv;
        for (a, b) in hi.iter().zip(lo.iter()) {
            assert!((a - 1.5 * b).abs() <= 1e-6_f32.max(b.abs() * 1e-5));
        }
    }

    #[test]
    fn untrained_extraction_sits_at_chance_level() {
        let codec = WatermarkCodec::<Real>::new(WatermarkConfig::default(), 7);
        let img = rand_image(8, 128, 128);
        let grid = rand_grid(9, 32, 32);
        let x_w = codec.embed_image(img.view(), grid.view(), 1.0).unwrap();
        let soft = codec.extract_soft(x_w.view(), (0, 0)).unwrap();
        let wrong = soft
            .iter()
            .zip(grid.iter())
            .filter(|&(&s, &g)| (s > 0.5) != (g > 0.5))
            .count();
        let ber = wrong as f64 / grid.len() as f64;
        assert!((0.4..=0.6).contains(&ber), "untrained BER {ber} should be near 0.5");
    }

    #[test]
    fn extraction_is_shift_covariant_at_cell_multiples() {
        let codec = WatermarkCodec::<Real>::new(WatermarkConfig::default(), 11);
        let img = rand_image(12, 96, 96);
        let grid = rand_grid(13, 24, 24);
        let x_w = codec.embed_image(img.view(), grid.view(), 1.0).unwrap();
        let base = codec.extract_soft(x_w.view(), (0, 0)).unwrap();

        // Dropping one full cell of pixels shifts the grid by one; interior
        // cells (away from padding and conv borders) must agree exactly.
        let shifted = x_w.slice(ndarray::s![.., 4.., 4..]).to_owned();
        let moved = codec.extract_soft(shifted.view(), (0, 0)).unwrap();
        for y in 4..18 {
            for x in 4..18 {
                let d = (moved[(y, x)] - base[(y + 1, x + 1)]).abs();
                assert!(d < 1e-6, "cell ({y},{x}) differs by {d}");
            }
        }

        // A 1-pixel crop is re-aligned by the complementary offset (3,3),
        // landing on the same interior cells.
        let cropped = x_w.slice(ndarray::s![.., 1.., 1..]).to_owned();
        let realigned = codec.extract_soft(cropped.view(), (3, 3)).unwrap();
        for y in 4..18 {
            for x in 4..18 {
                let d = (realigned[(y, x)] - base[(y + 1, x + 1)]).abs();
                assert!(d < 1e-6, "realigned cell ({y},{x}) differs by {d}");
            }
        }
    }

    #[test]
    fn embed_rejects_mismatched_grids() {
        let codec = WatermarkCodec::<Real>::new(WatermarkConfig::default(), 0);
        let img = rand_image(1, 32, 32);
        let bad = rand_grid(2, 8, 9);
        assert!(matches!(
            codec.embed_image(img.view(), bad.view(), 1.0),
            Err(WatermarkError::GridMismatch { .. })
        ));
        let odd = rand_image(3, 30, 32); // 30 not divisible by 4
        let grid = rand_grid(4, 7, 8);
        assert!(codec.embed_image(odd.view(), grid.view(), 1.0).is_err());
    }

    #[test]
    fn extract_rejects_bad_offsets_and_tiny_images() {
        let codec = WatermarkCodec::<Real>::new(WatermarkConfig::default(), 0);
        let img = rand_image(1, 32, 32);
        assert!(matches!(
            codec.extract_soft(img.view(), (4, 0)),
            Err(WatermarkError::BadOffset(..))
        ));
        let tiny = rand_image(2, 3, 3);
        assert!(matches!(
            codec.extract_soft(tiny.view(), (0, 0)),
            Err(WatermarkError::TooSmall { .. })
        ));
    }

    #[test]
    fn pi_controller_hand_values() {
        // Constant error e = 0.01: β_w(t) = c_ff + K_p·0.01 + K_i·0.01·t.
        let mut st = PiState::new(PiGains::default());
        assert_eq!(st.beta_w, 1.0);
        for t in 1..=200u32 {
            let b = pi_update(&mut st, 0.04);
            let expected = 2.0 + 0.01 * f64::from(t);
            assert!((b - expected).abs() < 1e-9, "t={t}: {b} vs {expected}");
        }

        // Zero error forever: constant at K_f·c_ff.
        let mut st = PiState::new(PiGains::default());
        for _ in 0..50 {
            assert_eq!(pi_update(&mut st, 0.03), 1.0);
        }

        // Monotone in BER at fixed integral.
        let st0 = PiState::new(PiGains::default());
        let mut lo = st0;
        let mut hi = st0;
        assert!(pi_update(&mut lo, 0.10) <= pi_update(&mut hi, 0.30));

        // Clamps engage at the extremes; the integral needs ~21k steps of
        // maximal error to push β_w to its cap.
        let mut st = PiState::new(PiGains::default());
        for _ in 0..25_000 {
            pi_update(&mut st, 0.5);
        }
        assert_eq!(st.beta_w, BETA_W_MAX);
        let mut st = PiState::new(PiGains::default());
        for _ in 0..5000 {
            pi_update(&mut st, 0.0);
        }
        assert_eq!(st.beta_w, BETA_W_MIN);
    }

    #[test]
    fn noise_identity_and_interpolation_endpoints() {
        let img = synth_image::<Real>(21, 40, 56);
        let mut rng = ChaCha8Rng::seed_from_u64(0);

        let id = apply_noise(img.view(), NoiseSpec::identity(), &mut rng);
        assert_eq!(id, img);

        let sat1 = apply_noise(
            img.view(),
            NoiseSpec { kind: NoiseKind::Saturation, strength: 1.0 },
            &mut rng,
        );
        assert_eq!(sat1, img, "saturation 1 leaves the image unchanged");

        let sat0 = apply_noise(
            img.view(),
            NoiseSpec { kind: NoiseKind::Saturation, strength: 0.0 },
            &mut rng,
        );
        for y in 0..40 {
            for x in 0..56 {
                assert_eq!(sat0[(0, y, x)], sat0[(1, y, x)]);
                assert_eq!(sat0[(1, y, x)], sat0[(2, y, x)]);
            }
        }

        let con1 = apply_noise(
            img.view(),
            NoiseSpec { kind: NoiseKind::Contrast, strength: 1.0 },
            &mut rng,
        );
        assert_eq!(con1, img);

        let con0 = apply_noise(
            img.view(),
            NoiseSpec { kind: NoiseKind::Contrast, strength: 0.0 },
            &mut rng,
        );
        assert!(con0.iter().all(|&v| v == 0.5), "contrast 0 is uniform gray");
    }

    #[test]
    fn crop_removes_and_cropout_overwrites() {
        let img = synth_image::<Real>(22, 64, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cropped = apply_noise(
            img.view(),
            NoiseSpec { kind: NoiseKind::Crop, strength: 0.36 },
            &mut rng,
        );
        // Keep scale √(1−0.36) = 0.8 per side.
        assert_eq!(cropped.dim(), (3, 51, 51));

        let out = apply_noise(
            img.view(),
            NoiseSpec { kind: NoiseKind::Cropout, strength: 0.25 },
            &mut rng,
        );
        assert_eq!(out.dim(), img.dim());
        let gray = out
            .index_axis(Axis(0), 0)
            .indexed_iter()
            .filter(|&((y, x), _)| {
                (0..3).all(|c| out[(c, y, x)] == 0.5) && (0..3).any(|c| img[(c, y, x)] != 0.5)
            })
            .count();
        // A 32×32 rectangle (±rounding) was replaced with mid-gray.
        assert!((900..=1100).contains(&gray), "cropout painted {gray} pixels");
        let untouched = out
            .indexed_iter()
            .filter(|&((c, y, x), &v)| v != 0.5 && img[(c, y, x)] == v)
            .count();
        assert!(untouched > 0);
    }

    #[test]
    fn noise_spec_round_trips_through_text() {
        for s in ["identity", "jpeg_real:80", "jpeg_differentiable:55.5", "contrast:0.5", "saturation:0", "crop:0.2", "cropout:0.3"] {
            let spec: NoiseSpec = s.parse().unwrap();
            let back: NoiseSpec = spec.to_string().parse().unwrap();
            assert_eq!(spec, back);
        }
        assert!("jpeg_real:5".parse::<NoiseSpec>().is_err(), "quality below 10");
        assert!("crop:1.0".parse::<NoiseSpec>().is_err(), "fraction must be < 1");
        assert!("blur:3".parse::<NoiseSpec>().is_err(), "unknown kind");
    }

    #[test]
    fn diff_jpeg_quality_100_stays_close_to_the_input() {
        let img = synth_image::<Real>(23, 64, 64);
        let out = differentiable_jpeg(img.view(), 100.0);
        assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let mean: f32 =
            img.iter().zip(out.iter()).map(|(a, b)| (a - b).abs()).sum::<f32>() / img.len() as f32;
        assert!(mean < 2.0 / 255.0, "mean |diff − orig| = {mean}");
    }

    #[test]
    fn diff_jpeg_tracks_the_real_codec() {
        let img = synth_image::<Real>(24, 64, 64);
        for q in [50.0, 80.0] {
            let approx = differentiable_jpeg(img.view(), q);
            let real = imageops::jpeg_roundtrip(img.view(), q as u8);
            let mean: f32 = approx
                .iter()
                .zip(real.iter())
                .map(|(a, b)| (a - b).abs())
                .sum::<f32>()
                / img.len() as f32;
            assert!(mean < 0.05, "q={q}: mean |approx − real| = {mean}");
        }
    }

    #[test]
    fn diff_jpeg_gradients_match_finite_differences() {
        // f64 tape; interior-valued input keeps the final clamp inactive so
        // the straight-through convention coincides with the true gradient.
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let x_val = Array4::from_shape_fn((1, 3, 8, 8), |_| rng.gen_range(0.35..0.65));
        let proj = Array4::from_shape_fn((1, 3, 8, 8), |_| rng.gen_range(-1.0..1.0));

        let eval = |v: &Array4<f64>| -> f64 {
            let mut tape = Tape::<f64>::new();
            let x = tape.constant(v.clone());
            let out = differentiable_jpeg_var(&mut tape, x, 80.0);
            let p = tape.constant(proj.clone());
            let weighted = tape.mul(out, p);
            let s = tape.sum_all(weighted);
            tape.scalar(s)
        };

        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(x_val.clone(), true);
        let out = differentiable_jpeg_var(&mut tape, x, 80.0);
        let p = tape.constant(proj.clone());
        let weighted = tape.mul(out, p);
        let s = tape.sum_all(weighted);
        let grads = tape.backward(s);
        let g = grads.get(x).expect("input gradient");

        let eps = 1e-5;
        let mut checked = 0;
        for idx in [(0, 0, 0, 0), (0, 1, 3, 4), (0, 2, 7, 7), (0, 0, 5, 2), (0, 1, 2, 6)] {
            let mut plus = x_val.clone();
            plus[idx] += eps;
            let mut minus = x_val.clone();
            minus[idx] -= eps;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let an = g[idx];
            assert!(
                (an - fd).abs() <= 1e-3 * (1.0 + fd.abs()),
                "grad at {idx:?}: analytic {an} vs fd {fd}"
            );
            checked += 1;
        }
        assert_eq!(checked, 5);
    }

    fn train_images() -> Vec<Array3<Real>> {
        (0..4).map(|i| synth_image::<Real>(100 + i, 96, 96)).collect()
    }

    fn quick_tcfg(steps: u64) -> WatermarkTrainConfig {
        WatermarkTrainConfig {
            steps,
            branches: vec![TrainNoise::Identity],
            ..WatermarkTrainConfig::default()
        }
    }

    #[test]
    fn short_training_is_finite_and_deterministic() {
        let run = || {
            let mut trainer = WatermarkTrainer::<Real>::new(
                WatermarkConfig::default(),
                quick_tcfg(30),
                PiGains::default(),
            );
            let images = train_images();
            let mut losses = Vec::new();
            for _ in 0..30 {
                let s = trainer.train_step(&images);
                assert!(s.loss.is_finite());
                losses.push(s.loss);
            }
            losses
        };
        assert_eq!(run(), run(), "same seed must give an identical loss trace");
    }

    #[test]
    fn noise_branches_sample_and_train() {
        let mut tcfg = quick_tcfg(6);
        tcfg.branches =
            vec![TrainNoise::Identity, TrainNoise::JpegDifferentiable, TrainNoise::JpegReal];
        let mut trainer = WatermarkTrainer::<Real>::new(
            WatermarkConfig::default(),
            tcfg,
            PiGains::default(),
        );
        let images = train_images();
        let mut seen = std::collections::HashSet::new();
        for _ in 0..6 {
            let s = trainer.train_step(&images);
            assert!(s.loss.is_finite());
            seen.insert(format!("{:?}", s.branch));
            if s.branch != TrainNoise::Identity {
                let q = s.quality.unwrap();
                assert!((50.0..100.0).contains(&q));
            }
        }
        assert!(seen.len() >= 2, "six draws should hit at least two branches");
    }

    #[test]
    fn beta_a_zero_trains_without_discriminator() {
        let mut tcfg = quick_tcfg(3);
        tcfg.beta_a = 0.0;
        let mut trainer = WatermarkTrainer::<Real>::new(
            WatermarkConfig::default(),
            tcfg,
            PiGains::default(),
        );
        let images = train_images();
        for _ in 0..3 {
            let s = trainer.train_step(&images);
            assert_eq!(s.l_adv, 0.0);
            assert_eq!(s.l_disc, 0.0);
            assert!(s.loss.is_finite());
        }
    }

    #[test]
    fn checkpoint_resume_is_bit_exact() {
        let images = train_images();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("wm.ckpt");

        let mut a = WatermarkTrainer::<Real>::new(
            WatermarkConfig::default(),
            quick_tcfg(16),
            PiGains::default(),
        );
        for _ in 0..16 {
            a.train_step(&images);
        }

        let mut b = WatermarkTrainer::<Real>::new(
            WatermarkConfig::default(),
            quick_tcfg(16),
            PiGains::default(),
        );
        for _ in 0..9 {
            b.train_step(&images);
        }
        b.save_checkpoint(&path).unwrap();
        let mut c = WatermarkTrainer::<Real>::load_checkpoint(&path).unwrap();
        assert_eq!(c.step, 9);
        for _ in 0..7 {
            c.train_step(&images);
        }

        for i in 0..a.codec.params.len() {
            assert_eq!(
                a.codec.params.get(i),
                c.codec.params.get(i),
                "codec param {} diverged",
                a.codec.params.name(i)
            );
        }
        for i in 0..a.disc.params.len() {
            assert_eq!(a.disc.params.get(i), c.disc.params.get(i));
        }
        assert_eq!(a.pi.beta_w.to_bits(), c.pi.beta_w.to_bits());
        assert_eq!(a.pi.integral.to_bits(), c.pi.integral.to_bits());
    }

    #[test]
    fn divergence_guard_reports_the_step() {
        let mut trainer = WatermarkTrainer::<Real>::new(
            WatermarkConfig::default(),
            quick_tcfg(5),
            PiGains::default(),
        );
        // The clamp after embedding absorbs embedder NaNs (max/min ignore
        // NaN), so poison the extractor: its logits feed the loss directly.
        let ext0 = (0..trainer.codec.params.len())
            .find(|&i| trainer.codec.params.name(i) == "ext.0.w")
            .unwrap();
        trainer.codec.params.get_mut(ext0)[(0, 0, 0, 0)] = f32::NAN;
        let images = train_images();
        match train_watermark_from(trainer, &images, &mut |_| {}) {
            Err(WatermarkError::Diverged { step: 1 }) => {}
            Err(e) => panic!("wrong error: {e}"),
            Ok(_) => panic!("training should have diverged"),
        }
    }

    #[test]
    fn codec_archive_round_trips() {
        let codec = WatermarkCodec::<Real>::new(WatermarkConfig::default(), 42);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("wm.weights");
        codec.save(&path).unwrap();
        let back = WatermarkCodec::<Real>::load(&path).unwrap();
        let img = rand_image(1, 32, 32);
        let grid = rand_grid(2, 8, 8);
        let a = codec.embed_image(img.view(), grid.view(), 1.0).unwrap();
        let b = back.embed_image(img.view(), grid.view(), 1.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn capacity_matches_the_stride_law() {
        let cfg = WatermarkConfig::default();
        assert_eq!(cfg.cell(), 4);
        assert!((cfg.capacity() - 1.0 / 16.0).abs() < 1e-12);
        let grid = Array1::<Real>::zeros(0); // silence unused-import paths
        drop(grid);
        let deep = WatermarkConfig { n: 3, ..WatermarkConfig::default() };
        assert!((deep.capacity() - 1.0 / 64.0).abs() < 1e-12);
    }
}
