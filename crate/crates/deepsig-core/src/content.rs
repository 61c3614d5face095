//! Vector-quantized content codec: images to compact discrete latents and
//! back. The binarized indices are the signed object; verification compares
//! latents, so encode/decode must be deterministic given frozen weights.

use ndarray::{Array2, Array3, Array4, ArrayView2, ArrayView3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, VarId};
use crate::eval::ssim_var;
use crate::imageops;
use crate::nn::{self, Adam, Conv2dLayer, ParamSet, TrainRng};
use crate::num::Scalar;
use crate::payload::metadata::{scaled_dim, Metadata};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CodecConfig {
    /// Total spatial downsampling S; must be a power of two (one stride-2
    /// block per factor of two).
    pub stride: usize,
    pub codebook_size: usize,
    pub dim: usize,
    /// Channel widths of the intermediate encoder blocks (the last block
    /// always outputs `dim`); the decoder mirrors them.
    pub widths: Vec<usize>,
    /// Commitment weight β.
    pub beta: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self { stride: 16, codebook_size: 256, dim: 64, widths: vec![32, 64, 96], beta: 0.25 }
    }
}

impl CodecConfig {
    pub fn blocks(&self) -> usize {
        assert!(self.stride.is_power_of_two() && self.stride >= 2);
        self.stride.trailing_zeros() as usize
    }

    pub fn bits_per_index(&self) -> usize {
        assert!(self.codebook_size.is_power_of_two() && self.codebook_size >= 2);
        self.codebook_size.trailing_zeros() as usize
    }
}

#[derive(Debug, Error)]
pub enum ContentError {
    #[error("latent bits: expected {expected}, got {got}")]
    Framing { expected: usize, got: usize },
    #[error("image {got}px is below one latent cell ({need}px)")]
    TooSmall { got: usize, need: usize },
    #[error("archive: {0}")]
    Archive(#[from] nn::ArchiveError),
    #[error("archive config: {0}")]
    Config(#[from] serde_json::Error),
}

pub struct ContentCodec<F> {
    pub config: CodecConfig,
    pub params: ParamSet<F>,
    enc: Vec<Conv2dLayer>,
    dec: Vec<Conv2dLayer>,
    codebook: usize,
    ema_n: usize,
    ema_sum: usize,
    usage: usize,
}

/// Encoder output plus the resize/pad bookkeeping that metadata records.
pub struct EncodedLatent<F> {
    pub z_e: Array3<F>,
    pub scaled: (usize, usize),
    pub padded: (usize, usize),
}

impl<F: Scalar> ContentCodec<F> {
    pub fn new(config: CodecConfig, seed: u64) -> Self {
        let mut rng = TrainRng::new(seed);
        let mut params = ParamSet::new();
        let (enc, dec) = Self::build_layers(&config, &mut params, &mut rng);
        let (k, d) = (config.codebook_size, config.dim);
        let scale = 1.0 / (d as f64).sqrt();
        let init = Array4::from_shape_fn((k, d, 1, 1), |_| F::from_f64_c(nn::normal(&mut rng) * scale));
        let codebook = params.add("codebook", init.clone());
        // EMA accumulators start consistent with the initial rows (n = 1).
        let ema_n = params.add("codebook.ema_n", Array4::from_elem((k, 1, 1, 1), F::one()));
        let ema_sum = params.add("codebook.ema_sum", init);
        let usage = params.add("codebook.usage", Array4::zeros((k, 1, 1, 1)));
        Self { config, params, enc, dec, codebook, ema_n, ema_sum, usage }
    }

    fn build_layers(
        config: &CodecConfig,
        params: &mut ParamSet<F>,
        rng: &mut TrainRng,
    ) -> (Vec<Conv2dLayer>, Vec<Conv2dLayer>) {
        let blocks = config.blocks();
        assert_eq!(config.widths.len(), blocks - 1, "one width per non-final block");
        let mut enc = Vec::new();
        let mut ci = 3;
        for i in 0..blocks {
            let co = if i + 1 == blocks { config.dim } else { config.widths[i] };
            enc.push(Conv2dLayer::new(params, rng, &format!("enc.{i}"), ci, co, 4, 2, 1));
            ci = co;
        }
        let mut dec = Vec::new();
        let mut ci = config.dim;
        for i in 0..blocks {
            let co = if i + 1 == blocks { 3 } else { config.widths[blocks - 2 - i] };
            dec.push(Conv2dLayer::new(params, rng, &format!("dec.{i}"), ci, co, 3, 1, 1));
            ci = co;
        }
        (enc, dec)
    }

    /// Rebuilds the layer index bookkeeping against an already-populated
    /// parameter set (names must match the construction order).
    fn from_params(config: CodecConfig, params: ParamSet<F>) -> Self {
        let mut probe = ParamSet::<F>::new();
        let mut rng = TrainRng::new(0);
        let (enc, dec) = Self::build_layers(&config, &mut probe, &mut rng);
        for i in 0..probe.len() {
            assert_eq!(probe.name(i), params.name(i), "archive layout mismatch");
            assert_eq!(probe.get(i).dim(), params.get(i).dim(), "archive shape mismatch");
        }
        let codebook = probe.len();
        assert_eq!(params.name(codebook), "codebook");
        Self {
            config,
            params,
            enc,
            dec,
            codebook,
            ema_n: codebook + 1,
            ema_sum: codebook + 2,
            usage: codebook + 3,
        }
    }

    pub fn codebook(&self) -> ArrayView2<'_, F> {
        let v = self.params.get(self.codebook).view();
        let (k, d, _, _) = v.dim();
        v.into_shape_with_order((k, d)).expect("codebook is contiguous")
    }

    pub fn encode_var(&self, tape: &mut Tape<F>, vars: &[VarId], x: VarId) -> VarId {
        let mut h = x;
        for (i, layer) in self.enc.iter().enumerate() {
            h = layer.forward(tape, vars, h);
            if i + 1 < self.enc.len() {
                h = tape.leaky_relu(h, F::from_f64_c(0.2));
            }
        }
        h
    }

    pub fn decode_var(&self, tape: &mut Tape<F>, vars: &[VarId], z: VarId) -> VarId {
        let mut h = z;
        for (i, layer) in self.dec.iter().enumerate() {
            h = tape.upsample_nearest(h, 2);
            h = layer.forward(tape, vars, h);
            if i + 1 < self.dec.len() {
                h = tape.leaky_relu(h, F::from_f64_c(0.2));
            }
        }
        tape.sigmoid(h)
    }

    /// Inference-path encoding: bicubic pre-scale by scale_q/16, replicate
    /// padding to a stride multiple, frozen forward.
    pub fn encode_image(&self, img: ArrayView3<F>, scale_q: usize) -> Result<EncodedLatent<F>, ContentError> {
        let s = self.config.stride;
        let (_, h, w) = img.dim();
        let (hs, ws) = (scaled_dim(h, scale_q), scaled_dim(w, scale_q));
        if hs < s || ws < s {
            return Err(ContentError::TooSmall { got: hs.min(ws), need: s });
        }
        let scaled = imageops::resize_bicubic(img, hs, ws);
        let (hp, wp) = (hs.div_ceil(s) * s, ws.div_ceil(s) * s);
        let padded = imageops::replicate_pad(scaled.view(), hp - hs, wp - ws);
        let mut tape = Tape::new();
        let vars = self.params.inject_frozen(&mut tape);
        let x = tape.constant(imageops::to_batch(padded.view()));
        let z = self.encode_var(&mut tape, &vars, x);
        let z_e = tape.value(z).to_owned().remove_axis(Axis(0));
        Ok(EncodedLatent { z_e, scaled: (hs, ws), padded: (hp, wp) })
    }

    /// Nearest codebook row per cell (exact squared distances, lowest index
    /// on ties) and the gathered vectors.
    pub fn quantize(&self, z_e: ArrayView3<F>) -> (Array2<u16>, Array3<F>) {
        let book = self.codebook();
        let (k, d) = book.dim();
        let (dz, h, w) = z_e.dim();
        assert_eq!(dz, d, "latent dim does not match codebook");
        let mut z_i = Array2::<u16>::zeros((h, w));
        let mut z_q = Array3::<F>::zeros((d, h, w));
        for y in 0..h {
            for x in 0..w {
                let mut best = 0usize;
                let mut best_d = F::infinity();
                for ki in 0..k {
                    let mut acc = F::zero();
                    for di in 0..d {
                        let diff = z_e[(di, y, x)] - book[(ki, di)];
                        acc = acc + diff * diff;
                    }
                    if acc < best_d {
                        best_d = acc;
                        best = ki;
                    }
                }
                z_i[(y, x)] = best as u16;
                for di in 0..d {
                    z_q[(di, y, x)] = book[(best, di)];
                }
            }
        }
        (z_i, z_q)
    }

    pub fn gather(&self, z_i: ArrayView2<u16>) -> Array3<F> {
        let book = self.codebook();
        let (h, w) = z_i.dim();
        Array3::from_shape_fn((book.dim().1, h, w), |(d, y, x)| book[(usize::from(z_i[(y, x)]), d)])
    }

    /// Frozen decode of a latent to the padded pixel canvas [3, S·h', S·w'].
    pub fn decode_latent(&self, z_q: ArrayView3<F>) -> Array3<F> {
        let mut tape = Tape::new();
        let vars = self.params.inject_frozen(&mut tape);
        let z = tape.constant(imageops::to_batch(z_q));
        let xhat = self.decode_var(&mut tape, &vars, z);
        imageops::from_batch(tape.value(xhat).to_owned())
    }

    /// Decode, drop the pad, undo the pre-scale, clamp.
    pub fn decode_to_image(
        &self,
        z_q: ArrayView3<F>,
        scaled: (usize, usize),
        original: (usize, usize),
    ) -> Array3<F> {
        let canvas = self.decode_latent(z_q);
        let cropped = imageops::crop(canvas.view(), scaled.0, scaled.1);
        let mut out = imageops::resize_bicubic(cropped.view(), original.0, original.1);
        imageops::clamp01(&mut out);
        out
    }

    /// The verified-bits path: z_b (already signature-checked by the caller)
    /// to the reconstruction at the original size recorded in metadata.
    pub fn reconstruct_from_bits(&self, z_b: &[u8], meta: &Metadata) -> Result<Array3<F>, ContentError> {
        let bpi = self.config.bits_per_index();
        let expected = meta.latent_bits(bpi);
        if z_b.len() != expected {
            return Err(ContentError::Framing { expected, got: z_b.len() });
        }
        let z_i = debinarize_indices(z_b, meta.latent_h, meta.latent_w, self.config.codebook_size)?;
        let z_q = self.gather(z_i.view());
        Ok(self.decode_to_image(z_q.view(), meta.scaled_dims(), meta.original_dims()))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), ContentError> {
        let cfg = serde_json::to_string(&self.config)?;
        self.params.save(path, &cfg)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ContentError> {
        let (params, cfg) = ParamSet::load(path)?;
        let config: CodecConfig = serde_json::from_str(&cfg)?;
        Ok(Self::from_params(config, params))
    }
}

/// Row-major scan, each index big-endian in log2(K) bits.
pub fn binarize_indices(z_i: ArrayView2<u16>, k: usize) -> Vec<u8> {
    assert!(k.is_power_of_two() && k >= 2);
    let b = k.trailing_zeros() as usize;
    let mut out = Vec::with_capacity(z_i.len() * b);
    for &idx in z_i.iter() {
        debug_assert!((idx as usize) < k);
        for bit in (0..b).rev() {
            out.push(((idx >> bit) & 1) as u8);
        }
    }
    out
}

pub fn debinarize_indices(bits: &[u8], h: usize, w: usize, k: usize) -> Result<Array2<u16>, ContentError> {
    assert!(k.is_power_of_two() && k >= 2);
    let b = k.trailing_zeros() as usize;
    if bits.len() != h * w * b {
        return Err(ContentError::Framing { expected: h * w * b, got: bits.len() });
    }
    let mut z_i = Array2::<u16>::zeros((h, w));
    for (cell, chunk) in z_i.iter_mut().zip(bits.chunks_exact(b)) {
        let mut v = 0u16;
        for &bit in chunk {
            v = (v << 1) | u16::from(bit);
        }
        *cell = v;
    }
    Ok(z_i)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ContentTrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub crop: usize,
    pub lr: f64,
    pub seed: u64,
    pub ema_gamma: f64,
    /// Dead-entry sweep cadence in steps (the "epoch" of the reinit rule).
    pub sweep_every: u64,
}

impl Default for ContentTrainConfig {
    fn default() -> Self {
        Self { steps: 1500, batch: 2, crop: 64, lr: 1e-3, seed: 0, ema_gamma: 0.99, sweep_every: 250 }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ContentStepStats {
    pub step: u64,
    pub loss: f64,
    pub recon_mse: f64,
    pub ssim: f64,
    pub commit: f64,
    /// Codebook usage entropy warning raised during the sweep at this step.
    pub collapse_warning: bool,
    pub reinitialized: usize,
}

pub struct ContentTrainer<F> {
    pub codec: ContentCodec<F>,
    pub tcfg: ContentTrainConfig,
    opt: Adam<F>,
    rng: TrainRng,
    pub step: u64,
}

impl<F: Scalar> ContentTrainer<F> {
    pub fn new(config: CodecConfig, tcfg: ContentTrainConfig) -> Self {
        let codec = ContentCodec::new(config, tcfg.seed);
        let opt = Adam::new(tcfg.lr, &codec.params);
        let rng = TrainRng::new(tcfg.seed.wrapping_add(1));
        Self { codec, tcfg, opt, rng, step: 0 }
    }

    pub fn train_step(&mut self, images: &[Array3<F>]) -> ContentStepStats {
        let x_val = nn::sample_crops(&mut self.rng, images, self.tcfg.batch, self.tcfg.crop);
        let mut tape = Tape::new();
        let vars = self.codec.params.inject(&mut tape);
        let x = tape.constant(x_val);
        let z_e = self.codec.encode_var(&mut tape, &vars, x);

        // Quantization happens outside the tape; gradients cross it
        // straight-through: z_q = z_e + stopgrad(q(z_e) − z_e).
        let z_e_val = tape.value(z_e).to_owned();
        let (n, d, lh, lw) = z_e_val.dim();
        let mut z_q_val = Array4::<F>::zeros((n, d, lh, lw));
        let mut assignments = Vec::with_capacity(n * lh * lw);
        for b in 0..n {
            let (z_i, z_q) = self.codec.quantize(z_e_val.index_axis(Axis(0), b));
            z_q_val.index_axis_mut(Axis(0), b).assign(&z_q);
            assignments.extend(z_i.iter().copied());
        }
        let jump = tape.constant(&z_q_val - &z_e_val);
        let z_q_st = tape.add(z_e, jump);
        let x_hat = self.codec.decode_var(&mut tape, &vars, z_q_st);

        let recon = tape.mse(x_hat, x);
        let ssim = ssim_var(&mut tape, x_hat, x);
        let neg_ssim = tape.neg(ssim);
        let dssim = tape.add_scalar(neg_ssim, F::one());
        let z_q_const = tape.constant(z_q_val);
        let commit_raw = tape.mse(z_e, z_q_const);
        let commit = tape.mul_scalar(commit_raw, F::from_f64_c(self.codec.config.beta));
        let partial = tape.add(recon, dssim);
        let loss = tape.add(partial, commit);

        let stats_recon = tape.scalar(recon).as_f64();
        let stats_ssim = tape.scalar(ssim).as_f64();
        let stats_commit = tape.scalar(commit_raw).as_f64();
        let stats_loss = tape.scalar(loss).as_f64();

        let mut grads = tape.backward(loss);
        self.opt.step(&mut self.codec.params, &vars, &mut grads);

        self.ema_update(&z_e_val, &assignments);
        self.step += 1;

        let (collapse_warning, reinitialized) = if self.step % self.tcfg.sweep_every == 0 {
            self.dead_entry_sweep(&z_e_val)
        } else {
            (false, 0)
        };

        ContentStepStats {
            step: self.step,
            loss: stats_loss,
            recon_mse: stats_recon,
            ssim: stats_ssim,
            commit: stats_commit,
            collapse_warning,
            reinitialized,
        }
    }

    /// EMA codebook update with Laplace-smoothed counts.
    fn ema_update(&mut self, z_e: &Array4<F>, assignments: &[u16]) {
        let k = self.codec.config.codebook_size;
        let d = self.codec.config.dim;
        let (n, _, lh, lw) = z_e.dim();
        let gamma = self.tcfg.ema_gamma;
        let mut counts = vec![0.0f64; k];
        let mut sums = vec![0.0f64; k * d];
        let mut cell = 0usize;
        for b in 0..n {
            for y in 0..lh {
                for x in 0..lw {
                    let ki = usize::from(assignments[cell]);
                    counts[ki] += 1.0;
                    for di in 0..d {
                        sums[ki * d + di] += z_e[(b, di, y, x)].as_f64();
                    }
                    cell += 1;
                }
            }
        }
        let ema_n = self.codec.params.get_mut(self.codec.ema_n);
        for ki in 0..k {
            let v = ema_n[(ki, 0, 0, 0)].as_f64();
            ema_n[(ki, 0, 0, 0)] = F::from_f64_c(gamma * v + (1.0 - gamma) * counts[ki]);
        }
        let total: f64 = (0..k).map(|ki| self.codec.params.get(self.codec.ema_n)[(ki, 0, 0, 0)].as_f64()).sum();
        let ema_sum = self.codec.params.get_mut(self.codec.ema_sum);
        for ki in 0..k {
            for di in 0..d {
                let v = ema_sum[(ki, di, 0, 0)].as_f64();
                ema_sum[(ki, di, 0, 0)] = F::from_f64_c(gamma * v + (1.0 - gamma) * sums[ki * d + di]);
            }
        }
        const EPS: f64 = 1e-5;
        for ki in 0..k {
            let n_k = self.codec.params.get(self.codec.ema_n)[(ki, 0, 0, 0)].as_f64();
            let n_hat = (n_k + EPS) / (total + k as f64 * EPS) * total;
            for di in 0..d {
                let s = self.codec.params.get(self.codec.ema_sum)[(ki, di, 0, 0)].as_f64();
                self.codec.params.get_mut(self.codec.codebook)[(ki, di, 0, 0)] = F::from_f64_c(s / n_hat);
            }
        }
        let usage = self.codec.params.get_mut(self.codec.usage);
        for ki in 0..k {
            let v = usage[(ki, 0, 0, 0)].as_f64();
            usage[(ki, 0, 0, 0)] = F::from_f64_c(v + counts[ki]);
        }
    }

    /// Entropy check plus reinit of entries unused since the last sweep;
    /// dead rows are reseeded from encoder outputs of the current batch.
    fn dead_entry_sweep(&mut self, z_e: &Array4<F>) -> (bool, usize) {
        let k = self.codec.config.codebook_size;
        let d = self.codec.config.dim;
        let (n, _, lh, lw) = z_e.dim();
        let usage_vals: Vec<f64> =
            (0..k).map(|ki| self.codec.params.get(self.codec.usage)[(ki, 0, 0, 0)].as_f64()).collect();
        let total: f64 = usage_vals.iter().sum();
        let entropy: f64 = usage_vals
            .iter()
            .filter(|&&u| u > 0.0)
            .map(|&u| {
                let p = u / total;
                -p * p.ln()
            })
            .sum();
        let floor = 0.05 * (k as f64).ln();
        let warning = total > 0.0 && entropy < floor;

        let mut reinit = 0;
        for ki in 0..k {
            if usage_vals[ki] > 0.0 {
                continue;
            }
            let b = self.rng.gen_range(0..n);
            let y = self.rng.gen_range(0..lh);
            let x = self.rng.gen_range(0..lw);
            for di in 0..d {
                let v = z_e[(b, di, y, x)];
                self.codec.params.get_mut(self.codec.codebook)[(ki, di, 0, 0)] = v;
                self.codec.params.get_mut(self.codec.ema_sum)[(ki, di, 0, 0)] = v;
            }
            self.codec.params.get_mut(self.codec.ema_n)[(ki, 0, 0, 0)] = F::one();
            reinit += 1;
        }
        self.codec.params.get_mut(self.codec.usage).fill(F::zero());
        (warning, reinit)
    }

    pub fn save_checkpoint(&self, path: &std::path::Path) -> Result<(), ContentError> {
        let cfg = serde_json::to_string(&serde_json::json!({
            "codec": self.codec.config,
            "train": self.tcfg,
        }))?;
        nn::save_trainer(path, &cfg, &self.codec.params, &self.opt, &self.rng, self.step)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &std::path::Path) -> Result<Self, ContentError> {
        let ck = nn::load_trainer::<F>(path)?;
        let wrapper: serde_json::Value = serde_json::from_str(&ck.model_config)?;
        let config: CodecConfig = serde_json::from_value(wrapper["codec"].clone())?;
        let tcfg: ContentTrainConfig = serde_json::from_value(wrapper["train"].clone())?;
        let codec = ContentCodec::from_params(config, ck.params);
        Ok(Self { codec, tcfg, opt: ck.opt, rng: ck.rng, step: ck.step })
    }
}

/// Full training run; `log` sees every step's stats.
pub fn train_content_codec<F: Scalar>(
    images: &[Array3<F>],
    config: CodecConfig,
    tcfg: ContentTrainConfig,
    log: &mut dyn FnMut(&ContentStepStats),
) -> ContentCodec<F> {
    let mut trainer = ContentTrainer::new(config, tcfg);
    while trainer.step < trainer.tcfg.steps {
        let stats = trainer.train_step(images);
        log(&stats);
        assert!(stats.loss.is_finite(), "content training diverged at step {}", stats.step);
    }
    trainer.codec
}
