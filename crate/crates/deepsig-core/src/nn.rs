//! Parameter storage, init, Adam, and the weights archive shared by both
//! trainable codecs. Everything on disk is f32 little-endian regardless of
//! the working scalar.

use std::fs::File;
use std::io::{self, Read as _, Write as _};
use std::path::Path;

use ndarray::Array4;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::autodiff::{Gradients, Tape, VarId};
use crate::num::Scalar;

pub const ARCHIVE_MAGIC: &[u8; 4] = b"DSWT";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("not a weights archive (bad magic)")]
    BadMagic,
    #[error("unsupported archive version {0}")]
    BadVersion(u32),
    #[error("archive truncated")]
    Truncated,
    #[error("parameter name not utf-8")]
    BadName,
}

/// Named tensors in insertion order; the order is the optimizer's and the
/// tape-injection contract.
pub struct ParamSet<F> {
    entries: Vec<(String, Array4<F>)>,
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: &str, value: Array4<F>) -> usize {
        assert!(
            self.entries.iter().all(|(n, _)| n != name),
            "duplicate parameter name {name}"
        );
        self.entries.push((name.to_owned(), value));
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Array4<F> {
        &self.entries[idx].1
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Array4<F> {
        &mut self.entries[idx].1
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.entries[idx].0
    }

    /// Pushes every parameter as a trainable leaf; element i of the result
    /// corresponds to parameter index i.
    pub fn inject(&self, tape: &mut Tape<F>) -> Vec<VarId> {
        self.entries.iter().map(|(_, v)| tape.leaf(v.clone(), true)).collect()
    }

    /// Same tensors but frozen (no gradients tracked through them).
    pub fn inject_frozen(&self, tape: &mut Tape<F>) -> Vec<VarId> {
        self.entries.iter().map(|(_, v)| tape.constant(v.clone())).collect()
    }

    pub fn save(&self, path: &Path, config_json: &str) -> Result<(), ArchiveError> {
        let mut f = io::BufWriter::new(File::create(path)?);
        f.write_all(ARCHIVE_MAGIC)?;
        f.write_all(&ARCHIVE_VERSION.to_le_bytes())?;
        let cfg = config_json.as_bytes();
        f.write_all(&(cfg.len() as u32).to_le_bytes())?;
        f.write_all(cfg)?;
        f.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, tensor) in &self.entries {
            f.write_all(&(name.len() as u16).to_le_bytes())?;
            f.write_all(name.as_bytes())?;
            let (a, b, c, d) = tensor.dim();
            for dim in [a, b, c, d] {
                f.write_all(&(dim as u32).to_le_bytes())?;
            }
            for v in tensor.iter() {
                f.write_all(&(v.as_f64() as f32).to_le_bytes())?;
            }
        }
        f.flush()?;
        Ok(())
    }

    /// Returns the parameter set and the config JSON stored alongside it.
    pub fn load(path: &Path) -> Result<(Self, String), ArchiveError> {
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8], ArchiveError> {
            let s = bytes.get(*pos..*pos + n).ok_or(ArchiveError::Truncated)?;
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 4)? != ARCHIVE_MAGIC {
            return Err(ArchiveError::BadMagic);
        }
        let u32_at = |pos: &mut usize| -> Result<u32, ArchiveError> {
            let s = bytes.get(*pos..*pos + 4).ok_or(ArchiveError::Truncated)?;
            *pos += 4;
            Ok(u32::from_le_bytes(s.try_into().unwrap()))
        };
        let version = u32_at(&mut pos)?;
        if version != ARCHIVE_VERSION {
            return Err(ArchiveError::BadVersion(version));
        }
        let cfg_len = u32_at(&mut pos)? as usize;
        let config = String::from_utf8(take(&mut pos, cfg_len)?.to_vec())
            .map_err(|_| ArchiveError::BadName)?;
        let n_params = u32_at(&mut pos)? as usize;
        let mut set = ParamSet::new();
        for _ in 0..n_params {
            let name_len = {
                let s = take(&mut pos, 2)?;
                u16::from_le_bytes(s.try_into().unwrap()) as usize
            };
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|_| ArchiveError::BadName)?;
            let mut dims = [0usize; 4];
            for d in &mut dims {
                *d = u32_at(&mut pos)? as usize;
            }
            let count = dims.iter().product::<usize>();
            let raw = take(&mut pos, count * 4)?;
            let data: Vec<F> = raw
                .chunks_exact(4)
                .map(|c| F::from_f64_c(f64::from(f32::from_le_bytes(c.try_into().unwrap()))))
                .collect();
            let tensor = Array4::from_shape_vec((dims[0], dims[1], dims[2], dims[3]), data)
                .expect("dims consistent with data length");
            set.add(&name, tensor);
        }
        Ok((set, config))
    }
}

impl<F: Scalar> Default for ParamSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Standard normal via Box-Muller.
pub fn normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// He-initialized conv weight [co, ci, k, k]: N(0, 2/fan_in).
pub fn he_conv<F: Scalar>(rng: &mut impl Rng, co: usize, ci: usize, k: usize) -> Array4<F> {
    let std = (2.0 / (ci * k * k) as f64).sqrt();
    Array4::from_shape_fn((co, ci, k, k), |_| F::from_f64_c(normal(rng) * std))
}

pub fn zero_bias<F: Scalar>(co: usize) -> Array4<F> {
    Array4::zeros((1, co, 1, 1))
}

/// Conv layer descriptor: indices into a ParamSet plus geometry.
#[derive(Clone, Copy)]
pub struct Conv2dLayer {
    pub w: usize,
    pub b: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dLayer {
    pub fn new<F: Scalar>(
        params: &mut ParamSet<F>,
        rng: &mut impl Rng,
        name: &str,
        ci: usize,
        co: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = params.add(&format!("{name}.w"), he_conv(rng, co, ci, k));
        let b = params.add(&format!("{name}.b"), zero_bias(co));
        Self { w, b, stride, pad }
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, vars: &[VarId], x: VarId) -> VarId {
        tape.conv2d(x, vars[self.w], vars[self.b], self.stride, self.pad)
    }
}

/// Adam with bias correction; state is positional over the ParamSet.
pub struct Adam<F> {
    pub lr: F,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<Array4<F>>,
    v: Vec<Array4<F>>,
    t: u64,
}

impl<F: Scalar> Adam<F> {
    pub fn new(lr: f64, params: &ParamSet<F>) -> Self {
        Self {
            lr: F::from_f64_c(lr),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: (0..params.len()).map(|i| Array4::zeros(params.get(i).dim())).collect(),
            v: (0..params.len()).map(|i| Array4::zeros(params.get(i).dim())).collect(),
            t: 0,
        }
    }

    /// One update; `ids[i]` must be the tape leaf for parameter i. Parameters
    /// without a gradient (detached subgraphs) are left untouched.
    pub fn step(&mut self, params: &mut ParamSet<F>, ids: &[VarId], grads: &mut Gradients<F>) {
        assert_eq!(ids.len(), params.len());
        self.t += 1;
        let b1 = F::from_f64_c(self.beta1);
        let b2 = F::from_f64_c(self.beta2);
        let one = F::one();
        let corr1 = F::from_f64_c(1.0 - self.beta1.powi(self.t as i32));
        let corr2 = F::from_f64_c(1.0 - self.beta2.powi(self.t as i32));
        let eps = F::from_f64_c(self.eps);
        for i in 0..params.len() {
            let Some(g) = grads.take(ids[i]) else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            m.zip_mut_with(&g, |m, &g| *m = b1 * *m + (one - b1) * g);
            v.zip_mut_with(&g, |v, &g| *v = b2 * *v + (one - b2) * g * g);
            let p = params.get_mut(i);
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                let mhat = m / corr1;
                let vhat = v / corr2;
                *p = *p - self.lr * mhat / (vhat.sqrt() + eps);
            });
        }
    }
}

impl<F: Scalar> Adam<F> {
    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&[Array4<F>], &[Array4<F>]) {
        (&self.m, &self.v)
    }

    pub fn from_raw(lr: f64, t: u64, m: Vec<Array4<F>>, v: Vec<Array4<F>>) -> Self {
        assert_eq!(m.len(), v.len());
        Self { lr: F::from_f64_c(lr), beta1: 0.9, beta2: 0.999, eps: 1e-8, m, v, t }
    }
}

/// One-file training checkpoint: model tensors, optimizer moments, RNG
/// position, and step counter. Loading and stepping once must equal never
/// having stopped.
pub fn save_trainer<F: Scalar>(
    path: &Path,
    model_config: &str,
    params: &ParamSet<F>,
    opt: &Adam<F>,
    rng: &TrainRng,
    step: u64,
) -> Result<(), ArchiveError> {
    let (seed, pos) = rng.checkpoint();
    let header = serde_json::json!({
        "model": serde_json::from_str::<serde_json::Value>(model_config)
            .unwrap_or(serde_json::Value::String(model_config.to_owned())),
        "step": step,
        "rng_seed": seed,
        "rng_pos_hi": (pos >> 64) as u64,
        "rng_pos_lo": pos as u64,
        "adam_t": opt.t(),
        "lr": opt.lr.as_f64(),
    });
    let mut combined = ParamSet::new();
    for i in 0..params.len() {
        combined.add(&format!("model.{}", params.name(i)), params.get(i).clone());
    }
    let (m, v) = opt.moments();
    for (i, t) in m.iter().enumerate() {
        combined.add(&format!("opt.m.{i}"), t.clone());
    }
    for (i, t) in v.iter().enumerate() {
        combined.add(&format!("opt.v.{i}"), t.clone());
    }
    combined.save(path, &header.to_string())
}

pub struct TrainerCheckpoint<F> {
    pub params: ParamSet<F>,
    pub opt: Adam<F>,
    pub rng: TrainRng,
    pub step: u64,
    pub model_config: String,
}

pub fn load_trainer<F: Scalar>(path: &Path) -> Result<TrainerCheckpoint<F>, ArchiveError> {
    let (combined, header) = ParamSet::<F>::load(path)?;
    let h: serde_json::Value = serde_json::from_str(&header).map_err(|_| ArchiveError::BadName)?;
    let step = h["step"].as_u64().unwrap_or(0);
    let seed = h["rng_seed"].as_u64().unwrap_or(0);
    let pos = (u128::from(h["rng_pos_hi"].as_u64().unwrap_or(0)) << 64)
        | u128::from(h["rng_pos_lo"].as_u64().unwrap_or(0));
    let adam_t = h["adam_t"].as_u64().unwrap_or(0);
    let lr = h["lr"].as_f64().unwrap_or(1e-3);
    let mut params = ParamSet::new();
    let (mut m, mut v) = (Vec::new(), Vec::new());
    for i in 0..combined.len() {
        let name = combined.name(i).to_owned();
        if let Some(rest) = name.strip_prefix("model.") {
            params.add(rest, combined.get(i).clone());
        } else if name.starts_with("opt.m.") {
            m.push(combined.get(i).clone());
        } else if name.starts_with("opt.v.") {
            v.push(combined.get(i).clone());
        }
    }
    let model_config = h["model"].to_string();
    Ok(TrainerCheckpoint {
        params,
        opt: Adam::from_raw(lr, adam_t, m, v),
        rng: TrainRng::restore(seed, pos),
        step,
        model_config,
    })
}

/// Random training crops; undersized images are replicate-padded first.
/// Draw order (image index, y, x per item) is part of checkpoint stability.
pub fn sample_crops<F: Scalar>(
    rng: &mut impl Rng,
    images: &[ndarray::Array3<F>],
    batch: usize,
    crop: usize,
) -> Array4<F> {
    assert!(!images.is_empty());
    let mut out = Array4::zeros((batch, 3, crop, crop));
    for b in 0..batch {
        let img = &images[rng.gen_range(0..images.len())];
        let (_, h, w) = img.dim();
        let padded;
        let view = if h < crop || w < crop {
            padded = crate::imageops::replicate_pad(
                img.view(),
                crop.saturating_sub(h),
                crop.saturating_sub(w),
            );
            padded.view()
        } else {
            img.view()
        };
        let (vh, vw) = (view.dim().1, view.dim().2);
        let y0 = rng.gen_range(0..=vh - crop);
        let x0 = rng.gen_range(0..=vw - crop);
        for ch in 0..3 {
            for y in 0..crop {
                for x in 0..crop {
                    out[(b, ch, y, x)] = view[(ch, y0 + y, x0 + x)];
                }
            }
        }
    }
    out
}

/// Training RNG with an explicit checkpointable position so resumed runs are
/// bit-identical to uninterrupted ones.
pub struct TrainRng {
    pub seed: u64,
    rng: ChaCha20Rng,
}

impl TrainRng {
    pub fn new(seed: u64) -> Self {
        Self { seed, rng: ChaCha20Rng::seed_from_u64(seed) }
    }

    /// (seed, stream position) — enough to reconstruct the exact state.
    pub fn checkpoint(&self) -> (u64, u128) {
        (self.seed, self.rng.get_word_pos())
    }

    pub fn restore(seed: u64, word_pos: u128) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_word_pos(word_pos);
        Self { seed, rng }
    }
}

impl RngCore for TrainRng {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest)
    }
    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.rng.try_fill_bytes(dest)
    }
}
