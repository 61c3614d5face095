//! keygen / sign / verify commands.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use deepsig_core::content::ContentCodec;
use deepsig_core::imageops;
use deepsig_core::payload::grid::{min_viable_square, GridConfig, ProtocolContext};
use deepsig_core::payload::keys::{
    load_public, parse_public_hex, save_public, KeyPair, VerifyingKey,
};
use deepsig_core::verify::{overlay_changemap, sign_image, Thresholds, Verifier, VerifyError};
use deepsig_core::watermark::WatermarkCodec;
use deepsig_core::Real;
use rand::SeedableRng;

use crate::profile::{Profile, ProfileArgs};

pub fn keygen(out: &Path, seed_hex: Option<&str>, force: bool) -> Result<i32> {
    let key_path = out.with_extension("key");
    let pub_path = out.with_extension("pub");
    for p in [&key_path, &pub_path] {
        if p.exists() && !force {
            bail!("{} exists; pass --force to overwrite", p.display());
        }
    }
    let pair = match seed_hex {
        Some(hexstr) => {
            let bytes = hex::decode(hexstr).context("--seed must be hex")?;
            let seed: [u8; 32] = bytes
                .try_into()
                .map_err(|_| anyhow!("--seed must be 64 hex chars (32 bytes)"))?;
            KeyPair::from_seed(&seed)
        }
        None => KeyPair::generate(&mut rand::rngs::OsRng),
    };
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    pair.save(&key_path)?;
    save_public(&pair.public(), &pub_path)?;
    println!("key:    {}", key_path.display());
    println!("public: {}", pub_path.display());
    println!("pubkey: {}", pair.public_hex());
    Ok(0)
}

pub fn load_models(profile: &Profile) -> Result<(ContentCodec<Real>, WatermarkCodec<Real>)> {
    let cpath = profile
        .content_model
        .as_ref()
        .ok_or_else(|| anyhow!("no content model: set --content-model or the profile"))?;
    let wpath = profile
        .watermark_model
        .as_ref()
        .ok_or_else(|| anyhow!("no watermark model: set --watermark-model or the profile"))?;
    let content = ContentCodec::load(cpath)
        .with_context(|| format!("loading content model {}", cpath.display()))?;
    let watermark = WatermarkCodec::load(wpath)
        .with_context(|| format!("loading watermark model {}", wpath.display()))?;
    Ok((content, watermark))
}

pub fn grid_config(profile: &Profile, watermark: &WatermarkCodec<Real>) -> GridConfig {
    GridConfig {
        stride: watermark.config.cell(),
        border: profile.border,
        scale_q: profile.scale_q,
    }
}

pub fn sign(
    image: &Path,
    key: &Path,
    out: &Path,
    jpeg_quality: u8,
    self_check: bool,
    args: &ProfileArgs,
) -> Result<i32> {
    let profile = args.resolve()?;
    let (content, watermark) = load_models(&profile)?;
    let keys = KeyPair::load(key).with_context(|| format!("loading key {}", key.display()))?;
    let img = imageops::load_image::<Real>(image)
        .with_context(|| format!("loading {}", image.display()))?;
    let grid_cfg = grid_config(&profile, &watermark);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(profile.seed);

    let outcome = sign_image(
        img.view(),
        &content,
        &watermark,
        &keys,
        &grid_cfg,
        profile.alpha,
        &mut rng,
    )
    .map_err(|e| match &e {
        VerifyError::Capacity(_) => {
            let ctx = ProtocolContext {
                spatial_down: content.config.stride,
                bits_per_index: content.config.bits_per_index(),
            };
            let side = min_viable_square(&grid_cfg, &ctx);
            anyhow!("{e}; smallest square this configuration can sign is {side}x{side}")
        }
        _ => anyhow!("{e}"),
    })?;

    let jpeg_out = matches!(
        out.extension().and_then(|e| e.to_str()),
        Some("jpg") | Some("jpeg")
    );
    if jpeg_out {
        eprintln!(
            "warning: JPEG output recompresses the watermark; quality below the \
             robustness floor may destroy it (use PNG for lossless signing)"
        );
    }

    // Self-check what a verifier will actually see: the container round-trip
    // of the signed image, not the in-memory floats.
    if self_check {
        let delivered = if jpeg_out {
            imageops::jpeg_roundtrip(outcome.image.view(), jpeg_quality)
        } else {
            imageops::from_rgb8::<Real>(&imageops::to_rgb8(outcome.image.view()))
        };
        let verifier = Verifier {
            content: &content,
            watermark: &watermark,
            key: keys.public(),
            thresholds: Thresholds { tau_ts: profile.tau_ts, beta_g: profile.beta_g },
        };
        let report = verifier
            .verify_image(delivered.view())
            .context("self-check verification failed to run")?;
        if report.status != deepsig_core::verify::Status::Authentic {
            bail!(
                "self-check failed: signed image verifies as {} (ts {:?}); nothing written",
                report.status.as_str(),
                report.ts
            );
        }
        eprintln!(
            "self-check: authentic, ts {:.4} (tau {})",
            report.ts.unwrap_or(f64::NAN),
            profile.tau_ts
        );
    }

    if jpeg_out {
        imageops::save_jpeg(out, outcome.image.view(), jpeg_quality)?;
    } else {
        imageops::save_png(out, outcome.image.view())?;
    }
    eprintln!(
        "signed {} -> {} (psnr {:.2} dB, alpha {})",
        image.display(),
        out.display(),
        outcome.psnr,
        profile.alpha
    );
    Ok(0)
}

pub fn resolve_pubkey(arg: &str) -> Result<VerifyingKey> {
    let path = Path::new(arg);
    if path.exists() {
        Ok(load_public(path)?)
    } else {
        parse_public_hex(arg)
            .map_err(|e| anyhow!("--pubkey is neither an existing file nor valid hex: {e}"))
    }
}

#[allow(clippy::too_many_arguments)]
pub fn verify(
    image: &Path,
    pubkey: &str,
    out: Option<&Path>,
    include_images: bool,
    emit_overlay: Option<&Path>,
    emit_reconstruction: Option<&Path>,
    args: &ProfileArgs,
) -> Result<i32> {
    let profile = args.resolve()?;
    let (content, watermark) = load_models(&profile)?;
    let key = resolve_pubkey(pubkey)?;
    let img = imageops::load_image::<Real>(image)
        .with_context(|| format!("loading {}", image.display()))?;

    let verifier = Verifier {
        content: &content,
        watermark: &watermark,
        key,
        thresholds: Thresholds { tau_ts: profile.tau_ts, beta_g: profile.beta_g },
    };
    let report = verifier.verify_image(img.view())?;

    let doc = report.to_json(include_images);
    let text = serde_json::to_string_pretty(&doc)?;
    match out {
        Some(path) => std::fs::write(path, format!("{text}\n"))?,
        None => println!("{text}"),
    }
    eprintln!(
        "status: {} (ts {})",
        report.status.as_str(),
        report.ts.map_or("n/a".into(), |t| format!("{t:.4}"))
    );

    if let Some(path) = emit_overlay {
        match (&report.z_cm, &report.metadata) {
            (Some(z_cm), Some(meta)) => {
                // The change map lives in the original image's geometry; fall
                // back to the reconstruction when the received image was
                // cropped and no longer lines up.
                let (oh, ow) = meta.original_dims();
                let base = if img.dim() == (3, oh, ow) {
                    img.view()
                } else {
                    eprintln!(
                        "note: received image is {}x{} but the original was {}x{}; \
                         overlaying on the reconstruction",
                        img.dim().1,
                        img.dim().2,
                        oh,
                        ow
                    );
                    report.reconstruction.as_ref().expect("verified report").view()
                };
                let overlay =
                    overlay_changemap(base, z_cm.view(), meta.scale_q, content.config.stride);
                imageops::save_png(path, overlay.view())?;
                eprintln!("overlay: {}", path.display());
            }
            _ => eprintln!("no change map available; overlay not written"),
        }
    }
    if let Some(path) = emit_reconstruction {
        match &report.reconstruction {
            Some(rec) => {
                imageops::save_png(path, rec.view())?;
                eprintln!("reconstruction: {}", path.display());
            }
            None => eprintln!("no reconstruction available; not written"),
        }
    }

    Ok(report.status.exit_code())
}
