//! Evaluation subcommands: robustness sweep, tamper study, threshold
//! calibration. Sweeps parallelize over images with per-image seeds, so
//! results are independent of --jobs.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Subcommand};
use deepsig_core::eval::{
    detection_scores, effective_ts, localization_scores, plot_curves, rectangle_sweep,
    records_to_csv, robustness_sweep, summarize, tamper_records_to_csv, Pipeline, RectMode,
    Series,
};
use deepsig_core::imageops;
use deepsig_core::payload::keys::KeyPair;
use deepsig_core::verify::{changemap_to_mask, Status, Thresholds, Verifier};
use deepsig_core::watermark::NoiseSpec;
use deepsig_core::Real;

use crate::data::load_image_dir;
use crate::ops::{grid_config, load_models, resolve_pubkey};
use crate::profile::ProfileArgs;

#[derive(Args, Clone, Debug)]
pub struct SweepArgs {
    /// Directory of cover images to sign
    #[arg(long)]
    images: PathBuf,
    /// Signing key (sweeps sign with it and verify with its public half)
    #[arg(long)]
    key: PathBuf,
    /// Output directory for records.csv / summary.json / panels
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated noise specs, e.g. identity,jpeg_real:80,crop:0.7
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "identity,jpeg_real:100,jpeg_real:90,jpeg_real:80,jpeg_real:70,\
                         jpeg_real:60,contrast:0.5,contrast:1.5,saturation:0,saturation:0.5,\
                         crop:0.7,cropout:0.1"
    )]
    noise: Vec<String>,
    /// Worker threads (default: all cores)
    #[arg(long)]
    jobs: Option<usize>,
    /// Also draw WVR / BER panels over noise strength
    #[arg(long)]
    plot: bool,
    #[command(flatten)]
    profile: ProfileArgs,
}

#[derive(Args, Clone, Debug)]
pub struct TamperArgs {
    /// Directory of cover images (synthetic rectangle study)
    #[arg(long, conflicts_with = "corpus")]
    images: Option<PathBuf>,
    /// Signing key for the synthetic study
    #[arg(long, conflicts_with = "corpus")]
    key: Option<PathBuf>,
    /// Square side lengths in px; 0 rows are the authentic baseline
    #[arg(long, value_delimiter = ',', default_value = "0,16,24,32,40,48,64")]
    sides: Vec<usize>,
    /// Rectangle fill: green (pure green) or average (region mean color)
    #[arg(long, default_value = "green")]
    mode: String,
    /// Change-map threshold for localization masks
    #[arg(long, default_value_t = 0.5)]
    loc_threshold: f64,
    /// Prepared corpus with authentic/, forged/, masks/ (matching stems);
    /// verified against --pubkey instead of painting rectangles
    #[arg(long, requires = "pubkey")]
    corpus: Option<PathBuf>,
    /// Public key for corpus verification (path or hex)
    #[arg(long)]
    pubkey: Option<String>,
    /// Output directory for tamper.csv / summary.json
    #[arg(long)]
    out: PathBuf,
    /// Worker threads (default: all cores)
    #[arg(long)]
    jobs: Option<usize>,
    #[command(flatten)]
    profile: ProfileArgs,
}

#[derive(Args, Clone, Debug)]
pub struct CalibrateArgs {
    /// Directory of cover images for the calibration study
    #[arg(long)]
    images: PathBuf,
    /// Signing key
    #[arg(long)]
    key: PathBuf,
    /// Square side lengths; 0 rows form the authentic score list
    #[arg(long, value_delimiter = ',', default_value = "0,24,40,64")]
    sides: Vec<usize>,
    #[arg(long, default_value = "green")]
    mode: String,
    /// Profile file to write with the calibrated tau
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    jobs: Option<usize>,
    #[command(flatten)]
    profile: ProfileArgs,
}

#[derive(Subcommand, Clone, Debug)]
pub enum EvalCommand {
    /// Sign, transform, verify over a noise grid; report BER / WVR per spec
    Sweep(SweepArgs),
    /// Rectangle-forgery study (or scoring of a prepared corpus)
    Tamper(TamperArgs),
    /// Pick the F1-optimal tau over a rectangle study and write a profile
    Calibrate(CalibrateArgs),
}

pub fn run(cmd: EvalCommand) -> Result<i32> {
    match cmd {
        EvalCommand::Sweep(args) => sweep(&args),
        EvalCommand::Tamper(args) => tamper(&args),
        EvalCommand::Calibrate(args) => calibrate(&args),
    }
}

fn default_jobs(requested: Option<usize>) -> usize {
    requested.unwrap_or_else(|| {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    })
}

fn parse_mode(s: &str) -> Result<RectMode> {
    match s {
        "green" => Ok(RectMode::Green),
        "average" => Ok(RectMode::Average),
        other => bail!("--mode must be green or average, got {other:?}"),
    }
}

fn sweep(args: &SweepArgs) -> Result<i32> {
    let profile = args.profile.resolve()?;
    let (content, watermark) = load_models(&profile)?;
    let keys = KeyPair::load(&args.key)?;
    let images = load_image_dir(&args.images)?;
    let specs: Vec<NoiseSpec> = args
        .noise
        .iter()
        .map(|s| s.trim().parse().map_err(|e| anyhow!("--noise {s:?}: {e}")))
        .collect::<Result<_>>()?;

    let pipeline = Pipeline {
        content: &content,
        watermark: &watermark,
        keys: &keys,
        grid_cfg: grid_config(&profile, &watermark),
        alpha: profile.alpha,
        thresholds: Thresholds { tau_ts: profile.tau_ts, beta_g: profile.beta_g },
    };
    let jobs = default_jobs(args.jobs);
    eprintln!(
        "sweep: {} images x {} specs, {jobs} jobs, seed {}",
        images.len(),
        specs.len(),
        profile.seed
    );
    let records = robustness_sweep(&pipeline, &images, &specs, profile.seed, jobs);

    std::fs::create_dir_all(&args.out)?;
    let csv_path = args.out.join("records.csv");
    records_to_csv(&records, std::fs::File::create(&csv_path)?)?;
    let summaries = summarize(&records);
    let summary_path = args.out.join("summary.json");
    std::fs::write(&summary_path, serde_json::to_string_pretty(&summaries)? + "\n")?;

    for s in &summaries {
        eprintln!(
            "{:<28} wvr {:.3} [{:.3}, {:.3}]  ber {}  ts {}",
            s.spec,
            s.wvr,
            s.wvr_lo,
            s.wvr_hi,
            s.mean_ber.map_or("  n/a".into(), |b| format!("{b:.4}")),
            s.mean_ts.map_or("  n/a".into(), |t| format!("{t:.4}")),
        );
    }
    eprintln!("records: {}", csv_path.display());
    eprintln!("summary: {}", summary_path.display());

    if args.plot {
        plot_sweep_panels(&args.out, &summaries)?;
    }
    Ok(0)
}

/// One WVR panel and one BER panel, x = noise strength, one series per
/// noise kind that was swept over more than one strength.
fn plot_sweep_panels(
    out: &Path,
    summaries: &[deepsig_core::eval::SpecSummary],
) -> Result<()> {
    let mut kinds: Vec<&str> = Vec::new();
    for s in summaries {
        let kind = s.spec.split(':').next().unwrap_or(&s.spec);
        if !kinds.contains(&kind) {
            kinds.push(kind);
        }
    }
    let series_for = |value: &dyn Fn(&deepsig_core::eval::SpecSummary) -> Option<f64>| {
        kinds
            .iter()
            .filter_map(|kind| {
                let points: Vec<(f64, f64)> = summaries
                    .iter()
                    .filter(|s| s.spec.split(':').next() == Some(kind))
                    .filter_map(|s| {
                        let x: f64 = s.spec.split(':').nth(1)?.parse().ok()?;
                        Some((x, value(s)?))
                    })
                    .collect();
                (points.len() > 1).then(|| Series { label: kind.to_string(), points })
            })
            .collect::<Vec<_>>()
    };

    let mut legend_lines = Vec::new();
    let wvr_series = series_for(&|s| Some(s.wvr));
    if !wvr_series.is_empty() {
        let legend = plot_curves(&out.join("wvr.png"), &wvr_series, 1.0)?;
        legend_lines.push(format!("wvr.png\n{}", legend.join("\n")));
    }
    let ber_series = series_for(&|s| s.mean_ber);
    if !ber_series.is_empty() {
        let legend = plot_curves(&out.join("ber.png"), &ber_series, 0.5)?;
        legend_lines.push(format!("ber.png\n{}", legend.join("\n")));
    }
    if legend_lines.is_empty() {
        eprintln!("no multi-strength noise kinds; panels skipped");
    } else {
        let legend_path = out.join("panels.txt");
        std::fs::write(&legend_path, legend_lines.join("\n\n") + "\n")?;
        eprintln!("panels: {} (legend {})", out.display(), legend_path.display());
    }
    Ok(())
}

fn tamper(args: &TamperArgs) -> Result<i32> {
    if let Some(corpus) = &args.corpus {
        return corpus_tamper(args, corpus);
    }
    let images_dir = args
        .images
        .as_ref()
        .ok_or_else(|| anyhow!("pass --images with --key, or --corpus with --pubkey"))?;
    let key = args
        .key
        .as_ref()
        .ok_or_else(|| anyhow!("--images needs --key (signing study)"))?;

    let profile = args.profile.resolve()?;
    let (content, watermark) = load_models(&profile)?;
    let keys = KeyPair::load(key)?;
    let images = load_image_dir(images_dir)?;
    let mode = parse_mode(&args.mode)?;

    let pipeline = Pipeline {
        content: &content,
        watermark: &watermark,
        keys: &keys,
        grid_cfg: grid_config(&profile, &watermark),
        alpha: profile.alpha,
        thresholds: Thresholds { tau_ts: profile.tau_ts, beta_g: profile.beta_g },
    };
    let jobs = default_jobs(args.jobs);
    eprintln!(
        "tamper: {} images x sides {:?} ({}), {jobs} jobs, seed {}",
        images.len(),
        args.sides,
        args.mode,
        profile.seed
    );
    let records = rectangle_sweep(
        &pipeline,
        &images,
        &args.sides,
        mode,
        args.loc_threshold,
        profile.seed,
        jobs,
    );

    std::fs::create_dir_all(&args.out)?;
    let csv_path = args.out.join("tamper.csv");
    tamper_records_to_csv(&records, std::fs::File::create(&csv_path)?)?;

    // Side-0 rows are the authentic baseline for the AUC; verification
    // failures saturate the score (a forgery that breaks the watermark is a
    // detected forgery).
    let authentic: Vec<f64> = records
        .iter()
        .filter(|r| r.side == 0)
        .map(|r| effective_ts(r.wvr, r.ts))
        .collect();
    let mut doc = serde_json::Map::new();
    for &side in args.sides.iter().filter(|&&s| s != 0) {
        let rows: Vec<_> = records.iter().filter(|r| r.side == side).collect();
        let forged: Vec<f64> = rows.iter().map(|r| effective_ts(r.wvr, r.ts)).collect();
        let detected = rows.iter().filter(|r| r.detected).count();
        let ious: Vec<f64> = rows.iter().filter_map(|r| r.iou).collect();
        let overlaps = rows.iter().filter(|r| r.any_overlap == Some(true)).count();
        let mut entry = serde_json::Map::new();
        entry.insert("trials".into(), rows.len().into());
        entry.insert("detected".into(), detected.into());
        if !authentic.is_empty() && !forged.is_empty() {
            let d = detection_scores(&authentic, &forged);
            entry.insert("auc".into(), d.auc.into());
        }
        if !ious.is_empty() {
            entry.insert(
                "mean_iou".into(),
                (ious.iter().sum::<f64>() / ious.len() as f64).into(),
            );
            entry.insert(
                "any_overlap_recall".into(),
                (overlaps as f64 / rows.len() as f64).into(),
            );
        }
        doc.insert(format!("side_{side}"), entry.into());
        eprintln!(
            "side {side:>3}: detected {}/{}",
            detected,
            rows.len()
        );
    }
    let summary_path = args.out.join("summary.json");
    std::fs::write(
        &summary_path,
        serde_json::to_string_pretty(&serde_json::Value::Object(doc))? + "\n",
    )?;
    eprintln!("records: {}", csv_path.display());
    eprintln!("summary: {}", summary_path.display());
    Ok(0)
}

/// Scores a prepared corpus: every stem in authentic/ and forged/ is
/// verified; masks/<stem>.png (white = tampered), when present, scores
/// localization of the change map.
fn corpus_tamper(args: &TamperArgs, corpus: &Path) -> Result<i32> {
    let profile = args.profile.resolve()?;
    let (content, watermark) = load_models(&profile)?;
    let key = resolve_pubkey(args.pubkey.as_deref().expect("clap enforces --pubkey"))?;
    let verifier = Verifier {
        content: &content,
        watermark: &watermark,
        key,
        thresholds: Thresholds { tau_ts: profile.tau_ts, beta_g: profile.beta_g },
    };

    let authentic = load_image_dir(&corpus.join("authentic"))?;
    let forged = load_image_dir(&corpus.join("forged"))?;
    let masks_dir = corpus.join("masks");

    std::fs::create_dir_all(&args.out)?;
    let mut csv = std::io::BufWriter::new(std::fs::File::create(args.out.join("tamper.csv"))?);
    writeln!(csv, "image_id,set,wvr,ts,status,detected,iou,any_overlap")?;

    let mut score_one = |id: &str,
                         set: &str,
                         img: &ndarray::Array3<Real>|
     -> Result<(f64, bool, Option<(f64, bool)>)> {
        let report = verifier
            .verify_image(img.view())
            .with_context(|| format!("verifying {set}/{id}"))?;
        let wvr = matches!(report.status, Status::Authentic | Status::Tampered);
        let ts = effective_ts(wvr, report.ts);
        let detected = report.status != Status::Authentic;
        let loc = match (&report.z_cm, &report.metadata) {
            (Some(z_cm), Some(meta)) if set == "forged" => {
                let mask_path = masks_dir.join(format!("{id}.png"));
                if mask_path.exists() {
                    let truth_img = imageops::load_image::<Real>(&mask_path)?;
                    let (_, h, w) = truth_img.dim();
                    let truth = ndarray::Array2::from_shape_fn((h, w), |(y, x)| {
                        u8::from(truth_img[(0, y, x)] > 0.5)
                    });
                    let pred = changemap_to_mask(
                        z_cm.view(),
                        args.loc_threshold,
                        meta.scale_q,
                        content.config.stride,
                        (h, w),
                    )
                    .mapv(u8::from);
                    Some(localization_scores(pred.view(), truth.view()))
                } else {
                    None
                }
            }
            _ => None,
        };
        writeln!(
            csv,
            "{id},{set},{},{ts},{},{},{},{}",
            wvr,
            report.status.as_str(),
            detected,
            loc.map_or(String::new(), |(iou, _)| format!("{iou}")),
            loc.map_or(String::new(), |(_, any)| format!("{any}")),
        )?;
        Ok((ts, detected, loc))
    };

    let mut auth_ts = Vec::new();
    for (id, img) in &authentic {
        let (ts, _, _) = score_one(id, "authentic", img)?;
        auth_ts.push(ts);
    }
    let mut forged_ts = Vec::new();
    let mut detected = 0usize;
    let mut ious = Vec::new();
    let mut overlaps = 0usize;
    let mut loc_trials = 0usize;
    for (id, img) in &forged {
        let (ts, det, loc) = score_one(id, "forged", img)?;
        forged_ts.push(ts);
        detected += usize::from(det);
        if let Some((iou, any)) = loc {
            loc_trials += 1;
            ious.push(iou);
            overlaps += usize::from(any);
        }
    }
    csv.flush()?;

    let mut doc = serde_json::Map::new();
    doc.insert("authentic_trials".into(), authentic.len().into());
    doc.insert("forged_trials".into(), forged.len().into());
    doc.insert("detected".into(), detected.into());
    if !auth_ts.is_empty() && !forged_ts.is_empty() {
        let d = detection_scores(&auth_ts, &forged_ts);
        doc.insert("auc".into(), d.auc.into());
        doc.insert("tau_f1".into(), d.tau.into());
        doc.insert("f1".into(), d.f1.into());
        doc.insert("fpr".into(), d.fpr.into());
        doc.insert("fnr".into(), d.fnr.into());
        eprintln!("auc {:.4}  f1 {:.4} at tau {:.4}", d.auc, d.f1, d.tau);
    }
    if loc_trials > 0 {
        doc.insert(
            "mean_iou".into(),
            (ious.iter().sum::<f64>() / loc_trials as f64).into(),
        );
        doc.insert(
            "any_overlap_recall".into(),
            (overlaps as f64 / loc_trials as f64).into(),
        );
    }
    std::fs::write(
        args.out.join("summary.json"),
        serde_json::to_string_pretty(&serde_json::Value::Object(doc))? + "\n",
    )?;
    eprintln!("records: {}", args.out.join("tamper.csv").display());
    eprintln!("summary: {}", args.out.join("summary.json").display());
    Ok(0)
}

fn calibrate(args: &CalibrateArgs) -> Result<i32> {
    if !args.sides.contains(&0) {
        bail!("--sides must include 0 (the authentic baseline)");
    }
    if args.sides.iter().all(|&s| s == 0) {
        bail!("--sides needs at least one nonzero side");
    }
    let mut profile = args.profile.resolve()?;
    let (content, watermark) = load_models(&profile)?;
    let keys = KeyPair::load(&args.key)?;
    let images = load_image_dir(&args.images)?;
    let mode = parse_mode(&args.mode)?;

    let pipeline = Pipeline {
        content: &content,
        watermark: &watermark,
        keys: &keys,
        grid_cfg: grid_config(&profile, &watermark),
        alpha: profile.alpha,
        thresholds: Thresholds { tau_ts: profile.tau_ts, beta_g: profile.beta_g },
    };
    let records = rectangle_sweep(
        &pipeline,
        &images,
        &args.sides,
        mode,
        0.5,
        profile.seed,
        default_jobs(args.jobs),
    );
    let authentic: Vec<f64> = records
        .iter()
        .filter(|r| r.side == 0)
        .map(|r| effective_ts(r.wvr, r.ts))
        .collect();
    let forged: Vec<f64> = records
        .iter()
        .filter(|r| r.side != 0)
        .map(|r| effective_ts(r.wvr, r.ts))
        .collect();
    if authentic.is_empty() || forged.is_empty() {
        bail!("calibration produced an empty score list");
    }
    let d = detection_scores(&authentic, &forged);
    println!(
        "auc {:.4}  tau {:.4}  f1 {:.4}  fpr {:.4}  fnr {:.4}",
        d.auc, d.tau, d.f1, d.fpr, d.fnr
    );
    // tau sits exactly on an observed authentic score (decision is ts > tau);
    // clamp into the profile's accepted (0, 1].
    profile.tau_ts = d.tau.clamp(f64::MIN_POSITIVE, 1.0);
    profile.save(&args.out)?;
    eprintln!("profile: {} (tau_ts {:.4})", args.out.display(), profile.tau_ts);
    Ok(0)
}
