//! Model training with CSV logging, periodic checkpoints, and a NaN abort
//! that leaves the last good checkpoint on disk.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Subcommand};
use deepsig_core::content::{CodecConfig, ContentTrainConfig, ContentTrainer};
use deepsig_core::watermark::{
    PiGains, WatermarkConfig, WatermarkTrainConfig, WatermarkTrainer,
};
use deepsig_core::Real;

use crate::data::load_image_dir;

#[derive(Args, Clone, Debug)]
pub struct TrainArgs {
    /// Directory of training images (PNG/JPEG)
    #[arg(long)]
    data: PathBuf,
    /// Output model archive
    #[arg(long)]
    out: PathBuf,
    /// Total optimizer steps (resume continues toward this target)
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    /// Training crop side in pixels
    #[arg(long)]
    crop: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint file; defaults to <out>.ckpt
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Steps between checkpoints
    #[arg(long, default_value_t = 500)]
    checkpoint_every: u64,
    /// Resume from this checkpoint instead of fresh initialization
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Per-step CSV training log
    #[arg(long)]
    log: Option<PathBuf>,
    /// Steps between progress lines on stderr
    #[arg(long, default_value_t = 100)]
    print_every: u64,
}

#[derive(Subcommand, Clone, Debug)]
pub enum TrainCommand {
    /// Train the content codec (latent quantizer + reconstruction)
    Content(TrainArgs),
    /// Train the watermark embedder/extractor pair
    Watermark(TrainArgs),
}

pub fn run(cmd: TrainCommand) -> Result<i32> {
    match cmd {
        TrainCommand::Content(args) => train_content(&args),
        TrainCommand::Watermark(args) => train_watermark(&args),
    }
}

struct CsvLog {
    file: Option<std::io::BufWriter<std::fs::File>>,
}

impl CsvLog {
    fn create(path: Option<&Path>, header: &str) -> Result<Self> {
        let file = match path {
            Some(p) => {
                let mut f = std::io::BufWriter::new(
                    std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
                );
                writeln!(f, "{header}")?;
                Some(f)
            }
            None => None,
        };
        Ok(Self { file })
    }

    fn row(&mut self, line: &str) -> Result<()> {
        if let Some(f) = &mut self.file {
            writeln!(f, "{line}")?;
        }
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        if let Some(f) = &mut self.file {
            f.flush()?;
        }
        Ok(())
    }
}

fn abort_nan(step: u64, saved: Option<(&Path, u64)>) -> anyhow::Error {
    match saved {
        Some((path, at)) => anyhow::anyhow!(
            "training diverged (non-finite loss) at step {step}; \
             last good checkpoint is {} (step {at})",
            path.display()
        ),
        None => anyhow::anyhow!(
            "training diverged (non-finite loss) at step {step} before any checkpoint was written"
        ),
    }
}

fn train_content(args: &TrainArgs) -> Result<i32> {
    let images: Vec<_> = load_image_dir(&args.data)?.into_iter().map(|(_, i)| i).collect();
    let ckpt_path = args
        .checkpoint
        .clone()
        .unwrap_or_else(|| args.out.with_extension("ckpt"));

    let mut trainer: ContentTrainer<Real> = match &args.resume {
        Some(path) => ContentTrainer::load_checkpoint(path)
            .with_context(|| format!("resuming from {}", path.display()))?,
        None => {
            let mut tcfg = ContentTrainConfig::default();
            if let Some(v) = args.batch {
                tcfg.batch = v;
            }
            if let Some(v) = args.crop {
                tcfg.crop = v;
            }
            if let Some(v) = args.lr {
                tcfg.lr = v;
            }
            if let Some(v) = args.seed {
                tcfg.seed = v;
            }
            ContentTrainer::new(CodecConfig::default(), tcfg)
        }
    };
    if let Some(steps) = args.steps {
        trainer.tcfg.steps = steps;
    }

    let mut log = CsvLog::create(
        args.log.as_deref(),
        "step,loss,recon_mse,ssim,commit,reinitialized",
    )?;
    let mut last_saved: Option<u64> = None;
    while trainer.step < trainer.tcfg.steps {
        let stats = trainer.train_step(&images);
        log.row(&format!(
            "{},{},{},{},{},{}",
            stats.step, stats.loss, stats.recon_mse, stats.ssim, stats.commit, stats.reinitialized
        ))?;
        if !stats.loss.is_finite() {
            log.finish()?;
            return Err(abort_nan(stats.step, last_saved.map(|at| (ckpt_path.as_path(), at))));
        }
        if stats.collapse_warning {
            eprintln!("warning: codebook usage entropy low at step {}", stats.step);
        }
        if args.print_every > 0 && stats.step % args.print_every == 0 {
            eprintln!(
                "step {:>6}  loss {:.5}  mse {:.5}  ssim {:.4}",
                stats.step, stats.loss, stats.recon_mse, stats.ssim
            );
        }
        if stats.step % args.checkpoint_every == 0 || trainer.step >= trainer.tcfg.steps {
            trainer.save_checkpoint(&ckpt_path)?;
            last_saved = Some(stats.step);
        }
    }
    log.finish()?;
    trainer.codec.save(&args.out)?;
    eprintln!("model: {}  (checkpoint {})", args.out.display(), ckpt_path.display());
    Ok(0)
}

fn train_watermark(args: &TrainArgs) -> Result<i32> {
    let images: Vec<_> = load_image_dir(&args.data)?.into_iter().map(|(_, i)| i).collect();
    let ckpt_path = args
        .checkpoint
        .clone()
        .unwrap_or_else(|| args.out.with_extension("ckpt"));

    let mut trainer: WatermarkTrainer<Real> = match &args.resume {
        Some(path) => WatermarkTrainer::load_checkpoint(path)
            .with_context(|| format!("resuming from {}", path.display()))?,
        None => {
            let mut tcfg = WatermarkTrainConfig::default();
            if let Some(v) = args.batch {
                tcfg.batch = v;
            }
            if let Some(v) = args.crop {
                tcfg.crop = v;
            }
            if let Some(v) = args.lr {
                tcfg.lr = v;
            }
            if let Some(v) = args.seed {
                tcfg.seed = v;
            }
            WatermarkTrainer::new(WatermarkConfig::default(), tcfg, PiGains::default())
        }
    };
    if let Some(steps) = args.steps {
        trainer.tcfg.steps = steps;
    }
    let cell = trainer.codec.config.cell();
    if trainer.tcfg.crop % cell != 0 {
        bail!("--crop must be a multiple of the payload cell ({cell} px)");
    }

    let mut log = CsvLog::create(
        args.log.as_deref(),
        "step,loss,l_img,l_msg,l_adv,l_disc,ber,ber_clean,beta_w,branch,quality",
    )?;
    let mut last_saved: Option<u64> = None;
    while trainer.step < trainer.tcfg.steps {
        let stats = trainer.train_step(&images);
        log.row(&format!(
            "{},{},{},{},{},{},{},{},{},{:?},{}",
            stats.step,
            stats.loss,
            stats.l_img,
            stats.l_msg,
            stats.l_adv,
            stats.l_disc,
            stats.ber,
            stats.ber_clean,
            stats.beta_w,
            stats.branch,
            stats.quality.map_or(String::new(), |q| format!("{q}")),
        ))?;
        if !stats.loss.is_finite() {
            log.finish()?;
            return Err(abort_nan(stats.step, last_saved.map(|at| (ckpt_path.as_path(), at))));
        }
        if args.print_every > 0 && stats.step % args.print_every == 0 {
            eprintln!(
                "step {:>6}  loss {:.5}  ber {:.4}  ber_clean {:.4}  beta_w {:.2}",
                stats.step, stats.loss, stats.ber, stats.ber_clean, stats.beta_w
            );
        }
        if stats.step % args.checkpoint_every == 0 || trainer.step >= trainer.tcfg.steps {
            trainer.save_checkpoint(&ckpt_path)?;
            last_saved = Some(stats.step);
        }
    }
    log.finish()?;
    trainer.codec.save(&args.out)?;
    eprintln!("model: {}  (checkpoint {})", args.out.display(), ckpt_path.display());
    Ok(0)
}
