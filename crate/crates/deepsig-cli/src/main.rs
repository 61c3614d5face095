//! `deepsig` — sign images with a hidden, cryptographically signed content
//! latent; verify and localize tampering later.
//!
//! Verify exit codes: 0 authentic, 2 tampered, 3 invalid signature,
//! 4 no watermark. Operational failures exit 1 for every command.

mod data;
mod evalcmd;
mod ops;
mod profile;
mod train;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "deepsig", version, about = "Self-verifying image signatures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a signing key pair
    Keygen {
        /// Output prefix; writes <prefix>.key and <prefix>.pub
        #[arg(long)]
        out: PathBuf,
        /// 64 hex chars of key seed for reproducible keys (OS randomness otherwise)
        #[arg(long)]
        seed: Option<String>,
        /// Overwrite existing key files
        #[arg(long)]
        force: bool,
    },
    /// Sign an image: embed its signed content latent as a watermark
    Sign {
        /// Input image (PNG or JPEG)
        #[arg(long)]
        image: PathBuf,
        /// Signing key file from keygen
        #[arg(long)]
        key: PathBuf,
        /// Output image; .png is lossless and recommended
        #[arg(long)]
        out: PathBuf,
        /// Quality for .jpg/.jpeg outputs
        #[arg(long, default_value_t = 95)]
        jpeg_quality: u8,
        /// Skip the post-sign in-process verification
        #[arg(long)]
        no_self_check: bool,
        #[command(flatten)]
        profile: profile::ProfileArgs,
    },
    /// Verify an image and report tampering
    Verify {
        /// Image to verify
        #[arg(long)]
        image: PathBuf,
        /// Public key: a .pub file path or 64 hex chars
        #[arg(long)]
        pubkey: String,
        /// Write the JSON report here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
        /// Embed change-map and reconstruction PNGs in the report (base64)
        #[arg(long)]
        include_images: bool,
        /// Write a change-map heat overlay PNG
        #[arg(long)]
        emit_overlay: Option<PathBuf>,
        /// Write the latent reconstruction PNG
        #[arg(long)]
        emit_reconstruction: Option<PathBuf>,
        #[command(flatten)]
        profile: profile::ProfileArgs,
    },
    /// Train a model
    Train {
        #[command(subcommand)]
        which: train::TrainCommand,
    },
    /// Run experiments over an image set
    Eval {
        #[command(subcommand)]
        which: evalcmd::EvalCommand,
    },
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Keygen { out, seed, force } => ops::keygen(&out, seed.as_deref(), force),
        Command::Sign { image, key, out, jpeg_quality, no_self_check, profile } => {
            ops::sign(&image, &key, &out, jpeg_quality, !no_self_check, &profile)
        }
        Command::Verify {
            image,
            pubkey,
            out,
            include_images,
            emit_overlay,
            emit_reconstruction,
            profile,
        } => ops::verify(
            &image,
            &pubkey,
            out.as_deref(),
            include_images,
            emit_overlay.as_deref(),
            emit_reconstruction.as_deref(),
            &profile,
        ),
        Command::Train { which } => train::run(which),
        Command::Eval { which } => evalcmd::run(which),
    };
    match result {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::exit(1);
        }
    }
}
