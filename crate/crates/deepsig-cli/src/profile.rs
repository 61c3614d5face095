//! Reusable run configuration: model paths and pipeline parameters in a
//! `key = value` text file, overridable per-invocation by flags. The
//! `DEEPSIG_PROFILE` environment variable supplies a default path.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

#[derive(Clone, Debug)]
pub struct Profile {
    pub content_model: Option<PathBuf>,
    pub watermark_model: Option<PathBuf>,
    pub alpha: f64,
    pub scale_q: usize,
    pub beta_g: f64,
    pub tau_ts: f64,
    pub border: usize,
    pub seed: u64,
}

impl Default for Profile {
    fn default() -> Self {
        Self {
            content_model: None,
            watermark_model: None,
            alpha: 1.0,
            scale_q: 13,
            beta_g: 3.0,
            tau_ts: 0.7,
            border: 3,
            seed: 0,
        }
    }
}

impl Profile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading profile {}", path.display()))?;
        let mut p = Self::default();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!("{}:{}: expected `key = value`", path.display(), ln + 1);
            };
            let (key, value) = (key.trim(), value.trim());
            let ctx = || format!("{}:{}: bad value for {key}", path.display(), ln + 1);
            match key {
                "content_model" => p.content_model = Some(PathBuf::from(value)),
                "watermark_model" => p.watermark_model = Some(PathBuf::from(value)),
                "alpha" => p.alpha = value.parse().with_context(ctx)?,
                "scale_q" => p.scale_q = value.parse().with_context(ctx)?,
                "beta_g" => p.beta_g = value.parse().with_context(ctx)?,
                "tau_ts" => p.tau_ts = value.parse().with_context(ctx)?,
                "border" => p.border = value.parse().with_context(ctx)?,
                "seed" => p.seed = value.parse().with_context(ctx)?,
                other => bail!("{}:{}: unknown profile key `{other}`", path.display(), ln + 1),
            }
        }
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        if let Some(m) = &self.content_model {
            writeln!(out, "content_model = {}", m.display())?;
        }
        if let Some(m) = &self.watermark_model {
            writeln!(out, "watermark_model = {}", m.display())?;
        }
        writeln!(out, "alpha = {}", self.alpha)?;
        writeln!(out, "scale_q = {}", self.scale_q)?;
        writeln!(out, "beta_g = {}", self.beta_g)?;
        writeln!(out, "tau_ts = {}", self.tau_ts)?;
        writeln!(out, "border = {}", self.border)?;
        writeln!(out, "seed = {}", self.seed)?;
        std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    /// Hard ranges mirror what the pipeline accepts; the embedding-strength
    /// comfort band gets a warning, not a rejection.
    pub fn validate(&self) -> Result<()> {
        if !(0.5..=2.0).contains(&self.alpha) {
            bail!("alpha {} outside the supported range [0.5, 2.0]", self.alpha);
        }
        if !(0.8..=1.5).contains(&self.alpha) {
            eprintln!(
                "warning: alpha {} is outside the recommended range [0.8, 1.5]",
                self.alpha
            );
        }
        if self.scale_q == 0 || self.scale_q > 16 {
            bail!("scale_q {} outside 1..=16", self.scale_q);
        }
        if self.beta_g <= 0.0 {
            bail!("beta_g must be positive");
        }
        if !(0.0 < self.tau_ts && self.tau_ts <= 1.0) {
            bail!("tau_ts {} outside (0, 1]", self.tau_ts);
        }
        if self.border == 0 || self.border > 8 {
            bail!("border {} outside 1..=8", self.border);
        }
        Ok(())
    }
}

/// Shared flags that override profile fields. Precedence: flag, then
/// profile file, then defaults.
#[derive(clap::Args, Clone, Debug, Default)]
pub struct ProfileArgs {
    /// Profile file; defaults to $DEEPSIG_PROFILE when set
    #[arg(long, global = true)]
    pub profile: Option<PathBuf>,
    /// Content model archive
    #[arg(long, global = true)]
    pub content_model: Option<PathBuf>,
    /// Watermark model archive
    #[arg(long, global = true)]
    pub watermark_model: Option<PathBuf>,
    /// Embedding strength
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    /// Content pre-scale numerator over 16
    #[arg(long = "scale", global = true)]
    pub scale_q: Option<usize>,
    /// Global tampering-score weight
    #[arg(long, global = true)]
    pub beta_g: Option<f64>,
    /// Tampering-score decision threshold
    #[arg(long = "tau", global = true)]
    pub tau_ts: Option<f64>,
    /// Payload border cells per side
    #[arg(long, global = true)]
    pub border: Option<usize>,
    /// Seed for all randomized choices
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

impl ProfileArgs {
    pub fn resolve(&self) -> Result<Profile> {
        let path = self
            .profile
            .clone()
            .or_else(|| std::env::var_os("DEEPSIG_PROFILE").map(PathBuf::from));
        let mut p = match path {
            Some(path) => Profile::load(&path)?,
            None => Profile::default(),
        };
        if let Some(v) = &self.content_model {
            p.content_model = Some(v.clone());
        }
        if let Some(v) = &self.watermark_model {
            p.watermark_model = Some(v.clone());
        }
        if let Some(v) = self.alpha {
            p.alpha = v;
        }
        if let Some(v) = self.scale_q {
            p.scale_q = v;
        }
        if let Some(v) = self.beta_g {
            p.beta_g = v;
        }
        if let Some(v) = self.tau_ts {
            p.tau_ts = v;
        }
        if let Some(v) = self.border {
            p.border = v;
        }
        if let Some(v) = self.seed {
            p.seed = v;
        }
        p.validate()?;
        Ok(p)
    }
}
