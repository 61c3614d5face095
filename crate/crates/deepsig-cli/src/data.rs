//! Image-directory loading shared by train and eval commands.

use std::path::Path;

use anyhow::{bail, Context, Result};
use deepsig_core::imageops;
use deepsig_core::Real;
use ndarray::Array3;

/// Loads every PNG/JPEG in `dir`, sorted by file name so runs are
/// reproducible regardless of directory enumeration order.
pub fn load_image_dir(dir: &Path) -> Result<Vec<(String, Array3<Real>)>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                Some("png") | Some("jpg") | Some("jpeg")
            )
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no .png/.jpg images in {}", dir.display());
    }
    paths
        .into_iter()
        .map(|p| {
            let stem = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| p.display().to_string());
            let img = imageops::load_image::<Real>(&p)
                .with_context(|| format!("loading {}", p.display()))?;
            Ok((stem, img))
        })
        .collect()
}
