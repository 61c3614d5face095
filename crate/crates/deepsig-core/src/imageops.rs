//! Pixel-level plumbing: bicubic rescale, replicate padding, color
//! transforms, and PNG/JPEG round-trips. Images are [3, H, W] in [0,1].

use std::io::Cursor;
use std::path::Path;

use image::codecs::jpeg::JpegEncoder;
use image::codecs::png::PngEncoder;
use image::{ColorType, ImageEncoder, ImageReader, RgbImage};
use ndarray::{Array3, Array4, ArrayView3, Axis};
use thiserror::Error;

use crate::num::Scalar;

#[derive(Debug, Error)]
pub enum ImageIoError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("codec: {0}")]
    Codec(#[from] image::ImageError),
}

/// Cubic convolution kernel with a = -0.5 (Catmull-Rom).
fn cubic(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (A + 2.0) * t * t * t - (A + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        A * (t * t * t - 5.0 * t * t + 8.0 * t - 4.0)
    } else {
        0.0
    }
}

/// Per-row resample to `out_len` with half-pixel-centered sampling and
/// clamp-to-edge taps. The four cubic taps sum to 1 for every phase.
fn resample_axis<F: Scalar>(src: &[F], out: &mut [F], in_len: usize) {
    let out_len = out.len();
    if out_len == in_len {
        out.copy_from_slice(src);
        return;
    }
    let ratio = in_len as f64 / out_len as f64;
    for (o, slot) in out.iter_mut().enumerate() {
        let center = (o as f64 + 0.5) * ratio - 0.5;
        let base = center.floor() as isize;
        let frac = center - base as f64;
        let mut acc = 0.0;
        for k in -1..=2isize {
            let w = cubic(k as f64 - frac);
            let idx = (base + k).clamp(0, in_len as isize - 1) as usize;
            acc += w * src[idx].as_f64();
        }
        *slot = F::from_f64_c(acc);
    }
}

/// Separable bicubic resize to exactly (out_h, out_w).
pub fn resize_bicubic<F: Scalar>(img: ArrayView3<F>, out_h: usize, out_w: usize) -> Array3<F> {
    let (c, h, w) = img.dim();
    assert!(out_h > 0 && out_w > 0);
    // Rows first (width direction), then columns.
    let mut horiz = Array3::<F>::zeros((c, h, out_w));
    let mut row_buf = vec![F::zero(); w];
    for ch in 0..c {
        for y in 0..h {
            for (i, v) in img.index_axis(Axis(0), ch).index_axis(Axis(0), y).iter().enumerate() {
                row_buf[i] = *v;
            }
            let mut out_row = vec![F::zero(); out_w];
            resample_axis(&row_buf, &mut out_row, w);
            for (x, v) in out_row.into_iter().enumerate() {
                horiz[(ch, y, x)] = v;
            }
        }
    }
    let mut out = Array3::<F>::zeros((c, out_h, out_w));
    let mut col_buf = vec![F::zero(); h];
    let mut out_col = vec![F::zero(); out_h];
    for ch in 0..c {
        for x in 0..out_w {
            for y in 0..h {
                col_buf[y] = horiz[(ch, y, x)];
            }
            resample_axis(&col_buf, &mut out_col, h);
            for (y, v) in out_col.iter().enumerate() {
                out[(ch, y, x)] = *v;
            }
        }
    }
    out
}

/// Extends bottom/right by repeating the last row/column.
pub fn replicate_pad<F: Scalar>(img: ArrayView3<F>, pad_b: usize, pad_r: usize) -> Array3<F> {
    let (c, h, w) = img.dim();
    Array3::from_shape_fn((c, h + pad_b, w + pad_r), |(ch, y, x)| {
        img[(ch, y.min(h - 1), x.min(w - 1))]
    })
}

pub fn crop<F: Scalar>(img: ArrayView3<F>, h: usize, w: usize) -> Array3<F> {
    let (c, ih, iw) = img.dim();
    assert!(h <= ih && w <= iw, "crop larger than image");
    Array3::from_shape_fn((c, h, w), |(ch, y, x)| img[(ch, y, x)])
}

pub fn clamp01<F: Scalar>(img: &mut Array3<F>) {
    img.mapv_inplace(|v| v.max(F::zero()).min(F::one()));
}

/// Rec. 601 luma of an RGB image in [0,1].
pub fn luma<F: Scalar>(img: ArrayView3<F>) -> ndarray::Array2<F> {
    let (_, h, w) = img.dim();
    ndarray::Array2::from_shape_fn((h, w), |(y, x)| {
        F::from_f64_c(
            0.299 * img[(0, y, x)].as_f64()
                + 0.587 * img[(1, y, x)].as_f64()
                + 0.114 * img[(2, y, x)].as_f64(),
        )
    })
}

/// JFIF full-range color matrices, for pixels scaled to [0,255].
pub const RGB_TO_YCBCR: [[f64; 3]; 3] = [
    [0.299, 0.587, 0.114],
    [-0.168_735_89, -0.331_264_11, 0.5],
    [0.5, -0.418_687_59, -0.081_312_41],
];
pub const YCBCR_TO_RGB: [[f64; 3]; 3] = [
    [1.0, 0.0, 1.402],
    [1.0, -0.344_136_29, -0.714_136_29],
    [1.0, 1.772, 0.0],
];

pub fn to_batch<F: Scalar>(img: ArrayView3<F>) -> Array4<F> {
    img.to_owned().insert_axis(Axis(0))
}

pub fn from_batch<F: Scalar>(batch: Array4<F>) -> Array3<F> {
    assert_eq!(batch.dim().0, 1);
    batch.remove_axis(Axis(0))
}

fn to_u8(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

pub fn to_rgb8<F: Scalar>(img: ArrayView3<F>) -> RgbImage {
    let (_, h, w) = img.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        image::Rgb([
            to_u8(img[(0, y, x)].as_f64()),
            to_u8(img[(1, y, x)].as_f64()),
            to_u8(img[(2, y, x)].as_f64()),
        ])
    })
}

pub fn from_rgb8<F: Scalar>(img: &RgbImage) -> Array3<F> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        F::from_f64_c(f64::from(img.get_pixel(x as u32, y as u32)[c]) / 255.0)
    })
}

pub fn load_image<F: Scalar>(path: &Path) -> Result<Array3<F>, ImageIoError> {
    let img = ImageReader::open(path)?.decode()?.to_rgb8();
    Ok(from_rgb8(&img))
}

pub fn save_png<F: Scalar>(path: &Path, img: ArrayView3<F>) -> Result<(), ImageIoError> {
    let rgb = to_rgb8(img);
    let file = std::fs::File::create(path)?;
    let enc = PngEncoder::new(std::io::BufWriter::new(file));
    enc.write_image(rgb.as_raw(), rgb.width(), rgb.height(), ColorType::Rgb8.into())?;
    Ok(())
}

pub fn encode_png_bytes<F: Scalar>(img: ArrayView3<F>) -> Vec<u8> {
    let rgb = to_rgb8(img);
    let mut out = Vec::new();
    let enc = PngEncoder::new(std::io::Cursor::new(&mut out));
    enc.write_image(rgb.as_raw(), rgb.width(), rgb.height(), ColorType::Rgb8.into())
        .expect("in-memory png encode");
    out
}

pub fn save_jpeg<F: Scalar>(path: &Path, img: ArrayView3<F>, quality: u8) -> Result<(), ImageIoError> {
    std::fs::write(path, encode_jpeg(img, quality))?;
    Ok(())
}

/// In-memory JPEG round-trip at the given quality, the "real codec" arm of
/// the training noise layer.
pub fn jpeg_roundtrip<F: Scalar>(img: ArrayView3<F>, quality: u8) -> Array3<F> {
    let bytes = encode_jpeg(img, quality);
    let decoded = image::load_from_memory(&bytes).expect("own jpeg decodes").to_rgb8();
    from_rgb8(&decoded)
}

pub fn encode_jpeg<F: Scalar>(img: ArrayView3<F>, quality: u8) -> Vec<u8> {
    let rgb = to_rgb8(img);
    let mut out = Vec::new();
    let enc = JpegEncoder::new_with_quality(Cursor::new(&mut out), quality);
    enc.write_image(rgb.as_raw(), rgb.width(), rgb.height(), ColorType::Rgb8.into())
        .expect("in-memory jpeg encode");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise_image(seed: u64, h: usize, w: usize) -> Array3<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((3, h, w), |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn resize_same_size_is_identity() {
        let img = noise_image(0, 17, 23);
        let out = resize_bicubic(img.view(), 17, 23);
        assert_eq!(img, out);
    }

    #[test]
    fn resize_constant_stays_constant() {
        let img = Array3::<f64>::from_elem((3, 20, 20), 0.37);
        let up = resize_bicubic(img.view(), 55, 41);
        for v in up.iter() {
            assert!((v - 0.37).abs() < 1e-12);
        }
    }

    #[test]
    fn resize_preserves_linear_ramps() {
        // Cubic convolution reproduces degree-1 polynomials exactly away
        // from clamped edges.
        let img = Array3::<f64>::from_shape_fn((1, 8, 64), |(_, _, x)| x as f64);
        let up = resize_bicubic(img.view(), 8, 128);
        for x in 4..124 {
            let expect = (x as f64 + 0.5) * 0.5 - 0.5;
            assert!((up[(0, 4, x)] - expect).abs() < 1e-9, "x={x}");
        }
    }

    #[test]
    fn downscale_then_upscale_roughly_recovers_smooth_content() {
        let img = Array3::<f32>::from_shape_fn((3, 64, 64), |(c, y, x)| {
            0.5 + 0.3 * ((x as f32 / 19.0).sin() * (y as f32 / 23.0).cos()) + c as f32 * 0.01
        });
        let down = resize_bicubic(img.view(), 32, 32);
        let up = resize_bicubic(down.view(), 64, 64);
        let mse = (&img - &up).mapv(|v| v * v).sum() / img.len() as f32;
        assert!(mse < 1e-4, "mse {mse}");
    }

    #[test]
    fn replicate_pad_repeats_edges() {
        let img = Array3::from_shape_fn((1, 2, 2), |(_, y, x)| (y * 2 + x) as f64);
        let padded = replicate_pad(img.view(), 1, 2);
        assert_eq!(padded.dim(), (1, 3, 4));
        assert_eq!(padded[(0, 2, 0)], 2.0);
        assert_eq!(padded[(0, 2, 3)], 3.0);
        assert_eq!(padded[(0, 0, 3)], 1.0);
    }

    #[test]
    fn color_matrices_invert() {
        for rgb in [[0.2, 0.7, 0.1], [1.0, 0.0, 0.5], [0.33, 0.33, 0.33]] {
            let mut ycc = [0.0; 3];
            for i in 0..3 {
                for j in 0..3 {
                    ycc[i] += RGB_TO_YCBCR[i][j] * rgb[j] * 255.0;
                }
            }
            let mut back = [0.0; 3];
            for i in 0..3 {
                for j in 0..3 {
                    back[i] += YCBCR_TO_RGB[i][j] * ycc[j];
                }
            }
            for i in 0..3 {
                assert!((back[i] / 255.0 - rgb[i]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn png_round_trip_is_exact_in_u8() {
        let img = noise_image(5, 31, 29);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        save_png(&path, img.view()).unwrap();
        let loaded: Array3<f32> = load_image(&path).unwrap();
        // Quantization to u8 and back is the only loss.
        for (a, b) in img.iter().zip(loaded.iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
        // And a second save of the loaded image is byte-identical.
        let path2 = dir.path().join("t2.png");
        save_png(&path2, loaded.view()).unwrap();
        let (b1, b2) = (std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
        assert_eq!(b1, b2);
    }

    #[test]
    fn jpeg_quality_orders_error() {
        let img = noise_image(7, 64, 64);
        let smooth = resize_bicubic(resize_bicubic(img.view(), 16, 16).view(), 64, 64);
        let err = |q: u8| -> f32 {
            let rt = jpeg_roundtrip(smooth.view(), q);
            (&smooth - &rt).mapv(|v| v.abs()).sum() / smooth.len() as f32
        };
        let (e95, e40) = (err(95), err(40));
        assert!(e95 < e40, "q95 {e95} vs q40 {e40}");
        assert!(e95 < 2.0 / 255.0);
    }
}
