//! Raw tensor kernels behind the tape ops. Hot loops run over flat slices
//! with the innermost index contiguous so they vectorize.

use ndarray::Array4;

use crate::num::Scalar;

pub fn has_non_finite<F: Scalar>(a: &Array4<F>) -> bool {
    a.iter().any(|v| !v.is_finite())
}

pub fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn out_len(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Output-x range with in-bounds reads: 0 <= ox*stride + kx - pad < w.
fn ox_bounds(w: usize, ow: usize, kx: usize, stride: usize, pad: usize) -> Option<(usize, usize)> {
    let num = w as isize - 1 + pad as isize - kx as isize;
    if num < 0 {
        return None;
    }
    let hi = (num as usize / stride).min(ow - 1);
    let lo = if kx >= pad { 0 } else { (pad - kx).div_ceil(stride) };
    if lo > hi {
        return None;
    }
    Some((lo, hi))
}

pub fn conv2d_forward<F: Scalar>(
    x: &Array4<F>,
    w: &Array4<F>,
    b: &Array4<F>,
    stride: usize,
    pad: usize,
) -> Array4<F> {
    let (n, ci, h, iw) = x.dim();
    let (co, wci, kh, kw) = w.dim();
    assert_eq!(ci, wci, "conv2d: channel mismatch");
    assert_eq!(b.dim(), (1, co, 1, 1), "conv2d: bias shape");
    let (oh, ow) = (out_len(h, kh, stride, pad), out_len(iw, kw, stride, pad));

    let xs = x.as_slice().expect("standard layout");
    let ws = w.as_slice().expect("standard layout");
    let bs = b.as_slice().expect("standard layout");
    let mut out = Array4::<F>::zeros((n, co, oh, ow));
    {
        let os = out.as_slice_mut().expect("standard layout");
        for in_ in 0..n {
            for ico in 0..co {
                let out_base = (in_ * co + ico) * oh * ow;
                os[out_base..out_base + oh * ow].fill(bs[ico]);
                for ici in 0..ci {
                    let x_base = (in_ * ci + ici) * h * iw;
                    let w_base = (ico * ci + ici) * kh * kw;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wv = ws[w_base + ky * kw + kx];
                            let Some((lo, hi)) = ox_bounds(iw, ow, kx, stride, pad) else {
                                continue;
                            };
                            for oy in 0..oh {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let xrow = x_base + iy as usize * iw;
                                let orow = out_base + oy * ow;
                                let off = kx as isize - pad as isize;
                                for ox in lo..=hi {
                                    let ix = (ox * stride) as isize + off;
                                    os[orow + ox] =
                                        os[orow + ox] + wv * xs[xrow + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn conv2d_backward<F: Scalar>(
    x: &Array4<F>,
    w: &Array4<F>,
    g: &Array4<F>,
    stride: usize,
    pad: usize,
) -> (Array4<F>, Array4<F>, Array4<F>) {
    let (n, ci, h, iw) = x.dim();
    let (co, _, kh, kw) = w.dim();
    let (_, _, oh, ow) = g.dim();

    let xs = x.as_slice().expect("standard layout");
    let ws = w.as_slice().expect("standard layout");
    let gs = g.as_slice().expect("standard layout");

    let mut dx = Array4::<F>::zeros((n, ci, h, iw));
    let mut dw = Array4::<F>::zeros(w.dim());
    let mut db = Array4::<F>::zeros((1, co, 1, 1));
    {
        let dxs = dx.as_slice_mut().expect("standard layout");
        let dws = dw.as_slice_mut().expect("standard layout");
        let dbs = db.as_slice_mut().expect("standard layout");
        for in_ in 0..n {
            for ico in 0..co {
                let g_base = (in_ * co + ico) * oh * ow;
                let mut bsum = F::zero();
                for v in &gs[g_base..g_base + oh * ow] {
                    bsum = bsum + *v;
                }
                dbs[ico] = dbs[ico] + bsum;
                for ici in 0..ci {
                    let x_base = (in_ * ci + ici) * h * iw;
                    let w_base = (ico * ci + ici) * kh * kw;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wv = ws[w_base + ky * kw + kx];
                            let mut wsum = F::zero();
                            let Some((lo, hi)) = ox_bounds(iw, ow, kx, stride, pad) else {
                                continue;
                            };
                            let off = kx as isize - pad as isize;
                            for oy in 0..oh {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let xrow = x_base + iy as usize * iw;
                                let grow = g_base + oy * ow;
                                for ox in lo..=hi {
                                    let ix = ((ox * stride) as isize + off) as usize;
                                    let gv = gs[grow + ox];
                                    wsum = wsum + gv * xs[xrow + ix];
                                    dxs[xrow + ix] = dxs[xrow + ix] + gv * wv;
                                }
                            }
                            dws[w_base + ky * kw + kx] = dws[w_base + ky * kw + kx] + wsum;
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

pub fn depthwise_valid_forward<F: Scalar>(x: &Array4<F>, w: &Array4<F>) -> Array4<F> {
    let (n, c, h, iw) = x.dim();
    let (wc, one, kh, kw) = w.dim();
    assert_eq!((wc, one), (c, 1), "depthwise: kernel shape");
    let (oh, ow) = (h - kh + 1, iw - kw + 1);
    let mut out = Array4::<F>::zeros((n, c, oh, ow));
    for in_ in 0..n {
        for ic in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = F::zero();
                    for ky in 0..kh {
                        for kx in 0..kw {
                            acc = acc
                                + w[[ic, 0, ky, kx]] * x[[in_, ic, oy + ky, ox + kx]];
                        }
                    }
                    out[[in_, ic, oy, ox]] = acc;
                }
            }
        }
    }
    out
}

pub fn depthwise_valid_backward<F: Scalar>(
    x: &Array4<F>,
    w: &Array4<F>,
    g: &Array4<F>,
) -> (Array4<F>, Array4<F>) {
    let (n, c, _, _) = x.dim();
    let (_, _, kh, kw) = w.dim();
    let (_, _, oh, ow) = g.dim();
    let mut dx = Array4::<F>::zeros(x.dim());
    let mut dw = Array4::<F>::zeros(w.dim());
    for in_ in 0..n {
        for ic in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let gv = g[[in_, ic, oy, ox]];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            dx[[in_, ic, oy + ky, ox + kx]] =
                                dx[[in_, ic, oy + ky, ox + kx]] + gv * w[[ic, 0, ky, kx]];
                            dw[[ic, 0, ky, kx]] =
                                dw[[ic, 0, ky, kx]] + gv * x[[in_, ic, oy + ky, ox + kx]];
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}

pub fn upsample_nearest<F: Scalar>(x: &Array4<F>, factor: usize) -> Array4<F> {
    let (n, c, h, w) = x.dim();
    Array4::from_shape_fn((n, c, h * factor, w * factor), |(in_, ic, y, xx)| {
        x[[in_, ic, y / factor, xx / factor]]
    })
}

pub fn upsample_nearest_backward<F: Scalar>(g: &Array4<F>, factor: usize) -> Array4<F> {
    let (n, c, gh, gw) = g.dim();
    let (h, w) = (gh / factor, gw / factor);
    let mut out = Array4::<F>::zeros((n, c, h, w));
    for in_ in 0..n {
        for ic in 0..c {
            for y in 0..gh {
                for xx in 0..gw {
                    out[[in_, ic, y / factor, xx / factor]] =
                        out[[in_, ic, y / factor, xx / factor]] + g[[in_, ic, y, xx]];
                }
            }
        }
    }
    out
}

/// Orthonormal DCT-II basis: row k, column n.
fn dct_basis<F: Scalar>() -> [[F; 8]; 8] {
    let mut d = [[F::zero(); 8]; 8];
    for (k, row) in d.iter_mut().enumerate() {
        let ck = if k == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (n, v) in row.iter_mut().enumerate() {
            let angle = std::f64::consts::PI * (2.0 * n as f64 + 1.0) * k as f64 / 16.0;
            *v = F::from_f64_c(ck * angle.cos());
        }
    }
    d
}

/// Blockwise 8x8 DCT (or its inverse) over the spatial dims.
pub fn dct8_apply<F: Scalar>(x: &Array4<F>, inverse: bool) -> Array4<F> {
    let (n, c, h, w) = x.dim();
    assert!(h % 8 == 0 && w % 8 == 0, "dct8: dims must be multiples of 8");
    let d = dct_basis::<F>();
    let mut out = Array4::<F>::zeros(x.dim());
    let mut block = [[F::zero(); 8]; 8];
    let mut tmp = [[F::zero(); 8]; 8];
    for in_ in 0..n {
        for ic in 0..c {
            for by in (0..h).step_by(8) {
                for bx in (0..w).step_by(8) {
                    for (y, row) in block.iter_mut().enumerate() {
                        for (xx, v) in row.iter_mut().enumerate() {
                            *v = x[[in_, ic, by + y, bx + xx]];
                        }
                    }
                    // forward: D B D^T; inverse: D^T B D
                    for (i, trow) in tmp.iter_mut().enumerate() {
                        for (j, tv) in trow.iter_mut().enumerate() {
                            let mut acc = F::zero();
                            for k in 0..8 {
                                let dv = if inverse { d[k][i] } else { d[i][k] };
                                acc = acc + dv * block[k][j];
                            }
                            *tv = acc;
                        }
                    }
                    for i in 0..8 {
                        for j in 0..8 {
                            let mut acc = F::zero();
                            for k in 0..8 {
                                let dv = if inverse { d[k][j] } else { d[j][k] };
                                acc = acc + tmp[i][k] * dv;
                            }
                            out[[in_, ic, by + i, bx + j]] = acc;
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn pixel_linear_forward<F: Scalar>(
    x: &Array4<F>,
    mat: &[[F; 3]; 3],
    bias: &[F; 3],
) -> Array4<F> {
    let (n, c, h, w) = x.dim();
    assert_eq!(c, 3, "pixel_linear expects 3 channels");
    let mut out = Array4::<F>::zeros(x.dim());
    for in_ in 0..n {
        for y in 0..h {
            for xx in 0..w {
                for o in 0..3 {
                    let mut acc = bias[o];
                    for i in 0..3 {
                        acc = acc + mat[o][i] * x[[in_, i, y, xx]];
                    }
                    out[[in_, o, y, xx]] = acc;
                }
            }
        }
    }
    out
}

pub fn pixel_linear_backward<F: Scalar>(g: &Array4<F>, mat: &[[F; 3]; 3]) -> Array4<F> {
    let (n, _, h, w) = g.dim();
    let mut out = Array4::<F>::zeros(g.dim());
    for in_ in 0..n {
        for y in 0..h {
            for xx in 0..w {
                for i in 0..3 {
                    let mut acc = F::zero();
                    for o in 0..3 {
                        acc = acc + mat[o][i] * g[[in_, o, y, xx]];
                    }
                    out[[in_, i, y, xx]] = acc;
                }
            }
        }
    }
    out
}
