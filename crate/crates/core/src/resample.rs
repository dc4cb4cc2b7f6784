//! Adaptive average pooling and half-pixel bilinear resampling on
//! position-major fields (`data[(h * width + w) * channels + c]`).

use crate::error::{PearlError, Result};
use crate::interchange::{GrayImage, LogitGrid};

/// Bin `[floor(i*n/m), floor((i+1)*n/m))` of `n` inputs split into `m` bins.
fn bin(i: usize, n: usize, m: usize) -> (usize, usize) {
    (i * n / m, (i + 1) * n / m)
}

/// Averages `src` (`h x w x ch`) down to `gh x gw`. Requires `gh <= h`, `gw <= w`.
pub fn adaptive_avg_pool(
    src: &[f64],
    h: usize,
    w: usize,
    ch: usize,
    gh: usize,
    gw: usize,
) -> Result<Vec<f64>> {
    if gh == 0 || gw == 0 {
        return Err(PearlError::Dimension("zero-sized pooling grid".into()));
    }
    if gh > h || gw > w {
        return Err(PearlError::Dimension(format!(
            "pooling grid {gh}x{gw} exceeds input {h}x{w}"
        )));
    }
    debug_assert_eq!(src.len(), h * w * ch);
    let mut out = vec![0.0; gh * gw * ch];
    for r in 0..gh {
        let (r0, r1) = bin(r, h, gh);
        for s in 0..gw {
            let (s0, s1) = bin(s, w, gw);
            let cell = &mut out[(r * gw + s) * ch..(r * gw + s + 1) * ch];
            for y in r0..r1 {
                for x in s0..s1 {
                    let px = &src[(y * w + x) * ch..(y * w + x + 1) * ch];
                    for (acc, v) in cell.iter_mut().zip(px) {
                        *acc += v;
                    }
                }
            }
            let area = ((r1 - r0) * (s1 - s0)) as f64;
            cell.iter_mut().for_each(|v| *v /= area);
        }
    }
    Ok(out)
}

/// Source taps for output index `o` when resizing `n_in -> n_out` with
/// half-pixel centers: `(i0, i1, frac)`.
fn taps(o: usize, n_in: usize, n_out: usize) -> (usize, usize, f64) {
    let scale = n_in as f64 / n_out as f64;
    let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(n_in - 1);
    let i1 = (i0 + 1).min(n_in - 1);
    (i0, i1, src - i0 as f64)
}

/// Bilinear resize with half-pixel centers (the `align_corners = false`
/// convention); coordinates are clamped at the border.
pub fn bilinear_resize(
    src: &[f64],
    h: usize,
    w: usize,
    ch: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    debug_assert_eq!(src.len(), h * w * ch);
    let mut out = vec![0.0; out_h * out_w * ch];
    if h == out_h && w == out_w {
        out.copy_from_slice(src);
        return out;
    }
    let cols: Vec<_> = (0..out_w).map(|x| taps(x, w, out_w)).collect();
    for y in 0..out_h {
        let (y0, y1, fy) = taps(y, h, out_h);
        for (x, &(x0, x1, fx)) in cols.iter().enumerate() {
            let o = &mut out[(y * out_w + x) * ch..(y * out_w + x + 1) * ch];
            for (c, v) in o.iter_mut().enumerate() {
                let p00 = src[(y0 * w + x0) * ch + c];
                let p01 = src[(y0 * w + x1) * ch + c];
                let p10 = src[(y1 * w + x0) * ch + c];
                let p11 = src[(y1 * w + x1) * ch + c];
                let top = p00 + (p01 - p00) * fx;
                let bottom = p10 + (p11 - p10) * fx;
                *v = top + (bottom - top) * fy;
            }
        }
    }
    out
}

pub fn upsample_logits(z: &LogitGrid, out_h: usize, out_w: usize) -> LogitGrid {
    let data = bilinear_resize(z.scores(), z.height(), z.width(), z.classes(), out_h, out_w);
    LogitGrid::new(out_h, out_w, z.classes(), data).expect("interpolation keeps finiteness")
}

pub fn resize_gray(img: &GrayImage, out_h: usize, out_w: usize) -> GrayImage {
    let data = bilinear_resize(&img.data, img.height, img.width, 1, out_h, out_w)
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect();
    GrayImage {
        height: out_h,
        width: out_w,
        data,
    }
}

/// Size after scaling the shorter side to `short_side`, rounding half up.
pub fn short_side_size(h: usize, w: usize, short_side: usize) -> (usize, usize) {
    let short = h.min(w);
    if short == short_side {
        return (h, w);
    }
    let scale = short_side as f64 / short as f64;
    let round = |v: usize| ((v as f64 * scale + 0.5).floor() as usize).max(1);
    (round(h), round(w))
}
