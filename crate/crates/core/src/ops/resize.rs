//! Bicubic resampling (`a = -0.5`), used for LR synthesis and as the
//! interpolation baseline.
//!
//! Sample positions use pixel-centre alignment, `u = (o + 0.5) / s - 0.5`.
//! When shrinking, the kernel is stretched by `1 / s` so every input pixel
//! under the footprint contributes (anti-aliasing). Out-of-range taps clamp
//! to the nearest edge pixel and weights are renormalized to sum to one.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const BICUBIC_A: f64 = -0.5;

/// The cubic convolution kernel.
pub fn cubic(x: f64) -> f64 {
    let a = BICUBIC_A;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Source indices and weights contributing to each output position.
pub(crate) fn axis_weights(in_len: usize, out_len: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = out_len as f64 / in_len as f64;
    let (stretch, support) = if scale < 1.0 {
        (scale, 2.0 / scale)
    } else {
        (1.0, 2.0)
    };
    (0..out_len)
        .map(|o| {
            let u = (o as f64 + 0.5) / scale - 0.5;
            let lo = (u - support).floor() as isize;
            let hi = (u + support).ceil() as isize;
            let mut taps: Vec<(usize, f64)> = Vec::new();
            for j in lo..=hi {
                let wgt = stretch * cubic(stretch * (u - j as f64));
                if wgt == 0.0 {
                    continue;
                }
                let idx = j.clamp(0, in_len as isize - 1) as usize;
                match taps.iter_mut().find(|(i, _)| *i == idx) {
                    Some(t) => t.1 += wgt,
                    None => taps.push((idx, wgt)),
                }
            }
            let total: f64 = taps.iter().map(|t| t.1).sum();
            taps.iter_mut().for_each(|t| t.1 /= total);
            taps
        })
        .collect()
}

pub fn bicubic_resize<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid(
            "bicubic_resize",
            format!("target size must be positive, got {out_h}x{out_w}"),
        ));
    }
    let wx = axis_weights(w, out_w);
    let wy = axis_weights(h, out_h);
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    let mut rows = vec![0.0f64; h * out_w];
    for plane in x.data().chunks(h * w) {
        for (r, src) in plane.chunks(w).enumerate() {
            for (o, taps) in wx.iter().enumerate() {
                rows[r * out_w + o] = taps.iter().map(|&(i, wt)| wt * src[i].as_f64()).sum();
            }
        }
        for taps in &wy {
            for col in 0..out_w {
                let v: f64 = taps.iter().map(|&(i, wt)| wt * rows[i * out_w + col]).sum();
                out.push(T::from_f64(v));
            }
        }
    }
    Tensor::new(&[n, c, out_h, out_w], out)
}
