//! Same-padded 2D convolutions: depthwise with dilation, and dense 3x3.
//!
//! Zero padding keeps the spatial extent. Accumulation is in `f64`, taps
//! are summed in row-major kernel order.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::linear::{from_f64, gemm, to_f64};
use crate::tensor::{Scalar, Tensor};

/// Range of output positions `o` in `0..len` with `o + offset` in `0..len`.
#[inline]
fn valid_range(len: usize, offset: isize) -> std::ops::Range<usize> {
    let lo = (-offset).max(0) as usize;
    let hi = (len as isize - offset).clamp(0, len as isize) as usize;
    lo.min(hi)..hi
}

fn depthwise_dims(x: &[usize], k: &[usize], dilation: usize) -> Result<(usize, usize)> {
    if dilation < 1 {
        return Err(Error::invalid("depthwise_conv2d", "dilation must be at least 1"));
    }
    let &[_, c, _, _] = x else {
        return Err(Error::invalid(
            "depthwise_conv2d",
            format!("expected NCHW input, got {x:?}"),
        ));
    };
    match *k {
        [kc, 1, kh, kw] if kc == c && kh == kw => {
            if kh % 2 == 0 {
                return Err(Error::invalid(
                    "depthwise_conv2d",
                    format!("kernel size must be odd, got {kh}"),
                ));
            }
            Ok((kh, dilation * (kh - 1) / 2))
        }
        _ => Err(Error::shape("depthwise_conv2d", x, k)),
    }
}

/// Iterates the taps of a `k x k` kernel with the given dilation as
/// `(tap index, row offset, column offset)`.
fn taps(k: usize, dilation: usize, pad: usize) -> impl Iterator<Item = (usize, isize, isize)> {
    (0..k * k).map(move |t| {
        let (a, b) = (t / k, t % k);
        (
            t,
            (dilation * a) as isize - pad as isize,
            (dilation * b) as isize - pad as isize,
        )
    })
}

/// Depthwise convolution: channel `c` of the output only sees channel `c`
/// of the input and kernel `c`.
pub fn depthwise_conv2d<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    dilation: usize,
) -> Result<Tensor<T>> {
    let (k, pad) = depthwise_dims(x.shape(), kernel.shape(), dilation)?;
    let [n, c, h, w] = x.dims4()?;
    let hw = h * w;
    let mut out = Vec::with_capacity(n * c * hw);
    let mut acc = vec![0.0f64; hw];
    for plane in 0..n * c {
        let ci = plane % c;
        let xs = to_f64(&x.data()[plane * hw..(plane + 1) * hw]);
        let ks = &kernel.data()[ci * k * k..(ci + 1) * k * k];
        acc.fill(0.0);
        for (t, dy, dx) in taps(k, dilation, pad) {
            let kv = ks[t].as_f64();
            let cols = valid_range(w, dx);
            if cols.is_empty() {
                continue;
            }
            for row in valid_range(h, dy) {
                let src = ((row as isize + dy) as usize) * w;
                let dst = row * w;
                let (a, s) = (
                    &mut acc[dst + cols.start..dst + cols.end],
                    &xs[(src as isize + cols.start as isize + dx) as usize..],
                );
                for (o, &v) in a.iter_mut().zip(s) {
                    *o += kv * v;
                }
            }
        }
        out.extend(acc.iter().map(|&v| T::from_f64(v)));
    }
    Tensor::new(&[n, c, h, w], out)
}

/// Dot product with independent partial sums so the loop vectorizes.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    acc.iter().sum::<f64>() + tail
}

fn depthwise_backward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    dilation: usize,
    g: &Tensor<T>,
    need_x: bool,
    need_k: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let (k, pad) = depthwise_dims(x.shape(), kernel.shape(), dilation)?;
    let [n, c, h, w] = x.dims4()?;
    let hw = h * w;
    let mut gx = need_x.then(|| Vec::with_capacity(n * c * hw));
    let mut gk = vec![0.0f64; c * k * k];
    let mut acc = vec![0.0f64; hw];
    for plane in 0..n * c {
        let ci = plane % c;
        let gs = to_f64(&g.data()[plane * hw..(plane + 1) * hw]);
        let xs = need_k.then(|| to_f64(&x.data()[plane * hw..(plane + 1) * hw]));
        let ks = &kernel.data()[ci * k * k..(ci + 1) * k * k];
        acc.fill(0.0);
        for (t, dy, dx) in taps(k, dilation, pad) {
            let kv = ks[t].as_f64();
            let cols = valid_range(w, dx);
            if cols.is_empty() {
                continue;
            }
            let mut kacc = 0.0f64;
            for row in valid_range(h, dy) {
                let src = ((row as isize + dy) as usize) * w;
                let lo = (src as isize + cols.start as isize + dx) as usize;
                let len = cols.len();
                let gr = &gs[row * w + cols.start..row * w + cols.end];
                if gx.is_some() {
                    for (o, &gv) in acc[lo..lo + len].iter_mut().zip(gr) {
                        *o += kv * gv;
                    }
                }
                if let Some(xs) = &xs {
                    kacc += dot(gr, &xs[lo..lo + len]);
                }
            }
            gk[ci * k * k + t] += kacc;
        }
        if let Some(gx) = gx.as_mut() {
            gx.extend(acc.iter().map(|&v| T::from_f64(v)));
        }
    }
    let gx = gx.map(|d| Tensor::new(x.shape(), d)).transpose()?;
    let gk = need_k
        .then(|| Tensor::new(kernel.shape(), from_f64(&gk)))
        .transpose()?;
    Ok((gx, gk))
}

fn conv_dims(x: &[usize], k: &[usize], b: &[usize]) -> Result<(usize, usize)> {
    match (x, k) {
        (&[_, ci, _, _], &[co, kci, 3, 3]) if kci == ci => {
            if b != [co] {
                return Err(Error::shape("conv2d_3x3", k, b));
            }
            Ok((ci, co))
        }
        _ => Err(Error::shape("conv2d_3x3", x, k)),
    }
}

/// Unfolds one image into a `(C*9) x (H*W)` patch matrix.
fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, col: &mut [f64]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for (t, dy, dx) in taps(3, 1, 1) {
            let dst = &mut col[(ci * 9 + t) * hw..(ci * 9 + t + 1) * hw];
            let cols = valid_range(w, dx);
            let rows = valid_range(h, dy);
            if cols.is_empty() || rows.is_empty() {
                dst.fill(0.0);
                continue;
            }
            dst[..rows.start * w].fill(0.0);
            dst[rows.end * w..].fill(0.0);
            for row in rows {
                let line = &mut dst[row * w..(row + 1) * w];
                line[..cols.start].fill(0.0);
                line[cols.end..].fill(0.0);
                let src = ((row as isize + dy) as usize) * w;
                let lo = (src as isize + cols.start as isize + dx) as usize;
                for (o, v) in line[cols.clone()].iter_mut().zip(&plane[lo..]) {
                    *o = v.as_f64();
                }
            }
        }
    }
}

/// Adjoint of [`im2col`], accumulated into `dx`.
fn col2im(col: &[f64], c: usize, h: usize, w: usize, dx: &mut [f64]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for (t, dy, ddx) in taps(3, 1, 1) {
            let src = &col[(ci * 9 + t) * hw..(ci * 9 + t + 1) * hw];
            let cols = valid_range(w, ddx);
            if cols.is_empty() {
                continue;
            }
            for row in valid_range(h, dy) {
                let base = ((row as isize + dy) as usize) * w;
                let lo = (base as isize + cols.start as isize + ddx) as usize;
                for (o, &v) in plane[lo..lo + cols.len()]
                    .iter_mut()
                    .zip(&src[row * w + cols.start..row * w + cols.end])
                {
                    *o += v;
                }
            }
        }
    }
}

/// Dense 3x3 convolution with bias, padding 1.
pub fn conv2d_3x3<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (ci, co) = conv_dims(x.shape(), kernel.shape(), bias.shape())?;
    let [n, _, h, w] = x.dims4()?;
    let hw = h * w;
    let kf = to_f64(kernel.data());
    let mut col = vec![0.0f64; ci * 9 * hw];
    let mut acc = vec![0.0f64; co * hw];
    let mut out = Vec::with_capacity(n * co * hw);
    for ni in 0..n {
        im2col(&x.data()[ni * ci * hw..(ni + 1) * ci * hw], ci, h, w, &mut col);
        gemm(co, ci * 9, hw, &kf, (ci * 9, 1), &col, (hw, 1), 0.0, &mut acc, (hw, 1));
        for (o, chunk) in acc.chunks(hw).enumerate() {
            let b = bias.data()[o].as_f64();
            out.extend(chunk.iter().map(|&v| T::from_f64(v + b)));
        }
    }
    Tensor::new(&[n, co, h, w], out)
}

impl<T: Scalar> Tape<T> {
    pub fn depthwise_conv2d(&self, x: &Var<T>, kernel: &Var<T>, dilation: usize) -> Result<Var<T>> {
        let out = depthwise_conv2d(x.value(), kernel.value(), dilation)?;
        let (xv, kv) = (x.rc(), kernel.rc());
        Ok(self.record(out, &[x, kernel], move |g, needs| {
            let (gx, gk) = depthwise_backward(&xv, &kv, dilation, g, needs[0], needs[1])?;
            Ok(vec![gx, gk])
        }))
    }

    pub fn conv2d_3x3(&self, x: &Var<T>, kernel: &Var<T>, bias: &Var<T>) -> Result<Var<T>> {
        let out = conv2d_3x3(x.value(), kernel.value(), bias.value())?;
        let (xv, kv) = (x.rc(), kernel.rc());
        Ok(self.record(out, &[x, kernel, bias], move |g, needs| {
            let [n, ci, h, w] = xv.dims4()?;
            let co = kv.shape()[0];
            let hw = h * w;
            let kf = to_f64(kv.data());
            let mut col = vec![0.0f64; ci * 9 * hw];
            let mut dcol = vec![0.0f64; ci * 9 * hw];
            let mut gk = vec![0.0f64; co * ci * 9];
            let mut gb = vec![0.0f64; co];
            let mut gx = needs[0].then(|| Vec::with_capacity(n * ci * hw));
            let mut dx = vec![0.0f64; ci * hw];
            for ni in 0..n {
                let gs = to_f64(&g.data()[ni * co * hw..(ni + 1) * co * hw]);
                for (o, chunk) in gs.chunks(hw).enumerate() {
                    gb[o] += chunk.iter().sum::<f64>();
                }
                if needs[1] {
                    im2col(&xv.data()[ni * ci * hw..(ni + 1) * ci * hw], ci, h, w, &mut col);
                    gemm(co, hw, ci * 9, &gs, (hw, 1), &col, (1, hw), 1.0, &mut gk, (ci * 9, 1));
                }
                if let Some(gx) = gx.as_mut() {
                    gemm(ci * 9, co, hw, &kf, (1, ci * 9), &gs, (hw, 1), 0.0, &mut dcol, (hw, 1));
                    dx.fill(0.0);
                    col2im(&dcol, ci, h, w, &mut dx);
                    gx.extend(dx.iter().map(|&v| T::from_f64(v)));
                }
            }
            let gx = gx.map(|d| Tensor::new(xv.shape(), d)).transpose()?;
            let gk = needs[1]
                .then(|| Tensor::new(kv.shape(), from_f64(&gk)))
                .transpose()?;
            let gb = needs[2].then(|| Tensor::new(&[co], from_f64(&gb))).transpose()?;
            Ok(vec![gx, gk, gb])
        }))
    }
}
