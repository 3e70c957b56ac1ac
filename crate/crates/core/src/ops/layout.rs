//! Pure index permutations: spatial transpose and sub-pixel shuffle.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Swaps the two spatial axes: `out[n, c, j, i] = in[n, c, i, j]`.
pub fn transpose_hw<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4()?;
    let mut out = vec![T::zero(); x.numel()];
    let plane = h * w;
    for (src, dst) in x.data().chunks(plane).zip(out.chunks_mut(plane)) {
        for i in 0..h {
            for j in 0..w {
                dst[j * h + i] = src[i * w + j];
            }
        }
    }
    Tensor::new(&[n, c, w, h], out)
}

/// Rearranges `r*r` channel groups into an `r`-times larger grid:
/// `out[n, c, r*h + a, r*w + b] = in[n, c*r*r + a*r + b, h, w]`.
pub fn pixel_shuffle<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4()?;
    if r == 0 || c % (r * r) != 0 {
        return Err(Error::invalid(
            "pixel_shuffle",
            format!("channel count {c} is not divisible by r^2 = {}", r * r),
        ));
    }
    let co = c / (r * r);
    let (ho, wo) = (h * r, w * r);
    let mut out = vec![T::zero(); x.numel()];
    for ni in 0..n {
        for ci in 0..c {
            let (oc, a, b) = (ci / (r * r), ci % (r * r) / r, ci % r);
            let src = &x.data()[(ni * c + ci) * h * w..];
            let dst_base = (ni * co + oc) * ho * wo;
            for hi in 0..h {
                for wi in 0..w {
                    out[dst_base + (r * hi + a) * wo + r * wi + b] = src[hi * w + wi];
                }
            }
        }
    }
    Tensor::new(&[n, co, ho, wo], out)
}

/// Inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let [n, co, ho, wo] = x.dims4()?;
    if r == 0 || ho % r != 0 || wo % r != 0 {
        return Err(Error::invalid(
            "pixel_unshuffle",
            format!("spatial size {ho}x{wo} is not divisible by {r}"),
        ));
    }
    let (h, w, c) = (ho / r, wo / r, co * r * r);
    let mut out = vec![T::zero(); x.numel()];
    for ni in 0..n {
        for ci in 0..c {
            let (oc, a, b) = (ci / (r * r), ci % (r * r) / r, ci % r);
            let src_base = (ni * co + oc) * ho * wo;
            let dst = (ni * c + ci) * h * w;
            for hi in 0..h {
                for wi in 0..w {
                    out[dst + hi * w + wi] = x.data()[src_base + (r * hi + a) * wo + r * wi + b];
                }
            }
        }
    }
    Tensor::new(&[n, c, h, w], out)
}

impl<T: Scalar> Tape<T> {
    pub fn transpose_hw(&self, x: &Var<T>) -> Result<Var<T>> {
        let out = transpose_hw(x.value())?;
        Ok(self.record(out, &[x], |g, _| Ok(vec![Some(transpose_hw(g)?)])))
    }

    pub fn pixel_shuffle(&self, x: &Var<T>, r: usize) -> Result<Var<T>> {
        let out = pixel_shuffle(x.value(), r)?;
        Ok(self.record(out, &[x], move |g, _| Ok(vec![Some(pixel_unshuffle(g, r)?)])))
    }
}
