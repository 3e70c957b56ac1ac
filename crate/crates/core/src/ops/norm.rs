use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

fn check(x: &[usize], gamma: &[usize], beta: &[usize]) -> Result<[usize; 3]> {
    match *x {
        [n, c, h, w] if gamma == [c] && beta == [c] => Ok([n, c, h * w]),
        _ => Err(Error::shape("layer_norm_cw", x, gamma)),
    }
}

/// Per-pixel statistics across channels: `(mean, 1/sqrt(var + eps))` for
/// every `(n, pixel)`, accumulated in `f64`.
fn stats<T: Scalar>(x: &Tensor<T>, n: usize, c: usize, hw: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0f64; n * hw];
    let mut sq = vec![0.0f64; n * hw];
    for ni in 0..n {
        let m = &mut mean[ni * hw..(ni + 1) * hw];
        let s = &mut sq[ni * hw..(ni + 1) * hw];
        for ci in 0..c {
            let plane = &x.data()[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
            for ((m, s), &v) in m.iter_mut().zip(s.iter_mut()).zip(plane) {
                let v = v.as_f64();
                *m += v;
                *s += v * v;
            }
        }
    }
    let inv_c = 1.0 / c as f64;
    let rstd = mean
        .iter_mut()
        .zip(&sq)
        .map(|(m, &s)| {
            *m *= inv_c;
            let var = (s * inv_c - *m * *m).max(0.0);
            1.0 / (var + eps).sqrt()
        })
        .collect();
    (mean, rstd)
}

/// Normalizes each pixel's channel vector to zero mean and unit variance,
/// then applies a per-channel scale and shift.
pub fn layer_norm_cw<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let [n, c, hw] = check(x.shape(), gamma.shape(), beta.shape())?;
    let (mean, rstd) = stats(x, n, c, hw, eps);
    let mut out = x.clone();
    for ni in 0..n {
        for ci in 0..c {
            let (g, b) = (gamma.data()[ci].as_f64(), beta.data()[ci].as_f64());
            let plane = &mut out.data_mut()[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
            for (p, v) in plane.iter_mut().enumerate() {
                let xhat = (v.as_f64() - mean[ni * hw + p]) * rstd[ni * hw + p];
                *v = T::from_f64(xhat * g + b);
            }
        }
    }
    Ok(out)
}

impl<T: Scalar> Tape<T> {
    pub fn layer_norm_cw(&self, x: &Var<T>, gamma: &Var<T>, beta: &Var<T>, eps: f64) -> Result<Var<T>> {
        let out = layer_norm_cw(x.value(), gamma.value(), beta.value(), eps)?;
        let (xv, gv) = (x.rc(), gamma.rc());
        Ok(self.record(out, &[x, gamma, beta], move |g, needs| {
            let [n, c, hw] = check(xv.shape(), gv.shape(), gv.shape())?;
            let (mean, rstd) = stats(&xv, n, c, hw, eps);
            let mut dgamma = vec![0.0f64; c];
            let mut dbeta = vec![0.0f64; c];
            let mut gx = vec![T::zero(); xv.numel()];
            // Per pixel: dx = rstd * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat)).
            let mut m1 = vec![0.0f64; hw];
            let mut m2 = vec![0.0f64; hw];
            for ni in 0..n {
                m1.fill(0.0);
                m2.fill(0.0);
                for ci in 0..c {
                    let gm = gv.data()[ci].as_f64();
                    let off = (ni * c + ci) * hw;
                    for p in 0..hw {
                        let xhat = (xv.data()[off + p].as_f64() - mean[ni * hw + p]) * rstd[ni * hw + p];
                        let gy = g.data()[off + p].as_f64();
                        dgamma[ci] += gy * xhat;
                        dbeta[ci] += gy;
                        let dxhat = gy * gm;
                        m1[p] += dxhat;
                        m2[p] += dxhat * xhat;
                    }
                }
                if !needs[0] {
                    continue;
                }
                let inv_c = 1.0 / c as f64;
                for ci in 0..c {
                    let gm = gv.data()[ci].as_f64();
                    let off = (ni * c + ci) * hw;
                    for p in 0..hw {
                        let r = rstd[ni * hw + p];
                        let xhat = (xv.data()[off + p].as_f64() - mean[ni * hw + p]) * r;
                        let dxhat = g.data()[off + p].as_f64() * gm;
                        gx[off + p] = T::from_f64(r * (dxhat - m1[p] * inv_c - xhat * m2[p] * inv_c));
                    }
                }
            }
            let to = |v: Vec<f64>| Tensor::new(&[c], v.into_iter().map(T::from_f64).collect());
            Ok(vec![
                needs[0].then(|| Tensor::new(xv.shape(), gx)).transpose()?,
                needs[1].then(|| to(dgamma)).transpose()?,
                needs[2].then(|| to(dbeta)).transpose()?,
            ])
        }))
    }
}
