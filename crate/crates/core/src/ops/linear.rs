//! Per-pixel channel projection (a 1x1 convolution) and the shared GEMM
//! helper. All products accumulate in `f64`.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub(crate) fn to_f64<T: Scalar>(xs: &[T]) -> Vec<f64> {
    xs.iter().map(|v| v.as_f64()).collect()
}

pub(crate) fn from_f64<T: Scalar>(xs: &[f64]) -> Vec<T> {
    xs.iter().map(|&v| T::from_f64(v)).collect()
}

/// `C = alpha * A * B + beta * C` on strided row/column views.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

fn check(x: &[usize], w: &[usize]) -> Result<(usize, usize, usize, usize)> {
    let (&[n, c, h, wd], &[c_out, c_in]) = (x, w) else {
        return Err(Error::invalid(
            "linear_cw",
            format!("expected x (N,C,H,W) and w (C_out,C_in), got {x:?} and {w:?}"),
        ));
    };
    if c_in != c {
        return Err(Error::shape("linear_cw", x, w));
    }
    Ok((n, c, c_out, h * wd))
}

/// Applies `w` (`C_out x C_in`) to the channel vector of every pixel.
pub fn linear_cw<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c_in, c_out, hw) = check(x.shape(), w.shape())?;
    let [_, _, h, wd] = x.dims4()?;
    let wf = to_f64(w.data());
    let mut out = Vec::with_capacity(n * c_out * hw);
    let mut acc = vec![0.0f64; c_out * hw];
    for ni in 0..n {
        let xs = to_f64(&x.data()[ni * c_in * hw..(ni + 1) * c_in * hw]);
        gemm(c_out, c_in, hw, &wf, (c_in, 1), &xs, (hw, 1), 0.0, &mut acc, (hw, 1));
        out.extend(acc.iter().map(|&v| T::from_f64(v)));
    }
    Tensor::new(&[n, c_out, h, wd], out)
}

impl<T: Scalar> Tape<T> {
    pub fn linear_cw(&self, x: &Var<T>, w: &Var<T>) -> Result<Var<T>> {
        let out = linear_cw(x.value(), w.value())?;
        let (xv, wv) = (x.rc(), w.rc());
        Ok(self.record(out, &[x, w], move |g, needs| {
            let (n, c_in, c_out, hw) = check(xv.shape(), wv.shape())?;
            let wf = to_f64(wv.data());
            let mut gx = needs[0].then(|| Vec::with_capacity(n * c_in * hw));
            let mut gw = vec![0.0f64; c_out * c_in];
            let mut tmp = vec![0.0f64; c_in * hw];
            for ni in 0..n {
                let gs = to_f64(&g.data()[ni * c_out * hw..(ni + 1) * c_out * hw]);
                if let Some(gx) = gx.as_mut() {
                    gemm(c_in, c_out, hw, &wf, (1, c_in), &gs, (hw, 1), 0.0, &mut tmp, (hw, 1));
                    gx.extend(tmp.iter().map(|&v| T::from_f64(v)));
                }
                if needs[1] {
                    let xs = to_f64(&xv.data()[ni * c_in * hw..(ni + 1) * c_in * hw]);
                    gemm(c_out, hw, c_in, &gs, (hw, 1), &xs, (1, hw), 1.0, &mut gw, (c_in, 1));
                }
            }
            let gx = gx.map(|d| Tensor::new(xv.shape(), d)).transpose()?;
            let gw = needs[1]
                .then(|| Tensor::new(wv.shape(), from_f64(&gw)))
                .transpose()?;
            Ok(vec![gx, gw])
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::fd_grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_weights() {
        let x = Tensor::<f32>::from_fn(&[2, 3, 2, 2], |i| i as f32 * 0.5 - 3.0);
        let eye = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        assert_eq!(linear_cw(&x, &eye).unwrap(), x);
    }

    #[test]
    fn sum_of_two_channels() {
        let x = Tensor::<f32>::new(&[1, 2, 1, 1], vec![3.0, 4.0]).unwrap();
        let w = Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap();
        assert_eq!(linear_cw(&x, &w).unwrap().data(), &[7.0]);
    }

    #[test]
    fn matches_hand_matvec() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Tensor::<f32>::from_fn(&[2, 3], |_| rng.gen_range(-1.0..1.0));
        let x = Tensor::<f32>::from_fn(&[1, 3, 1, 1], |_| rng.gen_range(-1.0..1.0));
        let out = linear_cw(&x, &w).unwrap();
        for o in 0..2 {
            let expect: f64 = (0..3)
                .map(|i| w.data()[o * 3 + i] as f64 * x.data()[i] as f64)
                .sum();
            assert_eq!(out.data()[o], expect as f32);
        }
    }

    #[test]
    fn channel_mismatch_errors() {
        let x = Tensor::<f32>::zeros(&[1, 3, 2, 2]);
        assert!(linear_cw(&x, &Tensor::zeros(&[2, 4])).is_err());
    }

    #[test]
    fn gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f64>::from_fn(&[2, 3, 2, 3], |_| rng.gen_range(-1.0..1.0));
        let w = Tensor::<f64>::from_fn(&[4, 3], |_| rng.gen_range(-1.0..1.0));
        let c = Tensor::<f64>::from_fn(&[2, 4, 2, 3], |_| rng.gen_range(0.5..1.5));
        let err = fd_grad_check(
            |t, x| {
                let wv = t.constant(w.clone());
                t.weighted_sum(&t.linear_cw(x, &wv)?, &c)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err <= 1e-4, "dx {err}");
        let err = fd_grad_check(
            |t, w| {
                let xv = t.constant(x.clone());
                t.weighted_sum(&t.linear_cw(&xv, w)?, &c)
            },
            &w,
            1e-4,
        )
        .unwrap();
        assert!(err <= 1e-4, "dw {err}");
    }
}
