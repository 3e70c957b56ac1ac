//! Token shifts: QShift, OmniShift and the multi-scale Omni-Quad Shift.
//!
//! Omni-Quad Shift is the sum of six linear branches, all depthwise:
//!
//! ```text
//! Y = w_x·X + w_1·K1(X) + w_2·K3(X) + w_3·K5(X) + w_4·K7(X) + w_q·QShift(X)
//! ```
//!
//! Every branch is a same-padded depthwise correlation, so the whole sum is
//! one depthwise convolution with an assembled kernel. The assembly is a
//! small differentiable op; the convolution reuses the generic kernel.

use std::fmt;
use std::str::FromStr;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::depthwise_conv2d;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ShiftMode {
    QShift,
    OmniShift,
    #[default]
    OmniQuad,
}

impl ShiftMode {
    pub const ALL: [ShiftMode; 3] = [ShiftMode::OmniShift, ShiftMode::QShift, ShiftMode::OmniQuad];

    pub fn as_str(self) -> &'static str {
        match self {
            ShiftMode::QShift => "qshift",
            ShiftMode::OmniShift => "omnishift",
            ShiftMode::OmniQuad => "omniquad",
        }
    }
}

impl fmt::Display for ShiftMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ShiftMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("shift_mode must be qshift, omnishift or omniquad, got '{s}'")))
    }
}

/// `(dy, dx)` read offset of each channel quarter: quarter `q` output at
/// `(h, w)` is input at `(h + dy, w + dx)`. Content moves left, right, up,
/// down respectively.
pub const QSHIFT_OFFSETS: [(isize, isize); 4] = [(0, 1), (0, -1), (1, 0), (-1, 0)];

fn quarter(c: usize) -> Result<usize> {
    if c % 4 != 0 {
        return Err(Error::invalid(
            "qshift",
            format!("channel count {c} is not divisible by 4"),
        ));
    }
    Ok(c / 4)
}

/// Shifts each channel quarter by one pixel, zero-filling the vacated line.
/// With `inverse`, applies the adjoint shift instead.
fn shift_planes<T: Scalar>(x: &Tensor<T>, inverse: bool) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4()?;
    let q = quarter(c)?;
    let mut out = Tensor::zeros(x.shape());
    for ni in 0..n {
        for ci in 0..c {
            let (mut dy, mut dx) = QSHIFT_OFFSETS[ci / q];
            if inverse {
                (dy, dx) = (-dy, -dx);
            }
            let off = (ni * c + ci) * h * w;
            let src = &x.data()[off..off + h * w];
            let dst = &mut out.data_mut()[off..off + h * w];
            for y in 0..h {
                let sy = y as isize + dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for xx in 0..w {
                    let sx = xx as isize + dx;
                    if sx >= 0 && sx < w as isize {
                        dst[y * w + xx] = src[sy as usize * w + sx as usize];
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn qshift<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    shift_planes(x, false)
}

fn check_k5(x: &[usize], k5: &[usize]) -> Result<()> {
    match (x, k5) {
        (&[_, c, _, _], &[kc, 1, 5, 5]) if kc == c => Ok(()),
        _ => Err(Error::shape("omni_shift", x, k5)),
    }
}

/// A single learnable 5x5 depthwise convolution.
pub fn omni_shift<T: Scalar>(x: &Tensor<T>, k5: &Tensor<T>) -> Result<Tensor<T>> {
    check_k5(x.shape(), k5.shape())?;
    depthwise_conv2d(x, k5, 1)
}

/// Branch weights and kernels of an Omni-Quad Shift.
#[derive(Clone, Debug)]
pub struct OmniQuadParams<T: Scalar = f32> {
    /// `[w_x, w_1, w_2, w_3, w_4, w_q]`.
    pub weights: Tensor<T>,
    pub k1: Tensor<T>,
    pub k3: Tensor<T>,
    pub k5: Tensor<T>,
    pub k7: Tensor<T>,
    /// Dilations of the 1x1, 3x3, 5x5 and 7x7 branches.
    pub dilations: [usize; 4],
}

pub const KERNEL_SIZES: [usize; 4] = [1, 3, 5, 7];

/// Side of the assembled kernel: wide enough for every dilated branch and
/// for the one-pixel QShift taps.
pub fn assembled_size(dilations: [usize; 4]) -> usize {
    let reach = KERNEL_SIZES
        .iter()
        .zip(dilations)
        .map(|(&k, d)| d * (k - 1) / 2)
        .max()
        .unwrap_or(0)
        .max(1);
    2 * reach + 1
}

fn check_quad(c: usize, weights: &[usize], kernels: [&[usize]; 4], dilations: [usize; 4]) -> Result<()> {
    if weights != [6] {
        return Err(Error::invalid(
            "omni_quad_shift",
            format!("expected 6 branch weights, got shape {weights:?}"),
        ));
    }
    if dilations.contains(&0) {
        return Err(Error::invalid("omni_quad_shift", "dilation must be at least 1"));
    }
    for (shape, &k) in kernels.iter().zip(&KERNEL_SIZES) {
        if *shape != [c, 1, k, k] {
            return Err(Error::shape("omni_quad_shift", &[c, 1, k, k], shape));
        }
    }
    quarter(c).map(|_| ())
}

/// Builds the `(C, 1, E, E)` depthwise kernel equal to the sum of branches.
fn assemble<T: Scalar>(
    c: usize,
    weights: &[T],
    kernels: [&[T]; 4],
    dilations: [usize; 4],
) -> Tensor<T> {
    let e = assembled_size(dilations);
    let r = (e / 2) as isize;
    let q = c / 4;
    let mut out = vec![0.0f64; c * e * e];
    let at = |dy: isize, dx: isize| ((r + dy) as usize) * e + (r + dx) as usize;
    for ci in 0..c {
        let plane = &mut out[ci * e * e..(ci + 1) * e * e];
        plane[at(0, 0)] += weights[0].as_f64();
        for (b, (&k, &d)) in KERNEL_SIZES.iter().zip(&dilations).enumerate() {
            let wb = weights[b + 1].as_f64();
            let kr = (k / 2) as isize;
            let kern = &kernels[b][ci * k * k..(ci + 1) * k * k];
            for a in 0..k {
                for bb in 0..k {
                    let dy = (a as isize - kr) * d as isize;
                    let dx = (bb as isize - kr) * d as isize;
                    plane[at(dy, dx)] += wb * kern[a * k + bb].as_f64();
                }
            }
        }
        let (dy, dx) = QSHIFT_OFFSETS[ci / q];
        plane[at(dy, dx)] += weights[5].as_f64();
    }
    Tensor::new(&[c, 1, e, e], out.into_iter().map(T::from_f64).collect())
        .expect("assembled kernel shape")
}

/// The single depthwise kernel equivalent to the six-branch sum.
pub fn assembled_kernel<T: Scalar>(c: usize, p: &OmniQuadParams<T>) -> Result<Tensor<T>> {
    check_quad(
        c,
        p.weights.shape(),
        [p.k1.shape(), p.k3.shape(), p.k5.shape(), p.k7.shape()],
        p.dilations,
    )?;
    Ok(assemble(
        c,
        p.weights.data(),
        [p.k1.data(), p.k3.data(), p.k5.data(), p.k7.data()],
        p.dilations,
    ))
}

pub fn omni_quad_shift<T: Scalar>(x: &Tensor<T>, p: &OmniQuadParams<T>) -> Result<Tensor<T>> {
    let [_, c, _, _] = x.dims4()?;
    depthwise_conv2d(x, &assembled_kernel(c, p)?, 1)
}

/// Tape handles of Omni-Quad Shift parameters.
#[derive(Clone)]
pub struct OmniQuadVars<T: Scalar = f32> {
    pub weights: Var<T>,
    pub k1: Var<T>,
    pub k3: Var<T>,
    pub k5: Var<T>,
    pub k7: Var<T>,
    pub dilations: [usize; 4],
}

impl<T: Scalar> Tape<T> {
    pub fn qshift(&self, x: &Var<T>) -> Result<Var<T>> {
        let out = qshift(x.value())?;
        Ok(self.record(out, &[x], |g, _| Ok(vec![Some(shift_planes(g, true)?)])))
    }

    pub fn omni_shift(&self, x: &Var<T>, k5: &Var<T>) -> Result<Var<T>> {
        check_k5(x.shape(), k5.shape())?;
        self.depthwise_conv2d(x, k5, 1)
    }

    pub fn omni_quad_shift(&self, x: &Var<T>, p: &OmniQuadVars<T>) -> Result<Var<T>> {
        let [_, c, _, _] = x.value().dims4()?;
        let kernel = self.assemble_omni_quad(c, p)?;
        self.depthwise_conv2d(x, &kernel, 1)
    }

    fn assemble_omni_quad(&self, c: usize, p: &OmniQuadVars<T>) -> Result<Var<T>> {
        let dilations = p.dilations;
        check_quad(
            c,
            p.weights.shape(),
            [p.k1.shape(), p.k3.shape(), p.k5.shape(), p.k7.shape()],
            dilations,
        )?;
        let out = assemble(
            c,
            p.weights.value().data(),
            [
                p.k1.value().data(),
                p.k3.value().data(),
                p.k5.value().data(),
                p.k7.value().data(),
            ],
            dilations,
        );
        let e = out.shape()[2];
        let weights = p.weights.rc();
        let kernels = [p.k1.rc(), p.k3.rc(), p.k5.rc(), p.k7.rc()];
        let parents = [&p.weights, &p.k1, &p.k3, &p.k5, &p.k7];
        Ok(self.record(out, &parents, move |g, _| {
            let g = g.data();
            let r = (e / 2) as isize;
            let q = c / 4;
            let at = |dy: isize, dx: isize| ((r + dy) as usize) * e + (r + dx) as usize;
            let mut gw = [0.0f64; 6];
            let mut gk: Vec<Vec<f64>> = KERNEL_SIZES.iter().map(|&k| vec![0.0; c * k * k]).collect();
            for ci in 0..c {
                let plane = &g[ci * e * e..(ci + 1) * e * e];
                gw[0] += plane[at(0, 0)].as_f64();
                for (b, (&k, &d)) in KERNEL_SIZES.iter().zip(&dilations).enumerate() {
                    let wb = weights.data()[b + 1].as_f64();
                    let kr = (k / 2) as isize;
                    let kern = &kernels[b].data()[ci * k * k..(ci + 1) * k * k];
                    for a in 0..k {
                        for bb in 0..k {
                            let dy = (a as isize - kr) * d as isize;
                            let dx = (bb as isize - kr) * d as isize;
                            let gv = plane[at(dy, dx)].as_f64();
                            gw[b + 1] += gv * kern[a * k + bb].as_f64();
                            gk[b][ci * k * k + a * k + bb] = gv * wb;
                        }
                    }
                }
                let (dy, dx) = QSHIFT_OFFSETS[ci / q];
                gw[5] += plane[at(dy, dx)].as_f64();
            }
            let mut grads = vec![Some(Tensor::new(
                &[6],
                gw.iter().map(|&v| T::from_f64(v)).collect(),
            )?)];
            for (b, gkb) in gk.into_iter().enumerate() {
                let k = KERNEL_SIZES[b];
                grads.push(Some(Tensor::new(
                    &[c, 1, k, k],
                    gkb.into_iter().map(T::from_f64).collect(),
                )?));
            }
            Ok(grads)
        }))
    }
}
