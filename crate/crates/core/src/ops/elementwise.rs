//! Pointwise arithmetic, activations and reductions.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{sc, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

impl BinaryOp {
    #[inline(always)]
    fn apply<T: Scalar>(self, a: T, b: T) -> T {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
        }
    }
}

#[derive(Clone, Copy)]
enum Broadcast {
    Same,
    /// `b` holds one value per channel of an `(N, C, H, W)` operand.
    PerChannel { n: usize, c: usize, hw: usize },
}

/// True when `b` is a per-channel vector for the rank-4 shape `a`:
/// `(C)` or `(1, C, 1, 1)`.
fn is_per_channel(a: &[usize], b: &[usize]) -> bool {
    a.len() == 4 && (b == [a[1]] || b == [1, a[1], 1, 1])
}

fn broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        Ok(Broadcast::Same)
    } else if is_per_channel(a, b) {
        Ok(Broadcast::PerChannel {
            n: a[0],
            c: a[1],
            hw: a[2] * a[3],
        })
    } else {
        Err(Error::shape(op, a, b))
    }
}

/// Elementwise `a op b`. `b` may be a per-channel vector broadcast against
/// an `(N, C, H, W)` tensor `a`.
pub fn elementwise<T: Scalar>(op: BinaryOp, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let kind = broadcast("elementwise", a.shape(), b.shape())?;
    let mut out = a.clone();
    match kind {
        Broadcast::Same => {
            for (o, &bv) in out.data_mut().iter_mut().zip(b.data()) {
                *o = op.apply(*o, bv);
            }
        }
        Broadcast::PerChannel { n, c, hw } => {
            let data = out.data_mut();
            for ni in 0..n {
                for ci in 0..c {
                    let bv = b.data()[ci];
                    let base = (ni * c + ci) * hw;
                    for o in &mut data[base..base + hw] {
                        *o = op.apply(*o, bv);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Sums an `(N, C, H, W)` tensor over all axes but C, producing the shape of
/// the broadcast operand.
fn reduce_per_channel<T: Scalar>(
    g: &Tensor<T>,
    weight: Option<&Tensor<T>>,
    shape: &[usize],
    n: usize,
    c: usize,
    hw: usize,
) -> Tensor<T> {
    let mut acc = vec![0.0f64; c];
    for ni in 0..n {
        for (ci, a) in acc.iter_mut().enumerate() {
            let base = (ni * c + ci) * hw;
            let gs = &g.data()[base..base + hw];
            *a += match weight {
                Some(w) => gs
                    .iter()
                    .zip(&w.data()[base..base + hw])
                    .map(|(&g, &w)| (g * w).as_f64())
                    .sum::<f64>(),
                None => gs.iter().map(|v| v.as_f64()).sum::<f64>(),
            };
        }
    }
    Tensor::new(shape, acc.into_iter().map(T::from_f64).collect()).expect("channel shape")
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

#[inline]
pub(crate) fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    // Split on sign so exp never overflows.
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// `max(x, 0)^2`, the squared-ReLU of channel mixing.
pub fn relu_sq<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| {
        let r = v.max(T::zero());
        r * r
    })
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044715;

/// GELU, tanh approximation.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| {
        let u = sc::<T>(GELU_K) * (v + sc::<T>(GELU_C) * v * v * v);
        sc::<T>(0.5) * v * (T::one() + u.tanh())
    })
}

fn gelu_grad<T: Scalar>(v: T) -> T {
    let k = sc::<T>(GELU_K);
    let c = sc::<T>(GELU_C);
    let u = k * (v + c * v * v * v);
    let t = u.tanh();
    let du = k * (T::one() + sc::<T>(3.0) * c * v * v);
    sc::<T>(0.5) * (T::one() + t) + sc::<T>(0.5) * v * (T::one() - t * t) * du
}

/// Mean absolute error; the subgradient at exact ties is 0.
pub fn l1_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    pred.same_shape(target, "l1_loss")?;
    let s: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| (p - t).abs().as_f64())
        .sum();
    Ok(T::from_f64(s / pred.numel() as f64))
}

impl<T: Scalar> Tape<T> {
    fn binary(&self, op: BinaryOp, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        // Per-channel operand on the left: commute when the op allows it.
        if a.shape() != b.shape()
            && is_per_channel(b.shape(), a.shape())
            && op != BinaryOp::Sub
        {
            return self.binary(op, b, a);
        }
        let kind = broadcast("elementwise", a.shape(), b.shape())?;
        let out = elementwise(op, a.value(), b.value())?;
        let (av, bv) = (a.rc(), b.rc());
        let b_shape = b.shape().to_vec();
        Ok(self.record(out, &[a, b], move |g, needs| {
            let ga = if needs[0] {
                Some(match op {
                    BinaryOp::Add | BinaryOp::Sub => g.clone(),
                    BinaryOp::Mul => elementwise(BinaryOp::Mul, g, &bv)?,
                })
            } else {
                None
            };
            let gb = if needs[1] {
                let base = match op {
                    BinaryOp::Add => None,
                    BinaryOp::Sub => Some(g.map(|v| -v)),
                    BinaryOp::Mul => Some(g.clone()),
                };
                Some(match (kind, op) {
                    (Broadcast::Same, BinaryOp::Mul) => elementwise(BinaryOp::Mul, g, &av)?,
                    (Broadcast::Same, _) => base.unwrap_or_else(|| g.clone()),
                    (Broadcast::PerChannel { n, c, hw }, BinaryOp::Mul) => {
                        reduce_per_channel(g, Some(&av), &b_shape, n, c, hw)
                    }
                    (Broadcast::PerChannel { n, c, hw }, _) => {
                        let g = base.unwrap_or_else(|| g.clone());
                        reduce_per_channel(&g, None, &b_shape, n, c, hw)
                    }
                })
            } else {
                None
            };
            Ok(vec![ga, gb])
        }))
    }

    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.binary(BinaryOp::Mul, a, b)
    }

    /// Multiplication by a constant.
    pub fn scale(&self, x: &Var<T>, s: f64) -> Var<T> {
        let s = T::from_f64(s);
        let out = x.value().map(|v| v * s);
        self.record(out, &[x], move |g, _| Ok(vec![Some(g.map(|v| v * s))]))
    }

    pub fn sigmoid(&self, x: &Var<T>) -> Var<T> {
        let out = sigmoid(x.value());
        let y = std::rc::Rc::new(out.clone());
        self.record(out, &[x], move |g, _| {
            let mut d = g.clone();
            for (d, &y) in d.data_mut().iter_mut().zip(y.data()) {
                *d = *d * y * (T::one() - y);
            }
            Ok(vec![Some(d)])
        })
    }

    pub fn relu_sq(&self, x: &Var<T>) -> Var<T> {
        let xv = x.rc();
        self.record(relu_sq(x.value()), &[x], move |g, _| {
            let mut d = g.clone();
            for (d, &x) in d.data_mut().iter_mut().zip(xv.data()) {
                *d = *d * sc::<T>(2.0) * x.max(T::zero());
            }
            Ok(vec![Some(d)])
        })
    }

    pub fn gelu(&self, x: &Var<T>) -> Var<T> {
        let xv = x.rc();
        self.record(gelu(x.value()), &[x], move |g, _| {
            let mut d = g.clone();
            for (d, &x) in d.data_mut().iter_mut().zip(xv.data()) {
                *d = *d * gelu_grad(x);
            }
            Ok(vec![Some(d)])
        })
    }

    /// Sum of all elements as a `(1)` tensor.
    pub fn sum(&self, x: &Var<T>) -> Var<T> {
        let out = Tensor::scalar(T::from_f64(x.value().sum_f64()));
        let shape = x.shape().to_vec();
        self.record(out, &[x], move |g, _| Ok(vec![Some(Tensor::full(&shape, g.data()[0]))]))
    }

    /// `sum(x * weights)` for a constant weight tensor of the same shape.
    pub fn weighted_sum(&self, x: &Var<T>, weights: &Tensor<T>) -> Result<Var<T>> {
        x.value().same_shape(weights, "weighted_sum")?;
        let s: f64 = x
            .value()
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| a.as_f64() * b.as_f64())
            .sum();
        let w = weights.clone();
        Ok(self.record(Tensor::scalar(T::from_f64(s)), &[x], move |g, _| {
            let gs = g.data()[0];
            Ok(vec![Some(w.map(|v| v * gs))])
        }))
    }

    /// Mean absolute error between `pred` and a target.
    pub fn l1_loss(&self, pred: &Var<T>, target: &Var<T>) -> Result<Var<T>> {
        let loss = l1_loss(pred.value(), target.value())?;
        let (p, t) = (pred.rc(), target.rc());
        Ok(self.record(Tensor::scalar(loss), &[pred, target], move |g, needs| {
            let scale = g.data()[0] / T::from_f64(p.numel() as f64);
            let mut d = Tensor::zeros_like(&p);
            for ((d, &p), &t) in d.data_mut().iter_mut().zip(p.data()).zip(t.data()) {
                *d = if p > t {
                    scale
                } else if p < t {
                    -scale
                } else {
                    T::zero()
                };
            }
            let dt = needs[1].then(|| d.map(|v| -v));
            Ok(vec![needs[0].then_some(d), dt])
        }))
    }

    /// `shift[n, c] + scale[n, c] * x[n, c, h, w]` with constant `(N, C)`
    /// coefficients; differentiable in `x` only.
    pub fn affine_nc(&self, x: &Var<T>, scale: &Tensor<T>, shift: &Tensor<T>) -> Result<Var<T>> {
        let [n, c, h, w] = x.value().dims4()?;
        if scale.numel() != n * c || shift.numel() != n * c {
            return Err(Error::shape("affine_nc", x.shape(), scale.shape()));
        }
        let hw = h * w;
        let mut out = x.value().clone();
        for (plane, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
            let (a, b) = (scale.data()[plane], shift.data()[plane]);
            chunk.iter_mut().for_each(|v| *v = b + a * *v);
        }
        let s = scale.clone();
        Ok(self.record(out, &[x], move |g, _| {
            let mut d = g.clone();
            for (plane, chunk) in d.data_mut().chunks_mut(hw).enumerate() {
                let a = s.data()[plane];
                chunk.iter_mut().for_each(|v| *v = *v * a);
            }
            Ok(vec![Some(d)])
        }))
    }
}
