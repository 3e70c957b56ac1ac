//! WKV6 linear attention.
//!
//! Per head, with `D = C / heads` and a `D x D` state `S` starting at zero,
//! each step `t` computes
//!
//! ```text
//! d_t   = exp(-exp(w_t))
//! out_t = r_t · (S + diag(u) · (k_tᵀ ⊗ v_t))
//! S     = diag(d_t) · S + k_tᵀ ⊗ v_t
//! ```
//!
//! so the contribution of step `i` seen at step `t > i` has been decayed by
//! `d_{i+1} … d_{t-1}`. [`wkv6_recurrent`] runs the recurrence in `O(T·D²)`
//! per head; [`wkv6_reference`] expands the same sum directly in `O(T²·D²)`
//! and serves as the test oracle.
//!
//! The backward pass recomputes the states forward for one lane at a time and
//! then walks the sequence in reverse.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Maps decay logits to per-channel decay factors in `(0, 1)`.
pub fn decay_from_ww<T: Scalar>(ww: &Tensor<T>) -> Tensor<T> {
    ww.map(decay)
}

#[inline(always)]
fn decay<T: Scalar>(w: T) -> T {
    (-w.exp()).exp()
}

/// How sequences are laid out inside the input tensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeqLayout {
    /// `(N, T, C)`: one sequence per batch entry.
    Ntc,
    /// `(N, C, H, W)`: every image row is an independent sequence of length `W`.
    NchwRows,
    /// `(N, C, H, W)`: the whole image in raster order is one sequence.
    NchwRaster,
}

/// Strided view of a set of independent sequences.
#[derive(Clone, Copy, Debug)]
struct View {
    lanes: usize,
    len: usize,
    channels: usize,
    t_stride: usize,
    c_stride: usize,
    layout: SeqLayout,
    h: usize,
    w: usize,
}

impl View {
    fn new(shape: &[usize], layout: SeqLayout) -> Result<Self> {
        let view = match (layout, shape) {
            (SeqLayout::Ntc, &[n, t, c]) => View {
                lanes: n,
                len: t,
                channels: c,
                t_stride: c,
                c_stride: 1,
                layout,
                h: 0,
                w: 0,
            },
            (SeqLayout::NchwRows, &[n, c, h, w]) => View {
                lanes: n * h,
                len: w,
                channels: c,
                t_stride: 1,
                c_stride: h * w,
                layout,
                h,
                w,
            },
            (SeqLayout::NchwRaster, &[n, c, h, w]) => View {
                lanes: n,
                len: h * w,
                channels: c,
                t_stride: 1,
                c_stride: h * w,
                layout,
                h,
                w,
            },
            _ => {
                return Err(Error::invalid(
                    "wkv6",
                    format!("shape {shape:?} does not match layout {layout:?}"),
                ))
            }
        };
        Ok(view)
    }

    fn lane_base(&self, lane: usize) -> usize {
        match self.layout {
            SeqLayout::Ntc => lane * self.len * self.channels,
            SeqLayout::NchwRows => {
                let (n, row) = (lane / self.h, lane % self.h);
                n * self.channels * self.h * self.w + row * self.w
            }
            SeqLayout::NchwRaster => lane * self.channels * self.len,
        }
    }

    #[inline(always)]
    fn index(&self, base: usize, t: usize, c: usize) -> usize {
        base + t * self.t_stride + c * self.c_stride
    }
}

fn head_dim(channels: usize, heads: usize) -> Result<usize> {
    if heads == 0 || channels % heads != 0 {
        return Err(Error::invalid(
            "wkv6",
            format!("channel count {channels} is not divisible by {heads} heads"),
        ));
    }
    Ok(channels / heads)
}

/// Inputs of one WKV6 evaluation in `(N, T, C)` layout.
#[derive(Clone, Debug)]
pub struct WkvInputs<T: Scalar = f32> {
    pub r: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
    /// Decay logits; the decay itself is `exp(-exp(w))`.
    pub w: Tensor<T>,
    /// Per-channel bonus applied to the current token, shape `(C)`.
    pub u: Tensor<T>,
    pub heads: usize,
}

impl<T: Scalar> WkvInputs<T> {
    fn validate(&self) -> Result<(View, usize)> {
        for other in [&self.k, &self.v, &self.w] {
            self.r.same_shape(other, "wkv6")?;
        }
        let view = View::new(self.r.shape(), SeqLayout::Ntc)?;
        if self.u.shape() != [view.channels] {
            return Err(Error::shape("wkv6", self.r.shape(), self.u.shape()));
        }
        let d = head_dim(view.channels, self.heads)?;
        Ok((view, d))
    }
}

/// Gathered per-(lane, head) inputs for a span of steps, `span x D` row-major.
struct LaneHead<T> {
    r: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// `exp(w)`
    e: Vec<T>,
    /// `exp(-exp(w))`
    d: Vec<T>,
}

impl<T: Scalar> LaneHead<T> {
    fn new(len: usize, dim: usize) -> Self {
        let z = || vec![T::zero(); len * dim];
        Self {
            r: z(),
            k: z(),
            v: z(),
            e: z(),
            d: z(),
        }
    }

    fn step(&self, t: usize, dim: usize) -> [&[T]; 5] {
        let at = t * dim..(t + 1) * dim;
        [
            &self.r[at.clone()],
            &self.k[at.clone()],
            &self.v[at.clone()],
            &self.e[at.clone()],
            &self.d[at],
        ]
    }
}

/// Fills `lh` with steps `span` of one lane and head, starting at row 0.
#[allow(clippy::too_many_arguments)]
fn gather<T: Scalar>(
    view: &View,
    base: usize,
    c0: usize,
    dim: usize,
    span: std::ops::Range<usize>,
    r: &[T],
    k: &[T],
    v: &[T],
    w: Decays<'_, T>,
    lh: &mut LaneHead<T>,
) {
    let mut copy = |t: usize, i: usize| {
        let idx = view.index(base, t, c0 + i);
        let o = (t - span.start) * dim + i;
        lh.r[o] = r[idx];
        lh.k[o] = k[idx];
        lh.v[o] = v[idx];
        let (e, d) = match w {
            Decays::Logits(w) => {
                let e = w[idx].exp();
                (e, (-e).exp())
            }
            Decays::Cached(c) => (c.e[idx], c.d[idx]),
        };
        lh.e[o] = e;
        lh.d[o] = d;
    };
    // Walk the source in memory order; a full pass per channel falls out of
    // cache on long sequences.
    if view.c_stride < view.t_stride {
        for t in span.clone() {
            (0..dim).for_each(|i| copy(t, i));
        }
    } else {
        for i in 0..dim {
            span.clone().for_each(|t| copy(t, i));
        }
    }
}

/// `exp(w)` and `exp(-exp(w))` for every element.
struct Decay<T> {
    e: Vec<T>,
    d: Vec<T>,
}

impl<T: Scalar> Decay<T> {
    fn new(w: &[T]) -> Self {
        let e: Vec<T> = w.iter().map(|x| x.exp()).collect();
        let d = e.iter().map(|&x| (-x).exp()).collect();
        Self { e, d }
    }
}

/// Decays computed on the fly from logits, or precomputed once when the
/// forward and backward passes both need them.
#[derive(Clone, Copy)]
enum Decays<'a, T> {
    Logits(&'a [T]),
    Cached(&'a Decay<T>),
}

const LANES: usize = 8;

/// Steps gathered at a time by the forward pass; keeps the staging buffers
/// in L2 however long the sequence is.
const CHUNK: usize = 1024;

/// `Σ r_i u_i k_i`
#[inline(always)]
fn bonus<T: Scalar>(r: &[T], u: &[T], k: &[T]) -> T {
    r.iter()
        .zip(u)
        .zip(k)
        .fold(T::zero(), |acc, ((&r, &u), &k)| acc + r * u * k)
}

/// Per-row work of the reverse pass, fused into one sweep over `j`:
/// returns `(Σ go·s, Σ G·s, Σ G·v)` using the incoming `G` row, adds
/// `k_i · G` to `dv` and then updates `G ← d_i · G + r_i · go`.
#[allow(clippy::too_many_arguments)]
#[inline(never)]
fn reverse_row<T: Scalar>(
    go: &[T],
    s: &[T],
    v: &[T],
    g: &mut [T],
    dv: &mut [T],
    k: T,
    d: T,
    r: T,
) -> (T, T, T) {
    let (mut a0, mut a1, mut a2) = ([T::zero(); LANES], [T::zero(); LANES], [T::zero(); LANES]);
    let n = go.len() / LANES * LANES;
    for ((((go, s), v), g), dv) in go[..n]
        .chunks_exact(LANES)
        .zip(s[..n].chunks_exact(LANES))
        .zip(v[..n].chunks_exact(LANES))
        .zip(g[..n].chunks_exact_mut(LANES))
        .zip(dv[..n].chunks_exact_mut(LANES))
    {
        let go: &[T; LANES] = go.try_into().unwrap();
        let s: &[T; LANES] = s.try_into().unwrap();
        let v: &[T; LANES] = v.try_into().unwrap();
        let g: &mut [T; LANES] = g.try_into().unwrap();
        let dv: &mut [T; LANES] = dv.try_into().unwrap();
        let gv = *g;
        for l in 0..LANES {
            a0[l] = a0[l] + go[l] * s[l];
            a1[l] = a1[l] + gv[l] * s[l];
            a2[l] = a2[l] + gv[l] * v[l];
            dv[l] = dv[l] + k * gv[l];
            g[l] = d * gv[l] + r * go[l];
        }
    }
    let (mut t0, mut t1, mut t2) = (T::zero(), T::zero(), T::zero());
    for j in n..go.len() {
        let gv = g[j];
        t0 = t0 + go[j] * s[j];
        t1 = t1 + gv * s[j];
        t2 = t2 + gv * v[j];
        dv[j] = dv[j] + k * gv;
        g[j] = d * gv + r * go[j];
    }
    let sum = |a: &[T; LANES], t: T| a.iter().fold(t, |x, &y| x + y);
    (sum(&a0, t0), sum(&a1, t1), sum(&a2, t2))
}

/// Recurrent forward over every lane and head of `view`.
fn forward_kernel<T: Scalar>(
    view: &View,
    heads: usize,
    r: &[T],
    k: &[T],
    v: &[T],
    w: Decays<'_, T>,
    u: &[T],
) -> Vec<T> {
    let dim = view.channels / heads;
    let mut out = vec![T::zero(); r.len()];
    let mut lh = LaneHead::new(view.len.min(CHUNK), dim);
    let mut state = vec![T::zero(); dim * dim];
    let mut row = vec![T::zero(); dim];
    for lane in 0..view.lanes {
        let base = view.lane_base(lane);
        for head in 0..heads {
            let c0 = head * dim;
            let uh = &u[c0..c0 + dim];
            state.fill(T::zero());
            for t in 0..view.len {
                if t % CHUNK == 0 {
                    let span = t..(t + CHUNK).min(view.len);
                    gather(view, base, c0, dim, span, r, k, v, w, &mut lh);
                }
                let [rt, kt, vt, _, dt] = lh.step(t % CHUNK, dim);
                let b = bonus(rt, uh, kt);
                for (o, &vj) in row.iter_mut().zip(vt) {
                    *o = b * vj;
                }
                for (i, s) in state.chunks_exact_mut(dim).enumerate() {
                    let (ri, ki, di) = (rt[i], kt[i], dt[i]);
                    for ((o, s), &vj) in row.iter_mut().zip(s.iter_mut()).zip(vt) {
                        *o = *o + ri * *s;
                        *s = di * *s + ki * vj;
                    }
                }
                for (j, &o) in row.iter().enumerate() {
                    out[view.index(base, t, c0 + j)] = o;
                }
            }
        }
    }
    out
}

struct WkvGrads<T> {
    r: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    w: Vec<T>,
    u: Vec<T>,
}

#[allow(clippy::too_many_arguments)]
fn backward_kernel<T: Scalar>(
    view: &View,
    heads: usize,
    r: &[T],
    k: &[T],
    v: &[T],
    w: Decays<'_, T>,
    u: &[T],
    gout: &[T],
) -> WkvGrads<T> {
    let dim = view.channels / heads;
    let n = r.len();
    let mut g = WkvGrads {
        r: vec![T::zero(); n],
        k: vec![T::zero(); n],
        v: vec![T::zero(); n],
        w: vec![T::zero(); n],
        u: vec![T::zero(); view.channels],
    };
    let mut lh = LaneHead::new(view.len, dim);
    // states[t] is the state read at step t (before its update).
    let mut states = vec![T::zero(); view.len * dim * dim];
    let mut gstate = vec![T::zero(); dim * dim];
    let mut go = vec![T::zero(); dim];
    let mut dv = vec![T::zero(); dim];
    for lane in 0..view.lanes {
        let base = view.lane_base(lane);
        for head in 0..heads {
            let c0 = head * dim;
            gather(view, base, c0, dim, 0..view.len, r, k, v, w, &mut lh);
            let uh = &u[c0..c0 + dim];
            for t in 1..view.len {
                let (prev, cur) = states.split_at_mut(t * dim * dim);
                let prev = &prev[(t - 1) * dim * dim..];
                let [_, kt, vt, _, dt] = lh.step(t - 1, dim);
                for (i, (c, p)) in cur[..dim * dim]
                    .chunks_exact_mut(dim)
                    .zip(prev.chunks_exact(dim))
                    .enumerate()
                {
                    let (di, ki) = (dt[i], kt[i]);
                    for ((c, &p), &vj) in c.iter_mut().zip(p).zip(vt) {
                        *c = di * p + ki * vj;
                    }
                }
            }
            gstate.fill(T::zero());
            for t in (0..view.len).rev() {
                let s = &states[t * dim * dim..(t + 1) * dim * dim];
                let [rt, kt, vt, et, dt] = lh.step(t, dim);
                for (j, o) in go.iter_mut().enumerate() {
                    *o = gout[view.index(base, t, c0 + j)];
                }
                let gov = go.iter().zip(vt).fold(T::zero(), |a, (&x, &y)| a + x * y);
                let b = bonus(rt, uh, kt);
                for (o, &x) in dv.iter_mut().zip(&go) {
                    *o = b * x;
                }
                for (i, (si, gi)) in s
                    .chunks_exact(dim)
                    .zip(gstate.chunks_exact_mut(dim))
                    .enumerate()
                {
                    let (dr, dd, dk) = reverse_row(&go, si, vt, gi, &mut dv, kt[i], dt[i], rt[i]);
                    let idx = view.index(base, t, c0 + i);
                    g.r[idx] = dr + uh[i] * kt[i] * gov;
                    g.k[idx] = dk + rt[i] * uh[i] * gov;
                    g.w[idx] = -dd * dt[i] * et[i];
                    g.u[c0 + i] = g.u[c0 + i] + rt[i] * kt[i] * gov;
                }
                for (j, &x) in dv.iter().enumerate() {
                    g.v[view.index(base, t, c0 + j)] = x;
                }
            }
        }
    }
    g
}

/// Sequential recurrence, linear in the sequence length.
pub fn wkv6_recurrent<T: Scalar>(inputs: &WkvInputs<T>) -> Result<Tensor<T>> {
    let (view, _) = inputs.validate()?;
    let out = forward_kernel(
        &view,
        inputs.heads,
        inputs.r.data(),
        inputs.k.data(),
        inputs.v.data(),
        Decays::Logits(inputs.w.data()),
        inputs.u.data(),
    );
    Tensor::new(inputs.r.shape(), out)
}

/// Longest sequence [`wkv6_reference`] accepts.
pub const REFERENCE_MAX_LEN: usize = 64;

/// Direct double summation of the recurrence, without any carried state.
/// Accumulates in `f64`; intended for tests only.
pub fn wkv6_reference<T: Scalar>(inputs: &WkvInputs<T>) -> Result<Tensor<T>> {
    let (view, dim) = inputs.validate()?;
    if view.len > REFERENCE_MAX_LEN {
        return Err(Error::invalid(
            "wkv6_reference",
            format!("sequence length {} exceeds {REFERENCE_MAX_LEN}", view.len),
        ));
    }
    let at = |x: &Tensor<T>, n: usize, t: usize, c: usize| -> f64 {
        x.data()[(n * view.len + t) * view.channels + c].as_f64()
    };
    let mut out = vec![T::zero(); inputs.r.numel()];
    for n in 0..view.lanes {
        for head in 0..inputs.heads {
            let c0 = head * dim;
            for t in 0..view.len {
                for j in 0..dim {
                    let mut acc = 0.0f64;
                    for i in 0..dim {
                        let ci = c0 + i;
                        let mut kv = inputs.u.data()[ci].as_f64()
                            * at(&inputs.k, n, t, ci)
                            * at(&inputs.v, n, t, c0 + j);
                        for s in 0..t {
                            let mut factor = 1.0f64;
                            for m in s + 1..t {
                                factor *= (-at(&inputs.w, n, m, ci).exp()).exp();
                            }
                            kv += factor * at(&inputs.k, n, s, ci) * at(&inputs.v, n, s, c0 + j);
                        }
                        acc += at(&inputs.r, n, t, ci) * kv;
                    }
                    out[(n * view.len + t) * view.channels + c0 + j] = T::from_f64(acc);
                }
            }
        }
    }
    Tensor::new(inputs.r.shape(), out)
}

impl<T: Scalar> Tape<T> {
    /// Differentiable WKV6 over `r`, `k`, `v`, decay logits `w` and bonus `u`.
    #[allow(clippy::too_many_arguments)]
    pub fn wkv6(
        &self,
        r: &Var<T>,
        k: &Var<T>,
        v: &Var<T>,
        w: &Var<T>,
        u: &Var<T>,
        heads: usize,
        layout: SeqLayout,
    ) -> Result<Var<T>> {
        for other in [k, v, w] {
            r.value().same_shape(other.value(), "wkv6")?;
        }
        let view = View::new(r.shape(), layout)?;
        if u.shape() != [view.channels] {
            return Err(Error::shape("wkv6", r.shape(), u.shape()));
        }
        head_dim(view.channels, heads)?;
        let decay = Decay::new(w.value().data());
        let out = forward_kernel(
            &view,
            heads,
            r.value().data(),
            k.value().data(),
            v.value().data(),
            Decays::Cached(&decay),
            u.value().data(),
        );
        let out = Tensor::new(r.shape(), out)?;
        let (rv, kv, vv, uv) = (r.rc(), k.rc(), v.rc(), u.rc());
        Ok(self.record(out, &[r, k, v, w, u], move |g, needs| {
            let grads = backward_kernel(
                &view,
                heads,
                rv.data(),
                kv.data(),
                vv.data(),
                Decays::Cached(&decay),
                uv.data(),
                g.data(),
            );
            let shape = rv.shape();
            let wrap = |need: bool, data: Vec<T>, shape: &[usize]| {
                need.then(|| Tensor::new(shape, data)).transpose()
            };
            Ok(vec![
                wrap(needs[0], grads.r, shape)?,
                wrap(needs[1], grads.k, shape)?,
                wrap(needs[2], grads.v, shape)?,
                wrap(needs[3], grads.w, shape)?,
                wrap(needs[4], grads.u, uv.shape())?,
            ])
        }))
    }
}

/// Random `(1, T, C)` inputs with decays in a realistic range.
pub fn random_inputs(len: usize, channels: usize, heads: usize, seed: u64) -> WkvInputs<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [1, len, channels];
    let mut rand = |lo: f32, hi: f32| Tensor::from_fn(&shape, |_| rng.gen_range(lo..hi));
    let r = rand(-1.0, 1.0);
    let k = rand(-1.0, 1.0);
    let v = rand(-1.0, 1.0);
    let w = rand(-3.0, 0.0);
    let u = Tensor::from_fn(&[channels], |i| 0.5 + 0.1 * (i % 7) as f32 / 7.0);
    WkvInputs {
        r,
        k,
        v,
        w,
        u,
        heads,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchRow {
    pub len: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
}

/// Times [`wkv6_recurrent`] at each sequence length. `reps == 0` yields no rows.
pub fn bench_wkv(lens: &[usize], channels: usize, heads: usize, reps: usize) -> Result<Vec<BenchRow>> {
    head_dim(channels, heads)?;
    if reps == 0 {
        return Ok(Vec::new());
    }
    let mut rows = Vec::with_capacity(lens.len());
    for &len in lens {
        let inputs = random_inputs(len, channels, heads, len as u64);
        // warm-up
        std::hint::black_box(wkv6_recurrent(&inputs)?);
        let mut times = Vec::with_capacity(reps);
        for _ in 0..reps {
            let start = Instant::now();
            std::hint::black_box(wkv6_recurrent(&inputs)?);
            times.push(start.elapsed().as_secs_f64() * 1e3);
        }
        let mean = times.iter().sum::<f64>() / reps as f64;
        let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / reps as f64;
        rows.push(BenchRow {
            len,
            mean_ms: mean,
            std_ms: var.sqrt(),
        });
    }
    Ok(rows)
}

/// Least-squares slope of `ln(mean_ms)` against `ln(len)`.
pub fn loglog_slope(rows: &[BenchRow]) -> Option<f64> {
    if rows.len() < 2 {
        return None;
    }
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| ((r.len as f64).ln(), r.mean_ms.ln()))
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("T,mean_ms,std_ms\n");
    for r in rows {
        s.push_str(&format!("{},{:.6},{:.6}\n", r.len, r.mean_ms, r.std_ms));
    }
    s
}
