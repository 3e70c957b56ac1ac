//! Spatial mixing (WKV-Scan and its 2D combination), channel mixing, and
//! their composition into residual blocks (VRB) and groups (VRG).
//!
//! Token mixing inside a scan reads each projection input as
//!
//! ```text
//! x_ssh = shift(x)
//! x_ss  = x_ssh ⊙ tma_x + tma_xb
//! m_•   = x + x_ssh ⊙ (tma_• + x_ss)      for • in r, k, v, g
//! ```
//!
//! and the decay logits reuse `m_r`. Other groupings of the mixing
//! expression either drop a symbol or fail to reduce to `x` when the shift
//! output vanishes, so this one is used throughout.

use std::fmt;
use std::str::FromStr;

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::init::ParamBuilder;
use crate::ops::LAYER_NORM_EPS;
use crate::shifts::{OmniQuadVars, ShiftMode};
use crate::tensor::Scalar;
use crate::wkv6::SeqLayout;

/// Bias of the decay projection: `exp(-exp(b)) = 0.9`.
pub const WW_BIAS_INIT: f64 = -2.250_367_327_312_445_4;

macro_rules! string_enum {
    ($name:ident, $key:literal, { $($variant:ident => $s:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $s),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                Self::ALL.iter().copied().find(|v| v.as_str() == s).ok_or_else(|| {
                    let opts: Vec<&str> = Self::ALL.iter().map(|v| v.as_str()).collect();
                    Error::Config(format!("{} must be one of {}, got '{s}'", $key, opts.join(", ")))
                })
            }
        }
    };
}

string_enum!(FfnKind, "ffn", { ChannelMix => "channelmix", Mlp => "mlp" });
string_enum!(ScanKind, "scan", { OneD => "1d", TwoD => "2d" });
string_enum!(ScanOrder, "scan_order", { Rowwise => "rowwise", RasterFlat => "rasterflat" });
string_enum!(InitMode, "init", { Standard => "standard", ZeroResidual => "zero_residual" });

/// Hyperparameters shared by every block of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockConfig {
    pub channels: usize,
    pub heads: usize,
    pub shift: ShiftMode,
    /// Dilations of the 1x1, 3x3, 5x5 and 7x7 Omni-Quad branches.
    pub dilations: [usize; 4],
    pub ffn: FfnKind,
    pub scan: ScanKind,
    pub scan_order: ScanOrder,
    pub norm: bool,
    /// Hidden width of the channel-mix and MLP layers, as a multiple of `channels`.
    pub hidden_mult: usize,
    pub init: InitMode,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            heads: 2,
            shift: ShiftMode::OmniQuad,
            dilations: [1; 4],
            ffn: FfnKind::ChannelMix,
            scan: ScanKind::TwoD,
            scan_order: ScanOrder::Rowwise,
            norm: true,
            hidden_mult: 2,
            init: InitMode::Standard,
        }
    }
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        let c = self.channels;
        if c == 0 || self.heads == 0 || c % (4 * self.heads) != 0 {
            return Err(Error::Config(format!(
                "channels ({c}) must be a positive multiple of 4 x heads ({})",
                self.heads
            )));
        }
        if self.dilations.contains(&0) {
            return Err(Error::Config("dilations must be at least 1".into()));
        }
        if self.hidden_mult == 0 {
            return Err(Error::Config("hidden_mult must be at least 1".into()));
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        self.channels * self.hidden_mult
    }

    fn layout(&self) -> SeqLayout {
        match self.scan_order {
            ScanOrder::Rowwise => SeqLayout::NchwRows,
            ScanOrder::RasterFlat => SeqLayout::NchwRaster,
        }
    }

    fn zero_residual(&self) -> bool {
        self.init == InitMode::ZeroResidual
    }
}

/// Per-channel ramp `lo + (hi - lo) * i / (c - 1)`.
fn ramp(c: usize, lo: f64, hi: f64) -> impl Fn(usize) -> f64 {
    move |i| lo + (hi - lo) * i as f64 / (c.max(2) - 1) as f64
}

const KERNEL_NOISE: f64 = 0.01;

#[derive(Clone, Debug)]
pub enum ShiftParams {
    QShift,
    OmniShift {
        k5: ParamId,
    },
    OmniQuad {
        weights: ParamId,
        k1: ParamId,
        k3: ParamId,
        k5: ParamId,
        k7: ParamId,
    },
}

impl ShiftParams {
    fn build<T: Scalar>(b: &mut ParamBuilder<'_, T>, cfg: &BlockConfig) -> Result<Self> {
        let c = cfg.channels;
        Ok(match cfg.shift {
            ShiftMode::QShift => ShiftParams::QShift,
            ShiftMode::OmniShift => ShiftParams::OmniShift {
                k5: b.near_delta("k5", c, 5, KERNEL_NOISE)?,
            },
            ShiftMode::OmniQuad => ShiftParams::OmniQuad {
                weights: b.from_fn("weights", &[6], |i| if i == 0 { 1.0 } else { 0.0 })?,
                k1: b.near_delta("k1", c, 1, KERNEL_NOISE)?,
                k3: b.near_delta("k3", c, 3, KERNEL_NOISE)?,
                k5: b.near_delta("k5", c, 5, KERNEL_NOISE)?,
                k7: b.near_delta("k7", c, 7, KERNEL_NOISE)?,
            },
        })
    }

    fn apply<T: Scalar>(&self, cx: &Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        match self {
            ShiftParams::QShift => cx.tape.qshift(x),
            ShiftParams::OmniShift { k5 } => cx.tape.omni_shift(x, &cx.p(*k5)),
            ShiftParams::OmniQuad {
                weights,
                k1,
                k3,
                k5,
                k7,
            } => {
                let vars = OmniQuadVars {
                    weights: cx.p(*weights),
                    k1: cx.p(*k1),
                    k3: cx.p(*k3),
                    k5: cx.p(*k5),
                    k7: cx.p(*k7),
                    dilations: cx.cfg.dilations,
                };
                cx.tape.omni_quad_shift(x, &vars)
            }
        }
    }
}

/// Per-direction parameters of one scan.
#[derive(Clone, Debug)]
pub struct ScanParams {
    pub tma_x: ParamId,
    pub tma_xb: ParamId,
    pub tma_r: ParamId,
    pub tma_k: ParamId,
    pub tma_v: ParamId,
    pub tma_g: ParamId,
    pub shift: ShiftParams,
}

impl ScanParams {
    fn build<T: Scalar>(b: &mut ParamBuilder<'_, T>, cfg: &BlockConfig) -> Result<Self> {
        let c = cfg.channels;
        Ok(Self {
            tma_x: b.full("tma_x", &[c], 0.0)?,
            tma_xb: b.full("tma_xb", &[c], 0.0)?,
            tma_r: b.from_fn("tma_r", &[c], ramp(c, 0.2, 0.8))?,
            tma_k: b.from_fn("tma_k", &[c], ramp(c, 0.1, 0.9))?,
            tma_v: b.from_fn("tma_v", &[c], ramp(c, 0.3, 0.7))?,
            tma_g: b.from_fn("tma_g", &[c], ramp(c, 0.0, 1.0))?,
            shift: ShiftParams::build(&mut b.scope("shift"), cfg)?,
        })
    }
}

/// Projections shared by both scan directions.
#[derive(Clone, Debug)]
pub struct Projections {
    pub w_r: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_g: ParamId,
    pub w_ww: ParamId,
    pub ww_bias: ParamId,
    pub u: ParamId,
}

#[derive(Clone, Debug)]
pub struct Wkv2dParams {
    pub proj: Projections,
    pub horizontal: ScanParams,
    /// Absent in the one-directional variant.
    pub vertical: Option<ScanParams>,
    /// `γ_s1 ..= γ_s5`; `γ_s3` and `γ_s5` are absent without a vertical scan.
    pub gamma: [Option<ParamId>; 5],
}

impl Wkv2dParams {
    pub fn build<T: Scalar>(b: &mut ParamBuilder<'_, T>, cfg: &BlockConfig) -> Result<Self> {
        let c = cfg.channels;
        let bound = 1.0 / (c as f64).sqrt();
        let d = c / cfg.heads;
        let proj = Projections {
            w_r: b.uniform("w_r", &[c, c], bound)?,
            w_k: b.uniform("w_k", &[c, c], bound)?,
            w_v: b.uniform("w_v", &[c, c], bound)?,
            w_g: b.uniform("w_g", &[c, c], bound)?,
            w_ww: b.uniform("w_ww", &[c, c], 0.1 * bound)?,
            ww_bias: b.full("ww_bias", &[c], WW_BIAS_INIT)?,
            u: b.from_fn("u", &[c], move |i| 0.5 + 0.1 * (i % d) as f64 / d as f64)?,
        };
        let horizontal = ScanParams::build(&mut b.scope("h"), cfg)?;
        let two_d = cfg.scan == ScanKind::TwoD;
        let vertical = two_d
            .then(|| ScanParams::build(&mut b.scope("v"), cfg))
            .transpose()?;
        let mixed = if cfg.zero_residual() { 0.0 } else { 1.0 };
        let mut gamma = [None; 5];
        for (i, g) in gamma.iter_mut().enumerate() {
            if !two_d && (i == 2 || i == 4) {
                continue;
            }
            let init = if i < 3 { mixed } else { 1.0 };
            *g = Some(b.full(&format!("gamma_s{}", i + 1), &[c], init)?);
        }
        Ok(Self {
            proj,
            horizontal,
            vertical,
            gamma,
        })
    }
}

#[derive(Clone, Debug)]
pub struct VrcmParams {
    pub dw: ParamId,
    pub w_rc: ParamId,
    pub w_kc: ParamId,
    /// `(hidden, C)`: expands to the hidden width.
    pub w_vc: ParamId,
    /// `(C, hidden)`: back-projection.
    pub w_oc: ParamId,
}

#[derive(Clone, Debug)]
pub struct MlpParams {
    pub w1: ParamId,
    pub w2: ParamId,
}

#[derive(Clone, Debug)]
pub enum FfnParams {
    ChannelMix(VrcmParams),
    Mlp(MlpParams),
}

impl FfnParams {
    pub fn build<T: Scalar>(b: &mut ParamBuilder<'_, T>, cfg: &BlockConfig) -> Result<Self> {
        let (c, hid) = (cfg.channels, cfg.hidden());
        let (bc, bh) = (1.0 / (c as f64).sqrt(), 1.0 / (hid as f64).sqrt());
        let out_bound = if cfg.zero_residual() { 0.0 } else { bh };
        let out = |b: &mut ParamBuilder<'_, T>, name: &str, shape: &[usize]| {
            if out_bound == 0.0 {
                b.full(name, shape, 0.0)
            } else {
                b.uniform(name, shape, out_bound)
            }
        };
        Ok(match cfg.ffn {
            FfnKind::ChannelMix => FfnParams::ChannelMix(VrcmParams {
                dw: b.near_delta("dw", c, 3, KERNEL_NOISE)?,
                w_rc: b.uniform("w_rc", &[c, c], bc)?,
                w_kc: b.uniform("w_kc", &[c, c], bc)?,
                w_vc: b.uniform("w_vc", &[hid, c], bc)?,
                w_oc: out(b, "w_oc", &[c, hid])?,
            }),
            FfnKind::Mlp => FfnParams::Mlp(MlpParams {
                w1: b.uniform("w1", &[hid, c], bc)?,
                w2: out(b, "w2", &[c, hid])?,
            }),
        })
    }
}

#[derive(Clone, Debug)]
pub struct NormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl NormParams {
    fn build<T: Scalar>(b: &mut ParamBuilder<'_, T>, c: usize) -> Result<Self> {
        Ok(Self {
            gamma: b.full("gamma", &[c], 1.0)?,
            beta: b.full("beta", &[c], 0.0)?,
        })
    }
}

/// Dense 3x3 convolution weights.
#[derive(Clone, Debug)]
pub struct ConvParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvParams {
    pub fn build<T: Scalar>(b: &mut ParamBuilder<'_, T>, c_in: usize, c_out: usize, zero: bool) -> Result<Self> {
        let shape = [c_out, c_in, 3, 3];
        let weight = if zero {
            b.full("weight", &shape, 0.0)?
        } else {
            b.uniform("weight", &shape, 1.0 / ((9 * c_in) as f64).sqrt())?
        };
        Ok(Self {
            weight,
            bias: b.full("bias", &[c_out], 0.0)?,
        })
    }

    pub fn apply<T: Scalar>(&self, cx: &Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        cx.tape.conv2d_3x3(x, &cx.p(self.weight), &cx.p(self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct VrbParams {
    pub norm1: Option<NormParams>,
    pub mix: Wkv2dParams,
    pub norm2: Option<NormParams>,
    pub ffn: FfnParams,
    pub conv: ConvParams,
}

impl VrbParams {
    pub fn build<T: Scalar>(b: &mut ParamBuilder<'_, T>, cfg: &BlockConfig) -> Result<Self> {
        let c = cfg.channels;
        let norm1 = cfg.norm.then(|| NormParams::build(&mut b.scope("norm1"), c)).transpose()?;
        let mix = Wkv2dParams::build(&mut b.scope("mix"), cfg)?;
        let norm2 = cfg.norm.then(|| NormParams::build(&mut b.scope("norm2"), c)).transpose()?;
        let ffn = FfnParams::build(&mut b.scope("ffn"), cfg)?;
        let conv = ConvParams::build(&mut b.scope("conv"), c, c, cfg.zero_residual())?;
        Ok(Self {
            norm1,
            mix,
            norm2,
            ffn,
            conv,
        })
    }
}

#[derive(Clone, Debug)]
pub struct VrgParams {
    pub blocks: Vec<VrbParams>,
    /// Closes the group before its residual connection.
    pub conv: ConvParams,
}

impl VrgParams {
    pub fn build<T: Scalar>(b: &mut ParamBuilder<'_, T>, cfg: &BlockConfig, n_blocks: usize) -> Result<Self> {
        let blocks = (0..n_blocks)
            .map(|i| VrbParams::build(&mut b.scope(&format!("vrb{i}")), cfg))
            .collect::<Result<_>>()?;
        let conv = ConvParams::build(&mut b.scope("conv"), cfg.channels, cfg.channels, cfg.zero_residual())?;
        Ok(Self { blocks, conv })
    }
}

/// Everything a block forward pass reads.
pub struct Ctx<'a, T: Scalar> {
    pub tape: &'a Tape<T>,
    pub store: &'a ParamStore<T>,
    pub cfg: &'a BlockConfig,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(tape: &'a Tape<T>, store: &'a ParamStore<T>, cfg: &'a BlockConfig) -> Self {
        Self { tape, store, cfg }
    }

    pub fn p(&self, id: ParamId) -> Var<T> {
        self.tape.param(self.store, id)
    }
}

/// One directional scan over `(N, C, H, W)` rows (or the raster sequence).
/// Returns the WKV output and the untouched gate projection.
pub fn wkv_scan<T: Scalar>(
    cx: &Ctx<'_, T>,
    x: &Var<T>,
    proj: &Projections,
    sp: &ScanParams,
) -> Result<(Var<T>, Var<T>)> {
    let t = cx.tape;
    let x_ssh = sp.shift.apply(cx, x)?;
    let x_ss = t.add(&t.mul(&x_ssh, &cx.p(sp.tma_x))?, &cx.p(sp.tma_xb))?;
    let mix = |tma: ParamId| -> Result<Var<T>> {
        let inner = t.add(&x_ss, &cx.p(tma))?;
        t.add(x, &t.mul(&x_ssh, &inner)?)
    };
    let m_r = mix(sp.tma_r)?;
    let m_k = mix(sp.tma_k)?;
    let m_v = mix(sp.tma_v)?;
    let m_g = mix(sp.tma_g)?;
    let r = t.linear_cw(&m_r, &cx.p(proj.w_r))?;
    let k = t.linear_cw(&m_k, &cx.p(proj.w_k))?;
    let v = t.linear_cw(&m_v, &cx.p(proj.w_v))?;
    let g = t.linear_cw(&m_g, &cx.p(proj.w_g))?;
    let ww = t.add(&t.linear_cw(&m_r, &cx.p(proj.w_ww))?, &cx.p(proj.ww_bias))?;
    let out = t.wkv6(&r, &k, &v, &ww, &cx.p(proj.u), cx.cfg.heads, cx.cfg.layout())?;
    Ok((out, g))
}

/// Horizontal and vertical scans combined through the γ weights and a
/// sigmoid gate.
pub fn wkv2d_scan<T: Scalar>(cx: &Ctx<'_, T>, x: &Var<T>, p: &Wkv2dParams) -> Result<Var<T>> {
    let t = cx.tape;
    let gamma = |i: usize| -> Result<Var<T>> {
        p.gamma[i]
            .map(|id| cx.p(id))
            .ok_or_else(|| Error::invalid("wkv2d_scan", format!("gamma_s{} missing", i + 1)))
    };
    let (x_o1, g_o1) = wkv_scan(cx, x, &p.proj, &p.horizontal)?;
    let mut x_out = t.add(&t.mul(x, &gamma(0)?)?, &t.mul(&x_o1, &gamma(1)?)?)?;
    let mut g_pre = t.mul(&g_o1, &gamma(3)?)?;
    if let Some(vp) = &p.vertical {
        let (x_o2, g_o2) = wkv_scan(cx, &t.transpose_hw(x)?, &p.proj, vp)?;
        let (x_o2, g_o2) = (t.transpose_hw(&x_o2)?, t.transpose_hw(&g_o2)?);
        x_out = t.add(&x_out, &t.mul(&x_o2, &gamma(2)?)?)?;
        g_pre = t.add(&g_pre, &t.mul(&g_o2, &gamma(4)?)?)?;
    }
    t.mul(&x_out, &t.sigmoid(&g_pre))
}

/// Channel mixing with depthwise-convolution token mixing.
pub fn vrcm<T: Scalar>(cx: &Ctx<'_, T>, x: &Var<T>, p: &VrcmParams) -> Result<Var<T>> {
    let t = cx.tape;
    let s = t.depthwise_conv2d(x, &cx.p(p.dw), 1)?;
    let r = t.sigmoid(&t.linear_cw(&s, &cx.p(p.w_rc))?);
    let k = t.relu_sq(&t.linear_cw(&s, &cx.p(p.w_kc))?);
    let h = t.linear_cw(&k, &cx.p(p.w_vc))?;
    let o = t.linear_cw(&h, &cx.p(p.w_oc))?;
    t.mul(&r, &o)
}

pub fn mlp_ffn<T: Scalar>(cx: &Ctx<'_, T>, x: &Var<T>, p: &MlpParams) -> Result<Var<T>> {
    let t = cx.tape;
    let h = t.gelu(&t.linear_cw(x, &cx.p(p.w1))?);
    t.linear_cw(&h, &cx.p(p.w2))
}

fn norm<T: Scalar>(cx: &Ctx<'_, T>, x: &Var<T>, p: &Option<NormParams>) -> Result<Var<T>> {
    match p {
        Some(p) => cx
            .tape
            .layer_norm_cw(x, &cx.p(p.gamma), &cx.p(p.beta), LAYER_NORM_EPS),
        None => Ok(x.clone()),
    }
}

/// Residual block: spatial mixing, channel mixing, then a 3x3 convolution
/// on the block's own residual path.
pub fn vrb<T: Scalar>(cx: &Ctx<'_, T>, x: &Var<T>, p: &VrbParams) -> Result<Var<T>> {
    let t = cx.tape;
    let a = t.add(x, &wkv2d_scan(cx, &norm(cx, x, &p.norm1)?, &p.mix)?)?;
    let na = norm(cx, &a, &p.norm2)?;
    let f = match &p.ffn {
        FfnParams::ChannelMix(v) => vrcm(cx, &na, v)?,
        FfnParams::Mlp(m) => mlp_ffn(cx, &na, m)?,
    };
    let b = t.add(&a, &f)?;
    t.add(x, &p.conv.apply(cx, &b)?)
}

/// `x + conv(vrb_n(… vrb_1(x)))`.
pub fn vrg<T: Scalar>(cx: &Ctx<'_, T>, x: &Var<T>, p: &VrgParams) -> Result<Var<T>> {
    let mut h = x.clone();
    for block in &p.blocks {
        h = vrb(cx, &h, block)?;
    }
    cx.tape.add(x, &p.conv.apply(cx, &h)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::fd_grad_check_params;
    use crate::ops::{conv2d_3x3, elementwise, sigmoid, transpose_hw, BinaryOp};
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    type T64 = Tensor<f64>;

    fn cfg(c: usize, heads: usize) -> BlockConfig {
        BlockConfig {
            channels: c,
            heads,
            ..BlockConfig::default()
        }
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> T64 {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Replaces every parameter with random values so that no branch is
    /// degenerate.
    fn randomize(store: &mut ParamStore<f64>, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in store.iter_mut() {
            let scale = if p.name.ends_with("ww_bias") { 0.0 } else { 0.5 };
            let offset = if p.name.ends_with("ww_bias") { -1.0 } else { 0.0 };
            p.value.data_mut().iter_mut().for_each(|v| *v = offset + rng.gen_range(-scale..scale + 1e-12));
        }
    }

    fn eval<F>(store: &ParamStore<f64>, cfg: &BlockConfig, x: &T64, f: F) -> T64
    where
        F: Fn(&Ctx<'_, f64>, &Var<f64>) -> Result<Var<f64>>,
    {
        let tape = Tape::inference();
        let cx = Ctx::new(&tape, store, cfg);
        f(&cx, &tape.constant(x.clone())).unwrap().value().clone()
    }

    fn build_wkv2d(cfg: &BlockConfig, seed: u64) -> (ParamStore<f64>, Wkv2dParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = Wkv2dParams::build(&mut ParamBuilder::new(&mut store, &mut rng), cfg).unwrap();
        (store, p)
    }

    fn set(store: &mut ParamStore<f64>, id: ParamId, v: f64) {
        store.value_mut(id).fill(v);
    }

    fn linear_oracle(x: &T64, w: &T64) -> T64 {
        let [n, c, h, wd] = x.dims4().unwrap();
        let co = w.shape()[0];
        Tensor::from_fn(&[n, co, h, wd], |i| {
            let (ni, o, p) = (i / (co * h * wd), i / (h * wd) % co, i % (h * wd));
            (0..c).map(|ci| w.data()[o * c + ci] * x.data()[(ni * c + ci) * h * wd + p]).sum()
        })
    }

    fn per_channel(op: BinaryOp, x: &T64, v: &T64) -> T64 {
        elementwise(op, x, v).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(cfg(32, 2).validate().is_ok());
        assert!(cfg(12, 2).validate().is_err());
        assert!(BlockConfig { dilations: [1, 0, 1, 1], ..cfg(8, 1) }.validate().is_err());
        assert_eq!("mlp".parse::<FfnKind>().unwrap(), FfnKind::Mlp);
        assert!("2D".parse::<ScanKind>().is_err());
    }

    #[test]
    fn initial_decay_is_point_nine() {
        assert!(((-(WW_BIAS_INIT.exp())).exp() - 0.9).abs() < 1e-12);
    }

    #[test]
    fn single_token_scan_is_closed_form() {
        let cfg = cfg(4, 1);
        let (mut store, p) = build_wkv2d(&cfg, 1);
        randomize(&mut store, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[1, 4, 1, 1]);
        let (out, g) = {
            let tape = Tape::inference();
            let cx = Ctx::new(&tape, &store, &cfg);
            let (o, g) = wkv_scan(&cx, &tape.constant(x.clone()), &p.proj, &p.horizontal).unwrap();
            (o.value().clone(), g.value().clone())
        };
        // With one pixel the 3x3 and larger taps fall off the image.
        let ShiftParams::OmniQuad { weights, k1, k3, k5, k7 } = p.horizontal.shift else { panic!() };
        let wt = store.value(weights).data().to_vec();
        let centre = |id: ParamId, k: usize, c: usize| store.value(id).data()[c * k * k + k * k / 2];
        let x_ssh = Tensor::from_fn(&[1, 4, 1, 1], |c| {
            x.data()[c]
                * (wt[0] + wt[1] * centre(k1, 1, c) + wt[2] * centre(k3, 3, c) + wt[3] * centre(k5, 5, c) + wt[4] * centre(k7, 7, c))
        });
        let sp = &p.horizontal;
        let v = |id: ParamId| store.value(id).clone();
        let x_ss = per_channel(BinaryOp::Add, &per_channel(BinaryOp::Mul, &x_ssh, &v(sp.tma_x)), &v(sp.tma_xb));
        let mix = |tma: ParamId| {
            let inner = per_channel(BinaryOp::Add, &x_ss, &v(tma));
            elementwise(BinaryOp::Add, &x, &elementwise(BinaryOp::Mul, &x_ssh, &inner).unwrap()).unwrap()
        };
        let r = linear_oracle(&mix(sp.tma_r), &v(p.proj.w_r));
        let k = linear_oracle(&mix(sp.tma_k), &v(p.proj.w_k));
        let vv = linear_oracle(&mix(sp.tma_v), &v(p.proj.w_v));
        let u = v(p.proj.u);
        let bonus: f64 = (0..4).map(|i| r.data()[i] * u.data()[i] * k.data()[i]).sum();
        for j in 0..4 {
            assert!((out.data()[j] - bonus * vv.data()[j]).abs() < 1e-12);
        }
        assert!(g.max_abs_diff(&linear_oracle(&mix(sp.tma_g), &v(p.proj.w_g))).unwrap() < 1e-12);
    }

    #[test]
    fn rows_are_independent() {
        let cfg = cfg(4, 2);
        let (mut store, p) = build_wkv2d(&cfg, 4);
        randomize(&mut store, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_tensor(&mut rng, &[1, 4, 2, 3]);
        let mut bumped = x.clone();
        for c in 0..4 {
            bumped.data_mut()[c * 6 + 3..c * 6 + 6].iter_mut().for_each(|v| *v += 0.5);
        }
        // Keep only the pointwise shift branches so rows cannot mix.
        let ShiftParams::OmniQuad { weights, .. } = p.horizontal.shift else { panic!() };
        store.value_mut(weights).data_mut()[2..].iter_mut().for_each(|v| *v = 0.0);
        let scan = |x: &T64| {
            let tape = Tape::inference();
            let cx = Ctx::new(&tape, &store, &cfg);
            let (o, g) = wkv_scan(&cx, &tape.constant(x.clone()), &p.proj, &p.horizontal).unwrap();
            (o.value().clone(), g.value().clone())
        };
        let (a, ga) = scan(&x);
        let (b, gb) = scan(&bumped);
        for c in 0..4 {
            assert_eq!(a.data()[c * 6..c * 6 + 3], b.data()[c * 6..c * 6 + 3]);
            assert_eq!(ga.data()[c * 6..c * 6 + 3], gb.data()[c * 6..c * 6 + 3]);
            assert_ne!(a.data()[c * 6 + 3..c * 6 + 6], b.data()[c * 6 + 3..c * 6 + 6]);
        }
    }

    #[test]
    fn zero_input_zero_output() {
        let cfg = cfg(8, 2);
        let (store, p) = build_wkv2d(&cfg, 7);
        let x = Tensor::zeros(&[1, 8, 3, 4]);
        let y = eval(&store, &cfg, &x, |cx, x| wkv2d_scan(cx, x, &p));
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn degenerate_gammas_halve_input() {
        let cfg = cfg(8, 2);
        let (mut store, p) = build_wkv2d(&cfg, 8);
        randomize(&mut store, 9);
        for (i, g) in p.gamma.iter().enumerate() {
            set(&mut store, g.unwrap(), if i == 0 { 1.0 } else { 0.0 });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = rand_tensor(&mut rng, &[2, 8, 3, 5]);
        let y = eval(&store, &cfg, &x, |cx, x| wkv2d_scan(cx, x, &p));
        assert!(y.max_abs_diff(&x.map(|v| 0.5 * v)).unwrap() <= 1e-15);
    }

    #[test]
    fn wkv2d_matches_transcription() {
        let cfg = cfg(8, 2);
        let (mut store, p) = build_wkv2d(&cfg, 11);
        randomize(&mut store, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = rand_tensor(&mut rng, &[1, 8, 4, 4]);
        let y = eval(&store, &cfg, &x, |cx, x| wkv2d_scan(cx, x, &p));
        let tape = Tape::inference();
        let cx = Ctx::new(&tape, &store, &cfg);
        let (xo1, go1) = wkv_scan(&cx, &tape.constant(x.clone()), &p.proj, &p.horizontal).unwrap();
        let vp = p.vertical.as_ref().unwrap();
        let (xo2, go2) = wkv_scan(&cx, &tape.constant(transpose_hw(&x).unwrap()), &p.proj, vp).unwrap();
        let (xo2, go2) = (transpose_hw(xo2.value()).unwrap(), transpose_hw(go2.value()).unwrap());
        let gm = |i: usize| store.value(p.gamma[i].unwrap()).data().to_vec();
        let expect = Tensor::from_fn(x.shape(), |i| {
            let c = i / 16;
            let x_out = x.data()[i] * gm(0)[c] + xo1.value().data()[i] * gm(1)[c] + xo2.data()[i] * gm(2)[c];
            let g = go1.value().data()[i] * gm(3)[c] + go2.data()[i] * gm(4)[c];
            x_out / (1.0 + (-g).exp())
        });
        assert!(y.max_abs_diff(&expect).unwrap() <= 1e-6);
    }

    #[test]
    fn one_d_scan_skips_vertical() {
        let cfg = BlockConfig { scan: ScanKind::OneD, ..cfg(8, 2) };
        let (mut store, p) = build_wkv2d(&cfg, 14);
        assert!(p.vertical.is_none() && p.gamma[2].is_none() && p.gamma[4].is_none());
        randomize(&mut store, 15);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let x = rand_tensor(&mut rng, &[1, 8, 3, 4]);
        let y = eval(&store, &cfg, &x, |cx, x| wkv2d_scan(cx, x, &p));
        let tape = Tape::inference();
        let cx = Ctx::new(&tape, &store, &cfg);
        let (xo, go) = wkv_scan(&cx, &tape.constant(x.clone()), &p.proj, &p.horizontal).unwrap();
        let gm = |i: usize| store.value(p.gamma[i].unwrap()).data().to_vec();
        let expect = Tensor::from_fn(x.shape(), |i| {
            let c = i / 12;
            (x.data()[i] * gm(0)[c] + xo.value().data()[i] * gm(1)[c])
                * sigmoid(&Tensor::scalar(go.value().data()[i] * gm(3)[c])).data()[0]
        });
        assert!(y.max_abs_diff(&expect).unwrap() <= 1e-12);
    }

    #[test]
    fn transposition_equivariance_of_symmetric_params() {
        for order in [ScanOrder::Rowwise, ScanOrder::RasterFlat] {
            let cfg = BlockConfig { scan_order: order, ..cfg(8, 2) };
            let (mut store, p) = build_wkv2d(&cfg, 17);
            randomize(&mut store, 18);
            let names: Vec<(String, String)> = store
                .iter()
                .filter(|q| q.name.starts_with("h."))
                .map(|q| (q.name.clone(), format!("v.{}", &q.name[2..])))
                .collect();
            for (h, v) in names {
                let val = store.value(store.id_of(&h).unwrap()).clone();
                *store.value_mut(store.id_of(&v).unwrap()) = val;
            }
            for (a, b) in [(1, 2), (3, 4)] {
                let val = store.value(p.gamma[a].unwrap()).clone();
                *store.value_mut(p.gamma[b].unwrap()) = val;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(19);
            let x = rand_tensor(&mut rng, &[1, 8, 3, 5]);
            let direct = eval(&store, &cfg, &x, |cx, x| wkv2d_scan(cx, x, &p));
            let xt = transpose_hw(&x).unwrap();
            let via = transpose_hw(&eval(&store, &cfg, &xt, |cx, x| wkv2d_scan(cx, x, &p))).unwrap();
            assert!(direct.max_abs_diff(&via).unwrap() <= 1e-12, "{order:?}");
        }
    }

    fn build_vrb(cfg: &BlockConfig, seed: u64) -> (ParamStore<f64>, VrbParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = VrbParams::build(&mut ParamBuilder::new(&mut store, &mut rng), cfg).unwrap();
        (store, p)
    }

    #[test]
    fn vrcm_cases() {
        let cfg = cfg(4, 1);
        let (mut store, p) = build_vrb(&cfg, 20);
        randomize(&mut store, 21);
        let FfnParams::ChannelMix(v) = p.ffn.clone() else { panic!() };
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let x = rand_tensor(&mut rng, &[1, 4, 3, 3]);
        let y = eval(&store, &cfg, &x, |cx, x| vrcm(cx, x, &v));
        // direct transcription, per pixel
        let val = |id: ParamId| store.value(id).clone();
        let s = crate::ops::depthwise_conv2d(&x, &val(v.dw), 1).unwrap();
        let expect = Tensor::from_fn(x.shape(), |i| {
            let (o, px) = (i / 9, i % 9);
            let sv: Vec<f64> = (0..4).map(|c| s.data()[c * 9 + px]).collect();
            let dot = |w: &T64, row: usize, v: &[f64]| -> f64 { v.iter().enumerate().map(|(j, x)| w.data()[row * v.len() + j] * x).sum() };
            let r = 1.0 / (1.0 + (-dot(&val(v.w_rc), o, &sv)).exp());
            let k: Vec<f64> = (0..4).map(|c| dot(&val(v.w_kc), c, &sv).max(0.0).powi(2)).collect();
            let h: Vec<f64> = (0..8).map(|j| dot(&val(v.w_vc), j, &k)).collect();
            r * dot(&val(v.w_oc), o, &h)
        });
        assert!(y.max_abs_diff(&expect).unwrap() <= 1e-6);
        // negative k pre-activations kill the output regardless of r
        let mut neg = store.clone();
        neg.value_mut(v.w_kc).fill(0.0);
        for c in 0..4 {
            neg.value_mut(v.w_kc).data_mut()[c * 4 + c] = -1.0;
        }
        neg.value_mut(v.dw).fill(0.0);
        for c in 0..4 {
            neg.value_mut(v.dw).data_mut()[c * 9 + 4] = 1.0;
        }
        let pos = x.map(|v| v.abs() + 0.1);
        assert!(eval(&neg, &cfg, &pos, |cx, x| vrcm(cx, x, &v)).data().iter().all(|&v| v == 0.0));
        let mut zero = store.clone();
        for q in zero.iter_mut() {
            q.value.fill(0.0);
        }
        assert!(eval(&zero, &cfg, &x, |cx, x| vrcm(cx, x, &v)).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mlp_cases() {
        let cfg = BlockConfig { ffn: FfnKind::Mlp, ..cfg(4, 1) };
        let (mut store, p) = build_vrb(&cfg, 23);
        randomize(&mut store, 24);
        let FfnParams::Mlp(m) = p.ffn.clone() else { panic!() };
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let x = rand_tensor(&mut rng, &[2, 4, 2, 3]);
        let y = eval(&store, &cfg, &x, |cx, x| mlp_ffn(cx, x, &m));
        let gelu = |v: f64| 0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh());
        let h = linear_oracle(&x, store.value(m.w1)).map(gelu);
        let expect = linear_oracle(&h, store.value(m.w2));
        assert!(y.max_abs_diff(&expect).unwrap() <= 1e-6);
        let mut zero = store.clone();
        zero.value_mut(m.w1).fill(0.0);
        assert!(eval(&zero, &cfg, &x, |cx, x| mlp_ffn(cx, x, &m)).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_residual_blocks_are_identity() {
        for ffn in [FfnKind::ChannelMix, FfnKind::Mlp] {
            for shift in ShiftMode::ALL {
                let cfg = BlockConfig { init: InitMode::ZeroResidual, ffn, shift, ..cfg(8, 2) };
                let mut store = ParamStore::new();
                let mut rng = ChaCha8Rng::seed_from_u64(26);
                let g = VrgParams::build(&mut ParamBuilder::new(&mut store, &mut rng), &cfg, 2).unwrap();
                let x = rand_tensor(&mut rng, &[1, 8, 4, 5]);
                assert_eq!(eval(&store, &cfg, &x, |cx, x| vrb(cx, x, &g.blocks[0])), x);
                assert_eq!(eval(&store, &cfg, &x, |cx, x| vrg(cx, x, &g)), x);
            }
        }
    }

    #[test]
    fn vrb_with_zero_conv_is_identity() {
        let cfg = cfg(8, 2);
        let (mut store, p) = build_vrb(&cfg, 27);
        randomize(&mut store, 28);
        store.value_mut(p.conv.weight).fill(0.0);
        store.value_mut(p.conv.bias).fill(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let x = rand_tensor(&mut rng, &[2, 8, 3, 6]);
        assert_eq!(eval(&store, &cfg, &x, |cx, x| vrb(cx, x, &p)), x);
    }

    #[test]
    fn vrg_matches_manual_composition() {
        let cfg = cfg(8, 2);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let g = VrgParams::build(&mut ParamBuilder::new(&mut store, &mut rng), &cfg, 2).unwrap();
        randomize(&mut store, 31);
        let x = rand_tensor(&mut rng, &[1, 8, 4, 4]);
        let y = eval(&store, &cfg, &x, |cx, x| vrg(cx, x, &g));
        let h1 = eval(&store, &cfg, &x, |cx, x| vrb(cx, x, &g.blocks[0]));
        let h2 = eval(&store, &cfg, &h1, |cx, x| vrb(cx, x, &g.blocks[1]));
        let tail = conv2d_3x3(&h2, store.value(g.conv.weight), store.value(g.conv.bias)).unwrap();
        let expect = elementwise(BinaryOp::Add, &x, &tail).unwrap();
        assert_eq!(y, expect);
        for shape in [[1, 8, 1, 1], [2, 8, 2, 7], [1, 8, 5, 3]] {
            let x = rand_tensor(&mut rng, &shape);
            assert_eq!(eval(&store, &cfg, &x, |cx, x| vrg(cx, x, &g)).shape(), &shape);
        }
    }

    #[test]
    fn vrb_gradients() {
        for (ffn, shift) in [(FfnKind::ChannelMix, ShiftMode::OmniQuad), (FfnKind::Mlp, ShiftMode::QShift)] {
            let cfg = BlockConfig { ffn, shift, ..cfg(8, 2) };
            let (mut store, p) = build_vrb(&cfg, 32);
            randomize(&mut store, 33);
            let mut rng = ChaCha8Rng::seed_from_u64(34);
            let x = rand_tensor(&mut rng, &[1, 8, 6, 6]);
            let w = rand_tensor(&mut rng, &[1, 8, 6, 6]);
            let f = |tape: &Tape<f64>, store: &ParamStore<f64>| {
                let cx = Ctx::new(tape, store, &cfg);
                tape.weighted_sum(&vrb(&cx, &tape.constant(x.clone()), &p)?, &w)
            };
            let (err, name) = fd_grad_check_params(f, &store, 1e-4).unwrap();
            assert!(err <= 1e-3, "{ffn:?}/{shift:?}: {err} at {name}");
        }
    }
}
