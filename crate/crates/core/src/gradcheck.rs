//! Registered finite-difference gradient fixtures, grouped by suite.
//!
//! Every fixture runs in f64 with central differences of step
//! [`STEP`] and reports the worst relative error over all checked
//! coordinates. A fixture passes at or below [`TOLERANCE`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{fd_grad_check, fd_grad_check_params, ParamStore, Tape, Var};
use crate::blocks::{mlp_ffn, vrb, vrcm, wkv2d_scan, BlockConfig, Ctx, FfnKind, FfnParams, VrbParams, Wkv2dParams};
use crate::error::{Error, Result};
use crate::init::ParamBuilder;
use crate::model::{Model, ModelConfig};
use crate::ops::LAYER_NORM_EPS;
use crate::shifts::{OmniQuadVars, ShiftMode};
use crate::tensor::Tensor;
use crate::wkv6::SeqLayout;

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-3;

pub const SUITES: [&str; 5] = ["tensor", "wkv6", "shifts", "blocks", "model"];

type T64 = Tensor<f64>;

pub struct Fixture {
    pub suite: &'static str,
    pub name: &'static str,
    check: fn() -> Result<(f64, String)>,
}

impl Fixture {
    /// Worst relative error and where it occurred.
    pub fn run(&self) -> Result<(f64, String)> {
        (self.check)()
    }
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> T64 {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Checks `f` with respect to each input in turn, contracting the output
/// with fixed random weights.
fn check_inputs<F>(inputs: &[(&str, T64)], seed: u64, f: F) -> Result<(f64, String)>
where
    F: Fn(&Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    let probe = Tape::inference();
    let consts: Vec<Var<f64>> = inputs.iter().map(|(_, t)| probe.constant(t.clone())).collect();
    let shape = f(&probe, &consts)?.shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_t(&mut rng, &shape, -1.0, 1.0);
    let mut worst = (0.0, String::new());
    for (which, (name, x)) in inputs.iter().enumerate() {
        let err = fd_grad_check(
            |t, v| {
                let vars: Vec<Var<f64>> = inputs
                    .iter()
                    .enumerate()
                    .map(|(i, (_, x))| if i == which { v.clone() } else { t.constant(x.clone()) })
                    .collect();
                t.weighted_sum(&f(t, &vars)?, &w)
            },
            x,
            STEP,
        )?;
        if err >= worst.0 {
            worst = (err, name.to_string());
        }
    }
    Ok(worst)
}

fn unary(seed: u64, lo: f64, hi: f64, op: fn(&Tape<f64>, &Var<f64>) -> Result<Var<f64>>) -> Result<(f64, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_t(&mut rng, &[2, 3, 3, 4], lo, hi);
    check_inputs(&[("x", x)], seed + 1, |t, v| op(t, &v[0]))
}

fn binary(seed: u64, b_shape: &[usize], op: fn(&Tape<f64>, &Var<f64>, &Var<f64>) -> Result<Var<f64>>) -> Result<(f64, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = rand_t(&mut rng, &[2, 3, 3, 4], -1.0, 1.0);
    let b = rand_t(&mut rng, b_shape, -1.0, 1.0);
    check_inputs(&[("a", a), ("b", b)], seed + 1, |t, v| op(t, &v[0], &v[1]))
}

fn fx_add() -> Result<(f64, String)> {
    binary(1, &[2, 3, 3, 4], |t, a, b| t.add(a, b))
}

fn fx_sub() -> Result<(f64, String)> {
    binary(2, &[2, 3, 3, 4], |t, a, b| t.sub(a, b))
}

fn fx_mul() -> Result<(f64, String)> {
    binary(3, &[2, 3, 3, 4], |t, a, b| t.mul(a, b))
}

fn fx_mul_per_channel() -> Result<(f64, String)> {
    binary(4, &[3], |t, a, b| t.mul(a, b))
}

fn fx_add_per_channel() -> Result<(f64, String)> {
    binary(5, &[1, 3, 1, 1], |t, a, b| t.add(a, b))
}

fn fx_scale() -> Result<(f64, String)> {
    unary(6, -1.0, 1.0, |t, x| Ok(t.scale(x, -1.7)))
}

fn fx_sigmoid() -> Result<(f64, String)> {
    unary(7, -3.0, 3.0, |t, x| Ok(t.sigmoid(x)))
}

fn fx_relu_sq() -> Result<(f64, String)> {
    // kept away from the kink at 0
    unary(8, 0.1, 2.0, |t, x| Ok(t.relu_sq(x)))
}

fn fx_gelu() -> Result<(f64, String)> {
    unary(9, -3.0, 3.0, |t, x| Ok(t.gelu(x)))
}

fn fx_sum() -> Result<(f64, String)> {
    unary(10, -1.0, 1.0, |t, x| Ok(t.sum(x)))
}

fn fx_l1_loss() -> Result<(f64, String)> {
    binary(11, &[2, 3, 3, 4], |t, a, b| t.l1_loss(a, b))
}

fn fx_affine_nc() -> Result<(f64, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let s = rand_t(&mut rng, &[2, 3], 0.5, 2.0);
    let m = rand_t(&mut rng, &[2, 3], -1.0, 1.0);
    let x = rand_t(&mut rng, &[2, 3, 3, 4], -1.0, 1.0);
    check_inputs(&[("x", x)], 13, |t, v| t.affine_nc(&v[0], &s, &m))
}

fn fx_transpose_hw() -> Result<(f64, String)> {
    unary(14, -1.0, 1.0, |t, x| t.transpose_hw(x))
}

fn fx_pixel_shuffle() -> Result<(f64, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = rand_t(&mut rng, &[1, 12, 2, 3], -1.0, 1.0);
    check_inputs(&[("x", x)], 16, |t, v| t.pixel_shuffle(&v[0], 2))
}

fn fx_linear() -> Result<(f64, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = rand_t(&mut rng, &[2, 4, 3, 2], -1.0, 1.0);
    let w = rand_t(&mut rng, &[5, 4], -1.0, 1.0);
    check_inputs(&[("x", x), ("w", w)], 18, |t, v| t.linear_cw(&v[0], &v[1]))
}

fn fx_layer_norm() -> Result<(f64, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let x = rand_t(&mut rng, &[2, 5, 3, 2], -1.0, 1.0);
    let g = rand_t(&mut rng, &[5], 0.5, 1.5);
    let b = rand_t(&mut rng, &[5], -0.5, 0.5);
    check_inputs(&[("x", x), ("gamma", g), ("beta", b)], 20, |t, v| {
        t.layer_norm_cw(&v[0], &v[1], &v[2], LAYER_NORM_EPS)
    })
}

fn fx_depthwise() -> Result<(f64, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = rand_t(&mut rng, &[1, 3, 5, 6], -1.0, 1.0);
    let k = rand_t(&mut rng, &[3, 1, 3, 3], -1.0, 1.0);
    check_inputs(&[("x", x), ("kernel", k)], 22, |t, v| t.depthwise_conv2d(&v[0], &v[1], 2))
}

fn fx_conv3x3() -> Result<(f64, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let x = rand_t(&mut rng, &[2, 3, 4, 5], -1.0, 1.0);
    let k = rand_t(&mut rng, &[4, 3, 3, 3], -1.0, 1.0);
    let b = rand_t(&mut rng, &[4], -1.0, 1.0);
    check_inputs(&[("x", x), ("kernel", k), ("bias", b)], 24, |t, v| t.conv2d_3x3(&v[0], &v[1], &v[2]))
}

fn wkv_fixture(seed: u64, shape: &[usize], heads: usize, layout: SeqLayout) -> Result<(f64, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = match layout {
        SeqLayout::Ntc => shape[2],
        _ => shape[1],
    };
    let r = rand_t(&mut rng, shape, -1.0, 1.0);
    let k = rand_t(&mut rng, shape, -1.0, 1.0);
    let v = rand_t(&mut rng, shape, -1.0, 1.0);
    let w = rand_t(&mut rng, shape, -2.0, 0.5);
    let u = rand_t(&mut rng, &[c], -0.5, 1.0);
    check_inputs(&[("r", r), ("k", k), ("v", v), ("w", w), ("u", u)], seed + 1, |t, x| {
        t.wkv6(&x[0], &x[1], &x[2], &x[3], &x[4], heads, layout)
    })
}

fn fx_wkv_ntc() -> Result<(f64, String)> {
    wkv_fixture(30, &[2, 5, 4], 2, SeqLayout::Ntc)
}

fn fx_wkv_rows() -> Result<(f64, String)> {
    wkv_fixture(32, &[1, 4, 3, 4], 1, SeqLayout::NchwRows)
}

fn fx_wkv_raster() -> Result<(f64, String)> {
    wkv_fixture(34, &[1, 4, 2, 3], 2, SeqLayout::NchwRaster)
}

fn fx_qshift() -> Result<(f64, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let x = rand_t(&mut rng, &[1, 4, 4, 5], -1.0, 1.0);
    check_inputs(&[("x", x)], 41, |t, v| t.qshift(&v[0]))
}

fn fx_omni_shift() -> Result<(f64, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let x = rand_t(&mut rng, &[1, 3, 6, 6], -1.0, 1.0);
    let k = rand_t(&mut rng, &[3, 1, 5, 5], -1.0, 1.0);
    check_inputs(&[("x", x), ("k5", k)], 43, |t, v| t.omni_shift(&v[0], &v[1]))
}

fn fx_omni_quad_shift() -> Result<(f64, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let c = 4;
    let x = rand_t(&mut rng, &[1, c, 6, 7], -1.0, 1.0);
    let weights = rand_t(&mut rng, &[6], -1.0, 1.0);
    let k1 = rand_t(&mut rng, &[c, 1, 1, 1], -1.0, 1.0);
    let k3 = rand_t(&mut rng, &[c, 1, 3, 3], -1.0, 1.0);
    let k5 = rand_t(&mut rng, &[c, 1, 5, 5], -1.0, 1.0);
    let k7 = rand_t(&mut rng, &[c, 1, 7, 7], -1.0, 1.0);
    let inputs = [("x", x), ("weights", weights), ("k1", k1), ("k3", k3), ("k5", k5), ("k7", k7)];
    check_inputs(&inputs, 45, |t, v| {
        let vars = OmniQuadVars {
            weights: v[1].clone(),
            k1: v[2].clone(),
            k3: v[3].clone(),
            k5: v[4].clone(),
            k7: v[5].clone(),
            dilations: [1, 2, 1, 1],
        };
        t.omni_quad_shift(&v[0], &vars)
    })
}

fn block_cfg(ffn: FfnKind) -> BlockConfig {
    BlockConfig {
        channels: 8,
        heads: 2,
        ffn,
        ..BlockConfig::default()
    }
}

/// Moves every parameter off its structured init so no branch is
/// degenerate; decay biases stay moderate.
fn randomize(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in store.iter_mut() {
        let bias = p.name.ends_with("ww_bias");
        p.value
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = if bias { -1.0 + rng.gen_range(-0.2..0.2) } else { rng.gen_range(-0.5..0.5) });
    }
}

/// Checks all parameters and the input of a block-level function.
fn block_fixture<P, B, F>(seed: u64, cfg: &BlockConfig, shape: &[usize], build: B, f: F) -> Result<(f64, String)>
where
    B: Fn(&mut ParamBuilder<'_, f64>, &BlockConfig) -> Result<P>,
    F: Fn(&Ctx<'_, f64>, &Var<f64>, &P) -> Result<Var<f64>>,
{
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = build(&mut ParamBuilder::new(&mut store, &mut rng), cfg)?;
    randomize(&mut store, seed + 1);
    let x = rand_t(&mut rng, shape, -1.0, 1.0);
    let w = {
        let tape = Tape::inference();
        let cx = Ctx::new(&tape, &store, cfg);
        let y = f(&cx, &tape.constant(x.clone()), &p)?;
        rand_t(&mut rng, y.shape(), -1.0, 1.0)
    };
    let (perr, pname) = fd_grad_check_params(
        |tape, store| {
            let cx = Ctx::new(tape, store, cfg);
            tape.weighted_sum(&f(&cx, &tape.constant(x.clone()), &p)?, &w)
        },
        &store,
        STEP,
    )?;
    let xerr = fd_grad_check(
        |tape, v| {
            let cx = Ctx::new(tape, &store, cfg);
            tape.weighted_sum(&f(&cx, v, &p)?, &w)
        },
        &x,
        STEP,
    )?;
    Ok(if xerr > perr { (xerr, "input".into()) } else { (perr, pname) })
}

fn fx_wkv2d_scan() -> Result<(f64, String)> {
    let cfg = block_cfg(FfnKind::ChannelMix);
    block_fixture(50, &cfg, &[1, 8, 3, 4], Wkv2dParams::build, |cx, x, p| wkv2d_scan(cx, x, p))
}

fn fx_wkv1d_scan() -> Result<(f64, String)> {
    let cfg = BlockConfig {
        scan: crate::blocks::ScanKind::OneD,
        shift: ShiftMode::QShift,
        ..block_cfg(FfnKind::ChannelMix)
    };
    block_fixture(52, &cfg, &[1, 8, 3, 4], Wkv2dParams::build, |cx, x, p| wkv2d_scan(cx, x, p))
}

fn fx_vrcm() -> Result<(f64, String)> {
    let cfg = block_cfg(FfnKind::ChannelMix);
    block_fixture(54, &cfg, &[1, 8, 3, 4], FfnParams::build, |cx, x, p| match p {
        FfnParams::ChannelMix(p) => vrcm(cx, x, p),
        FfnParams::Mlp(_) => Err(Error::invalid("gradcheck", "expected channel mix")),
    })
}

fn fx_mlp_ffn() -> Result<(f64, String)> {
    let cfg = block_cfg(FfnKind::Mlp);
    block_fixture(56, &cfg, &[1, 8, 3, 4], FfnParams::build, |cx, x, p| match p {
        FfnParams::Mlp(p) => mlp_ffn(cx, x, p),
        FfnParams::ChannelMix(_) => Err(Error::invalid("gradcheck", "expected MLP")),
    })
}

fn fx_vrb() -> Result<(f64, String)> {
    let cfg = block_cfg(FfnKind::ChannelMix);
    block_fixture(58, &cfg, &[1, 8, 4, 4], VrbParams::build, |cx, x, p| vrb(cx, x, p))
}

fn fx_model() -> Result<(f64, String)> {
    let mut cfg = ModelConfig::preset("desk")?;
    cfg.block.channels = 8;
    cfg.n_vrg = 1;
    cfg.vrbs_per_vrg = 1;
    let mut m = Model::<f64>::new(cfg)?;
    randomize(&mut m.store, 60);
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let lr = rand_t(&mut rng, &[1, 3, 4, 4], 0.0, 1.0);
    // Targets far from any output keep L1 away from its kink.
    let target = rand_t(&mut rng, &[1, 3, 8, 8], 5.0, 6.0);
    let (cfg, params) = (m.cfg.clone(), m.params.clone());
    fd_grad_check_params(
        |tape, store| {
            let model = Model {
                cfg: cfg.clone(),
                store: store.clone(),
                params: params.clone(),
            };
            let y = model.forward(tape, &lr)?;
            tape.l1_loss(&y, &tape.constant(target.clone()))
        },
        &m.store,
        STEP,
    )
}

macro_rules! fixtures {
    ($($suite:literal $name:literal $f:ident),* $(,)?) => {
        vec![$(Fixture { suite: $suite, name: $name, check: $f }),*]
    };
}

/// Every registered fixture, in suite order.
pub fn fixtures() -> Vec<Fixture> {
    fixtures![
        "tensor" "add" fx_add,
        "tensor" "sub" fx_sub,
        "tensor" "mul" fx_mul,
        "tensor" "mul_per_channel" fx_mul_per_channel,
        "tensor" "add_per_channel" fx_add_per_channel,
        "tensor" "scale" fx_scale,
        "tensor" "sigmoid" fx_sigmoid,
        "tensor" "relu_sq" fx_relu_sq,
        "tensor" "gelu" fx_gelu,
        "tensor" "sum" fx_sum,
        "tensor" "l1_loss" fx_l1_loss,
        "tensor" "affine_nc" fx_affine_nc,
        "tensor" "transpose_hw" fx_transpose_hw,
        "tensor" "pixel_shuffle" fx_pixel_shuffle,
        "tensor" "linear_cw" fx_linear,
        "tensor" "layer_norm_cw" fx_layer_norm,
        "tensor" "depthwise_conv2d" fx_depthwise,
        "tensor" "conv2d_3x3" fx_conv3x3,
        "wkv6" "wkv6_ntc" fx_wkv_ntc,
        "wkv6" "wkv6_rows" fx_wkv_rows,
        "wkv6" "wkv6_raster" fx_wkv_raster,
        "shifts" "qshift" fx_qshift,
        "shifts" "omni_shift" fx_omni_shift,
        "shifts" "omni_quad_shift" fx_omni_quad_shift,
        "blocks" "wkv2d_scan" fx_wkv2d_scan,
        "blocks" "wkv_scan_1d" fx_wkv1d_scan,
        "blocks" "vrcm" fx_vrcm,
        "blocks" "mlp_ffn" fx_mlp_ffn,
        "blocks" "vrb" fx_vrb,
        "model" "tiny_model_l1" fx_model,
    ]
}

/// Fixtures of one suite, or all of them for `"all"`.
pub fn select(module: &str) -> Result<Vec<Fixture>> {
    if module == "all" {
        return Ok(fixtures());
    }
    if !SUITES.contains(&module) {
        return Err(Error::Config(format!(
            "unknown gradcheck module '{module}', expected all, {}",
            SUITES.join(", ")
        )));
    }
    Ok(fixtures().into_iter().filter(|f| f.suite == module).collect())
}
