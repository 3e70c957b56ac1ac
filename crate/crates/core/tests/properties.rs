//! Shape algebra and cross-module properties over random valid inputs.

use omnirwkvsr::blocks::{vrb, vrg, BlockConfig, Ctx, FfnKind, ScanKind, VrgParams};
use omnirwkvsr::init::ParamBuilder;
use omnirwkvsr::metrics::{psnr_y, ssim_y};
use omnirwkvsr::model::{Model, ModelConfig};
use omnirwkvsr::ops::{conv2d_3x3, depthwise_conv2d, layer_norm_cw, linear_cw, pixel_shuffle, transpose_hw};
use omnirwkvsr::shifts::ShiftMode;
use omnirwkvsr::{ParamStore, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand(seed: u64, shape: &[usize]) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn op_output_shapes(n in 1usize..3, c in 1usize..5, co in 1usize..5, h in 1usize..9, w in 1usize..9,
                        k in prop::sample::select(vec![1usize, 3, 5, 7]), d in 1usize..4, r in 1usize..4) {
        let x = rand(1, &[n, c, h, w]);
        let dw = depthwise_conv2d(&x, &rand(2, &[c, 1, k, k]), d).unwrap();
        prop_assert_eq!(dw.shape(), &[n, c, h, w]);
        let y = conv2d_3x3(&x, &rand(3, &[co, c, 3, 3]), &rand(4, &[co])).unwrap();
        prop_assert_eq!(y.shape(), &[n, co, h, w]);
        let lin = linear_cw(&x, &rand(5, &[co, c])).unwrap();
        prop_assert_eq!(lin.shape(), &[n, co, h, w]);
        let ln = layer_norm_cw(&x, &rand(6, &[c]), &rand(7, &[c]), 1e-5).unwrap();
        prop_assert_eq!(ln.shape(), &[n, c, h, w]);
        let t = transpose_hw(&x).unwrap();
        prop_assert_eq!(t.shape(), &[n, c, w, h]);
        let ps = pixel_shuffle(&rand(8, &[n, c * r * r, h, w]), r).unwrap();
        prop_assert_eq!(ps.shape(), &[n, c, h * r, w * r]);
    }

    #[test]
    fn blocks_preserve_shape(heads in 1usize..3, dmul in 1usize..3, h in 1usize..6, w in 1usize..6,
                             mlp in any::<bool>(), one_d in any::<bool>(), shift in 0usize..3, seed in 0u64..1000) {
        let c = 4 * heads * dmul;
        let cfg = BlockConfig {
            channels: c,
            heads,
            ffn: if mlp { FfnKind::Mlp } else { FfnKind::ChannelMix },
            scan: if one_d { ScanKind::OneD } else { ScanKind::TwoD },
            shift: ShiftMode::ALL[shift],
            ..BlockConfig::default()
        };
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = VrgParams::build(&mut ParamBuilder::new(&mut store, &mut rng), &cfg, 2).unwrap();
        let tape = Tape::inference();
        let cx = Ctx::new(&tape, &store, &cfg);
        let x = tape.constant(rand(seed, &[1, c, h, w]));
        let b = vrb(&cx, &x, &g.blocks[0]).unwrap();
        prop_assert_eq!(b.shape(), &[1, c, h, w]);
        let y = vrg(&cx, &x, &g).unwrap();
        prop_assert_eq!(y.shape(), &[1, c, h, w]);
        prop_assert!(y.value().is_finite());
    }

    #[test]
    fn model_output_is_scale_times_input(n in 1usize..3, h in 1usize..10, w in 1usize..10, x4 in any::<bool>()) {
        let mut cfg = ModelConfig::preset("desk").unwrap();
        cfg.block.channels = 8;
        cfg.block.heads = 1;
        cfg.n_vrg = 1;
        cfg.vrbs_per_vrg = 1;
        cfg.scale = if x4 { 4 } else { 2 };
        let m = Model::<f32>::new(cfg).unwrap();
        let x = rand(7, &[n, 3, h, w]).map(|v| 0.5 + 0.5 * v);
        let y = m.infer(&x).unwrap();
        let s = if x4 { 4 } else { 2 };
        prop_assert_eq!(y.shape(), &[n, 3, h * s, w * s]);
        prop_assert!(y.is_finite());
    }

    #[test]
    fn ssim_bounded_and_one_only_when_equal(seed in 0u64..10_000, amp in 0.0f64..1.0, crop in 0usize..3) {
        let a = rand(seed, &[1, 3, 16, 16]).cast::<f64>().map(|v| 0.5 + 0.5 * v);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let b = Tensor::from_fn(a.shape(), |i| (a.data()[i] + amp * rng.gen_range(-1.0..1.0)).clamp(0.0, 1.0));
        let s = ssim_y(&a, &b, crop).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert_eq!(s == 1.0, a == b);
        prop_assert_eq!(psnr_y(&a, &b, crop).unwrap(), psnr_y(&b, &a, crop).unwrap());
    }
}

#[test]
fn checkpoint_round_trip_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let mut cfg = ModelConfig::preset("desk").unwrap();
    cfg.seed = 11;
    let m = Model::<f32>::new(cfg).unwrap();
    m.save(&path).unwrap();
    let back = Model::<f32>::load(&path).unwrap();
    assert_eq!(back.cfg, m.cfg);
    for i in 0..10 {
        let x = rand(100 + i, &[1, 3, 7, 9]);
        let (a, b) = (m.infer(&x).unwrap(), back.infer(&x).unwrap());
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}
