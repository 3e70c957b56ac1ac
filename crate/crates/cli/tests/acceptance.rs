//! End-to-end acceptance checks, one PASS/FAIL line per criterion.
//!
//! Criteria 5, 6 and 8 train models and take a while (about half an hour
//! on one core). Set `OMNIRWKVSR_QUICK=1` to skip them during development;
//! skipped criteria print SKIP and do not count as passing.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use omnirwkvsr::blocks::{wkv2d_scan, BlockConfig, Ctx, InitMode, Wkv2dParams};
use omnirwkvsr::init::ParamBuilder;
use omnirwkvsr::metrics::{psnr_y, rgb_to_y, ssim_y};
use omnirwkvsr::model::{Model, ModelConfig};
use omnirwkvsr::shifts::{omni_quad_shift, OmniQuadParams};
use omnirwkvsr::wkv6::{bench_wkv, loglog_slope, wkv6_recurrent, wkv6_reference, WkvInputs};
use omnirwkvsr::{ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BIN: &str = env!("CARGO_BIN_EXE_omnirwkvsr");

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}
use Verdict::*;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Pass(detail)
    } else {
        Fail(detail)
    }
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn CLI")
}

fn tail(out: &Output) -> String {
    let err = String::from_utf8_lossy(&out.stderr);
    err.lines().last().unwrap_or("").to_string()
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn c1_wkv_equivalence() -> Verdict {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let n_inst = 1000;
    for _ in 0..n_inst {
        let n = rng.gen_range(1..=2);
        let heads = rng.gen_range(1..=2);
        let d = [2, 4][rng.gen_range(0..2)];
        let t = rng.gen_range(1..=8);
        let c = heads * d;
        let shape = [n, t, c];
        let inputs = WkvInputs {
            r: rand_tensor(&mut rng, &shape, -1.0, 1.0),
            k: rand_tensor(&mut rng, &shape, -1.0, 1.0),
            v: rand_tensor(&mut rng, &shape, -1.0, 1.0),
            w: rand_tensor(&mut rng, &shape, -4.0, 1.0),
            u: rand_tensor(&mut rng, &[c], -1.0, 1.0),
            heads,
        };
        let a = wkv6_recurrent(&inputs).unwrap();
        let b = wkv6_reference(&inputs).unwrap();
        worst = worst.max(a.max_abs_diff(&b).unwrap());
    }
    let secs = t0.elapsed().as_secs_f64();
    check(
        worst <= 1e-5 && secs < 60.0,
        format!("{n_inst} instances, max |recurrent - reference| = {worst:.2e} (<= 1e-5), {secs:.1} s"),
    )
}

fn c2_gradcheck() -> Verdict {
    let t0 = Instant::now();
    let out = run(&["gradcheck", "--module", "all"]);
    let secs = t0.elapsed().as_secs_f64();
    let stdout = String::from_utf8_lossy(&out.stdout);
    let summary = stdout.lines().last().unwrap_or("").to_string();
    if out.status.success() && secs < 300.0 {
        Pass(format!("{summary}, {secs:.0} s"))
    } else {
        Fail(format!("exit {:?}: {} ({secs:.0} s)", out.status.code(), tail(&out)))
    }
}

fn c3_linearity() -> Verdict {
    let t0 = Instant::now();
    let rows = bench_wkv(&[1000, 2000, 4000, 8000], 64, 4, 20).unwrap();
    let slope = loglog_slope(&rows).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let times: Vec<String> = rows.iter().map(|r| format!("{:.2}", r.mean_ms)).collect();
    check(
        slope <= 1.3 && secs < 180.0,
        format!("log-log slope {slope:.3} (<= 1.3), ms at T=1k..8k: {}, {secs:.1} s", times.join("/")),
    )
}

fn c4_degenerate() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[2, 8, 6, 7], -2.0, 2.0);

    let mut p = OmniQuadParams {
        weights: Tensor::new(&[6], vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap(),
        k1: rand_tensor(&mut rng, &[8, 1, 1, 1], -1.0, 1.0),
        k3: rand_tensor(&mut rng, &[8, 1, 3, 3], -1.0, 1.0),
        k5: rand_tensor(&mut rng, &[8, 1, 5, 5], -1.0, 1.0),
        k7: rand_tensor(&mut rng, &[8, 1, 7, 7], -1.0, 1.0),
        dilations: [1, 1, 1, 1],
    };
    let shift_err = omni_quad_shift(&x, &p).unwrap().max_abs_diff(&x).unwrap();
    p.dilations = [1, 2, 2, 3];
    let shift_err = shift_err.max(omni_quad_shift(&x, &p).unwrap().max_abs_diff(&x).unwrap());

    let cfg = BlockConfig { channels: 8, heads: 2, ..BlockConfig::default() };
    let mut store = ParamStore::<f32>::new();
    let mut init_rng = ChaCha8Rng::seed_from_u64(5);
    let wp = Wkv2dParams::build(&mut ParamBuilder::new(&mut store, &mut init_rng), &cfg).unwrap();
    for (i, g) in wp.gamma.iter().enumerate() {
        store.value_mut(g.unwrap()).fill(if i == 0 { 1.0 } else { 0.0 });
    }
    let tape = Tape::inference();
    let cx = Ctx::new(&tape, &store, &cfg);
    let y = wkv2d_scan(&cx, &tape.constant(x.clone()), &wp).unwrap();
    let scan_err = y.value().max_abs_diff(&x.map(|v| 0.5 * v)).unwrap();

    let mut mc = ModelConfig::preset("desk").unwrap();
    mc.block.init = InitMode::ZeroResidual;
    let model = Model::<f32>::new(mc).unwrap();
    let lr = rand_tensor(&mut rng, &[2, 3, 9, 11], 0.0, 1.0);
    let sr = model.infer(&lr).unwrap();
    let model_ok = sr.shape() == [2, 3, 18, 22] && sr.is_finite();

    check(
        shift_err <= 1e-6 && scan_err <= 1e-6 && model_ok,
        format!(
            "omni-quad w_x=1 err {shift_err:.1e}, wkv2d gamma_s1=1 err vs 0.5x {scan_err:.1e}, \
             zero-init model {:?} finite={}",
            sr.shape(),
            sr.is_finite()
        ),
    )
}

fn c7_metrics() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_tensor(&mut rng, &[1, 3, 24, 24], 0.0, 1.0);
    let ssim_self = ssim_y(&x, &x, 0).unwrap();
    // Uniform Y error of exactly one level: base image vs the same + 1/255 on
    // the Y scale, built through the luma weights sum (65.481+128.553+24.966)/255.
    let flat = Tensor::<f64>::from_fn(&[1, 3, 16, 16], |_| 0.5);
    let bump = 1.0 / (65.481 + 128.553 + 24.966);
    let shifted = flat.map(|v| v + bump);
    let psnr = psnr_y(&shifted, &flat, 0).unwrap();
    let black = rgb_to_y(&Tensor::<f64>::zeros(&[1, 3, 1, 1])).unwrap().data()[0];
    let white = rgb_to_y(&Tensor::<f64>::from_fn(&[1, 3, 1, 1], |_| 1.0)).unwrap().data()[0];
    let ok = ssim_self == 1.0
        && (psnr - 48.1308).abs() <= 1e-3
        && (black - 16.0).abs() <= 1e-3
        && (white - 235.0).abs() <= 1e-3;
    check(
        ok,
        format!("SSIM(x,x) = {ssim_self}, PSNR at unit Y error = {psnr:.4} dB, Y(black/white) = {black:.3}/{white:.3}"),
    )
}

fn c9_checkpoint() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let mut cfg = ModelConfig::preset("desk").unwrap();
    cfg.seed = 9;
    let model = Model::<f32>::new(cfg).unwrap();
    model.save(&path).unwrap();
    let back = Model::<f32>::load(&path).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut identical = 0;
    for i in 0..10 {
        let x = rand_tensor(&mut rng, &[1, 3, 8 + i, 12 - i / 2], 0.0, 1.0);
        let (a, b) = (model.infer(&x).unwrap(), back.infer(&x).unwrap());
        if a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()) {
            identical += 1;
        }
    }
    check(identical == 10, format!("{identical}/10 inputs bit-identical after save/load"))
}

/// Bundled toy set, or a freshly generated one when it is missing.
fn toy_dir(scratch: &Path) -> PathBuf {
    let bundled = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/toy");
    if bundled.join("val.txt").exists() {
        return bundled;
    }
    let dir = scratch.join("toy");
    let out = run(&["toydata", "--out", dir.to_str().unwrap()]);
    assert!(out.status.success(), "toydata failed: {}", tail(&out));
    dir
}

fn mean_row(csv: &str) -> Option<Vec<f64>> {
    let line = csv.lines().find(|l| l.starts_with("mean,"))?;
    line.split(',').skip(1).map(|v| v.parse().ok()).collect()
}

/// Returns the verdict and the run directory for reuse by criterion 8.
fn c5_toy_training(data: &Path, scratch: &Path) -> (Verdict, Option<PathBuf>) {
    let out = scratch.join("desk");
    let t0 = Instant::now();
    let o = run(&[
        "train", "--preset", "desk", "--data", data.to_str().unwrap(), "--seed", "0", "--out",
        out.to_str().unwrap(),
    ]);
    if !o.status.success() {
        return (Fail(format!("train exited {:?}: {}", o.status.code(), tail(&o))), None);
    }
    let train_secs = t0.elapsed().as_secs_f64();
    let csv = scratch.join("eval.csv");
    let o = run(&[
        "eval", "--ckpt", out.join("final.ckpt").to_str().unwrap(), "--hr", data.to_str().unwrap(),
        "--split", "val", "--csv", csv.to_str().unwrap(),
    ]);
    let secs = t0.elapsed().as_secs_f64();
    if !o.status.success() {
        return (Fail(format!("eval exited {:?}: {}", o.status.code(), tail(&o))), Some(out));
    }
    let Some(m) = std::fs::read_to_string(&csv).ok().as_deref().and_then(mean_row) else {
        return (Fail("eval CSV has no mean row".into()), Some(out));
    };
    let (psnr, ssim, bp, bs) = (m[0], m[1], m[2], m[3]);
    let v = check(
        psnr >= bp + 0.3 && ssim >= bs && secs <= 3600.0,
        format!(
            "held-out PSNR {psnr:.4} vs bicubic {bp:.4} (gain {:+.4} dB, need +0.3), \
             SSIM {ssim:.4} vs {bs:.4}, train {:.1} min, total {:.1} min",
            psnr - bp,
            train_secs / 60.0,
            secs / 60.0
        ),
    );
    (v, Some(out))
}

fn c8_determinism(data: &Path, scratch: &Path, full: Option<&Path>) -> Verdict {
    let run200 = |name: &str| -> Option<String> {
        let out = scratch.join(name);
        let o = run(&[
            "train", "--preset", "desk", "--data", data.to_str().unwrap(), "--seed", "0", "--iters",
            "200", "--out", out.to_str().unwrap(),
        ]);
        o.status.success().then(|| std::fs::read_to_string(out.join("loss.csv")).ok()).flatten()
    };
    let first = |text: String| text.lines().take(201).collect::<Vec<_>>().join("\n");
    // The long run's first 200 steps serve as the first run when available.
    let a = match full {
        Some(dir) => std::fs::read_to_string(dir.join("loss.csv")).ok().map(first),
        None => run200("det_a").map(first),
    };
    let b = run200("det_b").map(first);
    match (a, b) {
        (Some(a), Some(b)) => {
            let rows = a.lines().count() - 1;
            check(a == b && rows == 200, format!("{rows} loss rows, byte-identical: {}", a == b))
        }
        _ => Fail("a 200-iteration run failed".into()),
    }
}

fn c6_ablation(data: &Path, scratch: &Path) -> Verdict {
    let t0 = Instant::now();
    let mut notes = Vec::new();
    for (axis, rows, refs) in [
        ("ffn", ["MLP", "ChannelMix"].as_slice(), ["28.0689", "28.0720"].as_slice()),
        ("shift", &["OmniShift", "QShift", "Omni-Quad Shift"], &["30.1034", "30.0965", "30.1390"]),
        ("scan", &["WKV Scan", "WKV2D Scan"], &["30.1149", "30.1390"]),
    ] {
        let out = scratch.join(format!("ablate_{axis}"));
        // Reduced toy budget: the harness, not the published magnitudes, is
        // what this checks.
        let o = run(&[
            "ablate", "--axis", axis, "--preset", "desk", "--data", data.to_str().unwrap(), "--seed",
            "0", "--iters", "200", "--set", "batch=4", "--set", "patch_lr=16", "--set", "val_every=0",
            "--out", out.to_str().unwrap(),
        ]);
        let table = String::from_utf8_lossy(&o.stdout);
        let complete = rows.iter().all(|r| table.contains(r)) && refs.iter().all(|p| table.contains(p));
        if !o.status.success() || !complete {
            return Fail(format!("{axis} axis: exit {:?}, table complete: {complete}", o.status.code()));
        }
        let descending = table.lines().filter(|l| l.contains(" yes ")).count();
        notes.push(format!("{axis} {}/{} rows with descending loss", descending, rows.len()));
    }
    Pass(format!(
        "3 axes at 200 iters x batch 4 (reduced budget), annotated tables emitted; {}; {:.1} min",
        notes.join(", "),
        t0.elapsed().as_secs_f64() / 60.0
    ))
}

fn main() {
    let quick = std::env::var_os("OMNIRWKVSR_QUICK").is_some();
    let scratch = tempfile::tempdir().unwrap();
    let mut results: Vec<(u8, &str, Verdict, Duration)> = Vec::new();
    let mut timed = |n: u8, name: &'static str, f: &mut dyn FnMut() -> Verdict| {
        let t0 = Instant::now();
        let v = f();
        let line = (n, name, v, t0.elapsed());
        print_line(&line);
        results.push(line);
    };
    timed(1, "wkv equivalence", &mut c1_wkv_equivalence);
    timed(2, "gradient suite", &mut c2_gradcheck);
    timed(3, "linearity witness", &mut c3_linearity);
    timed(4, "degenerate identities", &mut c4_degenerate);
    timed(7, "metric oracles", &mut c7_metrics);
    timed(9, "checkpoint round trip", &mut c9_checkpoint);
    if quick {
        for (n, name) in [(5, "toy training beats bicubic"), (6, "ablation harness"), (8, "determinism")] {
            timed(n, name, &mut || Skip("OMNIRWKVSR_QUICK is set".into()));
        }
    } else {
        let data = toy_dir(scratch.path());
        let mut full = None;
        timed(5, "toy training beats bicubic", &mut || {
            let (v, dir) = c5_toy_training(&data, scratch.path());
            full = dir;
            v
        });
        timed(8, "determinism", &mut || c8_determinism(&data, scratch.path(), full.as_deref()));
        timed(6, "ablation harness", &mut || c6_ablation(&data, scratch.path()));
    }

    results.sort_by_key(|r| r.0);
    println!("\nsummary");
    for r in &results {
        print_line(r);
    }
    if results.iter().any(|r| matches!(r.2, Fail(_))) {
        std::process::exit(1);
    }
}

fn print_line((n, name, v, t): &(u8, &str, Verdict, Duration)) {
    let (tag, detail) = match v {
        Pass(d) => ("PASS", d),
        Fail(d) => ("FAIL", d),
        Skip(d) => ("SKIP", d),
    };
    println!("criterion {n} {tag} [{name}] {detail} ({:.1} s)", t.as_secs_f64());
}
