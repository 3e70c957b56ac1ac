use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use omnirwkvsr::gradcheck::{self, TOLERANCE};
use omnirwkvsr::imageio::{list_pngs, load_png, save_png};
use omnirwkvsr::model::{Model, ModelConfig};
use omnirwkvsr::training::{evaluate, train as run_training, Dataset};
use omnirwkvsr::wkv6::{bench_csv, bench_wkv, loglog_slope};
use omnirwkvsr::{toydata, Error, Tensor};

use crate::config::RunConfig;
use crate::{Axis, BenchMode, RunArgs, Split};

/// A failed command: message plus process exit code.
#[derive(Debug)]
pub struct Failure {
    pub msg: String,
    pub code: u8,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self {
            code: if e.is_user_error() { 2 } else { 1 },
            msg: e.to_string(),
        }
    }
}

type Res = std::result::Result<(), Failure>;

fn user(msg: impl Into<String>) -> Failure {
    Failure { msg: msg.into(), code: 2 }
}

fn io_err(path: &Path, source: std::io::Error) -> Failure {
    Error::Io { path: path.to_path_buf(), source }.into()
}

fn write_file(path: &Path, text: &str) -> Res {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn log(msg: &str) {
    eprintln!("{msg}");
}

fn resolve(run: &RunArgs) -> std::result::Result<RunConfig, Failure> {
    Ok(RunConfig::load(run.config.as_deref(), &run.overrides())?)
}

fn require_data(cfg: &RunConfig) -> std::result::Result<PathBuf, Failure> {
    cfg.data
        .clone()
        .ok_or_else(|| user("no dataset given: pass --data DIR or set `data` in the config"))
}

pub fn train(run: &RunArgs) -> Res {
    let cfg = resolve(run)?;
    let data_dir = require_data(&cfg)?;
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("runs/train"));
    let data = Dataset::load(&data_dir)?;
    std::fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    write_file(&out.join("config.txt"), &cfg.to_text())?;
    let mut model = Model::<f32>::new(cfg.model.clone())?;
    log(&format!(
        "training {} params on {} images ({} held out) for {} iters into {}",
        model.num_params(),
        data.train.len(),
        data.val.len(),
        cfg.train.iters,
        out.display()
    ));
    let t0 = Instant::now();
    let res = run_training(&mut model, &data, &cfg.train, &out, &mut |s| log(s))?;
    let last = res.losses.last().map_or("-".into(), |l| format!("{l:.5}"));
    print!("done in {:.1} s, last loss {last}", t0.elapsed().as_secs_f64());
    match res.best {
        Some(b) => println!(", best val PSNR {:.4} dB at iter {}", b.psnr, b.iter),
        None => println!(),
    }
    Ok(())
}

fn load_checked(ckpt: &Path, scale: Option<usize>) -> std::result::Result<Model<f32>, Failure> {
    let model = Model::<f32>::load(ckpt)?;
    if let Some(s) = scale {
        if s != model.cfg.scale {
            return Err(user(format!(
                "--scale {s} does not match the checkpoint, which was trained for x{}",
                model.cfg.scale
            )));
        }
    }
    Ok(model)
}

pub fn infer(ckpt: &Path, input: &Path, out: &Path, scale: Option<usize>) -> Res {
    let model = load_checked(ckpt, scale)?;
    let s = model.cfg.scale;
    let files = if input.is_dir() {
        list_pngs(input)?
    } else if input.is_file() {
        vec![input.to_path_buf()]
    } else {
        return Err(user(format!("input {} does not exist", input.display())));
    };
    if files.is_empty() {
        return Err(user(format!("no PNG images in {}", input.display())));
    }
    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    for f in files {
        let lr: Tensor<f32> = load_png(&f)?;
        let sr = model.infer(&lr)?;
        let stem = f.file_stem().unwrap_or_default().to_string_lossy();
        let dst = out.join(format!("{stem}_x{s}.png"));
        save_png(&dst, &sr)?;
        let [_, _, h, w] = sr.dims4()?;
        println!("{} -> {} ({w}x{h})", f.display(), dst.display());
    }
    Ok(())
}

pub fn eval(ckpt: &Path, hr: &Path, scale: Option<usize>, split: Split, csv: Option<&Path>) -> Res {
    let model = load_checked(ckpt, scale)?;
    let data = Dataset::load(hr)?;
    let mut images = match split {
        Split::All => [data.train, data.val].concat(),
        Split::Train => data.train,
        Split::Val => data.val,
    };
    if images.is_empty() {
        return Err(user(format!("{} has no images in the requested split", hr.display())));
    }
    images.sort_by(|a, b| a.0.cmp(&b.0));
    let report = evaluate(&model, &images, true)?;
    print!("{}", report.table());
    if let Some(p) = csv {
        write_file(p, &report.to_csv())?;
    }
    Ok(())
}

pub fn gradcheck(module: &str) -> Res {
    let fixtures = gradcheck::select(module)?;
    let mut failed = Vec::new();
    for f in &fixtures {
        let t0 = Instant::now();
        let label = format!("{}/{}", f.suite, f.name);
        let (err, at) = match f.run() {
            Ok(r) => r,
            Err(e) => {
                println!("{label:<28} error: {e}");
                failed.push(label);
                continue;
            }
        };
        let ok = err <= TOLERANCE;
        println!(
            "{label:<28} max rel err {err:.3e} at {at:<24} {:>7.2}s  {}",
            t0.elapsed().as_secs_f64(),
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            failed.push(label);
        }
    }
    if failed.is_empty() {
        println!("{} fixtures passed (tolerance {TOLERANCE:e})", fixtures.len());
        Ok(())
    } else {
        Err(Failure {
            msg: format!("gradient check failed for {}", failed.join(", ")),
            code: 1,
        })
    }
}

fn parse_sizes(s: &str) -> std::result::Result<Vec<usize>, Failure> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| user(format!("bad size '{t}' in --sizes")))
        })
        .collect()
}

/// Mean and sample standard deviation in milliseconds of `reps` timed calls
/// after one warm-up.
fn time_ms(reps: usize, mut f: impl FnMut() -> omnirwkvsr::Result<()>) -> omnirwkvsr::Result<(f64, f64)> {
    f()?;
    let mut ts = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t0 = Instant::now();
        f()?;
        ts.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    let n = ts.len() as f64;
    let mean = ts.iter().sum::<f64>() / n;
    let var = if ts.len() > 1 {
        ts.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok((mean, var.sqrt()))
}

pub fn bench(
    mode: BenchMode,
    sizes: Option<&str>,
    channels: usize,
    heads: usize,
    reps: usize,
    preset: &str,
    csv: Option<&Path>,
) -> Res {
    let sizes = match sizes {
        Some(s) => parse_sizes(s)?,
        None => match mode {
            BenchMode::Wkv => vec![1000, 2000, 4000, 8000],
            BenchMode::Forward => vec![48, 96],
        },
    };
    let text = match mode {
        BenchMode::Wkv => {
            let rows = bench_wkv(&sizes, channels, heads, reps).map_err(|e| user(e.to_string()))?;
            if let Some(slope) = loglog_slope(&rows) {
                log(&format!("log-log slope of time vs T: {slope:.3}"));
            }
            bench_csv(&rows)
        }
        BenchMode::Forward => {
            let model = Model::<f32>::new(ModelConfig::preset(preset)?)?;
            let mut s = String::from("size,mean_ms,std_ms\n");
            if reps > 0 {
                for &n in &sizes {
                    let x = Tensor::<f32>::from_fn(&[1, 3, n, n], |i| ((i * 7919) % 1000) as f32 / 1000.0);
                    let (mean, std) = time_ms(reps, || model.infer(&x).map(drop))?;
                    let _ = writeln!(s, "{n},{mean:.3},{std:.3}");
                }
            }
            s
        }
    };
    match csv {
        Some(p) => write_file(p, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub struct Variant {
    pub label: &'static str,
    pub key: &'static str,
    pub value: &'static str,
    /// Published PSNR for this row, shown for reference only.
    pub ref_psnr: f64,
}

pub fn variants(axis: Axis) -> Vec<Variant> {
    let v = |label, key, value, ref_psnr| Variant { label, key, value, ref_psnr };
    match axis {
        Axis::Ffn => vec![v("MLP", "ffn", "mlp", 28.0689), v("ChannelMix", "ffn", "channelmix", 28.0720)],
        Axis::Shift => vec![
            v("OmniShift", "shift_mode", "omnishift", 30.1034),
            v("QShift", "shift_mode", "qshift", 30.0965),
            v("Omni-Quad Shift", "shift_mode", "omniquad", 30.1390),
        ],
        Axis::Scan => vec![v("WKV Scan", "scan", "1d", 30.1149), v("WKV2D Scan", "scan", "2d", 30.1390)],
    }
}

fn median(xs: &[f32]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v: Vec<f64> = xs.iter().map(|&x| x as f64).collect();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

pub fn ablate(axis: Axis, run: &RunArgs) -> Res {
    let base = resolve(run)?;
    let data_dir = require_data(&base)?;
    let axis_name = format!("{axis:?}").to_lowercase();
    let out = base.out.clone().unwrap_or_else(|| PathBuf::from(format!("runs/ablate_{axis_name}")));
    let data = Dataset::load(&data_dir)?;
    let (scored, split) = if data.val.is_empty() { (&data.train, "train") } else { (&data.val, "val") };
    let mut csv = String::from("variant,psnr,ssim,bicubic_psnr,bicubic_ssim,loss_median_first100,loss_median_next100,ref_psnr\n");
    let mut table = format!(
        "ablation: {axis_name} axis, {} iters x batch {}, seed {}, scored on {} {split} images\n\
         {:<16} {:>9} {:>8} {:>9} {:>8} {:>11}  {:>12}\n",
        base.train.iters,
        base.train.batch,
        base.train.seed,
        scored.len(),
        "variant",
        "PSNR",
        "SSIM",
        "bicubic",
        "SSIM",
        "loss desc.",
        "ref. PSNR*"
    );
    for v in variants(axis) {
        let mut cfg = base.clone();
        cfg.set(v.key, v.value)?;
        cfg.model.validate()?;
        let dir = out.join(v.value);
        log(&format!("== {} ({} = {}) -> {}", v.label, v.key, v.value, dir.display()));
        let mut model = Model::<f32>::new(cfg.model.clone())?;
        let res = run_training(&mut model, &data, &cfg.train, &dir, &mut |s| log(s))?;
        write_file(&dir.join("config.txt"), &cfg.to_text())?;
        let rep = evaluate(&model, scored, true)?;
        let (bp, bs) = rep.mean_baseline().unwrap_or((f64::NAN, f64::NAN));
        let l = &res.losses;
        let first = median(&l[..l.len().min(100)]);
        let next = if l.len() >= 200 { median(&l[100..200]) } else { None };
        let fmt = |m: Option<f64>| m.map_or(String::new(), |x| format!("{x:.6}"));
        let descends = match (first, next) {
            (Some(a), Some(b)) => if b < a { "yes" } else { "no" },
            _ => "n/a",
        };
        let _ = writeln!(
            csv,
            "{},{:.4},{:.4},{bp:.4},{bs:.4},{},{},{}",
            v.label,
            rep.mean_psnr(),
            rep.mean_ssim(),
            fmt(first),
            fmt(next),
            v.ref_psnr
        );
        let _ = writeln!(
            table,
            "{:<16} {:>9.4} {:>8.4} {bp:>9.4} {bs:>8.4} {descends:>11}  {:>12.4}",
            v.label,
            rep.mean_psnr(),
            rep.mean_ssim(),
            v.ref_psnr
        );
    }
    table.push_str("* published full-scale values, for reference only; not comparable to this budget\n");
    write_file(&out.join("ablation.csv"), &csv)?;
    print!("{table}");
    Ok(())
}

pub fn toydata(out: &Path, seed: u64) -> Res {
    toydata::write_toy_set(out, seed)?;
    println!(
        "wrote {} images of {}x{} and val.txt to {}",
        toydata::TOY_COUNT,
        toydata::TOY_SIZE,
        toydata::TOY_SIZE,
        out.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_parse() {
        assert_eq!(parse_sizes("").unwrap(), Vec::<usize>::new());
        assert_eq!(parse_sizes("8, 16,").unwrap(), vec![8, 16]);
        assert_eq!(parse_sizes("8,x").unwrap_err().code, 2);
        assert!(parse_sizes("0").is_err());
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn variants_match_axes() {
        assert_eq!(variants(Axis::Ffn).len(), 2);
        assert_eq!(variants(Axis::Shift).len(), 3);
        assert_eq!(variants(Axis::Scan).len(), 2);
        for axis in [Axis::Ffn, Axis::Shift, Axis::Scan] {
            for v in variants(axis) {
                let mut c = ModelConfig::preset("desk").unwrap();
                assert!(c.set(v.key, v.value).unwrap(), "{}", v.key);
            }
        }
    }
}
