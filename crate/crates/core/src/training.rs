//! Patch sampling with augmentation, L1 + Adam training loop, validation.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{ParamStore, Tape};
use crate::error::{Error, Result};
use crate::imageio::{list_pngs, load_png};
use crate::metrics::{psnr_y, quantize, ssim_y, EvalReport, EvalRow};
use crate::model::{parse_num, Model};
use crate::ops::bicubic_resize;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch: usize,
    pub iters: usize,
    pub lr: f64,
    /// LR patch side; the HR patch is `scale` times larger.
    pub patch_lr: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Validate every this many iterations (0 = only at the end).
    pub val_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::preset("desk").expect("desk preset")
    }
}

impl TrainConfig {
    /// `desk` is the CPU smoke-training budget; `full` the full protocol.
    pub fn preset(name: &str) -> Result<Self> {
        let base = Self {
            batch: 16,
            iters: 20000,
            lr: 1e-4,
            patch_lr: 48,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            val_every: 1000,
        };
        match name {
            "full" | "default" => Ok(base),
            "desk" => Ok(Self {
                batch: 8,
                iters: 2000,
                lr: 5e-4,
                patch_lr: 32,
                val_every: 250,
                ..base
            }),
            _ => Err(Error::Config(format!(
                "unknown preset '{name}', expected desk, default or full"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.patch_lr == 0 {
            return Err(Error::Config("batch and patch_lr must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        for (k, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{k} must be in [0, 1), got {b}")));
            }
        }
        if self.eps <= 0.0 {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }

    pub const KEYS: [(&'static str, &'static str); 9] = [
        ("batch", "patches per step"),
        ("iters", "optimizer steps"),
        ("lr", "Adam learning rate (constant)"),
        ("patch_lr", "LR patch side in pixels"),
        ("beta1", "Adam first-moment decay"),
        ("beta2", "Adam second-moment decay"),
        ("eps", "Adam epsilon"),
        ("val_every", "validation interval in iterations (0 = end only)"),
        ("seed", "seed for initialization and sampling"),
    ];

    /// Returns `false` for keys this config does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "batch" => self.batch = parse_num(key, value)?,
            "iters" => self.iters = parse_num(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            "patch_lr" => self.patch_lr = parse_num(key, value)?,
            "beta1" => self.beta1 = parse_num(key, value)?,
            "beta2" => self.beta2 = parse_num(key, value)?,
            "eps" => self.eps = parse_num(key, value)?,
            "val_every" => self.val_every = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("batch", self.batch.to_string()),
            ("iters", self.iters.to_string()),
            ("lr", self.lr.to_string()),
            ("patch_lr", self.patch_lr.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("eps", self.eps.to_string()),
            ("val_every", self.val_every.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }
}

/// One of the eight dihedral transforms: optional horizontal flip, then
/// `rot` counter-clockwise quarter turns.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augment {
    pub rot: u8,
    pub flip: bool,
}

impl Augment {
    pub const IDENTITY: Augment = Augment { rot: 0, flip: false };

    pub const ALL: [Augment; 8] = [
        Augment { rot: 0, flip: false },
        Augment { rot: 1, flip: false },
        Augment { rot: 2, flip: false },
        Augment { rot: 3, flip: false },
        Augment { rot: 0, flip: true },
        Augment { rot: 1, flip: true },
        Augment { rot: 2, flip: true },
        Augment { rot: 3, flip: true },
    ];

    /// `0..8`, index into [`Augment::ALL`].
    pub fn code(self) -> u8 {
        self.rot + if self.flip { 4 } else { 0 }
    }

    pub fn inverse(self) -> Augment {
        if self.flip {
            // flip then rotate is an involution
            self
        } else {
            Augment {
                rot: (4 - self.rot) % 4,
                flip: false,
            }
        }
    }

    /// Applies the transform to the last two axes of an `(N, C, H, W)` tensor.
    pub fn apply<T: Scalar>(self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let [n, c, h, w] = x.dims4()?;
        let (oh, ow) = if self.rot % 2 == 1 { (w, h) } else { (h, w) };
        let src = x.data();
        let mut out = Vec::with_capacity(src.len());
        for plane in src.chunks(h * w) {
            for i in 0..oh {
                for j in 0..ow {
                    // Position in the flipped image, then undo the rotation.
                    let (y, xx) = match self.rot {
                        0 => (i, j),
                        1 => (j, w - 1 - i),
                        2 => (h - 1 - i, w - 1 - j),
                        _ => (h - 1 - j, i),
                    };
                    let xx = if self.flip { w - 1 - xx } else { xx };
                    out.push(plane[y * w + xx]);
                }
            }
        }
        Tensor::new(&[n, c, oh, ow], out)
    }
}

/// An aligned LR/HR training pair and where it came from.
#[derive(Clone, Debug)]
pub struct SamplePair {
    pub lr: Tensor<f32>,
    pub hr: Tensor<f32>,
    pub source: usize,
    /// Crop offset `(row, col)` in LR pixels; the HR offset is `scale` times it.
    pub offset: (usize, usize),
    pub aug: Augment,
}

/// `(1, C, ch, cw)` crop at `(y, x)`.
fn crop<T: Scalar>(x: &Tensor<T>, y: usize, xo: usize, ch: usize, cw: usize) -> Result<Tensor<T>> {
    let [_, c, h, w] = x.dims4()?;
    let d = &x.data()[..c * h * w];
    let mut out = Vec::with_capacity(c * ch * cw);
    for plane in d.chunks(h * w) {
        for r in y..y + ch {
            out.extend_from_slice(&plane[r * w + xo..r * w + xo + cw]);
        }
    }
    Tensor::new(&[1, c, ch, cw], out)
}

/// Random aligned crop of `hr` (first image of the batch), bicubic
/// downscale to `patch x patch`, and one random dihedral augmentation
/// applied to both sides.
pub fn synth_pair(
    hr: &Tensor<f32>,
    source: usize,
    scale: usize,
    patch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SamplePair> {
    let [_, _, h, w] = hr.dims4()?;
    let need = scale * patch;
    if h < need || w < need {
        return Err(Error::Dataset(format!(
            "image {source} is {h}x{w}, patches need at least {need}x{need}"
        )));
    }
    let oy = rng.gen_range(0..=(h - need) / scale);
    let ox = rng.gen_range(0..=(w - need) / scale);
    let aug = Augment::ALL[rng.gen_range(0..8)];
    let hr_crop = crop(hr, oy * scale, ox * scale, need, need)?;
    let lr = bicubic_resize(&hr_crop, patch, patch)?;
    Ok(SamplePair {
        lr: aug.apply(&lr)?,
        hr: aug.apply(&hr_crop)?,
        source,
        offset: (oy, ox),
        aug,
    })
}

/// Per-parameter first and second moments.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

/// One Adam update with bias correction at step `t >= 1`, constant `lr`.
pub fn adam_step<T: Scalar>(store: &mut ParamStore<T>, state: &mut AdamState, t: u64, cfg: &TrainConfig) {
    assert!(t >= 1, "adam step counter starts at 1");
    if state.m.len() != store.len() {
        state.m = store.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        state.v = state.m.clone();
    }
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for ((p, m), v) in store.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        for (((x, &g), m), v) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(m).zip(v) {
            let g = g.as_f64();
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let step = cfg.lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
            *x = T::from_f64(x.as_f64() - step);
        }
    }
}

/// HR images of a dataset directory, split by `val.txt` when present.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub train: Vec<(String, Tensor<f32>)>,
    pub val: Vec<(String, Tensor<f32>)>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::Dataset(format!(
                "dataset directory {} does not exist",
                dir.display()
            )));
        }
        let files = list_pngs(dir)?;
        if files.is_empty() {
            return Err(Error::Dataset(format!("no PNG images in {}", dir.display())));
        }
        let split = dir.join("val.txt");
        let held_out: Vec<String> = if split.exists() {
            std::fs::read_to_string(&split)
                .map_err(|e| Error::io(&split, e))?
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(String::from)
                .collect()
        } else {
            Vec::new()
        };
        let name = |p: &PathBuf| p.file_name().unwrap_or_default().to_string_lossy().into_owned();
        for v in &held_out {
            if !files.iter().any(|f| &name(f) == v) {
                return Err(Error::Dataset(format!(
                    "{} lists '{v}', which is not a PNG in the directory",
                    split.display()
                )));
            }
        }
        let mut ds = Dataset::default();
        for f in &files {
            let n = name(f);
            let img = load_png(f)?;
            if held_out.contains(&n) {
                ds.val.push((n, img));
            } else {
                ds.train.push((n, img));
            }
        }
        if ds.train.is_empty() {
            return Err(Error::Dataset(format!(
                "every image in {} is held out for validation",
                dir.display()
            )));
        }
        Ok(ds)
    }
}

/// Crops `hr` so both sides are multiples of `scale` and synthesizes its
/// bicubic LR counterpart.
pub fn lr_for<T: Scalar>(hr: &Tensor<T>, scale: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let [_, _, h, w] = hr.dims4()?;
    let (h2, w2) = (h / scale * scale, w / scale * scale);
    if h2 == 0 || w2 == 0 {
        return Err(Error::invalid("lr_for", format!("{h}x{w} is smaller than the scale {scale}")));
    }
    let hr = if (h2, w2) == (h, w) { hr.clone() } else { crop(hr, 0, 0, h2, w2)? };
    let lr = bicubic_resize(&hr, h2 / scale, w2 / scale)?;
    Ok((hr, lr))
}

/// Full-image evaluation: bicubic LR synthesis, model inference, 8-bit
/// quantization, Y-channel PSNR/SSIM with a `scale`-pixel border crop.
/// With `baseline`, plain bicubic upscaling is scored too.
pub fn evaluate(model: &Model<f32>, images: &[(String, Tensor<f32>)], baseline: bool) -> Result<EvalReport> {
    let s = model.cfg.scale;
    let mut rows = Vec::with_capacity(images.len());
    for (name, hr) in images {
        let (hr, lr) = lr_for(hr, s)?;
        let sr = quantize(&model.infer(&lr)?);
        let base = if baseline {
            let [_, _, h, w] = hr.dims4()?;
            let up = quantize(&bicubic_resize(&lr, h, w)?);
            Some((psnr_y(&up, &hr, s)?, ssim_y(&up, &hr, s)?))
        } else {
            None
        };
        rows.push(EvalRow {
            name: name.clone(),
            psnr: psnr_y(&sr, &hr, s)?,
            ssim: ssim_y(&sr, &hr, s)?,
            baseline: base,
        });
    }
    Ok(EvalReport { rows, scale: s, crop: s })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValRow {
    pub iter: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    /// Loss of each step, in order.
    pub losses: Vec<f32>,
    pub val: Vec<ValRow>,
    pub best: Option<ValRow>,
}

struct Csv {
    w: BufWriter<File>,
    path: PathBuf,
}

impl Csv {
    fn create(path: PathBuf, header: &str) -> Result<Self> {
        let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut c = Self { w: BufWriter::new(f), path };
        c.line(header)?;
        Ok(c)
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.w, "{s}").map_err(|e| Error::io(&self.path, e))
    }

    fn flush(&mut self) -> Result<()> {
        self.w.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Stacks `(1, C, H, W)` tensors along the batch axis.
fn stack(items: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let [_, c, h, w] = items[0].dims4()?;
    let mut d = Vec::with_capacity(items.len() * c * h * w);
    for t in items {
        d.extend_from_slice(t.data());
    }
    Tensor::new(&[items.len(), c, h, w], d)
}

fn validate(
    model: &Model<f32>,
    data: &Dataset,
    iter: usize,
    log: &mut TrainLog,
    csv: &mut Csv,
    out: &Path,
    progress: &mut dyn FnMut(&str),
) -> Result<()> {
    if data.val.is_empty() {
        return Ok(());
    }
    let rep = evaluate(model, &data.val, false)?;
    let row = ValRow {
        iter,
        psnr: rep.mean_psnr(),
        ssim: rep.mean_ssim(),
    };
    csv.line(&format!("{iter},{:.4},{:.4}", row.psnr, row.ssim))?;
    csv.flush()?;
    progress(&format!("iter {iter}: val PSNR {:.4} dB, SSIM {:.4}", row.psnr, row.ssim));
    if log.best.map_or(true, |b| row.psnr > b.psnr) {
        log.best = Some(row);
        model.save(&out.join("best.ckpt"))?;
    }
    log.val.push(row);
    Ok(())
}

/// Runs `cfg.iters` Adam steps on random augmented patches of
/// `data.train`, writing into `out`:
///
/// - `log.csv`: `iter,loss,ms_per_iter`
/// - `loss.csv`: `iter,loss` (no timings, so identical across runs)
/// - `val.csv`: `iter,psnr,ssim`, every `val_every` steps and at the end
/// - `final.ckpt`, and `best.ckpt` for the best validation PSNR
///
/// A non-finite loss stops training after writing `abort.ckpt`.
pub fn train(
    model: &mut Model<f32>,
    data: &Dataset,
    cfg: &TrainConfig,
    out: &Path,
    progress: &mut dyn FnMut(&str),
) -> Result<TrainLog> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Dataset("no training images".into()));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let scale = model.cfg.scale;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut adam = AdamState::default();
    let mut log = TrainLog::default();
    let mut timed = Csv::create(out.join("log.csv"), "iter,loss,ms_per_iter")?;
    let mut plain = Csv::create(out.join("loss.csv"), "iter,loss")?;
    let mut valcsv = Csv::create(out.join("val.csv"), "iter,psnr,ssim")?;

    for iter in 1..=cfg.iters {
        let t0 = Instant::now();
        let mut lrs = Vec::with_capacity(cfg.batch);
        let mut hrs = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let src = rng.gen_range(0..data.train.len());
            let p = synth_pair(&data.train[src].1, src, scale, cfg.patch_lr, &mut rng)?;
            lrs.push(p.lr);
            hrs.push(p.hr);
        }
        let (lr, hr) = (stack(&lrs)?, stack(&hrs)?);
        let tape = Tape::new();
        let pred = model.forward(&tape, &lr)?;
        let loss = tape.l1_loss(&pred, &tape.constant(hr))?;
        let value = loss.value().item()?;
        if !value.is_finite() {
            let snap = out.join("abort.ckpt");
            model.save(&snap)?;
            return Err(Error::NonFinite(format!(
                "loss is {value} at iteration {iter}; parameters before this step saved to {}",
                snap.display()
            )));
        }
        model.store.zero_grads();
        tape.backward(&loss, &mut model.store)?;
        drop(tape);
        adam_step(&mut model.store, &mut adam, iter as u64, cfg);
        let ms = t0.elapsed().as_secs_f64() * 1e3;
        log.losses.push(value);
        timed.line(&format!("{iter},{value},{ms:.1}"))?;
        plain.line(&format!("{iter},{value}"))?;
        if iter % 50 == 0 || iter == cfg.iters {
            timed.flush()?;
            plain.flush()?;
            progress(&format!("iter {iter}/{}: loss {value:.5} ({ms:.0} ms/iter)", cfg.iters));
        }
        if cfg.val_every > 0 && iter % cfg.val_every == 0 && iter != cfg.iters {
            validate(model, data, iter, &mut log, &mut valcsv, out, progress)?;
        }
    }
    if cfg.iters > 0 {
        validate(model, data, cfg.iters, &mut log, &mut valcsv, out, progress)?;
    }
    timed.flush()?;
    plain.flush()?;
    model.save(&out.join("final.ckpt"))?;
    Ok(log)
}
