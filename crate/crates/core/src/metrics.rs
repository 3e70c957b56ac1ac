//! Y-channel PSNR and SSIM with border crop, as used by SR benchmarks.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Reported for identical images instead of an infinite PSNR.
pub const PSNR_CAP: f64 = 100.0;

const Y_COEF: [f64; 3] = [65.481, 128.553, 24.966];
const Y_OFFSET: f64 = 16.0;

const SSIM_WIN: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const SSIM_L: f64 = 255.0;

/// BT.601 studio-swing luma of `(N, 3, H, W)` RGB in `[0, 1]`, returned
/// as `(N, 1, H, W)` on the 255 scale.
pub fn rgb_to_y<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<f64>> {
    let [n, c, h, w] = x.dims4()?;
    if c != 3 {
        return Err(Error::invalid(
            "rgb_to_y",
            format!("expected 3 channels, got {c}"),
        ));
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(n * hw);
    for img in x.data().chunks(3 * hw) {
        let (r, rest) = img.split_at(hw);
        let (g, b) = rest.split_at(hw);
        out.extend((0..hw).map(|i| {
            Y_COEF[0] * r[i].as_f64() + Y_COEF[1] * g[i].as_f64() + Y_COEF[2] * b[i].as_f64() + Y_OFFSET
        }));
    }
    Tensor::new(&[n, 1, h, w], out)
}

/// Y planes of both images with `crop` pixels removed from every border,
/// one `Vec` per image, plus the cropped size.
fn cropped_planes<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    crop: usize,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>, usize, usize)> {
    a.same_shape(b, op)?;
    let [_, _, h, w] = a.dims4()?;
    if 2 * crop >= h.min(w) {
        return Err(Error::invalid(
            op,
            format!("crop {crop} leaves nothing of a {h}x{w} image"),
        ));
    }
    let (ch, cw) = (h - 2 * crop, w - 2 * crop);
    let planes = |x: &Tensor<T>| -> Result<Vec<Vec<f64>>> {
        let y = rgb_to_y(x)?;
        Ok(y.data()
            .chunks(h * w)
            .map(|p| {
                (crop..h - crop)
                    .flat_map(|r| p[r * w + crop..r * w + w - crop].iter().copied())
                    .collect()
            })
            .collect())
    };
    Ok((planes(a)?, planes(b)?, ch, cw))
}

/// Y-channel PSNR in dB, averaged over the batch, capped at [`PSNR_CAP`].
pub fn psnr_y<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, crop: usize) -> Result<f64> {
    let (pa, pb, _, _) = cropped_planes("psnr_y", a, b, crop)?;
    let per: Vec<f64> = pa
        .iter()
        .zip(&pb)
        .map(|(x, y)| {
            let mse = x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / x.len() as f64;
            if mse == 0.0 {
                PSNR_CAP
            } else {
                (10.0 * (255.0 * 255.0 / mse).log10()).min(PSNR_CAP)
            }
        })
        .collect();
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Normalized 1D Gaussian; the 2D window is its outer product.
fn gaussian_1d() -> [f64; SSIM_WIN] {
    let mut g = [0.0; SSIM_WIN];
    let mid = (SSIM_WIN / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - mid;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Valid-mode separable filtering of an `h x w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64; SSIM_WIN]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WIN, w + 1 - SSIM_WIN);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = g.iter().enumerate().map(|(k, gk)| gk * x[r * w + c + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = g.iter().enumerate().map(|(k, gk)| gk * rows[(r + k) * ow + c]).sum();
        }
    }
    out
}

fn ssim_plane(x: &[f64], y: &[f64], h: usize, w: usize) -> f64 {
    if x == y {
        return 1.0;
    }
    let g = gaussian_1d();
    let prod = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(p, q)| p * q).collect() };
    let mx = filter_valid(x, h, w, &g);
    let my = filter_valid(y, h, w, &g);
    let sxx = filter_valid(&prod(x, x), h, w, &g);
    let syy = filter_valid(&prod(y, y), h, w, &g);
    let sxy = filter_valid(&prod(x, y), h, w, &g);
    let c1 = (SSIM_K1 * SSIM_L).powi(2);
    let c2 = (SSIM_K2 * SSIM_L).powi(2);
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    total / n as f64
}

/// Single-scale SSIM on Y (11x11 Gaussian window, sigma 1.5, valid
/// positions only), averaged over the batch.
pub fn ssim_y<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, crop: usize) -> Result<f64> {
    let (pa, pb, h, w) = cropped_planes("ssim_y", a, b, crop)?;
    if h < SSIM_WIN || w < SSIM_WIN {
        return Err(Error::invalid(
            "ssim_y",
            format!("{h}x{w} after crop is smaller than the {SSIM_WIN}x{SSIM_WIN} window"),
        ));
    }
    let per: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| ssim_plane(x, y, h, w)).collect();
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Rounds to the 8-bit grid after clamping to `[0, 1]`, as a saved PNG would.
pub fn quantize<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| {
        let q = (v.as_f64().clamp(0.0, 1.0) * 255.0).round() / 255.0;
        T::from_f64(q)
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
    /// Bicubic upscaling scored against the same HR image.
    pub baseline: Option<(f64, f64)>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub scale: usize,
    pub crop: usize,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

impl EvalReport {
    pub fn mean_psnr(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.psnr))
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.ssim))
    }

    /// Mean `(psnr, ssim)` of the baseline column, if every row has one.
    pub fn mean_baseline(&self) -> Option<(f64, f64)> {
        let b: Option<Vec<(f64, f64)>> = self.rows.iter().map(|r| r.baseline).collect();
        let b = b.filter(|b| !b.is_empty())?;
        Some((mean(b.iter().map(|x| x.0)), mean(b.iter().map(|x| x.1))))
    }

    pub fn to_csv(&self) -> String {
        let with_base = self.mean_baseline().is_some();
        let mut s = String::from("name,psnr,ssim");
        if with_base {
            s.push_str(",bicubic_psnr,bicubic_ssim");
        }
        s.push('\n');
        let mut line = |name: &str, p: f64, q: f64, b: Option<(f64, f64)>| {
            let _ = write!(s, "{name},{p:.4},{q:.4}");
            if let Some((bp, bq)) = b.filter(|_| with_base) {
                let _ = write!(s, ",{bp:.4},{bq:.4}");
            }
            s.push('\n');
        };
        for r in &self.rows {
            line(&r.name, r.psnr, r.ssim, r.baseline);
        }
        line("mean", self.mean_psnr(), self.mean_ssim(), self.mean_baseline());
        s
    }

    pub fn table(&self) -> String {
        let base = self.mean_baseline();
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
        let mut s = format!("scale x{}, border crop {}\n", self.scale, self.crop);
        let _ = write!(s, "{:<width$}  {:>8}  {:>7}", "image", "PSNR", "SSIM");
        if base.is_some() {
            let _ = write!(s, "  {:>12}  {:>12}", "bicubic PSNR", "bicubic SSIM");
        }
        s.push('\n');
        let mut line = |name: &str, p: f64, q: f64, b: Option<(f64, f64)>| {
            let _ = write!(s, "{name:<width$}  {p:>8.4}  {q:>7.4}");
            if let Some((bp, bq)) = b.filter(|_| base.is_some()) {
                let _ = write!(s, "  {bp:>12.4}  {bq:>12.4}");
            }
            s.push('\n');
        };
        for r in &self.rows {
            line(&r.name, r.psnr, r.ssim, r.baseline);
        }
        line("mean", self.mean_psnr(), self.mean_ssim(), base);
        s
    }
}
