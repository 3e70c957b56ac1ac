//! 8-bit PNG load/save as `(1, 3, H, W)` tensors in `[0, 1]`.

use std::path::{Path, PathBuf};

use image::{ColorType, DynamicImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn image_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    }
}

/// Decodes a PNG. Gray and alpha variants are widened/dropped to RGB;
/// 16-bit and float images are rejected.
pub fn load_png<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Png)
        .map_err(|e| image_err(path, format!("cannot decode PNG: {e}")))?;
    match img.color() {
        ColorType::L8 | ColorType::La8 | ColorType::Rgb8 | ColorType::Rgba8 => {}
        other => {
            return Err(image_err(
                path,
                format!("only 8-bit PNGs are supported, this one is {other:?}"),
            ))
        }
    }
    Ok(from_rgb(&img.to_rgb8()))
}

pub fn from_rgb<T: Scalar>(img: &RgbImage) -> Tensor<T> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn(&[1, 3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        T::from_f64(raw[p * 3 + c] as f64 / 255.0)
    })
}

/// Clamps to `[0, 1]` and rounds to 8 bits. Only the first image of the
/// batch is used.
pub fn to_rgb<T: Scalar>(x: &Tensor<T>) -> Result<RgbImage> {
    let [_, c, h, w] = x.dims4()?;
    if c != 3 {
        return Err(Error::invalid("to_rgb", format!("expected 3 channels, got {c}")));
    }
    let d = x.data();
    let mut raw = Vec::with_capacity(h * w * 3);
    for p in 0..h * w {
        for ch in 0..3 {
            let v = d[ch * h * w + p].as_f64().clamp(0.0, 1.0);
            raw.push((v * 255.0).round() as u8);
        }
    }
    Ok(RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer sized to image"))
}

pub fn save_png<T: Scalar>(path: &Path, x: &Tensor<T>) -> Result<()> {
    DynamicImage::ImageRgb8(to_rgb(x)?)
        .save_with_format(path, ImageFormat::Png)
        .map_err(|e| image_err(path, format!("cannot write PNG: {e}")))
}

/// `*.png` files directly inside `dir`, sorted by name.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for e in entries {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        let is_png = p
            .extension()
            .and_then(|s| s.to_str())
            .is_some_and(|s| s.eq_ignore_ascii_case("png"));
        if is_png && p.is_file() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}
