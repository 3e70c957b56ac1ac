//! Procedural HR image set for smoke training: textures with sharp and
//! smooth structure plus a few synthetic scenes, each partly covered by
//! "dead leaves" (random occluding shapes) so edges are as common as in
//! photographs.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imageio::save_png;
use crate::tensor::Tensor;

pub const TOY_COUNT: usize = 16;
pub const TOY_SIZE: usize = 256;
/// Indices written to `val.txt`.
pub const TOY_VAL: [usize; 4] = [2, 7, 9, 12];

pub fn toy_name(i: usize) -> String {
    format!("toy_{i:02}.png")
}

type Rgb = [f64; 3];

fn mix(a: Rgb, b: Rgb, t: f64) -> Rgb {
    [0, 1, 2].map(|c| a[c] + (b[c] - a[c]) * t)
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Lattice value noise with smooth interpolation, summed over octaves.
struct ValueNoise {
    grid: Vec<f64>,
    n: usize,
}

impl ValueNoise {
    fn new(rng: &mut ChaCha8Rng, n: usize) -> Self {
        Self {
            grid: (0..n * n).map(|_| rng.gen()).collect(),
            n,
        }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (smoothstep(x - x0), smoothstep(y - y0));
        let n = self.n as i64;
        let g = |i: f64, j: f64| {
            let (i, j) = ((i as i64).rem_euclid(n) as usize, (j as i64).rem_euclid(n) as usize);
            self.grid[j * self.n + i]
        };
        let top = g(x0, y0) + (g(x0 + 1.0, y0) - g(x0, y0)) * fx;
        let bot = g(x0, y0 + 1.0) + (g(x0 + 1.0, y0 + 1.0) - g(x0, y0 + 1.0)) * fx;
        top + (bot - top) * fy
    }

    fn fbm(&self, x: f64, y: f64, octaves: usize) -> f64 {
        let (mut amp, mut freq, mut sum, mut norm) = (1.0, 1.0, 0.0, 0.0);
        for _ in 0..octaves {
            sum += amp * self.at(x * freq, y * freq);
            norm += amp;
            amp *= 0.5;
            freq *= 2.0;
        }
        sum / norm
    }
}

fn color(rng: &mut ChaCha8Rng) -> Rgb {
    [rng.gen(), rng.gen(), rng.gen()]
}

/// Pixel function of one image, `(x, y)` in pixels.
fn pattern(kind: usize, rng: &mut ChaCha8Rng) -> Box<dyn Fn(f64, f64) -> Rgb> {
    let (a, b, c) = (color(rng), color(rng), color(rng));
    let angle = rng.gen_range(0.0..PI);
    let (ca, sa) = (angle.cos(), angle.sin());
    match kind {
        // Oriented grating with a slow colour drift.
        0 => {
            let period = rng.gen_range(5.0..14.0);
            Box::new(move |x, y| {
                let u = x * ca + y * sa;
                let t = 0.5 + 0.5 * (2.0 * PI * u / period).sin();
                mix(mix(a, b, t), c, 0.3 * (y / TOY_SIZE as f64))
            })
        }
        // Rotated checkerboard with hard edges.
        1 => {
            let cell = rng.gen_range(6.0..16.0);
            Box::new(move |x, y| {
                let (u, v) = (x * ca + y * sa, -x * sa + y * ca);
                let t = ((u / cell).floor() + (v / cell).floor()).rem_euclid(2.0);
                mix(a, b, t)
            })
        }
        // Concentric rings around an off-centre point.
        2 => {
            let (cx, cy) = (rng.gen_range(0.0..256.0), rng.gen_range(0.0..256.0));
            let period = rng.gen_range(6.0..12.0);
            Box::new(move |x, y| {
                let r = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
                let t = 0.5 + 0.5 * (2.0 * PI * r / period).cos();
                mix(a, b, t)
            })
        }
        // Fractal value noise, thresholded into soft blobs plus detail.
        3 => {
            let noise = ValueNoise::new(rng, 64);
            let scale = rng.gen_range(16.0..32.0);
            Box::new(move |x, y| {
                let t = noise.fbm(x / scale, y / scale, 5);
                let blob = smoothstep(((t - 0.5) * 6.0 + 0.5).clamp(0.0, 1.0));
                mix(mix(a, b, blob), c, 0.25 * noise.at(x / 3.0, y / 3.0))
            })
        }
        // Running-bond bricks with mortar lines.
        4 => {
            let (bw, bh) = (rng.gen_range(18.0..34.0), rng.gen_range(8.0..14.0));
            let noise = ValueNoise::new(rng, 32);
            Box::new(move |x, y| {
                let row = (y / bh).floor();
                let xs = x + if row.rem_euclid(2.0) == 1.0 { bw / 2.0 } else { 0.0 };
                let (fx, fy) = (xs.rem_euclid(bw), y.rem_euclid(bh));
                if fx < 2.0 || fy < 2.0 {
                    c
                } else {
                    let id = (xs / bw).floor() * 7.0 + row * 13.0;
                    mix(a, b, 0.6 * noise.at(id, 0.5) + 0.2 * noise.at(x / 4.0, y / 4.0))
                }
            })
        }
        // Dot lattice with varying radius.
        5 => {
            let pitch = rng.gen_range(10.0..20.0);
            Box::new(move |x, y| {
                let (u, v) = (x * ca + y * sa, -x * sa + y * ca);
                let (du, dv) = (u.rem_euclid(pitch) - pitch / 2.0, v.rem_euclid(pitch) - pitch / 2.0);
                let radius = pitch * (0.2 + 0.2 * (x / TOY_SIZE as f64));
                let t = ((du * du + dv * dv).sqrt() - radius).clamp(0.0, 1.0);
                mix(c, mix(a, b, y / TOY_SIZE as f64), t)
            })
        }
        // Voronoi cells with dark borders.
        6 => {
            let seeds: Vec<(f64, f64, f64)> = (0..40)
                .map(|_| (rng.gen_range(0.0..256.0), rng.gen_range(0.0..256.0), rng.gen()))
                .collect();
            Box::new(move |x, y| {
                let (mut d1, mut d2, mut id) = (f64::MAX, f64::MAX, 0.0);
                for &(sx, sy, s) in &seeds {
                    let d = ((x - sx).powi(2) + (y - sy).powi(2)).sqrt();
                    if d < d1 {
                        (d2, d1, id) = (d1, d, s);
                    } else if d < d2 {
                        d2 = d;
                    }
                }
                let edge = ((d2 - d1) / 2.0).clamp(0.0, 1.0);
                mix(c, mix(a, b, id), edge)
            })
        }
        // A scene: sky gradient, sun, layered hills, a few posts.
        _ => {
            let noise = ValueNoise::new(rng, 32);
            let sun = (rng.gen_range(40.0..216.0), rng.gen_range(30.0..90.0));
            let posts: Vec<f64> = (0..5).map(|_| rng.gen_range(0.0..256.0)).collect();
            let sky_top = [0.2 + 0.3 * a[0], 0.4 + 0.3 * a[1], 0.8];
            Box::new(move |x, y| {
                let mut px = mix(sky_top, [0.95, 0.9, 0.8], y / 160.0);
                if ((x - sun.0).powi(2) + (y - sun.1).powi(2)).sqrt() < 18.0 {
                    px = [1.0, 0.9, 0.5];
                }
                for (layer, col) in [(0.0, b), (1.0, c)] {
                    let horizon = 130.0 + 50.0 * layer + 30.0 * noise.fbm(x / 40.0 + 9.0 * layer, layer, 4);
                    if y > horizon {
                        px = mix(col, [0.1, 0.1, 0.1], 0.3 * noise.at(x / 2.0, y / 2.0));
                    }
                }
                for &p in &posts {
                    if (x - p).abs() < 2.0 && y > 170.0 {
                        px = [0.15, 0.1, 0.05];
                    }
                }
                px
            })
        }
    }
}

/// An occluding shape filled with one of the texture families.
struct Leaf {
    cx: f64,
    cy: f64,
    r: f64,
    /// `(cos, sin, half width, half height)` of a rotated rectangle; `None`
    /// for a disc.
    rect: Option<(f64, f64, f64, f64)>,
    fill: Box<dyn Fn(f64, f64) -> Rgb>,
}

impl Leaf {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let (cx, cy) = (rng.gen_range(-16.0..272.0), rng.gen_range(-16.0..272.0));
        let r = rng.gen_range(6.0..40.0);
        let rect = rng.gen_bool(0.5).then(|| {
            let a: f64 = rng.gen_range(0.0..PI);
            (a.cos(), a.sin(), r, r * rng.gen_range(0.3..1.0))
        });
        let kind = rng.gen_range(0..7);
        Self {
            cx,
            cy,
            r,
            rect,
            fill: pattern(kind, rng),
        }
    }

    fn covers(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        match self.rect {
            None => dx * dx + dy * dy < self.r * self.r,
            Some((c, s, hw, hh)) => (dx * c + dy * s).abs() < hw && (-dx * s + dy * c).abs() < hh,
        }
    }
}

/// Renders image `i` of the set for `seed`, supersampled 2x2 per pixel.
pub fn toy_image(i: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(i as u64));
    let f = pattern(i % 8, &mut rng);
    let n_leaves = rng.gen_range(16..32);
    let leaves: Vec<Leaf> = (0..n_leaves).map(|_| Leaf::random(&mut rng)).collect();
    let sample = |x: f64, y: f64| -> Rgb {
        // topmost leaf wins
        match leaves.iter().rev().find(|l| l.covers(x, y)) {
            Some(l) => (l.fill)(x, y),
            None => f(x, y),
        }
    };
    let n = TOY_SIZE;
    let mut data = vec![0.0f32; 3 * n * n];
    for y in 0..n {
        for x in 0..n {
            let mut px = [0.0; 3];
            for (ox, oy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                let s = sample(x as f64 + ox, y as f64 + oy);
                (0..3).for_each(|c| px[c] += 0.25 * s[c]);
            }
            for c in 0..3 {
                data[c * n * n + y * n + x] = px[c].clamp(0.0, 1.0) as f32;
            }
        }
    }
    Tensor::new(&[1, 3, n, n], data).expect("sized buffer")
}

/// Writes all images and `val.txt` into `dir` (created if needed).
pub fn write_toy_set(dir: &Path, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for i in 0..TOY_COUNT {
        save_png(&dir.join(toy_name(i)), &toy_image(i, seed))?;
    }
    let val: String = TOY_VAL.iter().map(|&i| toy_name(i) + "\n").collect();
    let path = dir.join("val.txt");
    std::fs::write(&path, val).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_varied() {
        let a = toy_image(3, 0);
        assert_eq!(a.data(), toy_image(3, 0).data());
        assert_ne!(a.data(), toy_image(3, 1).data());
        for i in 0..8 {
            let img = toy_image(i, 0);
            let mean = img.sum_f64() / img.numel() as f64;
            let var = img.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / img.numel() as f64;
            assert!(var > 1e-3, "image {i} is nearly flat");
        }
    }
}
