//! The super-resolution network: per-image normalization, shallow 3x3
//! embedding, a chain of residual groups, and one-step pixel-shuffle
//! reconstruction.
//!
//! Parameter names form the checkpoint namespace:
//!
//! ```text
//! shallow.{weight,bias}              3 -> C embedding
//! vrg{i}.vrb{j}.norm1.{gamma,beta}
//! vrg{i}.vrb{j}.mix.{w_r,w_k,w_v,w_g,w_ww,ww_bias,u,gamma_s1..5}
//! vrg{i}.vrb{j}.mix.{h,v}.{tma_x,tma_xb,tma_r,tma_k,tma_v,tma_g}
//! vrg{i}.vrb{j}.mix.{h,v}.shift.{weights,k1,k3,k5,k7}
//! vrg{i}.vrb{j}.norm2.{gamma,beta}
//! vrg{i}.vrb{j}.ffn.{dw,w_rc,w_kc,w_vc,w_oc} | ffn.{w1,w2}
//! vrg{i}.vrb{j}.conv.{weight,bias}
//! vrg{i}.conv.{weight,bias}
//! conv_feat.{weight,bias}
//! upsample.{weight,bias}             C -> 3·scale² before the shuffle
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{ParamStore, Tape, Var};
use crate::blocks::{vrg, BlockConfig, ConvParams, Ctx, VrgParams};
use crate::error::{Error, Result};
use crate::init::ParamBuilder;
use crate::tensor::{Scalar, Tensor};

pub const SIGMA_FLOOR: f64 = 1e-6;
pub const CHECKPOINT_MAGIC: &str = "ORWKVSR";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub block: BlockConfig,
    pub n_vrg: usize,
    pub vrbs_per_vrg: usize,
    pub scale: usize,
    /// Adds the shallow features to the output of the group chain.
    pub long_skip: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::preset("default").expect("default preset")
    }
}

fn on_off(v: bool) -> &'static str {
    if v {
        "on"
    } else {
        "off"
    }
}

pub(crate) fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "on" | "true" | "1" | "yes" => Ok(true),
        "off" | "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key} must be on or off, got '{v}'"))),
    }
}

pub(crate) fn parse_num<N: std::str::FromStr>(key: &str, v: &str) -> Result<N> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

impl ModelConfig {
    pub const PRESETS: [&'static str; 3] = ["desk", "default", "full"];

    /// `desk`: 32 channels, 2 groups of 2 blocks. `default`: 96 channels,
    /// 4 groups of 4 blocks. `full`: 96 channels, 16 single-block groups.
    pub fn preset(name: &str) -> Result<Self> {
        let (channels, heads, n_vrg, vrbs) = match name {
            "desk" => (32, 2, 2, 2),
            "default" => (96, 6, 4, 4),
            "full" => (96, 6, 16, 1),
            _ => {
                return Err(Error::Config(format!(
                    "unknown preset '{name}', expected one of {}",
                    Self::PRESETS.join(", ")
                )))
            }
        };
        Ok(Self {
            block: BlockConfig {
                channels,
                heads,
                ..BlockConfig::default()
            },
            n_vrg,
            vrbs_per_vrg: vrbs,
            scale: 2,
            long_skip: true,
            seed: 0,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.block.validate()?;
        if !matches!(self.scale, 2 | 4) {
            return Err(Error::Config(format!("scale must be 2 or 4, got {}", self.scale)));
        }
        if self.n_vrg == 0 || self.vrbs_per_vrg == 0 {
            return Err(Error::Config("n_vrg and vrbs_per_vrg must be at least 1".into()));
        }
        Ok(())
    }

    /// Keys understood by [`ModelConfig::set`], with a short description.
    pub const KEYS: [(&'static str, &'static str); 14] = [
        ("channels", "feature width C (multiple of 4 x heads)"),
        ("heads", "WKV head count; head dim = channels / heads"),
        ("n_vrg", "number of residual groups"),
        ("vrbs_per_vrg", "residual blocks per group"),
        ("scale", "upscaling factor: 2 or 4"),
        ("shift_mode", "qshift | omnishift | omniquad"),
        ("dilations", "four comma-separated dilations of the 1x1,3x3,5x5,7x7 shift branches"),
        ("ffn", "channelmix | mlp"),
        ("scan", "2d | 1d (1d drops the vertical scan)"),
        ("scan_order", "rowwise | rasterflat"),
        ("norm", "on | off: layer norm before each mixer"),
        ("long_skip", "on | off: shallow features added after the groups"),
        ("hidden_mult", "hidden width of channel mix / MLP as a multiple of C"),
        ("init", "standard | zero_residual"),
    ];

    /// Applies one `key = value` setting. Returns `false` for keys this
    /// config does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let b = &mut self.block;
        match key {
            "channels" => b.channels = parse_num(key, value)?,
            "heads" => b.heads = parse_num(key, value)?,
            "n_vrg" => self.n_vrg = parse_num(key, value)?,
            "vrbs_per_vrg" => self.vrbs_per_vrg = parse_num(key, value)?,
            "scale" => self.scale = parse_num(key, value)?,
            "shift_mode" => b.shift = value.parse()?,
            "dilations" => {
                let parts: Vec<usize> = value
                    .split(',')
                    .map(|s| parse_num(key, s.trim()))
                    .collect::<Result<_>>()?;
                b.dilations = parts.try_into().map_err(|_| {
                    Error::Config(format!("dilations needs exactly four values, got '{value}'"))
                })?;
            }
            "ffn" => b.ffn = value.parse()?,
            "scan" => b.scan = value.parse()?,
            "scan_order" => b.scan_order = value.parse()?,
            "norm" => b.norm = parse_bool(key, value)?,
            "long_skip" => self.long_skip = parse_bool(key, value)?,
            "hidden_mult" => b.hidden_mult = parse_num(key, value)?,
            "init" => b.init = value.parse()?,
            "seed" => self.seed = parse_num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// All settings as `(key, value)` pairs, in a fixed order.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let b = &self.block;
        let d = b.dilations;
        vec![
            ("channels", b.channels.to_string()),
            ("heads", b.heads.to_string()),
            ("n_vrg", self.n_vrg.to_string()),
            ("vrbs_per_vrg", self.vrbs_per_vrg.to_string()),
            ("scale", self.scale.to_string()),
            ("shift_mode", b.shift.to_string()),
            ("dilations", format!("{},{},{},{}", d[0], d[1], d[2], d[3])),
            ("ffn", b.ffn.to_string()),
            ("scan", b.scan.to_string()),
            ("scan_order", b.scan_order.to_string()),
            ("norm", on_off(b.norm).into()),
            ("long_skip", on_off(self.long_skip).into()),
            ("hidden_mult", b.hidden_mult.to_string()),
            ("init", b.init.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }
}

/// Per-image, per-channel standardization over `H x W`.
/// Returns `(x_n, mu, sigma)` with `mu` and `sigma` shaped `(N, C)`;
/// `sigma` is clamped below at [`SIGMA_FLOOR`].
pub fn normalize<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let [n, c, h, w] = x.dims4()?;
    let hw = h * w;
    let mut mu = Vec::with_capacity(n * c);
    let mut sigma = Vec::with_capacity(n * c);
    let mut out = x.clone();
    for plane in out.data_mut().chunks_mut(hw) {
        let mean = plane.iter().map(|v| v.as_f64()).sum::<f64>() / hw as f64;
        let var = plane.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / hw as f64;
        let sd = var.sqrt().max(SIGMA_FLOOR);
        plane
            .iter_mut()
            .for_each(|v| *v = T::from_f64((v.as_f64() - mean) / sd));
        mu.push(T::from_f64(mean));
        sigma.push(T::from_f64(sd));
    }
    Ok((out, Tensor::new(&[n, c], mu)?, Tensor::new(&[n, c], sigma)?))
}

/// `mu + sigma ⊙ f`, broadcasting `(N, C)` statistics over space.
pub fn denormalize<T: Scalar>(f: &Tensor<T>, mu: &Tensor<T>, sigma: &Tensor<T>) -> Result<Tensor<T>> {
    let tape = Tape::inference();
    let out = tape.affine_nc(&tape.constant(f.clone()), sigma, mu)?;
    Ok(out.value().clone())
}

/// Parameter handles of the whole network.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub shallow: ConvParams,
    pub groups: Vec<VrgParams>,
    pub conv_feat: ConvParams,
    pub upsample: ConvParams,
}

/// A configured network and its parameters.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar = f32> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    pub params: ModelParams,
}

impl<T: Scalar> Model<T> {
    /// Builds a freshly initialized model; all randomness comes from `cfg.seed`.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        let c = cfg.block.channels;
        let shallow = ConvParams::build(&mut b.scope("shallow"), 3, c, false)?;
        let groups = (0..cfg.n_vrg)
            .map(|i| VrgParams::build(&mut b.scope(&format!("vrg{i}")), &cfg.block, cfg.vrbs_per_vrg))
            .collect::<Result<_>>()?;
        let conv_feat = ConvParams::build(&mut b.scope("conv_feat"), c, c, false)?;
        let upsample = ConvParams::build(&mut b.scope("upsample"), c, 3 * cfg.scale * cfg.scale, false)?;
        Ok(Self {
            cfg,
            store,
            params: ModelParams {
                shallow,
                groups,
                conv_feat,
                upsample,
            },
        })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_elements()
    }

    /// Differentiable forward pass on `(N, 3, h, w)` input in `[0, 1]`.
    pub fn forward(&self, tape: &Tape<T>, lr: &Tensor<T>) -> Result<Var<T>> {
        let [_, c, _, _] = lr.dims4()?;
        if c != 3 {
            return Err(Error::invalid(
                "forward",
                format!("expected 3 input channels, got {c}"),
            ));
        }
        let (x_n, mu, sigma) = normalize(lr)?;
        let cx = Ctx::new(tape, &self.store, &self.cfg.block);
        let p = &self.params;
        let shallow = p.shallow.apply(&cx, &tape.constant(x_n))?;
        let mut h = shallow.clone();
        for g in &p.groups {
            h = vrg(&cx, &h, g)?;
        }
        if self.cfg.long_skip {
            h = tape.add(&h, &shallow)?;
        }
        let feat = p.conv_feat.apply(&cx, &h)?;
        let up = tape.pixel_shuffle(&p.upsample.apply(&cx, &feat)?, self.cfg.scale)?;
        tape.affine_nc(&up, &sigma, &mu)
    }

    /// Forward pass without recording gradients.
    pub fn infer(&self, lr: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::inference();
        Ok(self.forward(&tape, lr)?.value().clone())
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            store: self.store.cast(),
            params: self.params.clone(),
        }
    }
}

/// Number of parameters of the network described by `cfg`.
pub fn param_count(cfg: &ModelConfig) -> Result<usize> {
    Ok(Model::<f32>::new(cfg.clone())?.num_params())
}

fn ckpt_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{}: {msg}", path.display()))
}

impl Model<f32> {
    /// Writes the magic line, the config as `key=value` lines, one
    /// `tensor <name> f32 <dims>` line per parameter, a blank line, then all
    /// parameter values as little-endian `f32` in header order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut header = format!("{CHECKPOINT_MAGIC}{CHECKPOINT_VERSION}\n");
        for (k, v) in self.cfg.pairs() {
            header.push_str(&format!("{k}={v}\n"));
        }
        for p in self.store.iter() {
            let dims: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
            header.push_str(&format!("tensor {} f32 {}\n", p.name, dims.join(" ")));
        }
        header.push('\n');
        let io = |e| Error::io(path, e);
        w.write_all(header.as_bytes()).map_err(io)?;
        for p in self.store.iter() {
            for v in p.value.data() {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    /// Reads a checkpoint written by [`Model::save`]. The network is rebuilt
    /// from the stored config and every stored tensor must match it exactly.
    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut line = String::new();
        let next_line = |r: &mut BufReader<File>, line: &mut String| -> Result<bool> {
            line.clear();
            let n = r.read_line(line).map_err(|e| match e.kind() {
                std::io::ErrorKind::InvalidData => ckpt_err(path, "header is not valid text"),
                _ => Error::io(path, e),
            })?;
            if line.ends_with('\n') {
                line.pop();
            }
            Ok(n > 0)
        };
        if !next_line(&mut r, &mut line)? || !line.starts_with(CHECKPOINT_MAGIC) {
            return Err(ckpt_err(path, "not a checkpoint (missing magic line)"));
        }
        let version = &line[CHECKPOINT_MAGIC.len()..];
        if version != CHECKPOINT_VERSION.to_string() {
            return Err(ckpt_err(
                path,
                format!("format version {version} is not supported, expected {CHECKPOINT_VERSION}"),
            ));
        }
        let mut cfg = ModelConfig::default();
        let mut tensors: Vec<(String, Vec<usize>)> = Vec::new();
        loop {
            if !next_line(&mut r, &mut line)? {
                return Err(ckpt_err(path, "truncated header"));
            }
            if line.is_empty() {
                break;
            }
            if let Some(rest) = line.strip_prefix("tensor ") {
                let mut parts = rest.split(' ');
                let name = parts.next().unwrap_or_default().to_string();
                let dtype = parts.next().unwrap_or_default();
                if dtype != "f32" {
                    return Err(ckpt_err(path, format!("tensor {name}: unsupported dtype '{dtype}'")));
                }
                let dims = parts
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| ckpt_err(path, format!("tensor {name}: bad shape")))?;
                tensors.push((name, dims));
            } else if let Some((k, v)) = line.split_once('=') {
                if !cfg.set(k, v).map_err(|e| ckpt_err(path, e))? {
                    return Err(ckpt_err(path, format!("unknown config key '{k}'")));
                }
            } else {
                return Err(ckpt_err(path, format!("malformed header line '{line}'")));
            }
        }
        let mut model = Model::<f32>::new(cfg).map_err(|e| ckpt_err(path, e))?;
        if tensors.len() != model.store.len() {
            let missing: Vec<&str> = model
                .store
                .iter()
                .map(|p| p.name.as_str())
                .filter(|n| !tensors.iter().any(|(t, _)| t == n))
                .collect();
            return Err(ckpt_err(
                path,
                format!(
                    "holds {} tensors but the config needs {} (missing: {})",
                    tensors.len(),
                    model.store.len(),
                    missing.join(", ")
                ),
            ));
        }
        let mut buf = Vec::new();
        for (name, dims) in &tensors {
            let id = model
                .store
                .id_of(name)
                .ok_or_else(|| ckpt_err(path, format!("unexpected parameter '{name}'")))?;
            let expect = model.store.value(id).shape().to_vec();
            if *dims != expect {
                return Err(ckpt_err(
                    path,
                    format!("parameter '{name}' has shape {dims:?}, config expects {expect:?}"),
                ));
            }
            let n: usize = dims.iter().product();
            buf.resize(4 * n, 0);
            r.read_exact(&mut buf).map_err(|e| match e.kind() {
                std::io::ErrorKind::UnexpectedEof => {
                    ckpt_err(path, format!("truncated payload at parameter '{name}'"))
                }
                _ => Error::io(path, e),
            })?;
            let values = model.store.value_mut(id).data_mut();
            for (v, b) in values.iter_mut().zip(buf.chunks_exact(4)) {
                *v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
            }
        }
        if r.read(&mut [0u8]).map_err(|e| Error::io(path, e))? != 0 {
            return Err(ckpt_err(path, "trailing bytes after payload"));
        }
        Ok(model)
    }
}
