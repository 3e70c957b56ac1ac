//! Run configuration: model and training settings plus paths, read from
//! `key = value` lines and overridden by command-line flags.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use omnirwkvsr::model::ModelConfig;
use omnirwkvsr::training::TrainConfig;
use omnirwkvsr::{Error, Result};

const OTHER_KEYS: [(&str, &str); 3] = [
    ("preset", "desk | default | full; applied before every other key"),
    ("data", "directory of HR PNGs (val.txt lists held-out names)"),
    ("out", "output directory for checkpoints and logs"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        Ok(Self {
            preset: name.to_string(),
            model: ModelConfig::preset(name)?,
            train: TrainConfig::preset(name)?,
            data: None,
            out: None,
        })
    }

    /// `seed` goes to both the model and the trainer.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "preset" => {
                return Err(Error::Config(
                    "preset must be resolved before other keys".into(),
                ))
            }
            "data" => self.data = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            _ => {
                let m = self.model.set(key, value)?;
                let t = self.train.set(key, value)?;
                if !(m || t) {
                    return Err(Error::Config(format!(
                        "unknown key '{key}' (run with --help-config for the list)"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Builds the config from `pairs` in order. The last `preset` wins and is
    /// applied first; everything else is validated after all keys are set.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let preset = pairs
            .iter()
            .rev()
            .find(|(k, _)| k == "preset")
            .map_or("desk", |(_, v)| v.as_str());
        let mut cfg = Self::preset(preset)?;
        for (k, v) in pairs.iter().filter(|(k, _)| k != "preset") {
            cfg.set(k, v)?;
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    /// File pairs first, then `overrides`.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut pairs = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                    path: p.to_path_buf(),
                    source: e,
                })?;
                parse_lines(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => Vec::new(),
        };
        pairs.extend_from_slice(overrides);
        Self::from_pairs(&pairs)
    }

    /// Every setting as config-file text that [`RunConfig::load`] reads back.
    pub fn to_text(&self) -> String {
        let mut s = format!("preset = {}\n", self.preset);
        for (k, v) in self.model.pairs() {
            if k != "seed" {
                let _ = writeln!(s, "{k} = {v}");
            }
        }
        for (k, v) in self.train.pairs() {
            let _ = writeln!(s, "{k} = {v}");
        }
        for (k, p) in [("data", &self.data), ("out", &self.out)] {
            if let Some(p) = p {
                let _ = writeln!(s, "{k} = {}", p.display());
            }
        }
        s
    }
}

/// Splits config text into `(key, value)` pairs. `#` starts a comment;
/// blank lines are skipped.
pub fn parse_lines(text: &str) -> std::result::Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected 'key = value', got '{line}'", i + 1))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || v.is_empty() {
            return Err(format!("line {}: empty key or value in '{line}'", i + 1));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

/// Parses a `--set key=value` flag.
pub fn parse_override(s: &str) -> std::result::Result<(String, String), String> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| format!("expected key=value, got '{s}'"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

pub fn schema() -> String {
    let desk = RunConfig::preset("desk").expect("desk preset");
    let defaults: Vec<(&str, String)> = desk
        .model
        .pairs()
        .into_iter()
        .chain(desk.train.pairs())
        .collect();
    let default_of = |k: &str| {
        defaults
            .iter()
            .find(|(d, _)| *d == k)
            .map_or("-".to_string(), |(_, v)| v.clone())
    };
    let mut s = String::from(
        "Config files hold `key = value` lines; `#` starts a comment.\n\
         Flags override the file. Defaults shown are the desk preset.\n\n",
    );
    let mut section = |title: &str, keys: &[(&str, &str)]| {
        let _ = writeln!(s, "{title}");
        for (k, doc) in keys {
            let _ = writeln!(s, "  {k:<14} {:<12} {doc}", default_of(k));
        }
        s.push('\n');
    };
    section("[run]", &OTHER_KEYS);
    section("[model]", &ModelConfig::KEYS);
    section("[train]", &TrainConfig::KEYS);
    s.truncate(s.trim_end().len());
    s.push('\n');
    s
}
