mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::parse_override;

#[derive(Parser)]
#[command(name = "omnirwkvsr", version, about = "RWKV-style image super-resolution on the CPU")]
struct Cli {
    /// Print every config key with its default and exit.
    #[arg(long)]
    help_config: bool,
    #[command(subcommand)]
    cmd: Option<Cmd>,
}

/// Config sources shared by `train` and `ablate`.
#[derive(Args, Clone, Debug, Default)]
pub struct RunArgs {
    /// `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// desk | default | full (overrides the file's preset).
    #[arg(long)]
    pub preset: Option<String>,
    /// Directory of HR PNGs.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed for initialization and sampling.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iters: Option<usize>,
    /// Disable the long skip around the residual groups.
    #[arg(long)]
    pub no_long_skip: bool,
    /// Extra `key=value` override; repeatable, applied last.
    #[arg(long = "set", value_parser = parse_override)]
    pub sets: Vec<(String, String)>,
}

impl RunArgs {
    /// Flag overrides in application order.
    pub fn overrides(&self) -> Vec<(String, String)> {
        let mut v = Vec::new();
        let mut push = |k: &str, val: String| v.push((k.to_string(), val));
        if let Some(p) = &self.preset {
            push("preset", p.clone());
        }
        if let Some(d) = &self.data {
            push("data", d.display().to_string());
        }
        if let Some(o) = &self.out {
            push("out", o.display().to_string());
        }
        if let Some(s) = self.seed {
            push("seed", s.to_string());
        }
        if let Some(i) = self.iters {
            push("iters", i.to_string());
        }
        if self.no_long_skip {
            push("long_skip", "off".into());
        }
        v.extend(self.sets.iter().cloned());
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    All,
    Train,
    Val,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BenchMode {
    Wkv,
    Forward,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    Ffn,
    Shift,
    Scan,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model; writes checkpoints and CSV logs into --out.
    Train(RunArgs),
    /// Super-resolve a PNG or every PNG in a directory.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        /// PNG file or directory of PNGs.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Must match the checkpoint's scale.
        #[arg(long)]
        scale: Option<usize>,
    },
    /// Score a checkpoint on HR images against a bicubic baseline.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory of HR PNGs.
        #[arg(long)]
        hr: PathBuf,
        #[arg(long)]
        scale: Option<usize>,
        /// Which images to score when the directory has a val.txt.
        #[arg(long, value_enum, default_value_t = Split::All)]
        split: Split,
        /// Also write the per-image report here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// all | tensor | wkv6 | shifts | blocks | model
        #[arg(long, default_value = "all")]
        module: String,
    },
    /// Time the WKV recurrence or full-model inference; prints CSV.
    Bench {
        #[arg(long, value_enum, default_value_t = BenchMode::Wkv)]
        mode: BenchMode,
        /// Comma-separated sequence lengths (wkv) or square image sides
        /// (forward). An empty list gives a header-only CSV.
        #[arg(long)]
        sizes: Option<String>,
        #[arg(long, default_value_t = 64)]
        channels: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        /// Model preset for forward mode.
        #[arg(long, default_value = "desk")]
        preset: String,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train each variant of one design axis with the same seed and budget.
    Ablate {
        #[arg(long, value_enum)]
        axis: Axis,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Write the procedural toy HR image set.
    Toydata {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.help_config {
        print!("{}", config::schema());
        return ExitCode::SUCCESS;
    }
    let Some(cmd) = cli.cmd else {
        eprintln!("error: no subcommand given (try --help)");
        return ExitCode::from(2);
    };
    let res = match cmd {
        Cmd::Train(run) => commands::train(&run),
        Cmd::Infer { ckpt, input, out, scale } => commands::infer(&ckpt, &input, &out, scale),
        Cmd::Eval { ckpt, hr, scale, split, csv } => {
            commands::eval(&ckpt, &hr, scale, split, csv.as_deref())
        }
        Cmd::Gradcheck { module } => commands::gradcheck(&module),
        Cmd::Bench { mode, sizes, channels, heads, reps, preset, csv } => {
            commands::bench(mode, sizes.as_deref(), channels, heads, reps, &preset, csv.as_deref())
        }
        Cmd::Ablate { axis, run } => commands::ablate(axis, &run),
        Cmd::Toydata { out, seed } => commands::toydata(&out, seed),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
