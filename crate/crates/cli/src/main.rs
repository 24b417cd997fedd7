//! `ease` command-line driver.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use ease_core::pipeline::{
    calibrate, class_csv, colorize, evaluate_dirs, list_images, segment_image, EvalOptions,
    PipelineConfig,
};
use ease_core::synth::{gen_blob_scene, gen_crack_scene, LineSpec, Orientation, SynthSpec};
use ease_core::tensors::read_label_map;
use ease_core::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_IO: u8 = 2;
const EXIT_DATA: u8 = 3;

#[derive(Parser)]
#[command(name = "ease", version, about = "Training-free hierarchical segmentation from frozen features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Segment every image bundle under the feature directory.
    Segment {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit the granularity target and sweep the boundary penalty.
    Calibrate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        features: Option<PathBuf>,
        /// Directory receiving report.txt
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Hungarian-matched mIoU of predictions against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Ground-truth label that absorbs unmatched clusters
        #[arg(long)]
        background: Option<u32>,
        /// Also report centerline IoU of the non-background classes
        #[arg(long)]
        cliou: bool,
        /// Write per-class IoU as CSV
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Render a label map as a binary PPM.
    Colorize {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write synthetic bundles and ground truth.
    Synth {
        #[arg(long, value_enum, default_value_t = Kind::Blob)]
        kind: Kind,
        /// Feature root; bundles go to <out>/<id>/
        #[arg(long)]
        out: PathBuf,
        /// Ground-truth root; labels go to <gt>/<id>.tns
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 8)]
        patch: usize,
        #[arg(long, default_value_t = 32)]
        channels: usize,
        #[arg(long, default_value_t = 3)]
        regions: usize,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Blob,
    Crack,
}

/// Error carrying its exit status.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io { .. } => EXIT_IO,
            Error::Config(_) | Error::InvalidArgument(_) => EXIT_USAGE,
            _ => EXIT_DATA,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure {
        code: EXIT_IO,
        message: format!("I/O error on {}: {e}", path.display()),
    }
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig, Failure> {
    Ok(match path {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    })
}

fn pick(flag: Option<PathBuf>, from_config: &Option<PathBuf>, name: &str) -> Result<PathBuf, Failure> {
    flag.or_else(|| from_config.clone())
        .ok_or_else(|| usage(format!("--{name} is required (or set `{name}` in the config)")))
}

fn init_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("EASE_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("EASE_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| usage(format!("cannot size worker pool: {e}")))
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Segment {
            config,
            features,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let features = pick(features, &cfg.features, "features")?;
            let out = pick(out, &cfg.out, "out")?;
            let ids = list_images(&features)?;
            if ids.is_empty() {
                return Err(Failure {
                    code: EXIT_IO,
                    message: format!("no image bundles under {}", features.display()),
                });
            }
            let results: Vec<_> = ids
                .par_iter()
                .map(|id| segment_image(&cfg, &features, &out, id))
                .collect();
            let mut first_failure = None;
            for (id, r) in ids.iter().zip(results) {
                match r {
                    Ok(o) => eprintln!("{id}: {} levels", o.hierarchy.levels.len()),
                    Err(e) => {
                        eprintln!("{id}: {e}");
                        first_failure.get_or_insert(Failure::from(e));
                    }
                }
            }
            match first_failure {
                Some(f) => Err(Failure {
                    message: "one or more images failed".into(),
                    ..f
                }),
                None => Ok(()),
            }
        }
        Command::Calibrate {
            config,
            gt,
            features,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let features = pick(features, &cfg.features, "features")?;
            let gt = pick(gt, &cfg.gt, "gt")?;
            let result = calibrate(&cfg, &features, &gt)?;
            let report = result.report();
            print!("{report}");
            if let Some(dir) = out.or(cfg.out) {
                std::fs::create_dir_all(&dir).map_err(|e| io_failure(&dir, e))?;
                let path = dir.join("report.txt");
                std::fs::write(&path, report).map_err(|e| io_failure(&path, e))?;
            }
            Ok(())
        }
        Command::Eval {
            pred,
            gt,
            background,
            cliou,
            csv,
        } => {
            if cliou && background.is_none() {
                return Err(usage("--cliou needs --background"));
            }
            let (summary, evals) = evaluate_dirs(
                &pred,
                &gt,
                EvalOptions {
                    background,
                    cl_iou: cliou,
                },
            )?;
            print!("{}", summary.to_key_value());
            if let Some(path) = csv {
                std::fs::write(&path, class_csv(&evals)).map_err(|e| io_failure(&path, e))?;
            }
            Ok(())
        }
        Command::Colorize { input, out, seed } => {
            let l = read_label_map(&input)?;
            std::fs::write(&out, colorize(&l, seed)).map_err(|e| io_failure(&out, e))
        }
        Command::Synth {
            kind,
            out,
            gt,
            count,
            seed,
            size,
            patch,
            channels,
            regions,
            noise,
        } => {
            for i in 0..count {
                let spec = SynthSpec {
                    seed: seed.wrapping_add(i),
                    height: size,
                    width: size,
                    patch,
                    channels,
                    regions,
                    noise,
                    line: Some(LineSpec {
                        width: 2,
                        orientation: Orientation::Horizontal,
                    }),
                    ..Default::default()
                };
                let scene = match kind {
                    Kind::Blob => gen_blob_scene(&spec)?,
                    Kind::Crack => gen_crack_scene(&spec)?,
                };
                let id = format!("img{i:04}");
                scene.write(&out.join(&id), &gt.join(format!("{id}.tns")))?;
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match init_threads().and_then(|()| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
