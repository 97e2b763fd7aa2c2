use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cs2_core::config::RunConfig;
use cs2_core::pipeline;
use cs2_core::Error;

#[derive(Parser)]
#[command(name = "cs2", version, about = "Synthesize CT-like images together with their segmentation masks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run config; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Global seed; re-derives every stage seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled phantom corpus.
    Phantom {
        #[command(flatten)]
        common: Common,
        /// Overrides pipeline.n_phantoms.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Unsupervised cluster masks for every volume's 2.5D slab.
    Maskgen {
        #[command(flatten)]
        common: Common,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean-HU guidance maps, optionally edited.
    Guide {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        masks: PathBuf,
        #[arg(long)]
        slabs: PathBuf,
        /// JSON-lines edit operations.
        #[arg(long)]
        edits: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the guidance-to-image GAN.
    TrainGan {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        guidance: PathBuf,
        #[arg(long)]
        slabs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthesize images and decoder feature caches.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        guidance: PathBuf,
        #[arg(long)]
        slabs: PathBuf,
        /// Overrides pipeline.synth_per_guidance.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the pixel-classifier ensemble on labeled synthetic images.
    TrainSeg {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        /// File of `<features> <labels>` lines.
        #[arg(long, conflicts_with_all = ["synth", "truth"])]
        labeled: Option<PathBuf>,
        /// Synth output; with --truth, labels the first pipeline.n_labeled inputs.
        #[arg(long, requires = "truth")]
        synth: Option<PathBuf>,
        /// Phantom output holding slab_truth files.
        #[arg(long, requires = "synth")]
        truth: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthesize (image, mask) pairs from guidance.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        gan: PathBuf,
        #[arg(long)]
        seg: PathBuf,
        #[arg(long)]
        guidance: PathBuf,
        #[arg(long)]
        slabs: PathBuf,
        #[arg(long)]
        edits: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dice of predicted masks against phantom truth, written as CSV.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Report path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the default config.
    Defaults {
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load(common: &Common) -> cs2_core::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.reseed(s);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::UnknownStrategy { .. } => 2,
        Error::Divergence { .. } => 4,
        Error::CheckpointMismatch(_) => 5,
        _ => 3,
    }
}

fn kind(e: &Error) -> &'static str {
    match exit_code(e) {
        2 => "config",
        4 => "divergence",
        5 => "checkpoint_mismatch",
        _ => "data",
    }
}

fn run(cmd: Command) -> cs2_core::Result<()> {
    match cmd {
        Command::Phantom { common, n, out } => {
            let mut cfg = load(&common)?;
            if let Some(n) = n {
                cfg.pipeline.n_phantoms = n;
            }
            pipeline::run_phantom(&cfg, &out)
        }
        Command::Maskgen { common, input, out } => pipeline::run_maskgen(&load(&common)?, &input, &out),
        Command::Guide {
            common,
            masks,
            slabs,
            edits,
            out,
        } => pipeline::run_guide(&load(&common)?, &masks, &slabs, edits.as_deref(), &out),
        Command::TrainGan {
            common,
            guidance,
            slabs,
            out,
        } => pipeline::run_train_gan(&load(&common)?, &guidance, &slabs, &out),
        Command::Synth {
            common,
            ckpt,
            guidance,
            slabs,
            n,
            out,
        } => {
            let mut cfg = load(&common)?;
            if let Some(n) = n {
                cfg.pipeline.synth_per_guidance = n;
            }
            pipeline::run_synth(&cfg, &ckpt, &guidance, &slabs, &out)
        }
        Command::TrainSeg {
            common,
            ckpt,
            labeled,
            synth,
            truth,
            out,
        } => {
            let cfg = load(&common)?;
            let list = match (labeled, synth, truth) {
                (Some(l), _, _) => pipeline::parse_labeled_list(&l)?,
                (None, Some(s), Some(t)) => pipeline::default_labeled_list(&cfg, &s, &t)?,
                _ => {
                    return Err(Error::InvalidArgument(
                        "train-seg needs --labeled or both --synth and --truth".into(),
                    ))
                }
            };
            pipeline::run_train_seg(&cfg, &ckpt, &list, &out)
        }
        Command::Infer {
            common,
            gan,
            seg,
            guidance,
            slabs,
            edits,
            n,
            out,
        } => {
            let mut cfg = load(&common)?;
            if let Some(n) = n {
                cfg.pipeline.synth_per_guidance = n;
            }
            pipeline::run_infer(&cfg, &gan, &seg, &guidance, &slabs, edits.as_deref(), &out)
        }
        Command::Eval {
            common,
            pred,
            truth,
            out,
        } => {
            let csv = pipeline::run_eval(&load(&common)?, &pred, &truth, &out)?;
            print!("{csv}");
            Ok(())
        }
        Command::Defaults { seed } => {
            print!("{}", RunConfig::with_seed(seed.unwrap_or(0)).to_toml()?);
            Ok(())
        }
    }
}

fn report(e: &Error, path_hint: Option<&Path>) -> String {
    let mut obj = serde_json::json!({
        "error": kind(e),
        "exit_code": exit_code(e),
        "message": e.to_string(),
    });
    if let Some(p) = path_hint {
        obj["path"] = serde_json::Value::String(p.display().to_string());
    }
    obj.to_string()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let hint = match &e {
                Error::MissingInput(p) => Some(p.clone()),
                _ => None,
            };
            eprintln!("{}", report(&e, hint.as_deref()));
            ExitCode::from(exit_code(&e))
        }
    }
}
