//! Argument parsing and dispatch for the `medvsr` binary.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::commands::{self, Axis};
use crate::config::RunConfig;
use crate::error::Result;

#[derive(Debug, Parser)]
#[command(name = "medvsr", version, about = "Recurrent state-space video super-resolution (×4)")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every verb.
#[derive(Debug, Args)]
pub struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `out`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Run seed (overrides `seed`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// `key=value` applied after the configuration file; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Degrade the HR tree (`hr_dir`) into an LR tree with a seed manifest.
    Degrade,
    /// Train on paired `hr_dir`/`lr_dir` trees.
    Train {
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Super-resolve a clip directory or a tree of clips.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// PSNR/SSIM of SR frames against ground truth.
    Eval {
        #[arg(long)]
        sr: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Forward/backward flow consistency of a clip or tree of clips.
    FlowError {
        #[arg(long)]
        input: PathBuf,
        /// `zero` or `block_match` (overrides `flow`).
        #[arg(long)]
        method: Option<String>,
    },
    /// Train and score every variant along one ablation axis.
    Ablate {
        /// cssb, issb, lksb, prop or window.
        #[arg(long)]
        axis: String,
    },
}

/// Resolves the run configuration: defaults, then file, then overrides, then `--seed`/`--out`.
pub fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(&common.overrides)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    let mut cfg = resolve(&cli.common)?;
    match &cli.command {
        Command::Degrade => {
            let m = commands::degrade(&cfg)?;
            println!("degraded {} clips into {}", m.len(), cfg.out.display());
        }
        Command::Train { resume } => {
            let o = commands::train(&cfg, resume.as_deref())?;
            match o.rows.last() {
                Some(r) => println!("iteration {} loss {} lr {}", r.iteration, r.loss, r.lr),
                None => println!("nothing to do: checkpoint already at iteration {}", o.trainer.iteration),
            }
            for c in &o.checkpoints {
                println!("checkpoint {}", c.display());
            }
        }
        Command::Infer { checkpoint, input } => {
            let dirs = commands::infer(&cfg, checkpoint, input)?;
            println!("wrote {} clips under {}", dirs.len(), cfg.out.display());
        }
        Command::Eval { sr, gt } => {
            let (clips, s) = commands::eval(&cfg, sr, gt)?;
            for c in &clips {
                println!("{}: psnr {:.4} ssim {:.6} ({} frames)", c.clip, c.mean_psnr, c.mean_ssim, c.frames);
            }
            println!("mean psnr {:.4} ssim {:.6}", s.clip_mean_psnr, s.clip_mean_ssim);
        }
        Command::FlowError { input, method } => {
            if let Some(m) = method {
                cfg.set("flow", m)?;
            }
            let (rows, m) = commands::flow_error(&cfg, input)?;
            for r in &rows {
                println!("{}: {}", r.clip, r.error);
            }
            println!("mean flow consistency error {m}");
        }
        Command::Ablate { axis } => {
            let axis: Axis = axis.parse()?;
            let rows = commands::ablate(&cfg, axis)?;
            println!("variant,params,psnr,ssim");
            for r in &rows {
                println!("{},{},{:.4},{:.6}", r.variant, r.params, r.psnr, r.ssim);
            }
        }
    }
    Ok(())
}
