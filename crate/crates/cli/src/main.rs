use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dualrd::config::RunConfig;
use dualrd::data::{list_images, toy_dataset, ToySpec};
use dualrd::pipeline::{
    build_network, evaluate, fusion_for, infer, load_checkpoint, sweep_memory, synth_preview, Trainer, CHECKPOINT_STEM,
};
use dualrd::{data::scan_dataset, Network32, Trainer32};

/// Unified multi-class anomaly detection with restoration and identity
/// decoders over a prototype memory.
#[derive(Parser)]
#[command(name = "dualrd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// run configuration (TOML); the toy profile when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// overrides the run and model-initialization seeds
    #[arg(long)]
    seed: Option<u64>,
    /// output directory
    #[arg(long)]
    out: PathBuf,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
            None => RunConfig::toy(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
            cfg.model.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train on the configured dataset, checkpointing every epoch.
    Train {
        #[command(flatten)]
        common: Common,
        /// resume from this checkpoint stem
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write heatmaps and image scores for images or directories.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// fusion ratio override
        #[arg(long)]
        alpha: Option<f64>,
        /// also write raw float maps
        #[arg(long)]
        raw: bool,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Score the test split and write the metrics report.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Train and evaluate once per memory size.
    SweepMemory {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = [16usize, 64, 256])]
        slots: Vec<usize>,
    },
    /// Write (normal | anomalous | mask) triptychs of synthesized anomalies.
    SynthPreview {
        #[command(flatten)]
        common: Common,
        #[arg(short, long, default_value_t = 8)]
        n: usize,
    },
    /// Generate the procedural toy dataset.
    MakeToyDataset {
        /// dataset description (TOML); defaults when omitted
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn trained_network(cfg: &RunConfig, checkpoint: &Path) -> Result<Network32> {
    let mut net = build_network(cfg)?;
    load_checkpoint(checkpoint, cfg, &mut net, None)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    Ok(net)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common, checkpoint } => {
            let cfg = common.load()?;
            let mut trainer = match checkpoint {
                Some(stem) => Trainer32::resume(cfg, &stem)?,
                None => Trainer::new(cfg)?,
            };
            trainer.train(&common.out)?;
            fs::write(common.out.join("config.toml"), trainer.cfg.to_toml())?;
            println!("{}", common.out.join(CHECKPOINT_STEM).display());
        }
        Command::Infer {
            common,
            checkpoint,
            alpha,
            raw,
            inputs,
        } => {
            let cfg = common.load()?;
            let net = trained_network(&cfg, &checkpoint)?;
            let mut images = Vec::new();
            for input in &inputs {
                if input.is_dir() {
                    images.extend(list_images(input)?);
                } else {
                    images.push(input.clone());
                }
            }
            if images.is_empty() {
                bail!("no images found");
            }
            for (path, meta) in infer(&net, &cfg, &images, &common.out, &fusion_for(&cfg, alpha), raw)? {
                println!("{}\t{}", path.display(), meta.s);
            }
        }
        Command::Eval {
            common,
            checkpoint,
            alpha,
        } => {
            let cfg = common.load()?;
            let net = trained_network(&cfg, &checkpoint)?;
            let index = scan_dataset(&cfg.data.root)?;
            let eval = evaluate(&net, &cfg, &index, &fusion_for(&cfg, alpha))?;
            eval.write(&common.out)?;
            print!("{}", eval.report.to_csv());
        }
        Command::SweepMemory { common, slots } => {
            let cfg = common.load()?;
            let rows = sweep_memory::<f32>(&cfg, &slots, &common.out)?;
            print!("{}", dualrd::pipeline::sweep_csv(&rows));
        }
        Command::SynthPreview { common, n } => {
            let cfg = common.load()?;
            let written = synth_preview(&cfg, n, &common.out)?;
            log::info!("wrote {} previews", written.len());
        }
        Command::MakeToyDataset { config, seed, out } => {
            let mut spec = match &config {
                Some(path) => ToySpec::load(path)?,
                None => ToySpec::default(),
            };
            if let Some(seed) = seed {
                spec.seed = seed;
            }
            let index = toy_dataset(&spec, &out)?;
            println!(
                "{}: {} train, {} test images",
                out.display(),
                index.train.len(),
                index.test.len()
            );
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
