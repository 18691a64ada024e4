use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use diffseg_cli::commands;
use diffseg_cli::config::{parse_list, ConsisFlag, Overrides, RunConfig};

#[derive(Parser)]
#[command(
    name = "diffseg",
    version,
    about = "Diffusion-feature segmentation with dual-branch consistency training"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML or JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for checkpoints and reports.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dataset root.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Inversion timesteps, comma separated.
    #[arg(long, global = true, value_parser = parse_list)]
    steps: Option<Vec<usize>>,
    /// Decoder layers to capture, comma separated.
    #[arg(long, global = true, value_parser = parse_list)]
    layers: Option<Vec<usize>>,
    /// Consistency loss: l2, kl or none.
    #[arg(long, global = true)]
    consis: Option<ConsisFlag>,
    /// Disable the consistency term (λ2 = 0).
    #[arg(long, global = true)]
    no_consis: bool,
    #[arg(long, global = true)]
    lambda1: Option<f64>,
    #[arg(long, global = true)]
    lambda2: Option<f64>,
    /// Number of optimizer steps for pretrain, train or ablate.
    #[arg(long, global = true)]
    iterations: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic training and evaluation splits.
    GenData,
    /// Pretrain the conditional denoiser.
    Pretrain,
    /// Train the fusion block and head with the dual-branch objective.
    Train {
        /// Diffusion checkpoint (defaults to the one under --out).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a trainer checkpoint on the source and target domains.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also score the conditional branch given ground-truth masks.
        #[arg(long)]
        with_reference: bool,
    },
    /// Capture inversion features for a dataset into the feature cache.
    Extract {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Also capture mask-guided features from the labels.
        #[arg(long)]
        conditional: bool,
    },
    /// Train and score the five ablation arms.
    Ablate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let c = &cli.common;
    let overrides = Overrides {
        seed: c.seed,
        out: c.out.clone(),
        data_root: c.data.clone(),
        steps: c.steps.clone(),
        layers: c.layers.clone(),
        consis: c.consis,
        no_consis: c.no_consis,
        lambda1: c.lambda1,
        lambda2: c.lambda2,
    };
    let mut cfg = RunConfig::load(c.config.as_deref(), &overrides)?;
    if let Some(n) = c.iterations {
        match cli.command {
            Command::Pretrain => cfg.pretrain.steps = n,
            Command::Train { .. } => cfg.train.steps = n,
            Command::Ablate { .. } => cfg.ablation.steps = n,
            _ => {}
        }
    }
    log::info!("config hash {}", cfg.hash());
    match &cli.command {
        Command::GenData => {
            for (dir, m) in commands::gen_data(&cfg)? {
                println!("{}: {} images ({})", dir.display(), m.count, m.domain.name);
            }
        }
        Command::Pretrain => {
            let s = commands::pretrain(&cfg)?;
            println!(
                "checkpoint {} final loss {:.6}",
                s.checkpoint.display(),
                s.losses.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Train { checkpoint } => {
            let s = commands::train(&cfg, checkpoint.as_deref())?;
            if let Some(r) = s.log.last() {
                println!(
                    "checkpoint {} final l_final {:.6}",
                    s.checkpoint.display(),
                    r.l_final
                );
            }
        }
        Command::Eval {
            checkpoint,
            with_reference,
        } => {
            let r = commands::eval(&cfg, checkpoint.as_deref(), *with_reference)?;
            print!("{}", r.to_csv());
        }
        Command::Extract {
            checkpoint,
            dataset,
            conditional,
        } => {
            let s = commands::extract(
                &cfg,
                checkpoint.as_deref(),
                dataset.as_deref(),
                *conditional,
            )?;
            println!(
                "{} images, stacked features {}x{}x{}, cache {}",
                s.images,
                s.channels,
                s.height,
                s.width,
                s.cache_dir.display()
            );
        }
        Command::Ablate { checkpoint } => {
            let r = commands::ablate(&cfg, checkpoint.as_deref())?;
            print!("{}", r.to_csv());
            println!("{}", r.ordering);
        }
    }
    Ok(())
}
