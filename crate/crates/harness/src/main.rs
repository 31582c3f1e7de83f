use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};
use pcnet::stimuli::ImageFormat;
use pcnet_harness::{commands, Context, ExperimentConfig};

#[derive(Parser)]
#[command(name = "pcnet", version, about = "Train and probe predictive-coding networks on illusory contours")]
struct Cli {
    /// TOML or JSON file overriding the defaults
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Reduced-scale profile (fewer epochs, images and networks)
    #[arg(long, global = true)]
    desk: bool,
    /// Train a single network, using this seed for both stages
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Root for checkpoints, datasets and run directories
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Evaluate at this noise level only
    #[arg(long, global = true)]
    noise: Option<f32>,
    /// Evaluation timesteps
    #[arg(long, global = true)]
    timesteps: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Png,
    Ppm,
}

#[derive(Subcommand)]
enum Command {
    /// Unsupervised reconstruction pretraining on CIFAR-100
    Pretrain,
    /// Add the decision head and finetune on squares vs random inducers
    Finetune,
    /// Decision and FG trajectories over the four test classes
    Evaluate,
    /// Test-time coefficient ablations
    Ablate,
    /// Networks trained and tested without each component
    TrainRestricted,
    /// Feedforward baselines FF, FF-C and FF-K
    Baselines,
    /// Pretrain-only, shapes-only and noise-free-finetuning studies
    DatasetStudies,
    /// Alternative training timesteps and the parameter-free regime
    TimestepStudy,
    /// Generate the shapes dataset
    GenStimuli {
        /// Also write one image file per stimulus
        #[arg(long, value_enum)]
        images: Option<Format>,
    },
}

fn config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p, cli.desk)?,
        None => ExperimentConfig::base(cli.desk),
    };
    if let Some(s) = cli.seed {
        cfg.pretrain_seeds = vec![s];
        cfg.finetune_seeds = vec![s];
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    if let Some(n) = cli.noise {
        cfg.noise_levels = vec![n];
    }
    if let Some(t) = cli.timesteps {
        cfg.eval_timesteps = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let mut ctx = Context::new(config(&cli)?);
    let dir = match cli.command {
        Command::Pretrain => commands::pretrain(&mut ctx)?,
        Command::Finetune => commands::finetune(&mut ctx)?,
        Command::Evaluate => commands::evaluate(&mut ctx)?,
        Command::Ablate => commands::ablate(&mut ctx)?,
        Command::TrainRestricted => commands::train_restricted(&mut ctx)?,
        Command::Baselines => commands::baselines(&mut ctx)?,
        Command::DatasetStudies => commands::dataset_studies(&mut ctx)?,
        Command::TimestepStudy => commands::timestep_study(&mut ctx)?,
        Command::GenStimuli { images } => commands::gen_stimuli(
            &mut ctx,
            images.map(|f| match f {
                Format::Png => ImageFormat::Png,
                Format::Ppm => ImageFormat::Ppm,
            }),
        )?,
    };
    println!("{}", dir.display());
    Ok(())
}
