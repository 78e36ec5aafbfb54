//! The `train` command.

use std::path::PathBuf;

use clap::ValueEnum;
use tensorgraph::data::DatasetSpec;
use tensorgraph::walkthrough::{ModelConfig, TrainConfig, Trainer, WeightInit};

use crate::error::CliError;
use crate::graph::read_fleet;
use crate::DTypeArg;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InitArg {
    /// Uniform draws from [0, 1), seeded by --seed.
    Uniform,
    Zeros,
}

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    /// `synthetic:k=10,d=784,n=5000,sep=3.0,seed=7` or
    /// `idx:images=PATH,labels=PATH[,k=10]`.
    #[arg(long, default_value = "synthetic:k=10,d=784,n=5000,sep=3.0,seed=7")]
    data: String,
    /// Total steps, counting any restored from the checkpoint.
    #[arg(long, default_value_t = 1000)]
    steps: u64,
    #[arg(long, default_value_t = 100)]
    batch: usize,
    #[arg(long, default_value_t = 0.5)]
    lr: f64,
    /// Seeds weight initialization and batch shuffling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of identical simulated devices.
    #[arg(long, default_value_t = 1, conflicts_with = "fleet")]
    devices: usize,
    /// Fleet description (JSON) to place on instead of --devices.
    #[arg(long)]
    fleet: Option<PathBuf>,
    /// Send cross-device f32 tensors as truncated 16-bit words.
    #[arg(long)]
    truncate_wire: bool,
    /// Checkpoint file; restored from when it exists, written at the end.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Also write the checkpoint every N steps.
    #[arg(long, default_value_t = 0)]
    checkpoint_every: u64,
    /// JSONL event log for the merged summaries.
    #[arg(long)]
    events: Option<PathBuf>,
    /// Write summaries every N steps.
    #[arg(long, default_value_t = 1)]
    summary_every: u64,
    #[arg(long, value_enum, default_value_t = DTypeArg::F32)]
    dtype: DTypeArg,
    #[arg(long, value_enum, default_value_t = InitArg::Uniform)]
    init: InitArg,
    /// Initial value of every bias element.
    #[arg(long, default_value_t = 0.1)]
    bias: f64,
}

pub fn run(args: &TrainArgs) -> Result<(), CliError> {
    if args.batch == 0 {
        return Err(CliError::Usage("--batch must be at least 1".into()));
    }
    if args.devices == 0 {
        return Err(CliError::Usage("--devices must be at least 1".into()));
    }
    if !(args.lr > 0.0 && args.lr.is_finite()) {
        return Err(CliError::Usage("--lr must be a positive number".into()));
    }
    let spec: DatasetSpec = args.data.parse()?;
    let data = spec.load()?;
    let fleet = args.fleet.as_deref().map(read_fleet).transpose()?;
    log::info!(
        "{} samples of dimension {} in {} classes",
        data.len(),
        data.dim,
        data.classes
    );

    let config = TrainConfig {
        model: ModelConfig {
            dtype: args.dtype.into(),
            weight_init: match args.init {
                InitArg::Uniform => WeightInit::Uniform { seed: args.seed },
                InitArg::Zeros => WeightInit::Zeros,
            },
            bias_init: args.bias,
            learning_rate: args.lr,
        },
        steps: args.steps,
        batch: args.batch,
        shuffle_seed: args.seed,
        devices: args.devices,
        fleet,
        truncate_wire: args.truncate_wire,
        checkpoint: args.checkpoint.clone(),
        checkpoint_every: args.checkpoint_every,
        events: args.events.clone(),
        summary_every: args.summary_every,
    };
    let mut trainer = Trainer::new(config, data)?;

    if args.steps == 0 {
        println!("Loss at step {}: {}", trainer.global_step(), trainer.peek_loss()?);
        return Ok(());
    }
    let report = trainer.run(|step, loss| println!("Loss at step {step}: {loss}"))?;
    println!("Final loss: {}", report.final_loss);
    println!("Training accuracy: {}", report.accuracy);
    log::info!(
        "{} steps in {:.2?}, {:.1} simulated us",
        report.losses.len(),
        report.elapsed,
        report.clock
    );
    Ok(())
}
