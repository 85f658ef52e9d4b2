use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use episeg::phantom::Split;
use episeg::Variant;
use episeg_cli::commands;
use episeg_cli::{CmdResult, RunConfig};

#[derive(Parser)]
#[command(name = "episeg", version, about = "Anomaly segmentation from MC-dropout uncertainty")]
struct Cli {
    /// JSON run configuration; defaults apply to omitted fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted override, e.g. `training.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Sets the phantom, training and inference seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Full,
    ThresholdingOnly,
    ConvexHull,
    NoMorphology,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Full => Variant::Full,
            VariantArg::ThresholdingOnly => Variant::ThresholdingOnly,
            VariantArg::ConvexHull => Variant::ConvexHull,
            VariantArg::NoMorphology => Variant::NoMorphology,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepKind {
    Threshold,
    Dropout,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the phantom dataset.
    GenData,
    /// Train the segmentation network on healthy volumes.
    Train,
    /// Write MC-dropout uncertainty maps for a split.
    Infer {
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Turn uncertainty maps into anomaly masks.
    Postprocess {
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, value_enum, default_value = "full")]
        variant: VariantArg,
    },
    /// Score masks against the reference anomalies.
    Evaluate {
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, value_enum, default_value = "full")]
        variant: VariantArg,
    },
    /// Select the threshold or the dropout rate on the validation split.
    Sweep {
        #[arg(value_enum)]
        kind: SweepKind,
    },
    /// Render SVG figures and the summary table from evaluation results.
    Report {
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
}

fn run(cli: Cli) -> CmdResult<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    match cli.command {
        Command::GenData => {
            let m = commands::gen_data(&cfg)?;
            println!("wrote {} volumes to {}", m.volumes.len(), cfg.paths.data_root.display());
        }
        Command::Train => {
            let out = commands::train(&cfg)?;
            let best = out.log.best().map_or(f64::NAN, |r| r.val_dice);
            println!(
                "best epoch {} (validation Dice {best:.4}); weights at {}",
                out.best_epoch,
                cfg.paths.model_path.display()
            );
        }
        Command::Infer { split } => {
            let s = commands::infer(&cfg, split.into())?;
            println!("inferred {} B-scans in {} volumes", s.bscans, s.volumes);
        }
        Command::Postprocess { split, variant } => {
            let s = commands::postprocess(&cfg, split.into(), variant.into())?;
            println!("wrote masks for {} volumes at t = {}", s.volumes, s.threshold);
        }
        Command::Evaluate { split, variant } => {
            let s = commands::evaluate(&cfg, split.into(), variant.into())?;
            if let Some(p) = s.pixel {
                println!(
                    "dice {:.4} ({:.4})  precision {:.4}  recall {:.4}",
                    p.dice.mean, p.dice.sd, p.precision.mean, p.recall.mean
                );
            }
            if let Some(r) = s.separation {
                println!("volume AUC {:.4}, overlap {}", r.auc, r.overlap);
            }
            if let Some(c) = s.correlation {
                println!("pearson rho {:.4}", c.rho);
            }
        }
        Command::Sweep { kind } => {
            let s = match kind {
                SweepKind::Threshold => commands::sweep_threshold_cmd(&cfg)?,
                SweepKind::Dropout => commands::sweep_dropout_cmd(&cfg)?,
            };
            for r in &s.rows {
                println!("{:>8} {:.4} ({:.4})", r.value, r.dice.mean, r.dice.sd);
            }
            println!("best {}", s.best);
        }
        Command::Report { split } => {
            for f in commands::report(&cfg, split.into())? {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code() as u8)
        }
    }
}
