use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lesionkit::label::ClassLabel;
use lesionkit::toy::ToySpec;
use lesionkit::Result;
use lesionkit_cli::commands::{self, GradcamArgs};
use lesionkit_cli::config::ExperimentConfig;
use lesionkit_cli::exit_code;

/// Imbalance-aware skin-lesion classification experiments.
#[derive(Parser)]
#[command(name = "lesionkit", version)]
struct Cli {
    /// Experiment config (TOML); built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Split manifest; defaults to `<output_dir>/manifest.json`.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for every random stream, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory name instead of `<verb>-<timestamp>-<hash>`.
    #[arg(long, global = true)]
    run_name: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split the catalog and summarise its class distribution.
    Prepare,
    /// Train one model on the train/validation split.
    Train,
    /// Train one model per fold and evaluate their plain ensemble.
    Crossval,
    /// Run the six-experiment technique ablation.
    Ablation,
    /// Evaluate a checkpoint on the test split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Evaluate an ensemble, with test-time augmentation when `tta_n > 1`.
    Ensemble {
        /// Ensemble spec; defaults to `<output_dir>/ensemble.json`.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Write GradCAM overlays for test images.
    Gradcam {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Target class code; the predicted class when omitted.
        #[arg(long)]
        class: Option<ClassLabel>,
        #[arg(long)]
        limit: Option<usize>,
        /// Bounding boxes (`image_id,x0,y0,x1,y1`) for a localization summary.
        #[arg(long)]
        boxes: Option<PathBuf>,
    },
    /// Generate the synthetic seven-class dataset and a matching config.
    Synth {
        dir: PathBuf,
        #[arg(long, default_value_t = 70)]
        lesions_per_class: usize,
        #[arg(long, default_value_t = 30)]
        duplicates_per_class: usize,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => {
            let mut cfg = ExperimentConfig::default();
            cfg.resolve_paths(&std::env::current_dir().unwrap_or_default());
            cfg
        }
    };
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    if let Command::Synth {
        dir,
        lesions_per_class,
        duplicates_per_class,
    } = &cli.command
    {
        let spec = ToySpec {
            lesions_per_class: *lesions_per_class,
            duplicates_per_class: *duplicates_per_class,
            seed: cli.seed.unwrap_or(0),
            ..ToySpec::default()
        };
        commands::synth(dir, &spec)?;
        return Ok(());
    }
    let cfg = load_config(cli)?;
    let manifest = cli.manifest.as_deref();
    let name = cli.run_name.as_deref();
    let dir = match &cli.command {
        Command::Prepare => commands::prepare(&cfg, name)?,
        Command::Train => commands::train_cmd(&cfg, manifest, name)?,
        Command::Crossval => commands::crossval(&cfg, manifest, name)?,
        Command::Ablation => commands::ablation(&cfg, manifest, name)?,
        Command::Evaluate { checkpoint } => commands::evaluate_cmd(&cfg, manifest, checkpoint, name)?,
        Command::Ensemble { spec } => commands::ensemble_cmd(&cfg, manifest, spec.as_deref(), name)?,
        Command::Gradcam {
            checkpoint,
            class,
            limit,
            boxes,
        } => {
            let args = GradcamArgs {
                checkpoint,
                target: *class,
                limit: *limit,
                boxes: boxes.as_deref(),
            };
            commands::gradcam_cmd(&cfg, manifest, &args, name)?
        }
        Command::Synth { .. } => unreachable!(),
    };
    println!("run directory: {}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
