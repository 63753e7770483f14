use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use ebc_core::checkpoint::Checkpoint;
use ebc_core::config::{BinMode, ExperimentConfig};
use ebc_core::data::{load_image, normalize_image, Split};
use ebc_core::eval::{
    read_density_file, render_density_png, run_ablation, tiled_inference, write_density_file, AblationGrid,
};
use ebc_core::prompts::build_prompt_set_styled;
use ebc_core::synthetic::{generate_dataset, SyntheticSpec};
use ebc_core::train::{evaluate_split, expected_class_fingerprint, run_cell, tile_config, train};

/// Blockwise-classification crowd counting.
#[derive(Parser)]
#[command(name = "ebc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (JSON). Omit to use the built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config leaf, e.g. `--set optim.lr=0.001`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Check config, bins, prompts, divisibility and manifests.
    Validate {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train and write `best`/`last` checkpoints plus `log.jsonl`.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
        /// Continue from `<out>/last` if present.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on a dataset split.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Per-image CSV output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict a density map for one image.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Density grid file.
        #[arg(long)]
        out: PathBuf,
        /// Optional grayscale rendering.
        #[arg(long)]
        png: Option<PathBuf>,
    },
    /// Run an ablation grid; resumable.
    Ablate {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Directory for per-cell training runs.
        #[arg(long, default_value = "runs/ablation")]
        work_dir: PathBuf,
    },
    /// Prompt utilities.
    Prompts {
        #[command(subcommand)]
        action: PromptsAction,
    },
    /// Bin policy utilities.
    Bins {
        #[command(subcommand)]
        action: BinsAction,
    },
    /// Generate a synthetic dot-crowd dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        train: usize,
        #[arg(long, default_value_t = 16)]
        val: usize,
        #[arg(long, default_value_t = 32)]
        test: usize,
        #[arg(long, default_value_t = 224)]
        size: u32,
        #[arg(long, default_value_t = 30)]
        max_people: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum PromptsAction {
    /// Print one prompt per bin.
    Dump {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

#[derive(Subcommand)]
enum BinsAction {
    /// Print the bins, representatives and policy fingerprint.
    Show {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

/// Exit 1 for configuration or validation problems, 2 for everything else.
enum Failure {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn invalid(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Validation(e.into())
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::from_file(path).map_err(invalid)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply_overrides(&args.overrides).map_err(invalid)?;
    cfg.apply_seed_override(std::env::var("EBC_SEED").ok().as_deref())
        .map_err(invalid)?;
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Validate { cfg } => validate(&load_config(&cfg)?),
        Command::Train { cfg, out, resume } => {
            let cfg = load_config(&cfg)?;
            println!("config hash {}", cfg.hash());
            let outcome = train(&cfg, &out, resume).map_err(|e| match e {
                ebc_core::train::TrainError::Invalid(_) | ebc_core::train::TrainError::Config(_) => invalid(e),
                other => Failure::Runtime(other.into()),
            })?;
            let last = outcome.log.records.last();
            println!(
                "trained {} epochs; best val mae {:.4} at epoch {}; last val mae {:.4}",
                outcome.log.len(),
                outcome.best_val_mae,
                outcome.best_epoch,
                last.map_or(f64::NAN, |r| r.val_mae)
            );
            println!("checkpoints: {} {}", outcome.best_checkpoint.display(), outcome.last_checkpoint.display());
            Ok(())
        }
        Command::Evaluate {
            cfg,
            checkpoint,
            split,
            out,
        } => evaluate(&load_config(&cfg)?, &checkpoint, split, out.as_deref()),
        Command::Predict {
            checkpoint,
            image,
            out,
            png,
        } => predict(&checkpoint, &image, &out, png.as_deref()),
        Command::Ablate { grid, out, work_dir } => ablate(&grid, &out, &work_dir),
        Command::Prompts {
            action: PromptsAction::Dump { cfg },
        } => {
            let cfg = load_config(&cfg)?;
            let prompts = match cfg.bins.mode {
                BinMode::Integer => {
                    let policy = cfg.bins.spec().build().map_err(invalid)?;
                    build_prompt_set_styled(&policy, cfg.bins.style())
                }
                BinMode::Continuous => cfg.bins.sbc.prompts(),
            };
            print!("{}", prompts.dump());
            Ok(())
        }
        Command::Bins {
            action: BinsAction::Show { cfg },
        } => {
            let cfg = load_config(&cfg)?;
            match cfg.bins.mode {
                BinMode::Integer => {
                    let policy = cfg.bins.spec().build().map_err(invalid)?;
                    println!("{policy}");
                    println!("representatives {:?}", policy.representatives());
                    println!("fingerprint {}", policy.fingerprint());
                }
                BinMode::Continuous => {
                    let sbc = &cfg.bins.sbc;
                    sbc.check().map_err(|e| invalid(anyhow!(e)))?;
                    println!("continuous edges {:?} sigma {}", sbc.edges, sbc.sigma);
                    println!("representatives {:?}", sbc.representatives());
                    println!("fingerprint {}", sbc.fingerprint());
                }
            }
            Ok(())
        }
        Command::Synth {
            out,
            train,
            val,
            test,
            size,
            max_people,
            seed,
        } => {
            let spec = SyntheticSpec {
                size,
                max_people,
                seed,
                ..SyntheticSpec::default()
            };
            generate_dataset(&out, &[(Split::Train, train), (Split::Val, val), (Split::Test, test)], &spec)
                .context("generating dataset")?;
            println!("wrote {} images to {}", train + val + test, out.display());
            Ok(())
        }
    }
}

fn validate(cfg: &ExperimentConfig) -> Result<(), Failure> {
    println!("config hash {}", cfg.hash());
    let issues = cfg.validate();
    for i in &issues {
        println!("{i}");
    }
    if issues.is_empty() {
        println!("ok");
        Ok(())
    } else {
        Err(invalid(anyhow!("{} validation problem(s)", issues.len())))
    }
}

fn evaluate(cfg: &ExperimentConfig, checkpoint: &Path, split: Split, out: Option<&Path>) -> Result<(), Failure> {
    let ck = Checkpoint::load(checkpoint).context("loading checkpoint")?;
    let expected = expected_class_fingerprint(cfg).map_err(invalid)?;
    if expected != ck.meta.class_fingerprint {
        return Err(invalid(anyhow!(
            "bin policy mismatch: checkpoint {} vs config {}",
            ck.meta.class_fingerprint,
            expected
        )));
    }
    let model = ck.model().context("rebuilding model")?;
    let res = evaluate_split(&model, cfg, split).context("evaluating")?;
    if let Some(path) = out {
        res.write_csv(path).context("writing results")?;
    }
    println!("images {} mae {:.6} rmse {:.6}", res.n_images(), res.mae, res.rmse);
    Ok(())
}

fn predict(checkpoint: &Path, image: &Path, out: &Path, png: Option<&Path>) -> Result<(), Failure> {
    let ck = Checkpoint::load(checkpoint).context("loading checkpoint")?;
    let cfg = &ck.meta.config;
    let model = ck.model().context("rebuilding model")?;
    let img = load_image(image).with_context(|| format!("reading {}", image.display()))?;
    let img = normalize_image(&img, &cfg.data.augment);
    let (count, density) = tiled_inference(&img, &model, &tile_config(cfg)).context("inference")?;
    write_density_file(out, &density, cfg.model.r).context("writing density")?;
    // the printed count is re-summed from the file as written
    let (written, _) = read_density_file(out).context("re-reading density")?;
    debug_assert!((written.total() - count).abs() < 1e-6);
    if let Some(png) = png {
        render_density_png(png, &density, cfg.model.r as u32).context("rendering")?;
    }
    println!("count {}", written.total());
    Ok(())
}

fn ablate(grid_path: &Path, out: &Path, work_dir: &Path) -> Result<(), Failure> {
    let grid = AblationGrid::from_file(grid_path).map_err(invalid)?;
    let cells = grid.expand().map_err(invalid)?;
    for c in &cells {
        let issues = c.config.check_static();
        if !issues.is_empty() {
            let list: Vec<String> = issues.iter().map(|i| i.to_string()).collect();
            return Err(invalid(anyhow!("cell '{}': {}", c.label, list.join("; "))));
        }
    }
    let report = run_ablation(&cells, out, &mut |cell| {
        run_cell(&cell.config, work_dir).map_err(|e| e.to_string())
    })
    .context("running ablation")?;
    for row in &report.rows {
        println!(
            "{}  {:<11} m={:<3} lambda={:<5} r={} {} {}  mae {:.4} rmse {:.4}",
            &row.config_hash[..12],
            row.bin_mode,
            row.m,
            row.lambda,
            row.r,
            row.head,
            row.granularity,
            row.mae,
            row.rmse
        );
    }
    println!(
        "ran {}, skipped {}, failed {}",
        report.ran.len(),
        report.skipped.len(),
        report.failures.len()
    );
    for f in &report.failures {
        eprintln!("cell '{}' ({}) failed: {}", f.label, &f.config_hash[..12], f.error);
    }
    if report.failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::Runtime(anyhow!("{} cell(s) failed", report.failures.len())))
    }
}
