use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use attnguide::pipeline::commands::{self, Entry, Session};
use attnguide::pipeline::config::RunConfig;
use attnguide::pipeline::tensor_file::read_tensor;
use attnguide::{Error, Result};

/// Cross-attention-guided editing on a toy conditional diffusion model.
///
/// Edit quality is reported with stand-in metrics: foreground-mask IoU for
/// structure preservation and template cross-correlation for the shape or
/// texture class.
#[derive(Parser, Debug)]
#[command(name = "attnguide", version)]
struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key (`key=value`); may be repeated.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Also run without guidance and report both results.
    #[arg(long, global = true)]
    ablate: bool,
    /// Worker threads for independent images.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Inputs {
    /// Single input image (PNG).
    #[arg(long, requires = "caption", conflicts_with = "data")]
    image: Option<PathBuf>,
    /// Caption of `--image`.
    #[arg(long)]
    caption: Option<String>,
    /// Directory written by `gen-data`.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ModelArg {
    /// Model checkpoint; defaults to the `checkpoint` config key.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic shapes dataset.
    GenData,
    /// Train the denoiser on a generated dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
    },
    /// DDIM-invert images into noise latents.
    Invert {
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        model: ModelArg,
    },
    /// Invert and reconstruct images, or reconstruct a stored latent.
    Reconstruct {
        #[command(flatten)]
        inputs: Inputs,
        /// Reconstruct this latent (needs `--caption`) instead of inverting.
        #[arg(long, requires = "caption", conflicts_with_all = ["image", "data"])]
        latent: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArg,
    },
    /// Edit images from the source word's domain towards the target's.
    Edit {
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        model: ModelArg,
        #[arg(long)]
        source: String,
        #[arg(long)]
        target: String,
        /// Also write attention and reference traces.
        #[arg(long)]
        save_traces: bool,
    },
    /// Compute an edit direction from the sentence banks.
    Direction {
        #[arg(long)]
        source: String,
        #[arg(long)]
        target: String,
    },
    /// Class scores of an image and its mask IoU against a reference.
    Metrics {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Print the effective configuration.
    Config,
}

fn run_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for kv in &cli.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Parameter(format!("--set expects key=value, got {kv:?}")))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn entries(inputs: &Inputs, source: Option<&str>) -> Result<Vec<Entry>> {
    match (&inputs.image, &inputs.caption, &inputs.data) {
        (Some(img), Some(cap), _) => Ok(vec![commands::single_entry(img, cap)?]),
        (None, _, Some(dir)) => {
            let mut all = commands::read_entries(dir)?;
            if let Some(word) = source {
                all.retain(|e| e.caption.split_whitespace().any(|w| w == word));
            }
            if all.is_empty() {
                return Err(Error::Parameter(format!("no matching images in {}", dir.display())));
            }
            Ok(all)
        }
        _ => Err(Error::Parameter("pass --image with --caption, or --data".into())),
    }
}

fn session(cfg: &RunConfig, model: &ModelArg) -> Result<Session> {
    let path = model.checkpoint.as_deref().unwrap_or(&cfg.checkpoint);
    Session::load(cfg, path)
}

fn run(cli: &Cli) -> Result<serde_json::Value> {
    let cfg = run_config(cli)?;
    let out = cli.out.clone().unwrap_or_else(commands::default_out);
    let jobs = cli.jobs.max(1);
    match &cli.command {
        Command::GenData => commands::gen_data(&cfg, &out),
        Command::Train { data } => commands::train(&cfg, data, &out),
        Command::Invert { inputs, model } => {
            commands::invert_command(&session(&cfg, model)?, &entries(inputs, None)?, &out, jobs)
        }
        Command::Reconstruct { inputs, latent, model } => {
            let s = session(&cfg, model)?;
            match latent {
                Some(path) => {
                    let caption = inputs.caption.as_deref().unwrap_or_default();
                    let name = path
                        .file_stem()
                        .map(|n| n.to_string_lossy().replace(".x_inv", ""))
                        .unwrap_or_else(|| "latent".into());
                    commands::reconstruct_latent(&s, &read_tensor(path)?, caption, &out, &name)
                }
                None => commands::reconstruct_command(&s, &entries(inputs, None)?, &out, jobs),
            }
        }
        Command::Edit {
            inputs,
            model,
            source,
            target,
            save_traces,
        } => {
            let s = session(&cfg, model)?;
            let list = entries(inputs, Some(source))?;
            commands::edit_command(&s, &list, source, target, &out, cli.ablate, *save_traces, jobs)
        }
        Command::Direction { source, target } => commands::direction_command(&cfg, source, target, &out),
        Command::Metrics { image, reference } => {
            commands::metrics_command(image, reference.as_deref(), cli.out.as_deref().map(Path::new))
        }
        Command::Config => {
            print!("{}", cfg.to_text());
            Ok(serde_json::Value::Null)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(serde_json::Value::Null) => ExitCode::SUCCESS,
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).unwrap_or_default());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
