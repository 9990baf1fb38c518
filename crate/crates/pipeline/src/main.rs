use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use parauni_pipeline::config::Config;
use parauni_pipeline::runner::{self, Analysis, SampleMode};
use parauni_pipeline::train::Stage;
use parauni_pipeline::PipelineError;

#[derive(Parser)]
#[command(name = "parauni", version, about = "Multi-layer conditioned flow matching with layer-aware RL, at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and its manifest.
    GenData {
        /// Config file; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory; defaults to `data.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one training stage.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        stage: u8,
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint to continue from (required for stages 2 and 3).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Draw one sample and print it with its rewards as JSON.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Training prompt index.
        #[arg(long)]
        prompt: usize,
        #[arg(long, value_enum, default_value_t = Mode::Ode)]
        mode: Mode,
        #[arg(long, default_value_t = 10)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a layer-analysis report CSV.
    Analyze {
        #[arg(value_enum)]
        kind: Kind,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a report CSV as SVG.
    Plot {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Ode,
    Sde,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Sweep,
    Similarity,
    Ablation,
}

fn config_or_default(path: Option<&Path>) -> anyhow::Result<Config> {
    Ok(match path {
        Some(p) => runner::load_config(p)?,
        None => {
            let mut cfg = Config::default();
            cfg.apply_env()?;
            cfg
        }
    })
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = config_or_default(config.as_deref())?;
            let dir = out.unwrap_or_else(|| cfg.data.dir.clone());
            let m = runner::gen_data(&cfg, &dir)?;
            println!("wrote {} (seed {}, checksum {})", dir.display(), m.seed, m.checksum);
        }
        Command::Train { stage, config, resume } => {
            let cfg = runner::load_config(&config)?;
            let stage = Stage::from_number(stage)?;
            let start = Instant::now();
            let out = runner::train(cfg, stage, resume.as_deref(), |m| {
                eprintln!("{}", m.to_line());
            })?;
            println!(
                "stage {stage}: {} epochs in {:.1}s, checkpoint {}",
                out.metrics.len(),
                start.elapsed().as_secs_f64(),
                out.checkpoint.display()
            );
        }
        Command::Sample {
            checkpoint,
            prompt,
            mode,
            steps,
            seed,
        } => {
            let mode = match mode {
                Mode::Ode => SampleMode::Ode,
                Mode::Sde => SampleMode::Sde,
            };
            let s = runner::sample(&checkpoint, prompt, mode, steps, seed)?;
            println!("{}", serde_json::to_string(&s).context("serializing sample")?);
        }
        Command::Analyze { kind, checkpoint, out } => {
            let kind = match kind {
                Kind::Sweep => Analysis::Sweep,
                Kind::Similarity => Analysis::Similarity,
                Kind::Ablation => Analysis::Ablation,
            };
            let (path, summary) = runner::analyze(kind, &checkpoint, &out)?;
            println!("{summary}; wrote {}", path.display());
        }
        Command::Plot { input, out } => {
            runner::plot(&input, &out)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<PipelineError>().map_or(1, PipelineError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
