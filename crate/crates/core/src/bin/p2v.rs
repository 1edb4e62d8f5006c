use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use p2v::pipeline::{exit_code, export_views, Pipeline, PipelineConfig, Stage};

#[derive(Parser)]
#[command(name = "p2v", version, about = "Synthesize OCT fingerprint volumes from 2D prints")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (JSON). Defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory of the run.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Synthesis worker threads.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the procedural phantom dataset under <out>/phantoms.
    MakePhantoms {
        #[command(flatten)]
        common: Common,
    },
    /// Train one stage and write its checkpoint and loss CSV.
    Train {
        #[arg(value_enum)]
        stage: Stage,
        #[command(flatten)]
        common: Common,
    },
    /// Run the full chain from fresh master prints to refined volumes.
    Synthesize {
        #[arg(long)]
        identities: Option<usize>,
        #[arg(long)]
        impressions: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// FVD/FID (and optionally EER/TAR) of synthesized volumes against reals.
    Evaluate {
        /// Real manifest directory [default: <out>/phantoms].
        #[arg(long)]
        real: Option<PathBuf>,
        /// Synthesized manifest directory [default: <out>/synth].
        #[arg(long)]
        fake: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Write B-scans, the z-mean projection and en-face images as PNG.
    ExportViews {
        /// Volume file (.p2v).
        volume: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Print the default configuration as JSON.
    DefaultConfig,
}

fn pipeline(c: &Common) -> p2v::Result<Pipeline> {
    let mut config = match &c.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = c.seed {
        config.seed = seed;
    }
    Pipeline::new(config, &c.out, c.workers)
}

fn run(cli: Cli) -> p2v::Result<()> {
    let start = Instant::now();
    let (p, key) = match cli.command {
        Command::DefaultConfig => {
            print!("{}", PipelineConfig::default().to_json()?);
            return Ok(());
        }
        Command::ExportViews { volume, common } => {
            for path in export_views(&volume, &common.out)? {
                println!("{}", path.display());
            }
            return Ok(());
        }
        Command::MakePhantoms { common } => {
            let p = pipeline(&common)?;
            let m = p.make_phantoms()?;
            println!("{} phantoms in {}", m.entries.len(), p.phantoms_dir().display());
            (p, "make-phantoms".to_string())
        }
        Command::Train { stage, common } => {
            let p = pipeline(&common)?;
            let ckpt = p.train(stage)?;
            println!("{}", ckpt.display());
            (p, format!("train-{}", stage.name()))
        }
        Command::Synthesize { identities, impressions, common } => {
            let p = pipeline(&common)?;
            let s = &p.config.synthesis;
            let m = p.synthesize(identities.unwrap_or(s.identities), impressions.unwrap_or(s.impressions))?;
            println!("{} records in {}", m.entries.len(), p.synth_dir().display());
            (p, "synthesize".to_string())
        }
        Command::Evaluate { real, fake, common } => {
            let p = pipeline(&common)?;
            let real = real.unwrap_or_else(|| p.phantoms_dir());
            let fake = fake.unwrap_or_else(|| p.synth_dir());
            let report = p.evaluate(&real, &fake)?;
            p.write_report(&report)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            (p, "evaluate".to_string())
        }
    };
    p.record_timing(&key, start.elapsed().as_secs_f64())?;
    p.write_config()?;
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
