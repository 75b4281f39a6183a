use std::io::{stderr, stdout};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use hba_cli::{
    cmd_ablate, cmd_evaluate, cmd_gradcheck, cmd_predict, cmd_synth, cmd_train, EvaluateArgs, RunConfig, SynthArgs,
};
use hba_core::metrics::Basis;
use hba_core::verify::Scope;

#[derive(Parser)]
#[command(name = "hba-unet", version, about = "Fovea and optic-disc segmentation with HBA-U-Net")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// key=value run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Record the run as reproducible.
    #[arg(long)]
    reproducible: bool,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut run = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        run.apply_overrides(&self.overrides)?;
        if let Some(seed) = self.seed {
            run.train.seed = seed;
        }
        if let Some(out) = &self.out {
            run.out = out.clone();
        }
        run.reproducible |= self.reproducible;
        Ok(run)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one network.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from the run directory's last checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Train and compare every network variant.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Only report parameter counts.
        #[arg(long)]
        count_only: bool,
    },
    /// Score a checkpoint on an annotated dataset.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Require the checkpoint to match this configuration's network.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long, default_value = "resized")]
        basis: Basis,
        /// Also write prediction overlays.
        #[arg(long)]
        overlay: bool,
        #[arg(long)]
        fovea_radius: Option<f64>,
    },
    /// Segment images and report landmark coordinates.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// ops, hba or model; all when omitted.
        scope: Option<Scope>,
    },
    /// Write a synthetic fundus dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = 0.5)]
        disease_level: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<ExitCode> {
    let log = &mut stderr();
    match cli.command {
        Command::Train { run, resume } => {
            cmd_train(&run.resolve()?, resume, log)?;
        }
        Command::Ablate { run, count_only } => {
            let rows = cmd_ablate(&run.resolve()?, count_only, log)?;
            if rows.iter().any(|r| r.error.is_some()) {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Evaluate { checkpoint, dataset, config, out, basis, overlay, fovea_radius } => {
            let expected = config.as_deref().map(RunConfig::load).transpose()?;
            let args = EvaluateArgs {
                checkpoint: &checkpoint,
                dataset: &dataset,
                expected: expected.as_ref().map(|r| &r.network),
                fovea_radius,
                basis,
                overlay,
                out: &out,
            };
            cmd_evaluate(&args, log)?;
        }
        Command::Predict { checkpoint, out, images } => {
            cmd_predict(&checkpoint, &images, &out, &mut stdout())?;
        }
        Command::Gradcheck { scope } => {
            let scopes = scope.map(|s| vec![s]).unwrap_or_else(|| Scope::ALL.to_vec());
            let results = cmd_gradcheck(&scopes, &mut stdout())?;
            let failed: Vec<_> = results.iter().filter(|r| !r.passed()).collect();
            if !failed.is_empty() {
                eprintln!("{} check(s) outside tolerance:", failed.len());
                for r in failed {
                    eprintln!("  {r}");
                }
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Synth { out, count, size, disease_level, seed } => {
            cmd_synth(&SynthArgs { out: &out, count, size, disease_level, seed }, log)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
