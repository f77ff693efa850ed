use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use popi_cli::{CliError, ExperimentConfig, Stage, Workspace};

#[derive(Parser)]
#[command(name = "popi", version, about = "Summary-augmented preference optimization on a synthetic persona world")]
struct Cli {
    /// TOML configuration; the shipped default is used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every module seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "runs/default")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic world.
    GenWorld,
    /// Stage 1 (base models + inference policy), stage 2 (generators), or both.
    Train {
        #[arg(long, value_enum, default_value = "both")]
        stage: StageArg,
    },
    /// Evaluate every mode and the zoo transfer rows.
    Eval,
    /// Check the information decomposition and bound by enumeration.
    VerifyBound {
        #[arg(long, hide = true, default_value_t = 0.0, allow_negative_numbers = true)]
        inject_loss_offset: f64,
    },
    /// Summarize the artifacts in the output directory.
    Report,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::shipped_default(),
    };
    let cfg = match cli.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    };
    let ws = Workspace::new(cfg, cli.out_dir);
    match cli.command {
        Command::GenWorld => {
            let path = ws.gen_world()?;
            println!("wrote {} ({} users, config {})", path.display(), ws.cfg.world.num_users, ws.hash);
        }
        Command::Train { stage } => {
            let stage = match stage {
                StageArg::One => Stage::One,
                StageArg::Two => Stage::Two,
                StageArg::Both => Stage::Both,
            };
            ws.train(stage)?;
            println!("training done; artifacts in {}", ws.out.display());
        }
        Command::Eval => print!("{}", ws.eval()?.to_text()),
        Command::VerifyBound { inject_loss_offset } => {
            let b = ws.verify_bound(inject_loss_offset)?;
            print!("{}", b.report.to_record());
            println!(
                "instances = {}\nmax_identity_residual = {:.3e}\nmin_bound_gap = {:.3e}\nmutual_info_trajectory = {:.6} -> {:.6}",
                b.instances,
                b.max_identity_residual,
                b.min_bound_gap,
                b.trajectory.first().copied().unwrap_or(0.0),
                b.trajectory.last().copied().unwrap_or(0.0)
            );
        }
        Command::Report => print!("{}", ws.report()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
