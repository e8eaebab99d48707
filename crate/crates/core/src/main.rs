use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cdrflow::commands::{
    cmd_eval, cmd_gen_toy_data, cmd_precompute_rewards, cmd_sample, cmd_tabular, cmd_train,
    effective_config, CmdError, Overrides,
};

/// GFlowNet-guided denoising diffusion over residue states at desk scale.
#[derive(Parser)]
#[command(name = "cdrflow", version, about)]
struct Cli {
    /// Run-config file (flat dotted keys); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Checkpoint to resume training from or to sample with.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,

    /// Override sample.n.
    #[arg(long = "n-samples", global = true)]
    n_samples: Option<usize>,

    /// Override sample.region.
    #[arg(long, global = true)]
    region: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the procedural desk-scale dataset.
    GenToyData,
    /// Precompute the reward cache for every (complex, region).
    PrecomputeRewards,
    /// Train: diffusion warmup then the weighted TB phase.
    Train,
    /// Sample N CDRs per complex with a trained checkpoint.
    Sample,
    /// Evaluate a sample file: AAR, RMSD, IMP, Top-1 energies.
    Eval {
        /// Sample file (defaults to <out_dir>/samples.jsonl).
        #[arg(long)]
        samples: Option<PathBuf>,
    },
    /// Tabular flow-matching check with enforced tolerances.
    Tabular,
}

fn run(cli: Cli) -> Result<(), CmdError> {
    let overrides = Overrides {
        seed: cli.seed,
        out: cli.out,
        n_samples: cli.n_samples,
        region: cli.region,
    };
    let cfg = effective_config(cli.config.as_deref(), &overrides)?;
    match cli.command {
        Command::GenToyData => cmd_gen_toy_data(&cfg),
        Command::PrecomputeRewards => cmd_precompute_rewards(&cfg),
        Command::Train => cmd_train(&cfg, cli.checkpoint.as_deref()),
        Command::Sample => cmd_sample(&cfg, cli.checkpoint.as_deref()),
        Command::Eval { samples } => cmd_eval(&cfg, samples.as_deref()),
        Command::Tabular => cmd_tabular(&cfg).map(|_| ()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap's help/version output is a success, not a usage error.
            if e.use_stderr() {
                eprint!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
