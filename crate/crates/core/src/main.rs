use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gp2e::cli::{
    cmd_eval, cmd_gen_demos, cmd_gradcheck, cmd_plot, cmd_train, load_run_config, Overrides,
};

#[derive(Parser)]
#[command(name = "gp2e", version, about = "Point-cloud behavior cloning on toy particle tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration file; defaults are used when omitted.
    #[arg(long, value_name = "PATH", global = true)]
    config: Option<PathBuf>,
    /// Overrides the training seed and the first demonstration seed.
    #[arg(long, value_name = "N", global = true)]
    seed: Option<u64>,
    /// Overrides the checkpoint path.
    #[arg(long, value_name = "PATH", global = true)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Record scripted-expert demonstrations.
    GenDemos {
        #[command(flatten)]
        common: Common,
    },
    /// Train a policy, writing the best checkpoint and a metrics file.
    Train {
        #[command(flatten)]
        common: Common,
        /// Run stage 1 only.
        #[arg(long)]
        single_stage: bool,
        /// Replace the attention block with a pointwise projection.
        #[arg(long)]
        no_attention: bool,
        /// Run stage 2 with the stage-1 batch size and sim steps.
        #[arg(long)]
        no_finetune: bool,
    },
    /// Print the success rate of a checkpoint (or the expert).
    Eval {
        #[command(flatten)]
        common: Common,
        /// Evaluate the scripted expert instead of a checkpoint.
        #[arg(long)]
        expert: bool,
    },
    /// Finite-difference check of every layer and the full network.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Render the success curve from a metrics file.
    Plot {
        #[command(flatten)]
        common: Common,
        /// Metrics file; defaults to the configured path.
        metrics: Option<PathBuf>,
        /// Output SVG; defaults to the configured path.
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> gp2e::cli::Result<Vec<String>> {
    let load = |c: &Common, ov: Overrides| {
        load_run_config(
            c.config.as_deref(),
            &Overrides {
                seed: c.seed,
                checkpoint: c.checkpoint.clone(),
                ..ov
            },
        )
    };
    match cli.command {
        Command::GenDemos { common } => cmd_gen_demos(&load(&common, Overrides::default())?),
        Command::Train {
            common,
            single_stage,
            no_attention,
            no_finetune,
        } => cmd_train(&load(
            &common,
            Overrides {
                single_stage,
                no_attention,
                no_finetune,
                ..Overrides::default()
            },
        )?),
        Command::Eval { common, expert } => {
            cmd_eval(&load(&common, Overrides::default())?, expert)
        }
        Command::Gradcheck { common } => cmd_gradcheck(&load(&common, Overrides::default())?),
        Command::Plot {
            common,
            metrics,
            out,
        } => {
            let cfg = load(&common, Overrides::default())?;
            cmd_plot(
                metrics.as_deref().unwrap_or(&cfg.paths.metrics),
                out.as_deref().unwrap_or(&cfg.paths.plot),
            )
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
