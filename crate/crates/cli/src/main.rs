use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sparselab_cli::commands::{analyze_command, train_command};
use sparselab_cli::config::{load_run_config, read_file};
use sparselab_cli::recipes::{params, run_experiment, signal, RECIPES};
use sparselab_cli::output::ArtifactDir;
use sparselab_cli::CliError;

#[derive(Parser)]
#[command(name = "sparselab", version, about = "Sparse network training and analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration.
    Train {
        /// TOML file layered over the defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// `key=value` overrides, e.g. `train.epochs=5`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint: test metrics, gradient flow, optional Hessian spectrum.
    Analyze {
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Training examples for the Hessian (0 skips it).
        #[arg(long, default_value_t = 0)]
        hessian_examples: usize,
        #[arg(long, default_value = "runs/analyze")]
        out: PathBuf,
    },
    /// Run a reproduction recipe.
    Recipe {
        /// One of the names printed by `recipe --list`.
        name: Option<String>,
        #[arg(long)]
        list: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pre-activation std at initialization across sparsities and schemes.
    Probe {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long, default_value = "runs/probe")]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { config, set, out } => {
            let cfg = load_run_config(config.as_deref(), &set)?;
            let (run, _) = train_command(&cfg, &out)?;
            if let Some(e) = run.epochs.last() {
                println!(
                    "step {} train loss {:.4} test accuracy {}",
                    e.step,
                    e.train_loss,
                    e.test_accuracy.map_or("-".into(), |a| format!("{:.4}", a))
                );
            }
            println!("artifacts in {}", out.display());
        }
        Command::Analyze {
            checkpoint,
            config,
            set,
            hessian_examples,
            out,
        } => {
            let cfg = load_run_config(config.as_deref(), &set)?;
            let a = analyze_command(&cfg, &checkpoint, hessian_examples, &out)?;
            println!(
                "step {} active {} test loss {:.4} accuracy {:.4} gradient flow {:.6e}",
                a.step, a.active_weights, a.test_loss, a.test_accuracy, a.grad_flow
            );
            if let Some(l) = a.largest_negative {
                println!("largest negative eigenvalue magnitude {l:.6e}");
            }
        }
        Command::Recipe {
            name,
            list,
            config,
            set,
            out,
        } => {
            if list {
                for r in RECIPES {
                    println!("{r}");
                }
                return Ok(());
            }
            let name = name.ok_or_else(|| CliError::Config("recipe name required (see --list)".into()))?;
            let text = config.as_deref().map(read_file).transpose()?;
            let out = out.unwrap_or_else(|| PathBuf::from("runs").join(&name));
            let r = run_experiment(&name, text.as_deref(), &set, &out)?;
            println!("{} files in {} (config {})", r.files.len(), out.display(), &r.manifest.config_hash[..12]);
        }
        Command::Probe { config, set, out } => {
            let text = config.as_deref().map(read_file).transpose()?;
            let p: signal::SignalParams = params(text.as_deref(), &set)?;
            let r = signal::run(&p)?;
            let mut dir = ArtifactDir::create(&out)?;
            r.write(&mut dir)?;
            dir.manifest("probe", "probe", &p, &p.seeds, "gaussian-probe")?;
            for s in r.summary() {
                println!("sparsity {:.2} {:<14} output std {:.4}", s.sparsity, s.scheme, s.mean_output_std);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("sparselab: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
