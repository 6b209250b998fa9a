use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dgconv::app::{self, Fault, VerifyOptions};
use dgconv::DgError;

#[derive(Parser)]
#[command(name = "dgconv", version, about = "Dynamic grouping convolution networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network from a run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint or export on the test split of a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// synthetic[:train[:test[:size[:seed]]]] | cifar10:<dir> | raw:<train>,<test> | config:<file>
        #[arg(long)]
        data: String,
        /// Write per-sample logits as JSON.
        #[arg(long)]
        logits: Option<PathBuf>,
    },
    /// Report learned group counts and complexity.
    Analyze {
        #[arg(long)]
        ckpt: PathBuf,
        /// Where to write analysis.json (default: next to the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compile every DGConv layer to a permuted group convolution.
    Export {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Group count of the uniform baseline in the savings report.
        #[arg(long, default_value_t = app::DEFAULT_UNIFORM_GROUPS)]
        uniform_groups: usize,
    },
    /// Run the oracle suite.
    Verify {
        #[arg(long, hide = true, value_enum)]
        inject_fault: Option<FaultArg>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    Sign,
}

fn run(cli: Cli) -> Result<ExitCode, DgError> {
    if let Some(n) = app::threads_from_env()? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| DgError::Config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Train { config, out } => {
            let s = app::cmd_train(&config, &out)?;
            println!(
                "trained {} steps: test accuracy {:.4}, zeta {} / o {} ({})",
                s.steps,
                s.test_accuracy,
                s.zeta,
                s.o,
                if s.budget_satisfied { "satisfied" } else { "violated" }
            );
            let groups: Vec<String> = s.layers.iter().map(|l| l.groups.to_string()).collect();
            println!("groups per layer: [{}]", groups.join(", "));
            println!("artifacts in {}", out.display());
        }
        Command::Eval { ckpt, data, logits } => {
            let r = app::cmd_eval(&ckpt, &data, logits.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&r).expect("serializable"));
        }
        Command::Analyze { ckpt, out } => {
            let (a, path) = app::cmd_analyze(&ckpt, out.as_deref())?;
            print!("{}", a.render());
            println!("wrote {}", path.display());
        }
        Command::Export {
            ckpt,
            out,
            uniform_groups,
        } => {
            let r = app::cmd_export(&ckpt, &out, uniform_groups)?;
            for l in &r.layers {
                println!(
                    "{:<16} G={:<4} connections {:>8} ({:.4} of dense, {:.4} of G={})",
                    l.name, l.groups, l.connections, l.ratio_vs_dense, l.ratio_vs_uniform, r.uniform_groups
                );
            }
            println!(
                "total connections {} ({:.4} of dense); wrote {}",
                r.total_connections,
                r.ratio_vs_dense,
                out.display()
            );
        }
        Command::Verify { inject_fault } => {
            let opts = VerifyOptions {
                fault: inject_fault.map(|FaultArg::Sign| Fault::SignConvention),
            };
            let report = app::run_verify(&opts, |c| {
                let status = if c.passed { "PASS" } else { "FAIL" };
                println!("{status} {:<36} {:>7} ms  {}", c.name, c.millis, c.detail);
            });
            if !report.passed() {
                println!("failed checks: {}", report.failed().join(", "));
                return Ok(ExitCode::from(1));
            }
            println!("all {} checks passed", report.checks.len());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(app::exit_code(&e) as u8)
        }
    }
}
