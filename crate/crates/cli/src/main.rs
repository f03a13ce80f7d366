use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedkd::experiment::{report_energy, run_experiment, sweep, ExperimentConfig, SweepParam};
use fedkd::Error;

#[derive(Parser)]
#[command(name = "fedkd", version, about = "Federated mutual distillation with SVD gradient compression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to the config's `output` key, then `fedkd-run`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one experiment per value of a parameter and tabulate the results.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// t_start, t_end or n_clients.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        values: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run the sweep points concurrently.
        #[arg(long)]
        parallel: bool,
    },
    /// Cumulative singular-value energy curves from a run's recorded sigma.
    ReportEnergy {
        #[arg(long)]
        run: PathBuf,
    },
    /// Print the default configuration in key-value form.
    Defaults,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::ModelConfig(_) => 2,
        Error::Divergence(_) => 3,
        _ => 1,
    }
}

fn load(path: &Path) -> fedkd::Result<ExperimentConfig> {
    let c = ExperimentConfig::load(path)?.with_env_overrides(std::env::vars())?;
    c.validate()?;
    Ok(c)
}

fn out_dir(cli: Option<PathBuf>, config: &ExperimentConfig) -> PathBuf {
    cli.or_else(|| config.output.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("fedkd-run"))
}

fn run(command: Command) -> fedkd::Result<()> {
    match command {
        Command::Run { config, out } => {
            let c = load(&config)?;
            let dir = out_dir(out, &c);
            let s = run_experiment(&c, &dir)?;
            let accs: Vec<String> = s.final_accuracy.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
            println!(
                "{}: {} rounds, {} bytes/client, ratio {:.2}x vs fedavg_full; {}",
                s.mode,
                s.total_rounds,
                s.mean_client_bytes,
                s.compression_ratio,
                accs.join(" ")
            );
            println!("artifacts in {}", dir.display());
        }
        Command::Sweep {
            config,
            param,
            values,
            out,
            parallel,
        } => {
            let c = load(&config)?;
            let p: SweepParam = param.parse()?;
            let dir = out_dir(out, &c);
            let rows = sweep(&c, p, &values, &dir, parallel)?;
            println!("value,accuracy,total_bytes");
            for r in rows {
                println!("{},{},{}", r.value, r.accuracy, r.total_bytes);
            }
            println!("table in {}", dir.join("sweep.csv").display());
        }
        Command::ReportEnergy { run } => {
            let r = report_energy(&run)?;
            println!(
                "{} energy points, {} rank points written to {}",
                r.energy.len(),
                r.ranks.len(),
                run.display()
            );
        }
        Command::Defaults => print!("{}", ExperimentConfig::default().to_kv()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
