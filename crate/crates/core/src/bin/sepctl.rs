use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use sepkit::harness::{all_pass, experiment_names, load_config, run, Experiment, ExperimentConfig, HarnessError, Status};

#[derive(Parser, Debug)]
#[command(name = "sepctl", about = "Run the sepkit experiment suite")]
struct Cli {
    /// gradcheck | info | kalman | static-ib | seprep | control-sep | all
    experiment: String,
    /// Root seed; each experiment derives its own stream from it [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Flat JSON file of parameter keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory [default: results].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Parameter override `key=value`; the value is read as JSON when possible.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn configure(cli: &Cli) -> Result<ExperimentConfig, HarnessError> {
    let experiment: Experiment = cli.experiment.parse()?;
    let mut config = match &cli.config {
        Some(path) => load_config(path)?,
        None => ExperimentConfig::default(),
    };
    config.experiment = experiment;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.out_dir = out.clone();
    }
    for s in &cli.set {
        config.set_str(s)?;
    }
    config.params()?;
    Ok(config)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let config = match configure(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("sepctl: {e}");
            if e.exit_code() == 2 {
                eprintln!("usage: sepctl <{}> [--seed N] [--config PATH] [--out DIR] [--set key=value]...", experiment_names());
            }
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(&config) {
        Ok(records) => {
            for r in &records {
                let tol = r.tolerance.map(|t| format!(" (tol {t:e})")).unwrap_or_default();
                println!("{:<5} {}/{} = {:e}{tol}", r.status.as_str(), r.experiment, r.key, r.value);
            }
            let failed = records.iter().filter(|r| r.status == Status::Fail).count();
            println!("{} records, {failed} failed; written under {}", records.len(), config.out_dir.display());
            if all_pass(&records) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("sepctl: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
