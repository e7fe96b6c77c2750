use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mlcsc_core::experiments::{
    cmd_eval, cmd_gradcheck, cmd_paramcount, cmd_pursuit_bench, cmd_train, configure_threads,
    exit_code, load_config, preset_name, BenchConfig, GradcheckConfig, Outcome, TrainExperiment,
    REPORTED_PARAMS_M,
};
use mlcsc_core::Result;

#[derive(Parser)]
#[command(
    name = "mlcsc",
    version,
    about = "Multi-layer convolutional sparse coding experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Flat JSON config; its keys override the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference check of the desk net's gradients.
    Gradcheck(Common),
    /// Parameter counts of the preset nets against published figures.
    Paramcount(Common),
    /// LTA / LBP / ML-ISTA / WSEBP on synthetic sparse problems.
    PursuitBench(Common),
    /// Train ML-CSC-Nets and keep the best-validation checkpoints.
    Train(Common),
    /// Evaluate saved checkpoints on the test split.
    Eval(Common),
}

fn train_experiment(c: &Common) -> Result<TrainExperiment> {
    let name = match &c.preset {
        Some(p) => p.clone(),
        None => preset_name(c.config.as_deref())?.unwrap_or_else(|| "desk".into()),
    };
    let mut exp = load_config(&TrainExperiment::preset(&name)?, c.config.as_deref())?;
    if let Some(s) = c.seed {
        exp.seed = s;
    }
    Ok(exp)
}

fn run(cmd: Command) -> Result<Outcome> {
    configure_threads()?;
    match cmd {
        Command::Gradcheck(c) => {
            let mut cfg = load_config(&GradcheckConfig::default(), c.config.as_deref())?;
            if let Some(s) = c.seed {
                cfg.seed = s;
            }
            cmd_gradcheck(&cfg, &c.out)
        }
        Command::Paramcount(c) => {
            let presets: Vec<String> = match &c.preset {
                Some(p) => vec![p.clone()],
                None => REPORTED_PARAMS_M
                    .iter()
                    .map(|(n, _)| n.to_string())
                    .collect(),
            };
            cmd_paramcount(&presets, Some(&c.out))
        }
        Command::PursuitBench(c) => {
            let mut cfg = load_config(&BenchConfig::default(), c.config.as_deref())?;
            if let Some(s) = c.seed {
                cfg.seeds = vec![s];
            }
            cmd_pursuit_bench(&cfg, &c.out)
        }
        Command::Train(c) => cmd_train(&train_experiment(&c)?, &c.out),
        Command::Eval(c) => cmd_eval(&train_experiment(&c)?, &c.out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(o) => {
            println!("{}", o.summary);
            ExitCode::from(if o.passed { 0 } else { 1 })
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
