use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use smjd::cli::{apply_seed_override, config_schema, run_experiment, ExperimentConfig, ExperimentKind, SeedSource, SEED_ENV};

/// Simulate semi-Markov modulated jump-diffusions and verify optimality of
/// closed-form controls.
#[derive(Parser, Debug)]
#[command(name = "smjd", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate candidate-controlled paths of an example.
    Simulate(RunArgs),
    /// Sufficiency check for the power-utility example.
    RsVerify(RunArgs),
    /// Sufficiency check for the quadratic-loss example.
    QlVerify(RunArgs),
    /// Dynkin-formula checks of the regime and controlled generators.
    Dynkin(RunArgs),
    /// HJB residual of a known value function on a grid.
    Hjb(RunArgs),
    /// Compare the semi-Markov pipeline with a Markov-chain sampler.
    ReduceMarkov(RunArgs),
    /// Evaluate the closed-form control and its functionals on a grid.
    PolicyEval(RunArgs),
    /// Print the JSON schema of the configuration file.
    Schema,
    /// Print the default configuration of a command.
    DefaultConfig {
        #[arg(value_enum)]
        experiment: ExperimentKind,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

#[derive(clap::Args, Debug)]
struct RunArgs {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the file and the environment.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the config's `output_dir`, then `smjd-out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (results do not depend on this).
    #[arg(long)]
    threads: Option<usize>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (kind, args) = match cli.command {
        Command::Simulate(a) => (ExperimentKind::Simulate, a),
        Command::RsVerify(a) => (ExperimentKind::RsVerify, a),
        Command::QlVerify(a) => (ExperimentKind::QlVerify, a),
        Command::Dynkin(a) => (ExperimentKind::Dynkin, a),
        Command::Hjb(a) => (ExperimentKind::Hjb, a),
        Command::ReduceMarkov(a) => (ExperimentKind::ReduceMarkov, a),
        Command::PolicyEval(a) => (ExperimentKind::PolicyEval, a),
        Command::Schema => {
            println!("{}", config_schema());
            return ExitCode::SUCCESS;
        }
        Command::DefaultConfig { experiment, seed } => {
            let c = ExperimentConfig::example(experiment, seed);
            println!("{}", serde_json::to_string_pretty(&c).expect("config serializes"));
            return ExitCode::SUCCESS;
        }
    };
    if let Some(n) = args.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not set thread count: {e}");
        }
    }
    let mut config = match ExperimentConfig::from_path(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let env = std::env::var(SEED_ENV).ok();
    match apply_seed_override(&mut config, args.seed, env.as_deref()) {
        Ok(SeedSource::Environment) => log::info!("seed {} taken from {SEED_ENV}", config.seed),
        Ok(SeedSource::Flag) => log::info!("seed {} taken from --seed", config.seed),
        Ok(SeedSource::Config) => {}
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let out = args
        .out
        .or_else(|| config.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("smjd-out"));
    match run_experiment(kind, &config, &out) {
        Ok(outcome) => {
            print!("{}", outcome.summary);
            ExitCode::from(outcome.exit_code())
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
