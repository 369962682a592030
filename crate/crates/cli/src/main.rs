use std::io::{self, BufWriter};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info};

use dsm_core::experiment::{Experiment, ExperimentConfig, ExperimentError, Outcome};
use dsm_core::provider::{serve, FixtureConfig, FixtureProvider};

/// Dependency trees from attention averaged over substituted sentences.
#[derive(Parser)]
#[command(name = "dsm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(short, long, env = "DSM_CONFIG", default_value = "dsm.toml")]
    config: PathBuf,
    /// Override a configuration value, e.g. `--set corpus.max_length=10`.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_override)]
    overrides: Vec<(String, String)>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate substitution sets for the corpus.
    Substitute(Common),
    /// Fetch word-level attention for every sentence in the sets.
    Extract(Common),
    /// Decode one tree per sentence.
    Induce(Common),
    /// Score induced trees against gold.
    Eval(Common),
    /// Substitute, extract, induce and eval.
    Run(Common),
    /// UUAS over layers and numbers of substitutions.
    Sweep(Common),
    /// Subject-verb recall on relative-clause templates.
    Agreement(Common),
    /// Per-relation head selection and directed parsing.
    Headsel(Common),
    /// Print the effective configuration.
    PrintConfig(Common),
    /// Answer provider requests on stdin/stdout with the fixture model.
    ServeFixture {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 12)]
        layers: usize,
        #[arg(long, default_value_t = 12)]
        heads: usize,
        #[arg(long)]
        special_tokens: bool,
        #[arg(long)]
        split_above: Option<usize>,
    },
}

fn parse_override(s: &str) -> Result<(String, String), String> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| format!("expected KEY=VALUE, got `{s}`"))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(format!("empty key in `{s}`"));
    }
    Ok((k.to_string(), v.trim().to_string()))
}

fn load(common: &Common) -> Result<ExperimentConfig, ExperimentError> {
    let mut config = ExperimentConfig::load(&common.config, &common.overrides)?;
    config.apply_env(|k| std::env::var(k).ok());
    config.validate()?;
    Ok(config)
}

fn report(command: &str, outcome: &Outcome) {
    let (verb, files) = match outcome {
        Outcome::Ran(f) => ("wrote", f),
        Outcome::UpToDate(f) => ("up to date", f),
    };
    for f in files {
        info!("{command}: {verb} {}", f.display());
    }
}

fn run(command: Command) -> Result<(), ExperimentError> {
    let (name, common) = match &command {
        Command::ServeFixture {
            seed,
            layers,
            heads,
            special_tokens,
            split_above,
        } => {
            let provider = FixtureProvider::new(FixtureConfig {
                seed: *seed,
                layers: *layers,
                heads: *heads,
                special_tokens: *special_tokens,
                split_above: *split_above,
            });
            let stdin = io::stdin().lock();
            let stdout = BufWriter::new(io::stdout().lock());
            return serve(&provider, stdin, stdout).map_err(|source| ExperimentError::Io {
                path: PathBuf::from("<stdio>"),
                source,
            });
        }
        Command::PrintConfig(c) => {
            print!("{}", load(c)?.to_toml());
            return Ok(());
        }
        Command::Substitute(c) => ("substitute", c),
        Command::Extract(c) => ("extract", c),
        Command::Induce(c) => ("induce", c),
        Command::Eval(c) => ("eval", c),
        Command::Run(c) => ("run", c),
        Command::Sweep(c) => ("sweep", c),
        Command::Agreement(c) => ("agreement", c),
        Command::Headsel(c) => ("headsel", c),
    };
    let exp = Experiment::new(load(common)?)?;
    let outcomes = match name {
        "substitute" => vec![exp.substitute()?],
        "extract" => vec![exp.extract()?],
        "induce" => vec![exp.induce()?],
        "eval" => vec![exp.eval()?],
        "run" => exp.pipeline()?,
        "sweep" => vec![exp.sweep()?],
        "agreement" => vec![exp.agreement()?],
        "headsel" => vec![exp.headsel()?],
        _ => unreachable!("every command is matched above"),
    };
    for o in &outcomes {
        report(name, o);
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
