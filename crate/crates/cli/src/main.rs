use std::path::PathBuf;
use std::process::ExitCode;

use bugscope::models::Recipe;
use bugscope::pipeline::{self, Experiment, ExperimentConfig};
use bugscope::{Error, Result};
use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "bugscope", version, about = "Adversarial-example composition experiments")]
struct Cli {
    /// Experiment configuration (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// sgd, sam, adv or robust-dataset. Commands that take it default to sgd, sam and adv.
    #[arg(long, global = true)]
    recipe: Option<String>,
    /// Recompute artifacts that are already recorded.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Generate or import the train and test splits.
    GenData,
    /// Train f0 and its ensemble.
    Train,
    /// Targeted PGD over the ε grid plus untargeted robust accuracy.
    Attack,
    /// ρ matrix, JS_Δ, composition, invariance and sharpness reports.
    Analyze,
    /// Ensemble-guided minimum-norm attack on the sgd, sam and adv models.
    Fmn,
    /// Build the distilled datasets.
    Distill,
    /// Retrain on every distilled dataset and report accuracies.
    Replicate,
    /// Loss-landscape grids stratified by JS_Δ.
    Landscape,
    /// Check the configuration and any existing manifest.
    Validate,
    /// Collect reports into summary.json.
    Report,
    /// Every stage in order.
    All,
}

fn recipes(arg: &Option<String>) -> Result<Vec<Recipe>> {
    match arg {
        Some(name) => Ok(vec![Recipe::parse(name)?]),
        None => Ok(vec![Recipe::Sgd, Recipe::Sam, Recipe::Adv]),
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    Ok(match cli.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    if cli.command == Command::Validate {
        let n = pipeline::validate(&cfg, &cli.out)?;
        println!("ok: config {} ({n} artifacts checked)", &cfg.hash()[..16]);
        return Ok(());
    }
    let mut exp = Experiment::open(cfg, &cli.out, cli.force)?;
    match cli.command {
        Command::GenData => exp.gen_data()?,
        Command::Train => {
            for r in recipes(&cli.recipe)? {
                exp.train(r)?;
            }
        }
        Command::Attack => {
            for r in recipes(&cli.recipe)? {
                exp.attack(r)?;
            }
        }
        Command::Analyze => {
            for r in recipes(&cli.recipe)? {
                exp.analyze(r)?;
            }
        }
        Command::Fmn => exp.fmn()?,
        Command::Distill => exp.distill()?,
        Command::Replicate => exp.replicate()?,
        Command::Landscape => exp.landscape()?,
        Command::Report => {
            let s = exp.report()?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Command::All => exp.run_all()?,
        Command::Validate => unreachable!(),
    }
    println!("{}", exp.dir.display());
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Spec(_) => 2,
        Error::MissingPrerequisite { .. } => 3,
        e if e.is_divergence() => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
