use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use dqrec::config::{RunConfig, Stage};
use dqrec::data::EntityKind;
use dqrec::pipeline::{sweep, sweep_csv, EvalOutcome, Pipeline, SweepAxis};

#[derive(Parser, Debug)]
#[command(name = "dqrec", version, about = "Semantic-ID quantization and augmentation for dual-tower recommenders")]
struct Cli {
    /// Config file of `key = value` lines.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Base settings the config file is applied on top of. Defaults to
    /// `synthetic` without a config file and `full` with one.
    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,

    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Artifact root directory.
    #[arg(long, global = true, env = "DQREC_ARTIFACTS", default_value = "artifacts")]
    artifacts: PathBuf,

    /// Recompute the requested stage even if it already completed.
    #[arg(long, global = true)]
    force: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    Synthetic,
    Full,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Kind {
    User,
    Item,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load, binarize and split the interaction log.
    Prepare,
    /// Train the feature-only towers and export representations.
    Pretrain,
    /// Fit the decomposed quantizers.
    Quantize,
    /// Build pattern-neighbor caches.
    Index,
    /// Train the recommender.
    Train,
    /// Evaluate on the test slice.
    Eval,
    /// Run every stage that has not completed.
    Pipeline,
    /// Show semantic IDs and pairwise overlaps of entities.
    Inspect {
        #[arg(long, value_enum, default_value = "user")]
        kind: Kind,
        /// External entity ids.
        #[arg(required = true)]
        ids: Vec<String>,
    },
    /// Rerun the pipeline over values of K, J or L.
    Sweep {
        #[arg(long)]
        axis: SweepAxis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
        /// CSV output path; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the effective configuration.
    Config,
}

fn resolve_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let preset = cli.preset.unwrap_or(if cli.config.is_some() { Preset::Full } else { Preset::Synthetic });
    let base = match preset {
        Preset::Synthetic => RunConfig::synthetic(),
        Preset::Full => RunConfig::default(),
    };
    let mut config = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            RunConfig::parse_onto(base, &text)?
        }
        None => base,
    };
    for item in &cli.overrides {
        let Some((key, value)) = item.split_once('=') else {
            bail!("override `{item}` is not KEY=VALUE");
        };
        config.set(key.trim(), value.trim())?;
    }
    config.validate()?;
    Ok(config)
}

fn print_metrics(outcome: &EvalOutcome) {
    println!("scorer,{}", outcome.model.csv_header());
    for (name, r) in [("model", &outcome.model), ("popularity", &outcome.popularity), ("random", &outcome.random)] {
        println!("{name},{}", r.csv_row());
    }
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp_millis()
        .init();
    let cli = Cli::parse();
    let config = resolve_config(&cli)?;
    let pipeline = Pipeline::new(config.clone(), &cli.artifacts)?;
    let stage = |s: Stage| -> anyhow::Result<()> {
        let dir = pipeline.run_stage(s, cli.force)?;
        println!("{s}: {}", dir.display());
        Ok(())
    };
    match &cli.command {
        Command::Prepare => stage(Stage::Prepare)?,
        Command::Pretrain => stage(Stage::Pretrain)?,
        Command::Quantize => stage(Stage::Quantize)?,
        Command::Index => stage(Stage::Index)?,
        Command::Train => stage(Stage::Train)?,
        Command::Eval => {
            stage(Stage::Eval)?;
            print_metrics(&pipeline.load_metrics()?);
        }
        Command::Pipeline => {
            if cli.force {
                for s in Stage::ALL {
                    pipeline.run_stage(s, true)?;
                }
            }
            print_metrics(&pipeline.run()?);
        }
        Command::Inspect { kind, ids } => {
            let kind = match kind {
                Kind::User => EntityKind::User,
                Kind::Item => EntityKind::Item,
            };
            print!("{}", pipeline.inspect(kind, ids)?);
        }
        Command::Sweep { axis, values, out } => {
            let rows = sweep(&config, &cli.artifacts, *axis, values);
            let csv = sweep_csv(*axis, &config.eval_ks, &rows);
            match out {
                Some(path) => std::fs::write(path, csv).with_context(|| format!("writing {}", path.display()))?,
                None => print!("{csv}"),
            }
        }
        Command::Config => print!("{}", config.render()),
    }
    Ok(())
}
