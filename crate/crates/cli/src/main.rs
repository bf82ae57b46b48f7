use std::path::PathBuf;
use std::process::ExitCode;

use amoe::Stage;
use amoe_cli::{commands, RunConfig};
use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "amoe-lab", version, about = "Synthetic anomaly QA experiments with mixture-of-LoRA adapters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one config key; repeatable, applied after the file.
    #[arg(long = "set", value_name = "K=V")]
    set: Vec<String>,
    /// Shortcut for `--set seed=N`.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "PATH", default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct DataArg {
    /// Directory holding train.txt and test.txt; generated from the config when absent.
    #[arg(long, value_name = "PATH")]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train/test split.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Run one training stage.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long, value_parser = ["1", "2"])]
        stage: String,
        /// Stage-1 checkpoint to start stage 2 from.
        #[arg(long, value_name = "PATH")]
        init: Option<PathBuf>,
    },
    /// Greedy-decode the test split and score it.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Checkpoint to evaluate.
        #[arg(long, value_name = "PATH")]
        init: PathBuf,
    },
    /// Compare LoRA, LoRAMoE and AMoE-LoRA on one base.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Stage-1 checkpoint; a base is trained first when absent.
        #[arg(long, value_name = "PATH")]
        init: Option<PathBuf>,
    },
    /// Sweep expert count against rank at a fixed product of 64.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Stage-1 checkpoint; a base is trained first when absent.
        #[arg(long, value_name = "PATH")]
        init: Option<PathBuf>,
    },
    /// Dump per-sample generated factors, their PCA and separation ratios.
    InspectAdapters {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// AMoE-LoRA checkpoint.
        #[arg(long, value_name = "PATH")]
        init: PathBuf,
    },
}

fn config(c: &Common) -> Result<RunConfig> {
    let mut set = c.set.clone();
    if let Some(seed) = c.seed {
        set.push(format!("seed={seed}"));
    }
    RunConfig::load(c.config.as_deref(), &set)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common } => {
            let cfg = config(&common)?;
            commands::gen_data(&cfg, &common.out)?;
        }
        Command::Train { common, data, stage, init } => {
            let cfg = config(&common)?;
            let stage = Stage::parse(&stage).context("--stage must be 1 or 2")?;
            let ds = commands::load_data(&cfg, data.data.as_deref())?;
            let (_, report) = commands::train(&cfg, stage, init.as_deref(), &ds, &common.out)?;
            print!("{}", report.to_tsv());
        }
        Command::Eval { common, data, init } => {
            let cfg = config(&common)?;
            let ds = commands::load_data(&cfg, data.data.as_deref())?;
            let report = commands::eval(&cfg, &init, &ds, &common.out)?;
            print!("{}", report.to_tsv());
        }
        Command::Ablate { common, data, init } => {
            let cfg = config(&common)?;
            let ds = commands::load_data(&cfg, data.data.as_deref())?;
            let runs = commands::ablate(&cfg, init.as_deref(), &ds, &common.out)?;
            print!("{}", commands::ablation_tsv(&runs));
        }
        Command::Sweep { common, data, init } => {
            let cfg = config(&common)?;
            let ds = commands::load_data(&cfg, data.data.as_deref())?;
            let cells = commands::sweep(&cfg, init.as_deref(), &ds, &common.out)?;
            print!("{}", commands::sweep_tsv(&cells));
        }
        Command::InspectAdapters { common, data, init } => {
            let cfg = config(&common)?;
            let ds = commands::load_data(&cfg, data.data.as_deref())?;
            let ins = commands::inspect_adapters(&cfg, &init, &ds, &common.out)?;
            print!("grouping\tseparation_ratio\nobject\t{:.6}\ndefect\t{:.6}\n", ins.by_object, ins.by_defect);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("AMOE_LOG", "info"))
        .format_timestamp_secs()
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::FAILURE
        }
    }
}
