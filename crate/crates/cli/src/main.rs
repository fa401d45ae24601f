use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use georewrite_cli::config::ExperimentConfig;
use georewrite_cli::error_json;
use georewrite_cli::pipeline::{Drop, EvalPaths, Layout, Pipeline, StageId};
use georewrite_core::eval::format_table;
use georewrite_core::ppo::RewardFn;
use georewrite_core::world::{Coordinate, World};
use georewrite_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "georewrite",
    version,
    about = "Retrieval-augmented address rewriting pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML). Built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding all artifacts.
    #[arg(long, default_value = ".")]
    workdir: PathBuf,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Fail instead of rebuilding artifacts whose config hash changed.
    #[arg(long)]
    strict: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic world.
    WorldGen {
        #[command(flatten)]
        common: Common,
        /// Write the world here instead of the work directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build training, alignment and test datasets.
    DataGen(Common),
    /// Train the spatial address encoder.
    TrainEmbedder(Common),
    /// Embed every canonical address into the retrieval index.
    BuildIndex(Common),
    /// Supervised fine-tuning of the rewriting policy.
    Sft(Common),
    /// Reward-driven policy alignment.
    Align(Common),
    /// Evaluate a policy and write the metric report.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long)]
        world: Option<PathBuf>,
        #[arg(long)]
        index: Option<PathBuf>,
        /// Dataset directory written by data-gen.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Leave the related-addresses field empty.
        #[arg(long)]
        no_rag: bool,
    },
    /// Score one rewrite against a delivery coordinate.
    Score {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        world: PathBuf,
        /// Original address.
        #[arg(long)]
        input: String,
        /// Rewritten address.
        #[arg(long)]
        rewrite: String,
        /// Delivery coordinate as `x,y` in meters.
        #[arg(long, allow_hyphen_values = true)]
        coord: String,
    },
    /// Evaluate ablated variants next to the full pipeline.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Components to drop, one variant each.
        #[arg(long, value_delimiter = ',', default_value = "sft,oa,rag")]
        drop: Vec<String>,
    },
    /// Run every stage, reusing artifacts that are up to date.
    Run {
        #[command(flatten)]
        common: Common,
        /// Also produce the ablation table.
        #[arg(long)]
        ablate: bool,
    },
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn pipeline(c: &Common) -> Result<Pipeline> {
    let cfg = load_config(c.config.as_deref(), c.seed)?;
    std::fs::create_dir_all(&c.workdir).map_err(|e| Error::io(&c.workdir, e))?;
    Pipeline::new(cfg, Layout::new(&c.workdir), c.strict)
}

fn parse_coord(s: &str) -> Result<Coordinate> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [x, y] => match (x.parse::<f64>(), y.parse::<f64>()) {
            (Ok(x), Ok(y)) => Ok(Coordinate::new(x, y)),
            _ => Err(Error::InvalidArgument(format!(
                "coordinate `{s}` is not numeric"
            ))),
        },
        _ => Err(Error::InvalidArgument(format!(
            "coordinate `{s}` must be `x,y`"
        ))),
    }
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::WorldGen { common, out } => {
            let p = pipeline(&common)?;
            match out {
                Some(path) => p.world_to(&path),
                None => p.run_stage(StageId::World),
            }
        }
        Command::DataGen(c) => pipeline(&c)?.run_stage(StageId::Data),
        Command::TrainEmbedder(c) => pipeline(&c)?.run_stage(StageId::Embedder),
        Command::BuildIndex(c) => pipeline(&c)?.run_stage(StageId::Index),
        Command::Sft(c) => pipeline(&c)?.run_stage(StageId::Sft),
        Command::Align(c) => pipeline(&c)?.run_stage(StageId::Align),
        Command::Eval {
            common,
            policy,
            world,
            index,
            data,
            out,
            no_rag,
        } => {
            let p = pipeline(&common)?;
            let explicit = policy.is_some()
                || world.is_some()
                || index.is_some()
                || data.is_some()
                || out.is_some();
            if !explicit && !no_rag {
                p.run_stage(StageId::Eval)?;
                let text = std::fs::read_to_string(p.layout.report.join("metrics.csv"))
                    .map_err(|e| Error::io(&p.layout.report, e))?;
                print!("{text}");
                return Ok(());
            }
            let l = &p.layout;
            let paths = EvalPaths {
                world: world.unwrap_or_else(|| l.world.clone()),
                data: data.unwrap_or_else(|| l.data.clone()),
                index: index.unwrap_or_else(|| l.index.clone()),
                policy: policy.unwrap_or_else(|| l.aligned.clone()),
                out: out.unwrap_or_else(|| l.report.clone()),
            };
            if common.config.is_some() {
                for a in [&paths.world, &paths.data, &paths.index, &paths.policy] {
                    p.verify_artifact(a)?;
                }
            }
            let summary = p.eval_paths(&paths, !no_rag)?;
            print!("{}", format_table(&[summary.metrics]));
            Ok(())
        }
        Command::Score {
            config,
            world,
            input,
            rewrite,
            coord,
        } => {
            let cfg = load_config(config.as_deref(), None)?;
            let world = World::load(&world)?;
            let c = parse_coord(&coord)?;
            let b = RewardFn::new(&world, cfg.reward)?.score(&input, &rewrite, &c)?;
            println!("{}", serde_json::to_string(&b).map_err(Error::from)?);
            Ok(())
        }
        Command::Ablate { common, drop } => {
            let drops = drop
                .iter()
                .map(|d| d.parse())
                .collect::<Result<Vec<Drop>>>()?;
            let (rows, _) = pipeline(&common)?.ablate(&drops)?;
            let metrics: Vec<_> = rows.into_iter().map(|r| r.metrics).collect();
            print!("{}", format_table(&metrics));
            Ok(())
        }
        Command::Run { common, ablate } => {
            let p = pipeline(&common)?;
            let summary = p.run()?;
            let ran = summary.ran();
            log::info!(
                "{} stages rebuilt: {}",
                ran.len(),
                if ran.is_empty() {
                    "none".to_string()
                } else {
                    ran.join(", ")
                }
            );
            let mut rows = vec![summary.report];
            if ablate {
                let (ablated, _) = p.ablate(&[Drop::Sft, Drop::Oa, Drop::Rag])?;
                rows = ablated.into_iter().map(|r| r.metrics).collect();
            }
            print!("{}", format_table(&rows));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = Error::InvalidArgument(e.to_string().trim_end().to_string());
            eprintln!("{}", error_json(&err));
            return ExitCode::from(err.exit_code() as u8);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
