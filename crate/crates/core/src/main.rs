use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use sfodlab::config::{Matching, StageConfig};
use sfodlab::pipeline::{run, threads_from_env, Options, Stage};
use sfodlab::{Error, Result};

/// Source-free adaptive detection on synthetic fog scenes.
#[derive(Parser, Debug)]
#[command(name = "sfodlab", version)]
struct Cli {
    /// gen-data | pretrain | divide | align | finetune | eval | correlate | run-all
    #[arg(value_parser = parse_stage)]
    stage: Stage,
    /// JSON configuration; missing keys take their defaults.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Report baseline, +MT and +MT+TSD side by side (eval, run-all).
    #[arg(long)]
    ablation: bool,
    /// Cross-pass matching for imported prediction dumps.
    #[arg(long, value_parser = parse_matching)]
    matching: Option<Matching>,
}

fn parse_stage(s: &str) -> std::result::Result<Stage, String> {
    s.parse()
}

fn parse_matching(s: &str) -> std::result::Result<Matching, String> {
    match s {
        "anchor" => Ok(Matching::Anchor),
        "iou_greedy" => Ok(Matching::IouGreedy),
        _ => Err(format!("unknown matching `{s}` (anchor | iou_greedy)")),
    }
}

fn execute(cli: Cli) -> Result<()> {
    if !cli.config.exists() {
        return Err(Error::Config {
            key: "--config".into(),
            msg: format!("{} does not exist", cli.config.display()),
        });
    }
    let mut cfg = StageConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.out_dir = out;
    }
    if let Some(m) = cli.matching {
        cfg.division.matching = m;
    }
    if cli.ablation && !matches!(cli.stage, Stage::Eval | Stage::RunAll) {
        return Err(Error::Config {
            key: "--ablation".into(),
            msg: "only valid with eval or run-all".into(),
        });
    }
    let opts = Options {
        ablation: cli.ablation,
    };
    match threads_from_env()? {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config {
                key: "SFODLAB_THREADS".into(),
                msg: e.to_string(),
            })?
            .install(|| run(cli.stage, &cfg, &opts))
            .map(|_| ()),
        None => run(cli.stage, &cfg, &opts).map(|_| ()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
