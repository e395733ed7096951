//! `v2c`: run one pipeline stage per invocation.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use v2c_core::pipeline::{self, RunConfig, Stage};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StageArg {
    Vocab,
    Quantset,
    Filter,
    Tokenize,
    Train,
    Eval,
    Explain,
    Synth,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Vocab => Stage::Vocab,
            StageArg::Quantset => Stage::Quantset,
            StageArg::Filter => Stage::Filter,
            StageArg::Tokenize => Stage::Tokenize,
            StageArg::Train => Stage::Train,
            StageArg::Eval => Stage::Eval,
            StageArg::Explain => Stage::Explain,
            StageArg::Synth => Stage::Synth,
        }
    }
}

/// Build concept vocabularies, filter them against an image pool, tokenize
/// images into concepts and train a concept-bottleneck classifier.
///
/// Worker threads default to the number of CPUs; set V2C_THREADS to cap them.
#[derive(Debug, Parser)]
#[command(name = "v2c", version)]
struct Cli {
    /// Stage to run.
    #[arg(value_enum)]
    stage: StageArg,
    /// Flat `key = value` config file; relative paths resolve against its
    /// directory.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override the `seed` key.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override any key, e.g. `--set m=20`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn init_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("V2C_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("V2C_THREADS must be a positive integer, got {v:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("v2c: config error: {e}");
        return ExitCode::from(2);
    }
    let cwd = match std::env::current_dir() {
        Ok(d) => d,
        Err(e) => {
            eprintln!("v2c: {e}");
            return ExitCode::from(1);
        }
    };
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(out) = &cli.out {
        overrides.push(format!("out={}", cwd.join(out).display()));
    }
    let stage = Stage::from(cli.stage);
    let result = RunConfig::load(cli.config.as_deref(), &overrides, &cwd)
        .and_then(|cfg| pipeline::run_stage(stage, &cfg).map(|o| (cfg, o)));
    match result {
        Ok((cfg, outcome)) => {
            println!(
                "{stage}: wrote {} artifacts to {} in {:.2}s",
                outcome.manifest.outputs.len() + 1,
                cfg.out.display(),
                outcome.seconds
            );
            println!("{}", outcome.manifest.report);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("v2c {stage}: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
