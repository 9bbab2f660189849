use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use sobolev_growth::cli::{error_json, exit_code, run, RunOptions, Scenario, Verb};

/// Experiments on Sobolev norm growth for transport equations on the torus.
#[derive(Parser, Debug)]
#[command(name = "sobolev-growth", version)]
struct Args {
    /// Experiment to run.
    #[arg(value_enum)]
    verb: Verb,
    /// Scenario TOML file.
    #[arg(long)]
    scenario: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, env = "SOBOLEV_GROWTH_THREADS", default_value_t = 0)]
    threads: usize,
    #[arg(short, long)]
    verbose: bool,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let level = if args.verbose { "debug" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if args.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(args.threads).build_global() {
            log::warn!("thread pool: {e}");
        }
    }
    let base = args.scenario.parent().map(PathBuf::from).unwrap_or_default();
    let opts = RunOptions { out: args.out.clone(), seed: args.seed, base };
    let result = Scenario::load(&args.scenario).and_then(|sc| run(args.verb, &sc, &opts));
    match result {
        Ok(r) => {
            for w in &r.warnings {
                log::warn!("{w}");
            }
            println!("{}", serde_json::to_string_pretty(&r.summary).unwrap_or_default());
            match r.refuted {
                Some(msg) => {
                    eprintln!("{}", serde_json::json!({ "refuted": msg, "exit_code": 3 }));
                    ExitCode::from(3)
                }
                None => ExitCode::SUCCESS,
            }
        }
        Err(e) => {
            if std::fs::create_dir_all(&args.out).is_ok() {
                let _ = std::fs::write(args.out.join("error.json"), serde_json::to_vec_pretty(&error_json(&e)).unwrap_or_default());
            }
            eprintln!("{}", error_json(&e));
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
