//! Command-line front end. Exit codes are part of the interface:
//! 0 = check passed, 1 = statistical failure, 2 = configuration error,
//! 3 = abort budget exceeded.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vbcalc::covariant::bundle_map::BUILTIN_MAPS;
use vbcalc::geometry::scenes::BASES;
use vbcalc::harness::{
    self, convergence_study, load_config, run_check, ExperimentConfig, ExperimentReport,
};
use vbcalc::Error;

#[derive(Parser)]
#[command(name = "vbcalc", version, about = "stochastic pairing checks in vector bundles")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the configured check over its path ensemble and write the report.
    Run(RunArgs),
    /// Run the configured check over a ladder of step sizes.
    Convergence(ConvergenceArgs),
    /// List the built-in scene bases and bundle maps.
    Scenes,
    /// Parse and validate a config without running anything.
    Validate(ConfigOnly),
}

#[derive(Args)]
struct ConfigOnly {
    /// Experiment description, TOML or JSON by extension.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Override the configured path count.
    #[arg(long)]
    paths: Option<usize>,
    /// Override the configured step size.
    #[arg(long)]
    dt: Option<f64>,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for the CSV and summary (default: config value, then `.`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ConvergenceArgs {
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated step ladder, coarse to fine, e.g. `4e-3,2e-3,1e-3`.
    #[arg(long, value_delimiter = ',', required = true)]
    steps: Vec<f64>,
    #[arg(long)]
    paths: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    // The runtime ignores SIGPIPE, which turns a closed stdout
    // (`vbcalc scenes | head`) into a print panic; die quietly instead.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    if let Err(e) = cap_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    let cli = Cli::parse();
    let code = match cli.cmd {
        Cmd::Run(args) => run(args),
        Cmd::Convergence(args) => convergence(args),
        Cmd::Scenes => {
            scenes();
            0
        }
        Cmd::Validate(args) => validate(args),
    };
    ExitCode::from(code)
}

/// `VBCALC_THREADS` caps the worker pool; unset means one worker per core.
fn cap_threads() -> Result<(), String> {
    let Some(raw) = std::env::var_os("VBCALC_THREADS") else {
        return Ok(());
    };
    let text = raw.to_string_lossy();
    let n: usize = text
        .parse()
        .map_err(|_| format!("VBCALC_THREADS must be a positive integer, got '{text}'"))?;
    if n == 0 {
        return Err("VBCALC_THREADS must be at least 1".to_string());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| format!("cannot size the thread pool: {e}"))
}

fn exit_for(e: &Error) -> u8 {
    if e.is_config() {
        2
    } else {
        3
    }
}

fn load_with_overrides(
    config: &PathBuf,
    paths: Option<usize>,
    dt: Option<f64>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<ExperimentConfig, Error> {
    let mut cfg = load_config(config)?;
    if let Some(p) = paths {
        cfg.check.paths = p;
    }
    if let Some(d) = dt {
        cfg.check.dt = d;
    }
    if let Some(s) = seed {
        cfg.check.seed = s;
    }
    if out.is_some() {
        cfg.out = out;
    }
    cfg.prepare()?;
    Ok(cfg)
}

fn emit(cfg: &ExperimentConfig, report: &ExperimentReport) -> u8 {
    let dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from("."));
    match report.write_files(&dir) {
        Ok(written) => {
            print!("{}", report.summary());
            for p in written {
                println!("wrote {}", p.display());
            }
            report.verdict.exit_code() as u8
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn run(args: RunArgs) -> u8 {
    let cfg = match load_with_overrides(&args.config, args.paths, args.dt, args.seed, args.out) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    match run_check(&cfg) {
        Ok(report) => emit(&cfg, &report),
        Err(e) => {
            eprintln!("error: {e}");
            exit_for(&e)
        }
    }
}

fn convergence(args: ConvergenceArgs) -> u8 {
    let cfg = match load_with_overrides(&args.config, args.paths, None, args.seed, args.out) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    match convergence_study(&cfg, &args.steps) {
        Ok(report) => emit(&cfg, &report),
        Err(e) => {
            eprintln!("error: {e}");
            exit_for(&e)
        }
    }
}

fn scenes() {
    println!("scene bases:");
    for (name, what) in BASES {
        println!("  {name:<14} {what}");
    }
    println!("bundle maps (pullback checks):");
    for name in BUILTIN_MAPS {
        println!("  {name}");
    }
    println!("checks:");
    for name in harness::CHECK_NAMES {
        println!("  {name}");
    }
    println!("  convergence:<check>");
}

fn validate(args: ConfigOnly) -> u8 {
    match load_config(&args.config).and_then(|cfg| cfg.prepare().map(|_| cfg)) {
        Ok(cfg) => {
            println!(
                "ok: check '{}' on scene base '{}' ({} paths, dt {}, horizon {})",
                cfg.check.id, cfg.scene.base, cfg.check.paths, cfg.check.dt, cfg.check.horizon
            );
            println!("config hash {}", cfg.hash());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}
