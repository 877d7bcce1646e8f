//! `dynsurv` command-line front end.

mod config;
mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dynsurv::dataset::LandmarkMode;
use dynsurv::harness::{run_benchmark, simulate_joint_data};
use sha2::{Digest, Sha256};

use config::{Overrides, RunConfig};

const THREADS_ENV: &str = "DYNSURV_THREADS";

#[derive(Parser, Debug)]
#[command(name = "dynsurv", version, about = "Landmark dynamic survival prediction benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: config, then $DYNSURV_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_parser = parse_mode)]
    landmark_mode: Option<LandmarkMode>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a joint longitudinal/survival dataset.
    Simulate,
    /// Run the cross-validated benchmark.
    Benchmark,
    /// Draw SVG charts from a results CSV.
    Plot {
        #[arg(long)]
        results: PathBuf,
    },
}

fn parse_mode(s: &str) -> Result<LandmarkMode, String> {
    s.parse()
}

enum Failure {
    /// Bad configuration or unusable input; exit 1.
    Config(String),
    /// Partial failure (a method failed everywhere, or nothing to plot); exit 2.
    Partial(String),
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Config(e.to_string())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let overrides = Overrides {
        seed: cli.seed,
        threads: cli.threads,
        out: cli.out.clone(),
        landmark_mode: cli.landmark_mode,
    };
    let outcome = match &cli.command {
        Command::Simulate => cmd_simulate(cli.config.as_deref(), &overrides),
        Command::Benchmark => cmd_benchmark(cli.config.as_deref(), &overrides),
        Command::Plot { results } => cmd_plot(results, cli.out.as_deref()),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Partial(msg)) => {
            eprintln!("warning: {msg}");
            ExitCode::from(2)
        }
    }
}

/// Config text (empty when no file is given) and the parsed, overridden config.
fn load_config(path: Option<&Path>, overrides: &Overrides) -> Result<(String, RunConfig, PathBuf), Failure> {
    let (text, base) = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?;
            let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
            (text, base)
        }
        None => (String::new(), PathBuf::new()),
    };
    let mut cfg = config::parse(&text).map_err(Failure::Config)?;
    cfg.apply(overrides);
    Ok((text, cfg, base))
}

fn thread_pool(cfg: &RunConfig) -> Result<rayon::ThreadPool, Failure> {
    let from_env = match std::env::var(THREADS_ENV) {
        Ok(v) => Some(v.parse::<usize>().map_err(|_| Failure::Config(format!("{THREADS_ENV}={v} is not a count")))?),
        Err(_) => None,
    };
    let n = cfg.threads.or(from_env).unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| Failure::Config(format!("thread pool: {e}")))
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `files` into `dir`, then a manifest listing each with its hash.
fn write_outputs(
    dir: &Path,
    command: &str,
    cfg: &RunConfig,
    config_text: Option<&str>,
    mut files: Vec<(String, Vec<u8>)>,
) -> Result<(), Failure> {
    fs::create_dir_all(dir)?;
    if let Some(text) = config_text {
        files.push(("config.toml".into(), text.as_bytes().to_vec()));
    }
    let mut listing = Vec::new();
    for (name, bytes) in &files {
        fs::write(dir.join(name), bytes)?;
        listing.push(serde_json::json!({ "path": name, "sha256": sha256_hex(bytes), "bytes": bytes.len() }));
    }
    let manifest = serde_json::json!({
        "tool": "dynsurv",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "seed": cfg.seed,
        "landmark_mode": format!("{:?}", LandmarkMode::from(cfg.landmark_mode)).to_lowercase(),
        "config_sha256": config_text.map(|t| sha256_hex(t.as_bytes())),
        "files": listing,
    });
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    fs::write(dir.join("manifest.json"), text)?;
    Ok(())
}

fn cmd_simulate(path: Option<&Path>, overrides: &Overrides) -> Result<(), Failure> {
    let (text, cfg, _) = load_config(path, overrides)?;
    let sim = cfg.simulation_config().map_err(Failure::Config)?;
    let data = simulate_joint_data(&sim).map_err(|e| Failure::Config(e.to_string()))?;
    let (mut base, mut long) = (Vec::new(), Vec::new());
    data.write_csv(&mut base, &mut long).map_err(|e| Failure::Config(e.to_string()))?;
    log::info!("simulated {} subjects", data.n());
    write_outputs(
        &cfg.out_dir(),
        "simulate",
        &cfg,
        path.map(|_| text.as_str()),
        vec![("baseline.csv".into(), base), ("longitudinal.csv".into(), long)],
    )
}

fn cmd_benchmark(path: Option<&Path>, overrides: &Overrides) -> Result<(), Failure> {
    let path = path.ok_or_else(|| Failure::Config("benchmark needs --config".into()))?;
    let (text, cfg, base) = load_config(Some(path), overrides)?;
    let methods = cfg.methods().map_err(Failure::Config)?;
    let landmarks = cfg.landmarks().map_err(Failure::Config)?;
    let plan = cfg.plan();
    let data = cfg.dataset(&base).map_err(Failure::Config)?;
    plan.validate(data.n()).map_err(|e| Failure::Config(e.to_string()))?;
    let pool = thread_pool(&cfg)?;

    log::info!(
        "benchmark: {} subjects, {} methods, {} landmarks, {}x{} CV",
        data.n(),
        methods.len(),
        landmarks.len(),
        plan.k,
        plan.repetitions
    );
    let result = pool
        .install(|| run_benchmark(&data, &methods, &landmarks, &plan, &cfg.options()))
        .map_err(|e| Failure::Config(e.to_string()))?;

    write_outputs(
        &cfg.out_dir(),
        "benchmark",
        &cfg,
        Some(&text),
        vec![
            ("results.csv".into(), result.results_csv().into_bytes()),
            ("timing.csv".into(), result.timing_csv().into_bytes()),
            ("failures.csv".into(), result.failures_csv().into_bytes()),
        ],
    )?;

    let dead = result.failed_everywhere();
    if dead.is_empty() {
        Ok(())
    } else {
        let list: Vec<String> = dead.iter().map(|(m, l)| format!("{m} at landmark {l}")).collect();
        Err(Failure::Partial(format!("failed on every fold: {}", list.join(", "))))
    }
}

fn cmd_plot(results: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let rows = plot::read_results(results).map_err(Failure::Config)?;
    if rows.is_empty() {
        return Err(Failure::Partial(format!("{} has no result rows", results.display())));
    }
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| results.parent().map(Path::to_path_buf).unwrap_or_default());
    fs::create_dir_all(&dir)?;
    let charts = plot::render_all(&rows);
    for (name, svg) in &charts {
        fs::write(dir.join(name), svg)?;
    }
    log::info!("wrote {} charts to {}", charts.len(), dir.display());
    Ok(())
}
