//! Command-line front end: single episodes, benchmark suites, the bridge
//! server and config validation.
//!
//! Exit codes: 0 success, 1 invalid config or suite, 2 runtime abort.

use std::fs;
use std::io::{self, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use vatrack::bridge::{serve_stdio, serve_tcp, ServeOptions};
use vatrack::harness::{
    load_config, run_benchmark, run_episode, ConfigError, EpisodeConfig, HarnessError, Suite, CONFIG_DIR_ENV,
};

#[derive(Parser)]
#[command(name = "vatrack", version, about = "Visual active tracking simulator and benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Run one episode and write its log.
    Run {
        /// Episode config (TOML). Defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Log path; `.csv` writes the flat export, anything else NDJSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a benchmark suite and emit score tables.
    Bench {
        #[arg(long)]
        suite: PathBuf,
        /// Overrides the suite's runs per cell.
        #[arg(long)]
        runs: Option<usize>,
        /// Directory for the tables; stdout when omitted.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        /// Worker threads; 0 uses all cores.
        #[arg(long, default_value_t = 0)]
        threads: usize,
    },
    /// Serve the bridge protocol.
    Serve {
        /// Address to listen on, e.g. 127.0.0.1:7878.
        #[arg(long, conflicts_with = "stdio", required_unless_present = "stdio")]
        listen: Option<String>,
        /// Run a single session over stdin/stdout.
        #[arg(long)]
        stdio: bool,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Check a config or suite file and list every problem.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Md,
}

enum Failure {
    Invalid(String),
    Runtime(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Invalid(render_config_error(&e))
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Config(c) => c.into(),
            HarnessError::EmptySuite => Failure::Invalid(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn render_config_error(e: &ConfigError) -> String {
    match e {
        ConfigError::Invalid { issues } => issues
            .iter()
            .map(|i| i.to_string())
            .collect::<Vec<_>>()
            .join("\n"),
        other => other.to_string(),
    }
}

fn config_or_default(path: Option<&Path>) -> Result<EpisodeConfig, Failure> {
    match path {
        Some(p) => Ok(load_config(p)?),
        None => Ok(EpisodeConfig::default()),
    }
}

fn run(config: Option<&Path>, seed: u64, out: Option<&Path>) -> Result<(), Failure> {
    let cfg = config_or_default(config)?;
    let log = run_episode(&cfg, seed)?;
    if let Some(out) = out {
        let file = io::BufWriter::new(fs::File::create(out)?);
        if out.extension().is_some_and(|e| e == "csv") {
            log.write_csv(file).map_err(|e| Failure::Runtime(e.to_string()))?;
        } else {
            log.write_ndjson(file)?;
        }
    }
    println!(
        "seed {seed}: {} steps, termination {:?}, P_c {:.4}",
        log.records.len(),
        log.termination,
        log.p_c()
    );
    match &log.error {
        Some(e) if log.is_aborted() => Err(Failure::Runtime(e.clone())),
        _ => Ok(()),
    }
}

fn bench(suite: &Path, runs: Option<usize>, out_dir: Option<&Path>, format: Format, threads: usize) -> Result<(), Failure> {
    let mut suite = Suite::load(suite)?;
    if let Some(r) = runs {
        suite.runs = r;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    let report = pool.install(|| run_benchmark(&suite))?;

    let mut outputs: Vec<(String, String)> = match format {
        Format::Csv => {
            let mut v = vec![("scores.csv".to_string(), report.to_csv())];
            for ctl in &report.controllers {
                v.push((format!("{ctl}.csv"), report.controller_csv(ctl)));
            }
            v
        }
        Format::Md => vec![("scores.md".to_string(), report.to_markdown())],
    };
    match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            for (name, text) in &outputs {
                fs::write(dir.join(name), text)?;
            }
        }
        None => {
            // Only the combined table goes to stdout.
            outputs.truncate(1);
            io::stdout().write_all(outputs[0].1.as_bytes())?;
        }
    }
    let aborted: usize = report.cells.iter().map(|c| c.aborted).sum();
    if aborted > 0 {
        return Err(Failure::Runtime(format!("{aborted} episode(s) aborted")));
    }
    Ok(())
}

fn serve(listen: Option<&str>, stdio: bool, config: Option<&Path>) -> Result<(), Failure> {
    let cfg = config_or_default(config)?;
    if stdio {
        let report = serve_stdio(&cfg);
        return match report.error {
            Some(e) => Err(Failure::Runtime(e)),
            None => Ok(()),
        };
    }
    let addr = listen.expect("clap requires --listen without --stdio");
    let listener = TcpListener::bind(addr)?;
    eprintln!("listening on {}", listener.local_addr()?);
    serve_tcp(listener, cfg, ServeOptions::default())?;
    Ok(())
}

/// Accepts either an episode config or a suite; a file with a `scenarios`
/// table is treated as a suite.
fn validate(path: &Path) -> Result<(), Failure> {
    let resolved = vatrack::harness::resolve_config_path(path);
    let text = fs::read_to_string(&resolved).map_err(|e| Failure::Invalid(format!("{}: {e}", resolved.display())))?;
    let is_suite = text.parse::<toml::Table>().is_ok_and(|t| t.contains_key("scenarios"));
    if is_suite {
        let suite = Suite::parse(&text)?;
        let mut problems = Vec::new();
        for sc in &suite.scenarios {
            for ctl in &suite.controllers {
                if let Err(e) = suite.cell_config(sc, ctl) {
                    problems.push(match e {
                        HarnessError::Config(c) => render_config_error(&c),
                        other => other.to_string(),
                    });
                }
            }
        }
        if suite.scenarios.is_empty() || suite.controllers.is_empty() {
            problems.push("suite needs at least one scenario and one controller".into());
        }
        if !problems.is_empty() {
            return Err(Failure::Invalid(problems.join("\n")));
        }
        println!(
            "{}: suite ok ({} scenarios x {} controllers, {} runs)",
            resolved.display(),
            suite.scenarios.len(),
            suite.controllers.len(),
            suite.runs
        );
    } else {
        let cfg = load_config(path)?;
        println!("{}: ok (hash {})", resolved.display(), cfg.hash());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Verb::Run { config, seed, out } => run(config.as_deref(), *seed, out.as_deref()),
        Verb::Bench {
            suite,
            runs,
            out_dir,
            format,
            threads,
        } => bench(suite, *runs, out_dir.as_deref(), *format, *threads),
        Verb::Serve { listen, stdio, config } => serve(listen.as_deref(), *stdio, config.as_deref()),
        Verb::Validate { config } => validate(config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msg)) => {
            eprintln!("invalid: {msg}");
            eprintln!("(relative paths are resolved against ${CONFIG_DIR_ENV} when set)");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
