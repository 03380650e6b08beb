use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use shape_taylor::analysis::FitConfig;
use shape_taylor::experiment::sweep::{run_sweep, SweepGrid};
use shape_taylor::experiment::{
    build_mesh, derivative_dump, mapping_field_csv, rates_from_runlog, run_bounds, run_experiment, write_atomic, ExperimentError,
    ResourceCache, RunConfig,
};
use shape_taylor::multiindex::MultiIndex;

// glibc malloc fragments badly under the greedy's churn of large vectors.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Sparse Taylor surrogates on parameterized star-shaped domains.
///
/// Worker threads default to the available parallelism; set
/// SHAPE_TAYLOR_WORKERS to override.
#[derive(Parser)]
#[command(name = "shape-taylor", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Grow a Taylor surrogate and fit its decay rate.
    Run {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Run a template config over a parameter grid.
    Sweep {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long)]
        grid: PathBuf,
    },
    /// Fit the decay rate of a run log.
    Rates {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = FitConfig::default().head_skip)]
        head_skip: usize,
        #[arg(long, default_value_t = FitConfig::default().sample_count)]
        sample_count: usize,
    },
    /// Write the theory report for a config.
    Bounds {
        #[arg(short, long)]
        config: PathBuf,
        /// Defaults to the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the reference mesh as OFF.
    Mesh {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Shape derivatives of A, det and f at one point, as JSON.
    Derivative {
        #[arg(short, long)]
        config: PathBuf,
        /// Multi-index such as `1:2,3:1`.
        #[arg(long)]
        kappa: String,
        #[arg(long, num_args = 2, value_names = ["X0", "X1"], allow_negative_numbers = true)]
        x: Vec<f64>,
    },
    /// Mapped points and Jacobian determinants on a polar grid, as CSV.
    MappingField {
        #[arg(short, long)]
        config: PathBuf,
        /// Parameter as `j:y_j` pairs, e.g. `1:0.5,4:-1`.
        #[arg(long, default_value = "")]
        y: String,
        #[arg(long, default_value_t = 16)]
        rings: usize,
        #[arg(long, default_value_t = 64)]
        angles: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(path: &Path) -> Result<RunConfig, ExperimentError> {
    Ok(RunConfig::from_path(path)?)
}

fn parse_y(text: &str) -> Result<Vec<(u32, f64)>, ExperimentError> {
    let bad = || ExperimentError::Config(shape_taylor::experiment::ConfigError::new("y", format!("expected j:value pairs, got {text:?}")));
    text.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let (j, v) = p.split_once(':').ok_or_else(bad)?;
            Ok((j.trim().parse().map_err(|_| bad())?, v.trim().parse().map_err(|_| bad())?))
        })
        .collect()
}

/// Prints to stdout, ignoring a closed pipe.
fn emit(text: &str) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn pretty<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable")
}

fn execute(cmd: Command) -> Result<u8, ExperimentError> {
    match cmd {
        Command::Run { config } => {
            let cfg = load(&config)?;
            let out = run_experiment(&cfg, &ResourceCache::new())?;
            let m = &out.manifest;
            match m.fitted_rate {
                Some(s) => println!("coefficients {}  solves {}  fitted s = {s}", m.coefficient_count, m.solves),
                None => println!("coefficients {}  solves {}  no fit: {}", m.coefficient_count, m.solves, m.rate_error.as_deref().unwrap_or("")),
            }
            println!("outputs in {}", cfg.output.dir.display());
            if let Some(reason) = &m.partial {
                eprintln!("partial run: {reason}");
                return Ok(3);
            }
            Ok(0)
        }
        Command::Sweep { config, grid } => {
            let cfg = load(&config)?;
            let grid = SweepGrid::from_path(&grid)?;
            let out = run_sweep(&cfg, &grid, &ResourceCache::new())?;
            for r in &out.rows {
                let s = r.s.map_or("-".to_string(), |s| format!("{s:.4}"));
                println!("cell {:3}  alpha {}  theta {}  h {}  s {s}{}", r.cell, r.alpha, r.theta, r.h_boundary, r.error.as_ref().map_or(String::new(), |e| format!("  error: {e}")));
            }
            println!("table {}  cache hits {}", out.table.display(), out.cache_hits);
            Ok(if out.rows.iter().any(|r| r.partial) { 3 } else { 0 })
        }
        Command::Rates { input, head_skip, sample_count } => {
            let rec = rates_from_runlog(&input, &FitConfig { head_skip, sample_count })?;
            emit(&pretty(&rec));
            Ok(if rec.s.is_some() { 0 } else { 2 })
        }
        Command::Bounds { config, out } => {
            let cfg = load(&config)?;
            let report = run_bounds(&cfg)?;
            let path = out.unwrap_or_else(|| cfg.output.path(&cfg.output.theory));
            let text = pretty(&report);
            write_atomic(&path, format!("{text}\n").as_bytes())?;
            emit(&text);
            Ok(0)
        }
        Command::Mesh { config, out } => {
            let cfg = load(&config)?;
            let mesh = build_mesh(&cfg)?;
            let mut buf = Vec::new();
            mesh.write_off(&mut buf).map_err(|e| ExperimentError::Runtime(e.to_string()))?;
            write_atomic(&out, &buf)?;
            emit(&pretty(&mesh.stats()));
            Ok(0)
        }
        Command::Derivative { config, kappa, x } => {
            let cfg = load(&config)?;
            let kappa: MultiIndex = kappa
                .parse()
                .map_err(|e: shape_taylor::multiindex::MultiIndexError| ExperimentError::Config(shape_taylor::experiment::ConfigError::new("kappa", e.to_string())))?;
            emit(&pretty(&derivative_dump(&cfg, &kappa, [x[0], x[1]])?));
            Ok(0)
        }
        Command::MappingField { config, y, rings, angles, out } => {
            let cfg = load(&config)?;
            let y = parse_y(&y)?;
            write_atomic(&out, &mapping_field_csv(&cfg, &y, rings, angles)?)?;
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
