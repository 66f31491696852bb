use clap::{Args, Parser, Subcommand};
use lkshape::inference::Family;
use lkshape::{Error, Result};
use lkshape_cli::commands::{self, DensityParams, DensityRequest, GroupSpec, SimulateRequest};
use lkshape_cli::config::{Overrides, RunConfig};
use lkshape_cli::{exit_code, THREADS_ENV};
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

/// Le-Kendall SVD shape analysis under isotropic elliptical models.
#[derive(Parser)]
#[command(name = "lkshape", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Landmark CSV, or a shapes JSON written by `extract`.
    #[arg(long)]
    input: Option<PathBuf>,
    /// K×K Θ matrix as a header-less CSV (default: identity).
    #[arg(long)]
    theta: Option<PathBuf>,
    /// gaussian, kotz-t2, kotz-t3 or kotz:T:R; repeatable.
    #[arg(long = "family", value_parser = parse_family)]
    families: Vec<Family>,
    /// Highest zonal degree summed before giving up.
    #[arg(long)]
    max_degree: Option<usize>,
    /// Relative tail tolerance of the series.
    #[arg(long)]
    tail_tol: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output file (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Landmarks to shape coordinates (JSON).
    Extract(Common),
    /// Disk density on an angle grid (CSV).
    Density {
        #[command(flatten)]
        common: Common,
        /// A fit or select report supplying μ̂, σ̂² per family.
        #[arg(long, conflicts_with = "nu")]
        params: Option<PathBuf>,
        /// Singular values of μ/σ, comma separated.
        #[arg(long, value_delimiter = ',', requires_all = ["landmarks", "dim"])]
        nu: Option<Vec<f64>>,
        #[arg(long)]
        landmarks: Option<usize>,
        #[arg(long)]
        dim: Option<usize>,
        /// Grid points per angle.
        #[arg(long, default_value_t = 200)]
        steps: usize,
        /// Upper end of each angle axis.
        #[arg(long)]
        upper: Option<f64>,
    },
    /// Maximum-likelihood fit per family (JSON).
    Fit {
        #[command(flatten)]
        common: Common,
        /// Restrict to one group.
        #[arg(long)]
        group: Option<String>,
    },
    /// BIC* ranking and evidence grades (JSON).
    Select {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        group: Option<String>,
    },
    /// Likelihood-ratio test of equal mean shape between two groups (JSON).
    Test {
        #[command(flatten)]
        common: Common,
        /// The two groups, comma separated (default: the only two present).
        #[arg(long, value_delimiter = ',', num_args = 1)]
        groups: Option<Vec<String>>,
    },
    /// Synthetic landmark CSV from the isotropic model.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 4)]
        landmarks: usize,
        #[arg(long, default_value_t = 2)]
        dim: usize,
        #[arg(long, default_value_t = 1.0)]
        sigma2: f64,
        /// name:count:nu1,nu2,... ; repeatable.
        #[arg(long = "group", default_values = ["small:40:4,2", "large:40:4,2"])]
        groups: Vec<GroupSpec>,
    },
}

fn parse_family(s: &str) -> std::result::Result<Family, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn config(common: &Common) -> Result<RunConfig> {
    let base = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let cfg = base.apply(Overrides {
        input: common.input.clone(),
        families: common.families.clone(),
        theta: common.theta.clone(),
        max_degree: common.max_degree,
        tail_tol: common.tail_tol,
        seed: common.seed,
        output: common.out.clone(),
    });
    cfg.validate()?;
    Ok(cfg)
}

fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&t| t > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got '{raw}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn write_output(cfg: &RunConfig, text: &str) -> Result<()> {
    match &cfg.output {
        Some(path) => std::fs::write(path, text)?,
        None => std::io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::Extract(common) => {
            let cfg = config(&common)?;
            write_output(&cfg, &commands::extract(&cfg)?)
        }
        Command::Density {
            common,
            params,
            nu,
            landmarks,
            dim,
            steps,
            upper,
        } => {
            let cfg = config(&common)?;
            let params = match (params, nu) {
                (Some(p), _) => DensityParams::Report(p),
                (None, Some(nu)) => DensityParams::Nu {
                    nu,
                    n_landmarks: landmarks.expect("required by clap"),
                    dim: dim.expect("required by clap"),
                },
                (None, None) => {
                    return Err(Error::Config(
                        "density needs --params REPORT or --nu with --landmarks and --dim".into(),
                    ))
                }
            };
            let (csv, skipped) = commands::density(&cfg, &DensityRequest { params, steps, upper })?;
            if skipped > 0 {
                eprintln!("skipped {skipped} grid points outside the angle region");
            }
            write_output(&cfg, &csv)
        }
        Command::Fit { common, group } => {
            let cfg = config(&common)?;
            write_output(&cfg, &commands::fit(&cfg, group.as_deref())?)
        }
        Command::Select { common, group } => {
            let cfg = config(&common)?;
            write_output(&cfg, &commands::select(&cfg, group.as_deref())?)
        }
        Command::Test { common, groups } => {
            let cfg = config(&common)?;
            let pair = match groups.as_deref() {
                None => None,
                Some([a, b]) => Some((a.as_str(), b.as_str())),
                Some(other) => {
                    return Err(Error::Config(format!(
                        "--groups takes exactly two names, got {other:?}"
                    )))
                }
            };
            write_output(&cfg, &commands::test(&cfg, pair)?)
        }
        Command::Simulate {
            common,
            landmarks,
            dim,
            sigma2,
            groups,
        } => {
            let cfg = config(&common)?;
            let family = match cfg.families.as_slice() {
                [] => Family::Gaussian,
                [f] => *f,
                _ => return Err(Error::Config("simulate takes a single --family".into())),
            };
            let req = SimulateRequest {
                n_landmarks: landmarks,
                dim,
                family,
                sigma2,
                groups,
            };
            write_output(&cfg, &commands::simulate(&cfg, &req)?)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
