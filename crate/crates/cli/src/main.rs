mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Lib(multiway::Error),
    Io(std::io::Error),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Lib(e) => write!(f, "{e}"),
            CliError::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl From<multiway::Error> for CliError {
    fn from(e: multiway::Error) -> Self {
        match e {
            multiway::Error::Io(io) => CliError::Io(io),
            other => CliError::Lib(other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(e.into())
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use multiway::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Lib(E::Shape(_) | E::InvalidArgument(_)) => 2,
            CliError::Lib(E::Numerical(_) | E::Divergence { .. }) => 3,
            CliError::Lib(E::Format(_) | E::Io(_)) | CliError::Io(_) => 4,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "multiway", version, about = "Multiway decompositions, inverse solvers, Granger connectivity and fusion")]
struct Cli {
    /// RNG seed; overrides `seed` in the config
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// worker threads (default: all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Clone)]
pub struct Common {
    /// key = value config file with optional [section] headers
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// output directory; overrides `output`
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// extra `key=value` settings, applied after the config file
    #[arg(long = "set", value_parser = config::parse_override)]
    set: Vec<(String, String)>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic data sets with their ground truth
    Simulate(Common),
    /// Constrained PARAFAC of a tensor file
    Parafac(Common),
    /// Orthogonal nonnegative source atoms from an EEG matrix
    Stonnica(Common),
    /// Orthogonal nonnegative source atoms from a spectral tensor
    Tstonnica(Common),
    /// Hemodynamic deconvolution of an fMRI matrix
    Deconvolve(Common),
    /// Joint EEG/fMRI source estimate
    FuseMatrix(Common),
    /// Granger connectivity of a multichannel series
    Granger {
        #[command(flatten)]
        common: Common,
        /// naive | tnn | parafac | bivariate
        #[arg(long)]
        method: Option<String>,
        /// penalty weight for `tnn`
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Multiway partial least squares along a shared mode
    Npls(Common),
    /// Coupled matrix-tensor factorization
    Cmtf(Common),
    /// t-SVD, truncation and tensor nuclear norm
    Tsvd(Common),
    /// Rank or penalty-weight selection over a grid
    Select(Common),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(if cli.verbose { log::LevelFilter::Debug } else { log::LevelFilter::Warn })
        .init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("config error: {e}");
            return ExitCode::from(2);
        }
    }
    let (name, mut common) = match &cli.command {
        Command::Simulate(c) => ("simulate", c.clone()),
        Command::Parafac(c) => ("parafac", c.clone()),
        Command::Stonnica(c) => ("stonnica", c.clone()),
        Command::Tstonnica(c) => ("tstonnica", c.clone()),
        Command::Deconvolve(c) => ("deconvolve", c.clone()),
        Command::FuseMatrix(c) => ("fuse-matrix", c.clone()),
        Command::Granger { common, .. } => ("granger", common.clone()),
        Command::Npls(c) => ("npls", c.clone()),
        Command::Cmtf(c) => ("cmtf", c.clone()),
        Command::Tsvd(c) => ("tsvd", c.clone()),
        Command::Select(c) => ("select", c.clone()),
    };
    if let Command::Granger { method, lambda, .. } = &cli.command {
        if let Some(m) = method {
            common.set.push(("method".into(), m.clone()));
        }
        if let Some(l) = lambda {
            common.set.push(("lambda".into(), l.to_string()));
        }
    }
    match commands::run(name, &common, cli.seed) {
        Ok(dir) => {
            log::info!("wrote {}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("multiway {name}: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
