//! `gtfk`: price bonds and options, export densities and reproduce the
//! benchmark bond table from the command line.

mod commands;
mod format;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gtfk::Error;

#[derive(Parser, Debug)]
#[command(
    name = "gtfk",
    version,
    about = "Effective-potential path-integral pricer for one-factor short-rate models"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Model document (JSON); the typical-volatility benchmark model when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Method::Gtfk)]
    pub method: Method,
    /// Output file; standard output when omitted.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Print values with round-trip precision instead of four decimals.
    #[arg(long, global = true)]
    pub full_precision: bool,
    /// Write per-abscissa solver diagnostics to standard error.
    #[arg(long, global = true)]
    pub debug_trace: bool,
    /// Write the parsed model document to this path.
    #[arg(long, global = true)]
    pub echo_model: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Gtfk,
    Pde,
    Mc,
    #[value(name = "closed_form")]
    ClosedForm,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Gtfk => "gtfk",
            Method::Pde => "pde",
            Method::Mc => "mc",
            Method::ClosedForm => "closed_form",
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Price a payoff for a list of maturities.
    Price(PriceArgs),
    /// Arrow-Debreu density profile at one maturity.
    Density(DensityArgs),
    /// GTFK and PDE bond prices for both benchmark volatility regimes.
    Table1(TableArgs),
    /// Every applicable method side by side.
    Compare(PriceArgs),
}

#[derive(Args, Debug, Clone)]
pub struct PriceArgs {
    /// Maturities in years, comma separated.
    #[arg(long, short = 'T', value_delimiter = ',', default_values_t = gtfk::model::TABLE1_MATURITIES.to_vec())]
    pub maturities: Vec<f64>,
    /// `bond`, `call:K` or `put:K` with the strike in rate units.
    #[arg(long, default_value = "bond")]
    pub payoff: String,
    #[command(flatten)]
    pub numerics: Numerics,
}

#[derive(Args, Debug, Clone)]
pub struct DensityArgs {
    #[arg(long, short = 'T')]
    pub maturity: f64,
    /// Lower end of the x grid; six λ = 0 standard deviations below the mean by default.
    #[arg(long, allow_hyphen_values = true)]
    pub x_min: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub x_max: Option<f64>,
    #[arg(long, default_value_t = 201)]
    pub points: usize,
    #[command(flatten)]
    pub numerics: Numerics,
}

#[derive(Args, Debug, Clone)]
pub struct TableArgs {
    #[arg(long, short = 'T', value_delimiter = ',', default_values_t = gtfk::model::TABLE1_MATURITIES.to_vec())]
    pub maturities: Vec<f64>,
    #[command(flatten)]
    pub numerics: Numerics,
}

#[derive(Args, Debug, Clone)]
pub struct Numerics {
    /// Relative tolerance of the outer x̄ quadrature.
    #[arg(long)]
    pub rel_tol: Option<f64>,
    #[arg(long, default_value_t = 100_000)]
    pub paths: usize,
    #[arg(long, default_value_t = 512)]
    pub steps_per_year: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long)]
    pub antithetic: bool,
    /// PDE space nodes; the default grid resolves 64 nodes per terminal sd.
    #[arg(long)]
    pub pde_nx: Option<usize>,
    #[arg(long)]
    pub pde_steps_per_year: Option<usize>,
}

/// Failure reported as JSON on standard error.
#[derive(Debug)]
pub struct CliError {
    pub kind: String,
    pub message: String,
    pub code: u8,
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError {
            kind: e.kind().to_string(),
            message: e.to_string(),
            code: if e.is_validation() { 2 } else { 3 },
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError {
            kind: "io".into(),
            message: e.to_string(),
            code: 2,
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError {
            kind: "io".into(),
            message: e.to_string(),
            code: 2,
        }
    }
}

impl CliError {
    pub fn validation(message: impl Into<String>) -> Self {
        CliError {
            kind: "validation".into(),
            message: message.into(),
            code: 2,
        }
    }

    fn to_json(&self) -> String {
        serde_json::json!({ "error": self.kind, "message": self.message, "exit_code": self.code })
            .to_string()
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = CliError::validation(e.to_string().trim_end());
            eprintln!("{}", err.to_json());
            return ExitCode::from(err.code);
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = std::io::stdout().flush();
            eprintln!("{}", e.to_json());
            ExitCode::from(e.code)
        }
    }
}
