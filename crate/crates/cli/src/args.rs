use std::path::PathBuf;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use overwhelm_core::bounds::DEFAULT_SLACK;

#[derive(Parser, Debug)]
#[command(name = "overwhelm", version)]
#[command(about = "Certify that a single-layer transformer's greedy output is fixed by its prompt")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Certify a restriction whose free slots may hold any token
    Verify(VerifyArgs),
    /// Certify every ordering of a multiset of free tokens
    VerifyPerm(PermArgs),
    /// Verify, then enumerate the whole space and fail on any contradiction
    OracleCheck(OracleArgs),
    /// Track W against PTP/2 for a repeated token as the context grows
    Converge(ConvergeArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Json,
    Csv,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Naive,
    Lp,
}

impl From<MethodArg> for overwhelm_core::Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Naive => overwhelm_core::Method::Naive,
            MethodArg::Lp => overwhelm_core::Method::Lp,
        }
    }
}

#[derive(Args, Debug)]
pub struct Common {
    /// OVWM weight file
    #[arg(long)]
    pub model: PathBuf,

    /// Vocab map (one token per line, line number = id). When given, token
    /// lists are read as token text; `#<id>` still selects by id.
    #[arg(long)]
    pub vocab: Option<PathBuf>,

    /// Worker threads; results do not depend on it
    #[arg(long)]
    pub threads: Option<usize>,

    /// Report destination (stdout when omitted)
    #[arg(long)]
    pub out: Option<PathBuf>,

    #[arg(long, value_enum, default_value_t = ReportFormat::Json)]
    pub format: ReportFormat,

    /// Relative safety margin on both sides of W < PTP/2
    #[arg(long, default_value_t = DEFAULT_SLACK)]
    pub slack: f64,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub common: Common,

    /// Comma-separated fixed prefix
    #[arg(long, default_value = "")]
    pub fixed: String,

    /// Number of free slots between the prefix and the query
    #[arg(long)]
    pub n_free: usize,

    /// Token at the final position
    #[arg(long)]
    pub query: String,

    /// Tokens for the free slots of the PTP sample (default: the query token)
    #[arg(long)]
    pub fill: Option<String>,
}

#[derive(Args, Debug)]
pub struct PermArgs {
    #[command(flatten)]
    pub common: Common,

    /// Comma-separated fixed prefix
    #[arg(long, default_value = "")]
    pub fixed: String,

    /// Free-slot multiset; its order is the default PTP sample
    #[arg(long)]
    pub perm: String,

    /// Token at the final position
    #[arg(long)]
    pub query: String,

    #[arg(long, value_enum, default_value_t = MethodArg::Lp)]
    pub method: MethodArg,

    /// Ordering of the multiset used for PTP
    #[arg(long)]
    pub fill: Option<String>,
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("space").required(true).args(["n_free", "perm"])))]
pub struct OracleArgs {
    #[command(flatten)]
    pub common: Common,

    /// Comma-separated fixed prefix
    #[arg(long, default_value = "")]
    pub fixed: String,

    /// Check the designed space with this many free slots
    #[arg(long)]
    pub n_free: Option<usize>,

    /// Check the permutation class of this multiset instead
    #[arg(long)]
    pub perm: Option<String>,

    /// Token at the final position
    #[arg(long)]
    pub query: String,

    #[arg(long, value_enum, default_value_t = MethodArg::Lp)]
    pub method: MethodArg,

    /// Tokens for the free slots of the PTP sample
    #[arg(long)]
    pub fill: Option<String>,

    /// Largest number of inputs to enumerate
    #[arg(long)]
    pub limit: Option<u128>,
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("free").required(true).args(["n_free", "free_ratio"])))]
pub struct ConvergeArgs {
    #[command(flatten)]
    pub common: Common,

    /// The repeated token, also the query
    #[arg(long)]
    pub query: String,

    /// Constant number of free slots
    #[arg(long)]
    pub n_free: Option<usize>,

    /// Free slots as a fraction of the context, e.g. `1/2`
    #[arg(long)]
    pub free_ratio: Option<String>,

    /// Context lengths: `a,b,c` or a doubling range `2^3..2^20`
    #[arg(long, default_value = "2^3..2^20")]
    pub schedule: String,
}
