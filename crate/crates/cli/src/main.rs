mod commands;
mod config;

use std::fmt;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use resync::codec::CodecError;
use resync::destination::SyncError;
use resync::simulator::SimError;
use resync::source::SourceError;
use resync::transport::TransportError;

/// Exit codes. Besides these, `audit` exits 1 when the store is out of
/// sync, `sync` and `baseline` exit 2 when some resources failed, and
/// `sync` exits 3 when no baseline exists yet.
pub mod exit {
    pub const OK: u8 = 0;
    pub const OUT_OF_SYNC: u8 = 1;
    pub const PARTIAL: u8 = 2;
    pub const BASELINE_REQUIRED: u8 = 3;
    pub const USAGE: u8 = 64;
    pub const DATA: u8 = 65;
    pub const UNAVAILABLE: u8 = 69;
    pub const INTERNAL: u8 = 70;
    pub const IO: u8 = 74;
    pub const LOCKED: u8 = 75;
    pub const CONFIG: u8 = 78;
}

#[derive(Debug)]
pub enum UsageError {
    Flag(String),
    Config(String),
}

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            UsageError::Flag(m) | UsageError::Config(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
}

#[derive(Debug, Parser)]
#[command(name = "resync", version, about = "Publish and mirror Web resources with Sitemap-based resource and change lists")]
struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// error, warn, info, debug or trace.
    #[arg(long, global = true)]
    log_level: Option<String>,
    /// Output format for reports.
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Scan a directory and write its resource list.
    List(ListArgs),
    /// Write change lists from two snapshots or from a change log.
    Changes(ChangesArgs),
    /// Mirror a source's resource list into a store.
    Baseline(SyncArgs),
    /// Apply a source's change lists to a baselined store.
    Sync(SyncArgs),
    /// Compare a store with a source's resource list.
    Audit(AuditArgs),
    /// Serve a directory over HTTP until interrupted.
    Serve(ServeArgs),
    /// Run or continue the synthetic source and publish its documents.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
pub struct ListArgs {
    #[arg(long)]
    pub root: Option<PathBuf>,
    /// URI prefix under which the root is published.
    #[arg(long)]
    pub base_uri: Option<String>,
    /// URI prefix of the published documents (defaults to the base URI).
    #[arg(long)]
    pub list_base: Option<String>,
    /// Directory to write documents into; without it the list goes to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Digest algorithms, e.g. md5,sha-256.
    #[arg(long, value_delimiter = ',')]
    pub digest: Vec<String>,
    /// Glob of relative paths to leave out; repeatable.
    #[arg(long)]
    pub exclude: Vec<String>,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("input").required(true).args(["old", "log"]))]
pub struct ChangesArgs {
    /// Earlier resource list file.
    #[arg(long, requires = "new")]
    pub old: Option<PathBuf>,
    /// Later resource list file.
    #[arg(long, requires = "old")]
    pub new: Option<PathBuf>,
    /// Change log file.
    #[arg(long, requires = "out", conflicts_with_all = ["old", "new"])]
    pub log: Option<PathBuf>,
    /// Change list window, e.g. 1d or 1h.
    #[arg(long)]
    pub period: Option<String>,
    /// Instant the documents are current as of (default: now).
    #[arg(long)]
    pub as_of: Option<String>,
    /// URI prefix of the published documents, for the change list index.
    #[arg(long)]
    pub list_base: Option<String>,
    /// Output file (snapshots) or directory (log).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DestinationArgs {
    /// Source URL: a document or the directory that holds the documents.
    #[arg(long)]
    pub source: String,
    #[arg(long)]
    pub store: PathBuf,
    /// State file (default: inside the store).
    #[arg(long)]
    pub state: Option<PathBuf>,
    #[arg(long)]
    pub timeout: Option<String>,
    #[arg(long)]
    pub retries: Option<u32>,
}

#[derive(Debug, Args)]
pub struct SyncArgs {
    #[command(flatten)]
    pub dest: DestinationArgs,
    /// Leave local copies of deleted resources in place.
    #[arg(long)]
    pub keep_deletes: bool,
    /// Do not check downloads against listed digests.
    #[arg(long)]
    pub no_verify: bool,
    /// Apply change entries older than the local copy.
    #[arg(long)]
    pub stale_wins: bool,
    #[arg(long)]
    pub parallel: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    #[command(flatten)]
    pub dest: DestinationArgs,
    /// Also write the report to this file.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub root: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: String,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Output directory: web/ is the served root, data lives in web/data/.
    #[arg(long)]
    pub out: PathBuf,
    /// Resume the simulation saved in the output directory.
    #[arg(long = "continue")]
    pub resume: bool,
    /// Virtual seconds to simulate in this invocation.
    #[arg(long)]
    pub duration: Option<f64>,
    /// Release this many events at a single instant after stepping.
    #[arg(long)]
    pub burst: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// URL at which web/ is served.
    #[arg(long)]
    pub publish_base: Option<String>,
    #[arg(long)]
    pub period: Option<String>,
}

/// Short category and exit code for an error.
fn classify(err: &anyhow::Error) -> (&'static str, u8) {
    for cause in err.chain() {
        if let Some(u) = cause.downcast_ref::<UsageError>() {
            return match u {
                UsageError::Flag(_) => ("usage", exit::USAGE),
                UsageError::Config(_) => ("config", exit::CONFIG),
            };
        }
        if let Some(e) = cause.downcast_ref::<SyncError>() {
            return match e {
                SyncError::BaselineRequired => ("baseline_required", exit::BASELINE_REQUIRED),
                SyncError::Locked(_) => ("locked", exit::LOCKED),
                SyncError::Transport(_) => ("unavailable", exit::UNAVAILABLE),
                SyncError::Codec { source, .. } => (source.kind.as_str(), exit::DATA),
                SyncError::WrongCapability { .. } => ("wrong_capability", exit::DATA),
                SyncError::CorruptState { .. } => ("corrupt_state", exit::DATA),
                SyncError::PathMapping(_) => ("path_mapping", exit::DATA),
                SyncError::Io { .. } => ("io", exit::IO),
                SyncError::Model(_) => ("invalid_state", exit::DATA),
            };
        }
        if cause.downcast_ref::<TransportError>().is_some() {
            return ("unavailable", exit::UNAVAILABLE);
        }
        if let Some(e) = cause.downcast_ref::<CodecError>() {
            return (e.kind.as_str(), exit::DATA);
        }
        if let Some(e) = cause.downcast_ref::<SourceError>() {
            return match e {
                SourceError::Config(_) => ("config", exit::CONFIG),
                SourceError::Io { .. } => ("io", exit::IO),
                _ => ("invalid_source", exit::DATA),
            };
        }
        if let Some(e) = cause.downcast_ref::<SimError>() {
            return match e {
                SimError::Config(_) => ("config", exit::CONFIG),
                SimError::Io { .. } => ("io", exit::IO),
                _ => ("invalid_source", exit::DATA),
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return ("io", exit::IO);
        }
    }
    ("internal", exit::INTERNAL)
}

fn report_error(kind: &str, message: &str) {
    let message = message.split_whitespace().collect::<Vec<_>>().join(" ");
    let _ = writeln!(std::io::stderr(), "resync: error: {kind}: {message}");
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let rendered = e.render().to_string();
            let detail: Vec<&str> = rendered.lines().take_while(|l| !l.trim().is_empty()).collect();
            report_error("usage", detail.join(" ").trim_start_matches("error: "));
            return ExitCode::from(exit::USAGE);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match commands::run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            let (kind, code) = classify(&err);
            report_error(kind, &format!("{err:#}"));
            ExitCode::from(code)
        }
    }
}
