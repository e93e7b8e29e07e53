//! `stepstage`: run writer and reader cohorts, benchmark a stream, or
//! launch a whole workflow from a config file.

mod bench;
mod ranks;
mod read;
mod workflow;
mod write;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use stepstage::control_plane::{ContactSink, ContactSource};
use stepstage::model::{BlockExtent, EngineParams, GlobalDims};
use stepstage::workload::{self, Decomposition};

/// Process exit statuses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Exit {
    Ok = 0,
    Usage = 2,
    Protocol = 3,
    Verify = 4,
}

impl From<Exit> for ExitCode {
    fn from(e: Exit) -> ExitCode {
        ExitCode::from(e as u8)
    }
}

#[derive(Parser)]
#[command(
    name = "stepstage",
    version,
    about = "Stream array timesteps between parallel programs"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a writer cohort that produces seeded steps.
    Write(WriteArgs),
    /// Run a reader cohort that consumes and verifies steps.
    Read(ReadArgs),
    /// Measure perceived read throughput per step; CSV on stdout.
    Bench(BenchArgs),
    /// Launch the producers and consumers listed in a workflow file.
    Run(RunArgs),
}

#[derive(Args, Clone)]
pub struct StreamArgs {
    /// Stream name; also names the contact file.
    #[arg(long, default_value = "stream")]
    pub stream: String,
    /// Engine parameter as Key=Value; repeatable.
    #[arg(long = "param", value_name = "KEY=VALUE")]
    pub params: Vec<String>,
    /// Directory holding contact files.
    #[arg(long, env = "STAGE_CONTACT_DIR")]
    pub contact_dir: Option<PathBuf>,
    /// Variable to write or read.
    #[arg(long, default_value = "field")]
    pub var: String,
    /// Payload generator seed.
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Prefix for every output line.
    #[arg(long)]
    pub label: Option<String>,
}

impl StreamArgs {
    pub fn engine_params(&self) -> Result<EngineParams, String> {
        EngineParams::from_pairs(self.params.iter().map(String::as_str)).map_err(|e| e.to_string())
    }

    pub fn contact_dir(&self) -> PathBuf {
        self.contact_dir.clone().unwrap_or_else(|| PathBuf::from("."))
    }

    pub fn prefix(&self) -> String {
        self.label.as_ref().map(|l| format!("[{l}] ")).unwrap_or_default()
    }
}

#[derive(Args, Clone)]
pub struct WriteArgs {
    #[command(flatten)]
    pub common: StreamArgs,
    /// In-process ranks; ignored when STAGE_RANK is set.
    #[arg(long, default_value_t = 1)]
    pub ranks: usize,
    #[arg(long, default_value_t = 10)]
    pub steps: u64,
    /// Global shape such as 256x256.
    #[arg(long, default_value = "64x64", value_parser = parse_shape)]
    pub shape: GlobalDims,
    /// striped, blocked or random:<seed>.
    #[arg(long, default_value = "blocked", value_parser = parse_decomposition)]
    pub decomposition: Decomposition,
    /// Print the contact record on stdout instead of writing a file.
    #[arg(long, conflicts_with = "contact_dir")]
    pub screen: bool,
    /// Seconds to sleep after each step.
    #[arg(long, default_value = "0", value_parser = parse_seconds)]
    pub step_delay: Duration,
}

impl WriteArgs {
    pub fn sink(&self) -> ContactSink {
        if self.screen {
            ContactSink::Screen
        } else {
            ContactSink::Dir(self.common.contact_dir())
        }
    }
}

#[derive(Args, Clone)]
pub struct ReadArgs {
    #[command(flatten)]
    pub common: StreamArgs,
    /// In-process ranks; ignored when STAGE_RANK is set.
    #[arg(long, default_value_t = 1)]
    pub ranks: usize,
    /// Region to read as start:count per dimension; repeatable. Without
    /// one, the ranks split the whole array between them.
    #[arg(long = "selection", value_parser = parse_selection)]
    pub selections: Vec<BlockExtent>,
    /// Give up on a begin_step after this many seconds and retry.
    #[arg(long, value_parser = parse_seconds)]
    pub begin_step_timeout: Option<Duration>,
    /// Seconds to sleep inside each step, emulating analysis work.
    #[arg(long, default_value = "0", value_parser = parse_seconds)]
    pub sleep: Duration,
    /// Contact record text instead of a contact directory.
    #[arg(long, conflicts_with = "contact_dir")]
    pub contact: Option<String>,
    /// Read the contact record from standard input.
    #[arg(long, conflicts_with_all = ["contact_dir", "contact"])]
    pub contact_stdin: bool,
}

impl ReadArgs {
    pub fn source(&self) -> ContactSource {
        if let Some(t) = &self.contact {
            ContactSource::Text(t.clone())
        } else if self.contact_stdin {
            ContactSource::Stdin
        } else {
            ContactSource::Dir(self.common.contact_dir())
        }
    }
}

#[derive(Args, Clone)]
pub struct BenchArgs {
    /// Bytes per step, comma separated, with optional K/M/G (binary) suffix.
    #[arg(long, default_value = "1M", value_delimiter = ',', value_parser = parse_size)]
    pub sizes: Vec<u64>,
    /// Steps per size.
    #[arg(long, default_value_t = 5)]
    pub repeat: u64,
    #[arg(long, default_value_t = 1)]
    pub writer_ranks: usize,
    #[arg(long, default_value_t = 1)]
    pub reader_ranks: usize,
    /// Engine parameter as Key=Value; repeatable, applied to both sides.
    #[arg(long = "param", value_name = "KEY=VALUE")]
    pub params: Vec<String>,
    /// Also fit load time against size and report it on stderr.
    #[arg(long)]
    pub fit: bool,
}

#[derive(Args, Clone)]
pub struct RunArgs {
    /// Workflow file.
    pub config: PathBuf,
}

fn parse_shape(s: &str) -> Result<GlobalDims, String> {
    workload::parse_shape(s).map_err(|e| e.to_string())
}

fn parse_decomposition(s: &str) -> Result<Decomposition, String> {
    s.parse().map_err(|e: stepstage::Error| e.to_string())
}

fn parse_selection(s: &str) -> Result<BlockExtent, String> {
    workload::parse_selection(s).map_err(|e| e.to_string())
}

pub fn parse_seconds(s: &str) -> Result<Duration, String> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| format!("{s:?} is not a number of seconds"))?;
    Duration::try_from_secs_f64(v).map_err(|e| format!("{s:?}: {e}"))
}

pub fn parse_size(s: &str) -> Result<u64, String> {
    let s = s.trim();
    let (num, mult) = match s.char_indices().last() {
        Some((i, 'K' | 'k')) => (&s[..i], 1u64 << 10),
        Some((i, 'M' | 'm')) => (&s[..i], 1 << 20),
        Some((i, 'G' | 'g')) => (&s[..i], 1 << 30),
        _ => (s, 1),
    };
    num.parse::<u64>()
        .ok()
        .and_then(|n| n.checked_mul(mult))
        .ok_or_else(|| format!("{s:?} is not a byte count"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let exit = match cli.cmd {
        Cmd::Write(a) => write::run(&a),
        Cmd::Read(a) => read::run(&a),
        Cmd::Bench(a) => bench::run(&a),
        Cmd::Run(a) => workflow::run(&a.config),
    };
    exit.into()
}
