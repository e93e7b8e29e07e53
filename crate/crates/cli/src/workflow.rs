//! Workflow files and the process supervisor behind `stepstage run`.
//!
//! One directive per line; `#` starts a comment.
//!
//! ```text
//! contact-dir <path>          # optional; a temporary directory otherwise
//! timeout <seconds>           # optional; default 120
//! writer <name> stream=<s> [ranks=N] [steps=N] [shape=AxB] [decomposition=D]
//!               [seed=N] [var=V] [delay=SECS] [param=Key=Value]...
//! reader <name> stream=<s> [ranks=N] [sleep=SECS] [timeout=SECS]
//!               [selection=start:count,...]... [seed=N] [var=V] [param=Key=Value]...
//! ```
//!
//! Every rank runs as its own `stepstage write`/`stepstage read` process
//! joined into a cohort through `STAGE_RANK`, `STAGE_COHORT_ADDR` and
//! `STAGE_COHORT_SIZE`.

use std::collections::HashSet;
use std::fmt;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Child, Command};
use std::thread;
use std::time::{Duration, Instant};

use stepstage::cohort::{ENV_COHORT_ADDR, ENV_COHORT_SIZE, ENV_RANK};
use stepstage::model::EngineParams;
use stepstage::workload;

use crate::{parse_seconds, Exit};

const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);
/// How long the others may keep running once one process has failed.
const FAILURE_GRACE: Duration = Duration::from_secs(10);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Writer,
    Reader,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Program {
    pub role: Role,
    pub name: String,
    pub stream: String,
    pub ranks: usize,
    /// Flags for the `write`/`read` subcommand, without the contact dir.
    pub args: Vec<String>,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Workflow {
    pub contact_dir: Option<PathBuf>,
    pub timeout: Duration,
    pub programs: Vec<Program>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

impl std::error::Error for ConfigError {}

fn err<T>(line: usize, message: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError {
        line,
        message: message.into(),
    })
}

fn parse_program(role: Role, line: usize, words: &[&str]) -> Result<Program, ConfigError> {
    let Some((&name, rest)) = words.split_first() else {
        return err(line, "missing program name");
    };
    if name.contains('=') {
        return err(line, format!("expected a program name before {name:?}"));
    }
    let mut stream = None;
    let mut ranks = 1;
    let mut args = Vec::new();
    let mut seen = HashSet::new();
    for word in rest {
        let Some((key, value)) = word.split_once('=') else {
            return err(line, format!("expected key=value, got {word:?}"));
        };
        let repeatable = matches!(key, "param" | "selection");
        if !repeatable && !seen.insert(key) {
            return err(line, format!("{key} given twice"));
        }
        let bad = |why: String| ConfigError {
            line,
            message: format!("{key}: {why}"),
        };
        let flag = match (role, key) {
            (_, "stream") => {
                if value.is_empty() {
                    return Err(bad("empty stream name".into()));
                }
                stream = Some(value.to_string());
                continue;
            }
            (_, "ranks") => {
                match value.parse::<usize>() {
                    Ok(n) if n > 0 => ranks = n,
                    _ => return Err(bad(format!("{value:?} is not a positive integer"))),
                }
                continue;
            }
            (_, "seed") => {
                if value.parse::<u64>().is_err() {
                    return Err(bad(format!("{value:?} is not an integer")));
                }
                "--seed"
            }
            (_, "var") => "--var",
            (_, "param") => {
                if let Err(e) = EngineParams::default().set_pair(value) {
                    return Err(bad(e.to_string()));
                }
                "--param"
            }
            (Role::Writer, "steps") => {
                if value.parse::<u64>().is_err() {
                    return Err(bad(format!("{value:?} is not an integer")));
                }
                "--steps"
            }
            (Role::Writer, "shape") => {
                if let Err(e) = workload::parse_shape(value) {
                    return Err(bad(e.to_string()));
                }
                "--shape"
            }
            (Role::Writer, "decomposition") => {
                if let Err(e) = value.parse::<workload::Decomposition>() {
                    return Err(bad(e.to_string()));
                }
                "--decomposition"
            }
            (Role::Writer, "delay") => {
                parse_seconds(value).map_err(bad)?;
                "--step-delay"
            }
            (Role::Reader, "sleep") => {
                parse_seconds(value).map_err(bad)?;
                "--sleep"
            }
            (Role::Reader, "timeout") => {
                parse_seconds(value).map_err(bad)?;
                "--begin-step-timeout"
            }
            (Role::Reader, "selection") => {
                if let Err(e) = workload::parse_selection(value) {
                    return Err(bad(e.to_string()));
                }
                "--selection"
            }
            _ => {
                let who = if role == Role::Writer { "writer" } else { "reader" };
                return err(line, format!("unknown key {key:?} for a {who}"));
            }
        };
        args.push(flag.to_string());
        args.push(value.to_string());
    }
    let Some(stream) = stream else {
        return err(line, "missing stream=<name>");
    };
    args.splice(
        0..0,
        [
            "--stream".to_string(),
            stream.clone(),
            "--label".to_string(),
            name.to_string(),
        ],
    );
    Ok(Program {
        role,
        name: name.to_string(),
        stream,
        ranks,
        args,
        line,
    })
}

pub fn parse(text: &str) -> Result<Workflow, ConfigError> {
    let mut wf = Workflow {
        contact_dir: None,
        timeout: DEFAULT_TIMEOUT,
        programs: Vec::new(),
    };
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("");
        let words: Vec<&str> = content.split_whitespace().collect();
        let Some((&head, rest)) = words.split_first() else {
            continue;
        };
        match head {
            "contact-dir" => match rest {
                [p] => wf.contact_dir = Some(PathBuf::from(p)),
                _ => return err(line, "contact-dir takes one path"),
            },
            "timeout" => match rest {
                [s] => wf.timeout = parse_seconds(s).or_else(|e| err(line, e))?,
                _ => return err(line, "timeout takes one number of seconds"),
            },
            "writer" => wf.programs.push(parse_program(Role::Writer, line, rest)?),
            "reader" => wf.programs.push(parse_program(Role::Reader, line, rest)?),
            _ => return err(line, format!("unknown directive {head:?}")),
        }
    }
    let mut names = HashSet::new();
    let mut written = HashSet::new();
    for p in &wf.programs {
        if !names.insert(p.name.as_str()) {
            return err(p.line, format!("program name {:?} used twice", p.name));
        }
        if p.role == Role::Writer && !written.insert(p.stream.as_str()) {
            return err(p.line, format!("stream {:?} already has a writer", p.stream));
        }
    }
    for p in &wf.programs {
        if p.role == Role::Reader && !written.contains(p.stream.as_str()) {
            return err(p.line, format!("no writer produces stream {:?}", p.stream));
        }
    }
    if !wf.programs.iter().any(|p| p.role == Role::Writer) {
        return err(text.lines().count().max(1), "workflow has no writer");
    }
    Ok(wf)
}

struct Running {
    label: String,
    child: Child,
    status: Option<Exit>,
}

fn free_addr() -> std::io::Result<String> {
    let l = TcpListener::bind("127.0.0.1:0")?;
    Ok(l.local_addr()?.to_string())
}

fn spawn_all(wf: &Workflow, dir: &Path) -> std::io::Result<Vec<Running>> {
    let exe = std::env::current_exe()?;
    let mut out = Vec::new();
    for p in &wf.programs {
        let addr = free_addr()?;
        let sub = match p.role {
            Role::Writer => "write",
            Role::Reader => "read",
        };
        for rank in 0..p.ranks {
            let child = Command::new(&exe)
                .arg(sub)
                .args(&p.args)
                .arg("--contact-dir")
                .arg(dir)
                .env(ENV_RANK, rank.to_string())
                .env(ENV_COHORT_ADDR, &addr)
                .env(ENV_COHORT_SIZE, p.ranks.to_string())
                .spawn()?;
            out.push(Running {
                label: format!("{}.{rank}", p.name),
                child,
                status: None,
            });
        }
    }
    Ok(out)
}

fn exit_of(code: Option<i32>) -> Exit {
    match code {
        Some(0) => Exit::Ok,
        Some(2) => Exit::Usage,
        Some(4) => Exit::Verify,
        _ => Exit::Protocol,
    }
}

/// Waits for every process; kills stragglers past the deadline or past the
/// grace period after a failure.
fn supervise(procs: &mut [Running], timeout: Duration) {
    let deadline = Instant::now() + timeout;
    let mut failed_at: Option<Instant> = None;
    loop {
        for p in procs.iter_mut().filter(|p| p.status.is_none()) {
            match p.child.try_wait() {
                Ok(Some(st)) => {
                    let e = exit_of(st.code());
                    if e != Exit::Ok {
                        eprintln!("workflow: {} exited with {st}", p.label);
                        failed_at.get_or_insert_with(Instant::now);
                    }
                    p.status = Some(e);
                }
                Ok(None) => {}
                Err(e) => {
                    eprintln!("workflow: cannot wait for {}: {e}", p.label);
                    p.status = Some(Exit::Protocol);
                }
            }
        }
        if procs.iter().all(|p| p.status.is_some()) {
            return;
        }
        let now = Instant::now();
        if now >= deadline || failed_at.is_some_and(|t| now >= t + FAILURE_GRACE) {
            for p in procs.iter_mut().filter(|p| p.status.is_none()) {
                eprintln!("workflow: killing {}", p.label);
                let _ = p.child.kill();
                let _ = p.child.wait();
                p.status = Some(Exit::Protocol);
            }
            return;
        }
        thread::sleep(Duration::from_millis(20));
    }
}

pub fn run(path: &Path) -> Exit {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("stepstage run: {}: {e}", path.display());
            return Exit::Usage;
        }
    };
    let wf = match parse(&text) {
        Ok(wf) => wf,
        Err(e) => {
            eprintln!("stepstage run: {}: {e}", path.display());
            return Exit::Usage;
        }
    };
    let tmp;
    let dir = match &wf.contact_dir {
        Some(d) => d.clone(),
        None => match tempfile::tempdir() {
            Ok(t) => {
                tmp = t;
                tmp.path().to_path_buf()
            }
            Err(e) => {
                eprintln!("stepstage run: {e}");
                return Exit::Protocol;
            }
        },
    };
    let mut procs = match spawn_all(&wf, &dir) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("stepstage run: cannot start processes: {e}");
            return Exit::Protocol;
        }
    };
    supervise(&mut procs, wf.timeout);
    let exit = procs.iter().filter_map(|p| p.status).max().unwrap_or(Exit::Ok);
    let ok = procs.iter().filter(|p| p.status == Some(Exit::Ok)).count();
    println!("workflow: {ok} of {} processes succeeded", procs.len());
    exit
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_directives_into_flags() {
        let wf = parse(
            "# pipeline\n\
             timeout 30\n\
             writer sim stream=s ranks=2 steps=4 shape=8x8 param=QueueLimit=2\n\
             \n\
             reader ana stream=s sleep=0.01 selection=0:2,0:8  # subset\n",
        )
        .unwrap();
        assert_eq!(wf.timeout, Duration::from_secs(30));
        assert_eq!(wf.programs.len(), 2);
        let w = &wf.programs[0];
        assert_eq!((w.role, w.ranks, w.line), (Role::Writer, 2, 3));
        assert_eq!(
            w.args,
            [
                "--stream",
                "s",
                "--label",
                "sim",
                "--steps",
                "4",
                "--shape",
                "8x8",
                "--param",
                "QueueLimit=2"
            ]
        );
        assert_eq!(wf.programs[1].args[4..], ["--sleep", "0.01", "--selection", "0:2,0:8"]);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let cases = [
            ("writer w stream=s\nreader r stream=t\n", 2, "no writer"),
            ("writer w stream=s\nwriter w stream=t\n", 2, "used twice"),
            ("\n\nwriter w stream=s shape=4xx\n", 3, "shape"),
            ("writer w stream=s sleep=1\n", 1, "unknown key"),
            ("writer w\n", 1, "missing stream"),
            ("launch w\n", 1, "unknown directive"),
            ("writer w stream=s ranks=0\n", 1, "positive"),
            ("writer w stream=s param=Bogus=1\n", 1, "Bogus"),
            ("writer w stream=s steps=3 steps=4\n", 1, "twice"),
            ("reader r stream=s\n", 1, "no writer"),
            ("writer w stream=s\ntimeout\n", 2, "timeout"),
        ];
        for (text, line, needle) in cases {
            let e = parse(text).unwrap_err();
            assert_eq!(e.line, line, "{text:?}: {e}");
            assert!(e.to_string().contains(needle), "{text:?}: {e}");
        }
    }
}
