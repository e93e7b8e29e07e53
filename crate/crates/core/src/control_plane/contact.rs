//! Publishing and finding a writer's contact record.

use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::wire::ContactRecord;

pub const CONTACT_SUFFIX: &str = "sstg";
const POLL_INTERVAL: Duration = Duration::from_millis(25);

/// Where a writer announces itself.
#[derive(Debug, Clone)]
pub enum ContactSink {
    /// Kept in memory only; hand it to readers with [`ContactSource::Record`].
    Memory,
    /// `<dir>/<stream>.sstg`, removed again on close.
    Dir(PathBuf),
    /// Printed on standard output.
    Screen,
}

/// Where a reader looks for the writer.
#[derive(Debug, Clone)]
pub enum ContactSource {
    Record(ContactRecord),
    Text(String),
    /// Polls for `<dir>/<stream>.sstg` until the open timeout.
    Dir(PathBuf),
    /// One line from standard input.
    Stdin,
}

pub fn contact_file(dir: &Path, stream_name: &str) -> PathBuf {
    dir.join(format!("{stream_name}.{CONTACT_SUFFIX}"))
}

/// Returns the file written, if any.
pub fn publish(record: &ContactRecord, sink: &ContactSink, stream_name: &str) -> Result<Option<PathBuf>> {
    match sink {
        ContactSink::Memory => Ok(None),
        ContactSink::Screen => {
            let mut out = std::io::stdout().lock();
            writeln!(out, "{}", record.to_text())?;
            out.flush()?;
            Ok(None)
        }
        ContactSink::Dir(dir) => {
            fs::create_dir_all(dir)?;
            let path = contact_file(dir, stream_name);
            let tmp = dir.join(format!(".{stream_name}.{CONTACT_SUFFIX}.{}", std::process::id()));
            fs::write(&tmp, format!("{}\n", record.to_text()))?;
            fs::rename(&tmp, &path)?;
            Ok(Some(path))
        }
    }
}

pub fn resolve(source: &ContactSource, stream_name: &str, timeout: Duration) -> Result<ContactRecord> {
    match source {
        ContactSource::Record(r) => Ok(r.clone()),
        ContactSource::Text(t) => ContactRecord::from_text(t),
        ContactSource::Stdin => {
            let mut line = String::new();
            std::io::stdin().lock().read_line(&mut line)?;
            ContactRecord::from_text(&line)
        }
        ContactSource::Dir(dir) => {
            let path = contact_file(dir, stream_name);
            let deadline = Instant::now() + timeout;
            loop {
                match fs::read_to_string(&path) {
                    Ok(s) if !s.trim().is_empty() => return ContactRecord::from_text(&s),
                    _ if Instant::now() >= deadline => return Err(Error::OpenTimeout(timeout.as_secs())),
                    _ => thread::sleep(POLL_INTERVAL),
                }
            }
        }
    }
}
