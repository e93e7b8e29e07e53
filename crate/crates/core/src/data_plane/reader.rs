use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::BufReader;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use super::{locate, ranges_len, LogEntry, Pattern, RequestLog};
use crate::error::{Error, Result};
use crate::model::{PreloadMode, ReaderId, StepId};
use crate::net::{connect, FrameSink};
use crate::wire::{DataMessage, Frame, ResponseStatus, StreamId};

/// How long a read waits for an announced push before asking for the
/// bytes directly.
const PUSH_WAIT_LIMIT: Duration = Duration::from_secs(20);

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ReaderPlaneStats {
    /// `ReadRequest` frames put on the wire.
    pub read_requests_sent: u64,
    pub bytes_requested: u64,
    /// Reads satisfied from pushed data.
    pub preload_local_hits: u64,
    /// Reads that expected pushed data but had to be requested.
    pub preload_fallbacks: u64,
    pub pushes_received: u64,
    pub resident_steps: u64,
    pub resident_bytes: u64,
    pub max_resident_steps: u64,
    pub max_resident_bytes: u64,
    pub buffer_releases_sent: u64,
    pub log_publishes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PreloadMatch {
    SatisfiedLocally,
    FallbackToRequest,
}

struct Pushed {
    tag: u32,
    data: Arc<Vec<u8>>,
}

#[derive(Default)]
struct State {
    completed: HashMap<u64, (ResponseStatus, Vec<u8>)>,
    broken: HashMap<u32, String>,
    pushed: BTreeMap<(StepId, u32), Pushed>,
    double_buffer: bool,
    stats: ReaderPlaneStats,
}

impl State {
    fn update_residency(&mut self) {
        let steps: BTreeSet<StepId> = self.pushed.keys().map(|k| k.0).collect();
        let bytes: u64 = self.pushed.values().map(|p| p.data.len() as u64).sum();
        let s = &mut self.stats;
        s.resident_steps = steps.len() as u64;
        s.resident_bytes = bytes;
        s.max_resident_steps = s.max_resident_steps.max(s.resident_steps);
        s.max_resident_bytes = s.max_resident_bytes.max(bytes);
    }
}

struct Shared {
    state: Mutex<State>,
    cv: Condvar,
}

struct Conn {
    writer: u32,
    sink: FrameSink,
    handle: Mutex<Option<JoinHandle<()>>>,
}

/// One reader rank's side of the data plane.
pub struct ReaderPlane {
    stream: StreamId,
    reader: ReaderId,
    rank: u32,
    mode: PreloadMode,
    writers: Vec<String>,
    conns: HashMap<u32, Arc<Conn>>,
    shared: Arc<Shared>,
    next_id: Arc<AtomicU64>,
    log: RequestLog,
    logging: Option<StepId>,
    learned: Option<Pattern>,
    preloaded: HashSet<StepId>,
}

enum HandleState {
    Done(Vec<u8>),
    Failed(Error),
    Remote {
        id: u64,
        shared: Arc<Shared>,
    },
    AwaitPush {
        pos: u64,
        expected_len: u64,
        shared: Arc<Shared>,
        conn: Arc<Conn>,
        ids: Arc<AtomicU64>,
    },
}

/// An outstanding read. Completes exactly once; waiting again returns the
/// same outcome without blocking.
pub struct ReadHandle {
    step: StepId,
    writer: u32,
    offset: u64,
    length: u64,
    state: HandleState,
}

impl ReadHandle {
    fn done(step: StepId, writer: u32, offset: u64, data: Vec<u8>) -> Self {
        ReadHandle {
            step,
            writer,
            offset,
            length: data.len() as u64,
            state: HandleState::Done(data),
        }
    }

    fn failed(step: StepId, writer: u32, offset: u64, length: u64, e: Error) -> Self {
        ReadHandle {
            step,
            writer,
            offset,
            length,
            state: HandleState::Failed(e),
        }
    }

    pub fn is_complete(&self) -> bool {
        matches!(self.state, HandleState::Done(_) | HandleState::Failed(_))
    }

    /// True when the read is (or will be) served from pushed data.
    pub fn is_preloaded(&self) -> bool {
        matches!(self.state, HandleState::AwaitPush { .. })
    }

    /// Blocks until the bytes have arrived.
    pub fn wait(&mut self) -> Result<&[u8]> {
        loop {
            let next = match &self.state {
                HandleState::Done(_) | HandleState::Failed(_) => break,
                HandleState::Remote { id, shared } => self.wait_remote(*id, shared),
                HandleState::AwaitPush {
                    pos,
                    expected_len,
                    shared,
                    conn,
                    ids,
                } => self.wait_push(*pos, *expected_len, shared, conn, ids),
            };
            self.state = next;
        }
        match &self.state {
            HandleState::Done(d) => Ok(d),
            HandleState::Failed(e) => Err(e.clone()),
            _ => unreachable!(),
        }
    }

    /// Waits and moves the bytes out.
    pub fn into_bytes(mut self) -> Result<Vec<u8>> {
        self.wait()?;
        match self.state {
            HandleState::Done(d) => Ok(d),
            _ => unreachable!(),
        }
    }

    fn wait_remote(&self, id: u64, shared: &Shared) -> HandleState {
        let mut st = shared.state.lock().unwrap();
        loop {
            if let Some((status, data)) = st.completed.remove(&id) {
                return match status {
                    ResponseStatus::Ok if data.len() as u64 == self.length => HandleState::Done(data),
                    ResponseStatus::Ok => HandleState::Failed(Error::Protocol(format!(
                        "response of {} bytes for {}",
                        data.len(),
                        self.length
                    ))),
                    ResponseStatus::StaleStep => HandleState::Failed(Error::StaleStep(self.step)),
                    ResponseStatus::OutOfRange => {
                        let size = data.get(..8).map_or(0, |b| u64::from_le_bytes(b.try_into().unwrap()));
                        HandleState::Failed(Error::OutOfRange {
                            offset: self.offset,
                            length: self.length,
                            size,
                        })
                    }
                    ResponseStatus::BadRequest => {
                        HandleState::Failed(Error::Protocol("request rejected by writer".into()))
                    }
                };
            }
            if let Some(why) = st.broken.get(&self.writer) {
                return HandleState::Failed(Error::ConnectionLost(why.clone()));
            }
            st = shared.cv.wait(st).unwrap();
        }
    }

    fn wait_push(
        &self,
        pos: u64,
        expected_len: u64,
        shared: &Arc<Shared>,
        conn: &Arc<Conn>,
        ids: &Arc<AtomicU64>,
    ) -> HandleState {
        let deadline = Instant::now() + PUSH_WAIT_LIMIT;
        let mut st = shared.state.lock().unwrap();
        loop {
            if let Some(p) = st.pushed.get(&(self.step, self.writer)) {
                if p.data.len() as u64 == expected_len {
                    let start = pos as usize;
                    let out = p.data[start..start + self.length as usize].to_vec();
                    st.stats.preload_local_hits += 1;
                    return HandleState::Done(out);
                }
                break;
            }
            if let Some(why) = st.broken.get(&self.writer) {
                return HandleState::Failed(Error::ConnectionLost(why.clone()));
            }
            let now = Instant::now();
            if now >= deadline {
                log::warn!(
                    "announced push of step {} from writer {} never arrived",
                    self.step,
                    self.writer
                );
                break;
            }
            st = shared.cv.wait_timeout(st, deadline - now).unwrap().0;
        }
        st.stats.preload_fallbacks += 1;
        drop(st);
        send_request(shared, conn, ids, self.step, self.offset, self.length)
    }
}

fn send_request(
    shared: &Arc<Shared>,
    conn: &Conn,
    ids: &AtomicU64,
    step: StepId,
    offset: u64,
    length: u64,
) -> HandleState {
    let id = ids.fetch_add(1, Ordering::Relaxed);
    let msg = DataMessage::ReadRequest {
        request_id: id,
        step,
        offset,
        length,
    };
    if let Err(e) = conn.sink.send(&msg.to_frame()) {
        return HandleState::Failed(Error::ConnectionLost(format!("writer rank {}: {e}", conn.writer)));
    }
    let mut st = shared.state.lock().unwrap();
    st.stats.read_requests_sent += 1;
    st.stats.bytes_requested += length;
    HandleState::Remote {
        id,
        shared: shared.clone(),
    }
}

impl ReaderPlane {
    /// `writers[i]` is writer rank `i`'s address token.
    pub fn new(stream: StreamId, reader: ReaderId, rank: u32, writers: Vec<String>, mode: PreloadMode) -> Self {
        ReaderPlane {
            stream,
            reader,
            rank,
            mode,
            writers,
            conns: HashMap::new(),
            shared: Arc::new(Shared {
                state: Mutex::new(State {
                    double_buffer: mode == PreloadMode::DoubleBuffer,
                    ..State::default()
                }),
                cv: Condvar::new(),
            }),
            next_id: Arc::new(AtomicU64::new(1)),
            log: RequestLog::new(),
            logging: None,
            learned: None,
            preloaded: HashSet::new(),
        }
    }

    pub fn mode(&self) -> PreloadMode {
        self.mode
    }

    pub fn writer_count(&self) -> usize {
        self.writers.len()
    }

    fn conn(&mut self, writer: u32) -> Result<Arc<Conn>> {
        if let Some(c) = self.conns.get(&writer) {
            return Ok(c.clone());
        }
        let addr = self
            .writers
            .get(writer as usize)
            .ok_or_else(|| Error::InvalidParam(format!("no writer rank {writer}")))?;
        let stream = connect(addr)?;
        let read_half = stream.try_clone()?;
        let sink = FrameSink::new(stream);
        let hello = DataMessage::Hello {
            stream: self.stream,
            reader: self.reader,
            reader_rank: self.rank,
        };
        sink.send(&hello.to_frame())
            .map_err(|e| Error::ConnectionLost(format!("writer rank {writer}: {e}")))?;
        let shared = self.shared.clone();
        let handle = thread::Builder::new()
            .name(format!("dp-read-{writer}"))
            .spawn(move || receive(shared, writer, read_half))?;
        let conn = Arc::new(Conn {
            writer,
            sink,
            handle: Mutex::new(Some(handle)),
        });
        self.conns.insert(writer, conn.clone());
        Ok(conn)
    }

    /// Classifies a read against pushed data expected for `step`.
    pub fn preload_match(&self, step: StepId, writer: u32, offset: u64, length: u64) -> PreloadMatch {
        self.locate_pushed(step, writer, offset, length)
            .map_or(PreloadMatch::FallbackToRequest, |_| PreloadMatch::SatisfiedLocally)
    }

    fn locate_pushed(&self, step: StepId, writer: u32, offset: u64, length: u64) -> Option<(u64, u64)> {
        if !self.preloaded.contains(&step) {
            return None;
        }
        let ranges = self.learned.as_ref()?.get(&writer)?;
        locate(ranges, offset, length).map(|pos| (pos, ranges_len(ranges)))
    }

    /// Starts an asynchronous read of `[offset, offset+length)` from writer
    /// rank `writer`'s block for `step`. Never blocks on the transfer.
    pub fn post_read(&mut self, step: StepId, writer: u32, offset: u64, length: u64, dest: u64) -> ReadHandle {
        if length == 0 {
            return ReadHandle::done(step, writer, offset, Vec::new());
        }
        let conn = match self.conn(writer) {
            Ok(c) => c,
            Err(e) => return ReadHandle::failed(step, writer, offset, length, e),
        };
        if let Some((pos, expected_len)) = self.locate_pushed(step, writer, offset, length) {
            return ReadHandle {
                step,
                writer,
                offset,
                length,
                state: HandleState::AwaitPush {
                    pos,
                    expected_len,
                    shared: self.shared.clone(),
                    conn,
                    ids: self.next_id.clone(),
                },
            };
        }
        if self.logging == Some(step) {
            self.log.record(step, writer, LogEntry { offset, length, dest });
        }
        let state = send_request(&self.shared, &conn, &self.next_id, step, offset, length);
        ReadHandle {
            step,
            writer,
            offset,
            length,
            state,
        }
    }

    /// Reads of `step` are recorded as the candidate pattern.
    pub fn begin_learning(&mut self, step: StepId) {
        self.log.clear();
        self.logging = Some(step);
    }

    pub fn cancel_learning(&mut self) {
        self.logging = None;
        self.log.clear();
    }

    pub fn is_learning(&self) -> bool {
        self.logging.is_some()
    }

    /// Fixes the pattern recorded for `step`. In double-buffer mode the log
    /// is published to each writer rank it touches and acknowledged before
    /// this returns.
    pub fn finish_learning(&mut self, step: StepId) -> Result<()> {
        self.logging = None;
        let pattern = self.log.pattern(step);
        if self.mode == PreloadMode::DoubleBuffer {
            let mut handles = Vec::new();
            for w in self.log.writers(step) {
                let entries: Vec<(u64, u64)> = self.log.entries(step, w).iter().map(|e| (e.offset, e.length)).collect();
                let conn = self.conn(w)?;
                let id = self.next_id.fetch_add(1, Ordering::Relaxed);
                let msg = DataMessage::RequestLogPublish {
                    request_id: id,
                    step,
                    entries,
                };
                conn.sink
                    .send(&msg.to_frame())
                    .map_err(|e| Error::ConnectionLost(format!("writer rank {w}: {e}")))?;
                self.shared.state.lock().unwrap().stats.log_publishes += 1;
                handles.push(ReadHandle {
                    step,
                    writer: w,
                    offset: 0,
                    length: 0,
                    state: HandleState::Remote {
                        id,
                        shared: self.shared.clone(),
                    },
                });
            }
            for mut h in handles {
                h.wait()?;
            }
        }
        self.log.retain_only(step);
        self.learned = Some(pattern);
        Ok(())
    }

    pub fn learned(&self) -> Option<&Pattern> {
        self.learned.as_ref()
    }

    pub fn request_log(&self) -> &RequestLog {
        &self.log
    }

    /// The writer announced that `step` is pushed to this reader.
    pub fn expect_preloaded(&mut self, step: StepId) {
        if self.learned.is_some() {
            self.preloaded.insert(step);
        }
    }

    /// Drops pushed data for `step` and anything older.
    pub fn step_done(&mut self, step: StepId) {
        self.preloaded.retain(|s| *s > step);
        let released: Vec<(StepId, u32, u32)> = {
            let mut st = self.shared.state.lock().unwrap();
            let keys: Vec<_> = st.pushed.range(..=(step, u32::MAX)).map(|(k, _)| *k).collect();
            let out = keys
                .into_iter()
                .map(|k| {
                    let p = st.pushed.remove(&k).unwrap();
                    (k.0, k.1, p.tag)
                })
                .collect();
            st.update_residency();
            out
        };
        if self.mode == PreloadMode::DoubleBuffer {
            for (s, w, slot) in released {
                if let Some(c) = self.conns.get(&w) {
                    let msg = DataMessage::BufferRelease { step: s, slot };
                    if c.sink.send(&msg.to_frame()).is_ok() {
                        self.shared.state.lock().unwrap().stats.buffer_releases_sent += 1;
                    }
                }
            }
        }
    }

    pub fn stats(&self) -> ReaderPlaneStats {
        self.shared.state.lock().unwrap().stats
    }

    pub fn shutdown(&mut self) {
        for (_, c) in self.conns.drain() {
            c.sink.shutdown();
            if let Some(h) = c.handle.lock().unwrap().take() {
                let _ = h.join();
            }
        }
    }
}

impl Drop for ReaderPlane {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn receive(shared: Arc<Shared>, writer: u32, stream: std::net::TcpStream) {
    let mut rd = BufReader::new(stream);
    let why = loop {
        let frame = match Frame::read_from(&mut rd) {
            Ok(Some(f)) => f,
            Ok(None) => break "connection closed by writer".to_string(),
            Err(e) => break e.to_string(),
        };
        match DataMessage::from_frame(&frame) {
            Ok(DataMessage::RequestResponse {
                request_id,
                status,
                data,
            }) => {
                shared
                    .state
                    .lock()
                    .unwrap()
                    .completed
                    .insert(request_id, (status, data));
            }
            Ok(DataMessage::PreloadData { step, pattern, data }) => {
                let mut st = shared.state.lock().unwrap();
                if st.double_buffer {
                    // a push into a slot overwrites what the slot held
                    st.pushed
                        .retain(|k, p| !(p.tag == pattern && k.0 != step && k.1 == writer));
                }
                st.pushed.insert(
                    (step, writer),
                    Pushed {
                        tag: pattern,
                        data: Arc::new(data),
                    },
                );
                st.stats.pushes_received += 1;
                st.update_residency();
            }
            Ok(other) => log::warn!("unexpected message from writer rank {writer}: {other:?}"),
            Err(e) => break format!("bad frame: {e}"),
        }
        shared.cv.notify_all();
    };
    shared.state.lock().unwrap().broken.insert(writer, why);
    shared.cv.notify_all();
}
