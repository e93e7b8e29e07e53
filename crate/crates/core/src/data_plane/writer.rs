use std::collections::{BTreeMap, HashMap, HashSet};
use std::net::TcpStream;
use std::sync::{Arc, Mutex};
use std::thread;

use super::{normalize_ranges, Pattern};
use crate::error::Result;
use crate::model::{PreloadMode, ReaderId, StepId};
use crate::net::{Acceptor, FrameSink};
use crate::wire::{DataMessage, Frame, ResponseStatus, StreamId};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WriterPlaneStats {
    pub read_requests: u64,
    pub stale_responses: u64,
    pub preload_pushes: u64,
    pub preload_bytes: u64,
    pub log_publishes: u64,
    pub buffer_releases: u64,
}

/// Recorded (offset, length) reads per pattern index.
type ReadLog = BTreeMap<u32, Vec<(u64, u64)>>;

#[derive(Default)]
struct State {
    steps: HashMap<StepId, Arc<Vec<u8>>>,
    recording: HashSet<StepId>,
    recorded: HashMap<(StepId, ReaderId), ReadLog>,
    published: HashMap<(ReaderId, StepId), ReadLog>,
    conns: HashMap<(ReaderId, u32), Arc<FrameSink>>,
    all_conns: Vec<Arc<FrameSink>>,
    patterns: HashMap<ReaderId, Pattern>,
    stats: WriterPlaneStats,
}

struct Shared {
    stream: StreamId,
    state: Mutex<State>,
}

/// One writer rank's side of the data plane. Read requests are served on
/// background threads, concurrently with the application.
pub struct WriterPlane {
    rank: u32,
    shared: Arc<Shared>,
    acceptor: Acceptor,
}

impl WriterPlane {
    pub fn bind(stream: StreamId, rank: u32, host: &str) -> Result<Self> {
        let shared = Arc::new(Shared {
            stream,
            state: Mutex::new(State::default()),
        });
        let sh = shared.clone();
        let acceptor = Acceptor::spawn(host, &format!("dp-accept-{rank}"), move |s| {
            let sh = sh.clone();
            let _ = thread::Builder::new()
                .name("dp-serve".into())
                .spawn(move || serve(sh, s));
        })?;
        Ok(WriterPlane { rank, shared, acceptor })
    }

    pub fn rank(&self) -> u32 {
        self.rank
    }

    /// Address token readers use to reach this rank.
    pub fn contact(&self) -> Vec<u8> {
        self.acceptor.addr().to_string().into_bytes()
    }

    /// Makes `data` readable as `step`. With `record`, the requests served
    /// for this step are remembered for queued-preload learning.
    pub fn register(&self, step: StepId, data: Arc<Vec<u8>>, record: bool) {
        let mut st = self.shared.state.lock().unwrap();
        st.steps.insert(step, data);
        if record {
            st.recording.insert(step);
        }
    }

    /// Starts remembering the requests served for `step`.
    pub fn record_requests(&self, step: StepId) {
        self.shared.state.lock().unwrap().recording.insert(step);
    }

    pub fn unregister(&self, step: StepId) {
        let mut st = self.shared.state.lock().unwrap();
        st.steps.remove(&step);
        st.recording.remove(&step);
        st.recorded.retain(|(s, _), _| *s != step);
    }

    pub fn is_registered(&self, step: StepId) -> bool {
        self.shared.state.lock().unwrap().steps.contains_key(&step)
    }

    pub fn registered_steps(&self) -> Vec<StepId> {
        let mut v: Vec<_> = self.shared.state.lock().unwrap().steps.keys().copied().collect();
        v.sort();
        v
    }

    /// Fixes `reader`'s pattern from its activity on `step`: the requests
    /// this rank served (queued mode) or the log it published (double
    /// buffer mode).
    pub fn learn(&self, reader: ReaderId, step: StepId, mode: PreloadMode) {
        let mut st = self.shared.state.lock().unwrap();
        let raw = match mode {
            PreloadMode::Queued => st.recorded.get(&(step, reader)).cloned(),
            PreloadMode::DoubleBuffer => st.published.get(&(reader, step)).cloned(),
            PreloadMode::Off => None,
        }
        .unwrap_or_default();
        let pattern: Pattern = raw
            .into_iter()
            .map(|(r, v)| (r, normalize_ranges(v)))
            .filter(|(_, v)| !v.is_empty())
            .collect();
        st.published.retain(|(r, _), _| *r != reader);
        st.patterns.insert(reader, pattern);
    }

    pub fn pattern(&self, reader: ReaderId) -> Option<Pattern> {
        self.shared.state.lock().unwrap().patterns.get(&reader).cloned()
    }

    pub fn forget(&self, reader: ReaderId) {
        let mut st = self.shared.state.lock().unwrap();
        st.patterns.remove(&reader);
        st.published.retain(|(r, _), _| *r != reader);
        st.conns.retain(|(r, _), _| *r != reader);
    }

    /// Pushes this rank's part of `step` to every rank of `reader` in its
    /// learned pattern. Returns the number of pushes sent.
    pub fn push(&self, step: StepId, reader: ReaderId, tag: u32) -> usize {
        let (data, targets) = {
            let st = self.shared.state.lock().unwrap();
            let Some(pattern) = st.patterns.get(&reader) else {
                return 0;
            };
            let data = st.steps.get(&step).cloned();
            let targets: Vec<_> = pattern
                .iter()
                .filter_map(|(rr, ranges)| st.conns.get(&(reader, *rr)).map(|c| (c.clone(), ranges.clone())))
                .collect();
            (data, targets)
        };
        let Some(data) = data else {
            log::warn!("push of unregistered step {step}");
            return 0;
        };
        let mut sent = 0;
        let mut bytes = 0;
        for (conn, ranges) in targets {
            let mut body = Vec::new();
            if ranges.iter().all(|&(o, l)| o + l <= data.len() as u64) {
                for &(o, l) in &ranges {
                    body.extend_from_slice(&data[o as usize..(o + l) as usize]);
                }
            }
            // an empty body tells the reader to fall back to requests
            bytes += body.len() as u64;
            let msg = DataMessage::PreloadData {
                step,
                pattern: tag,
                data: body,
            };
            match conn.send(&msg.to_frame()) {
                Ok(()) => sent += 1,
                Err(e) => log::debug!("preload push to reader {} failed: {e}", reader.0),
            }
        }
        let mut st = self.shared.state.lock().unwrap();
        st.stats.preload_pushes += sent as u64;
        st.stats.preload_bytes += bytes;
        sent
    }

    pub fn stats(&self) -> WriterPlaneStats {
        self.shared.state.lock().unwrap().stats
    }

    pub fn shutdown(&mut self) {
        self.acceptor.shutdown();
        let conns = std::mem::take(&mut self.shared.state.lock().unwrap().all_conns);
        for c in conns {
            c.shutdown();
        }
    }
}

impl Drop for WriterPlane {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn serve(shared: Arc<Shared>, stream: TcpStream) {
    let Ok(read_half) = stream.try_clone() else {
        return;
    };
    let sink = Arc::new(FrameSink::new(stream));
    shared.state.lock().unwrap().all_conns.push(sink.clone());
    let mut rd = std::io::BufReader::new(read_half);
    let mut peer: Option<(ReaderId, u32)> = None;
    loop {
        let frame = match Frame::read_from(&mut rd) {
            Ok(Some(f)) => f,
            Ok(None) => break,
            Err(e) => {
                log::debug!("data connection ended: {e}");
                break;
            }
        };
        let msg = match DataMessage::from_frame(&frame) {
            Ok(m) => m,
            Err(e) => {
                log::warn!("bad data frame: {e}");
                break;
            }
        };
        let reply = match msg {
            DataMessage::Hello {
                stream,
                reader,
                reader_rank,
            } => {
                if stream != shared.stream {
                    log::warn!("data hello for foreign stream {stream:?}");
                    break;
                }
                peer = Some((reader, reader_rank));
                shared
                    .state
                    .lock()
                    .unwrap()
                    .conns
                    .insert((reader, reader_rank), sink.clone());
                None
            }
            DataMessage::ReadRequest {
                request_id,
                step,
                offset,
                length,
            } => Some(answer_read(&shared, peer, request_id, step, offset, length)),
            DataMessage::RequestLogPublish {
                request_id,
                step,
                entries,
            } => {
                let mut st = shared.state.lock().unwrap();
                st.stats.log_publishes += 1;
                if let Some((reader, rr)) = peer {
                    st.published.entry((reader, step)).or_default().insert(rr, entries);
                }
                Some(DataMessage::RequestResponse {
                    request_id,
                    status: ResponseStatus::Ok,
                    data: Vec::new(),
                })
            }
            DataMessage::BufferRelease { .. } => {
                shared.state.lock().unwrap().stats.buffer_releases += 1;
                None
            }
            other => {
                log::warn!("unexpected message on writer data connection: {other:?}");
                None
            }
        };
        if let Some(r) = reply {
            if sink.send(&r.to_frame()).is_err() {
                break;
            }
        }
    }
    if let Some(key) = peer {
        let mut st = shared.state.lock().unwrap();
        if st.conns.get(&key).is_some_and(|c| Arc::ptr_eq(c, &sink)) {
            st.conns.remove(&key);
        }
    }
}

fn answer_read(
    shared: &Shared,
    peer: Option<(ReaderId, u32)>,
    request_id: u64,
    step: StepId,
    offset: u64,
    length: u64,
) -> DataMessage {
    let mut st = shared.state.lock().unwrap();
    st.stats.read_requests += 1;
    let Some(data) = st.steps.get(&step).cloned() else {
        st.stats.stale_responses += 1;
        return DataMessage::RequestResponse {
            request_id,
            status: ResponseStatus::StaleStep,
            data: Vec::new(),
        };
    };
    let size = data.len() as u64;
    if offset.checked_add(length).is_none_or(|end| end > size) {
        return DataMessage::RequestResponse {
            request_id,
            status: ResponseStatus::OutOfRange,
            data: size.to_le_bytes().to_vec(),
        };
    }
    if st.recording.contains(&step) {
        if let Some((reader, rr)) = peer {
            st.recorded
                .entry((step, reader))
                .or_default()
                .entry(rr)
                .or_default()
                .push((offset, length));
        }
    }
    drop(st);
    DataMessage::RequestResponse {
        request_id,
        status: ResponseStatus::Ok,
        data: data[offset as usize..(offset + length) as usize].to_vec(),
    }
}
