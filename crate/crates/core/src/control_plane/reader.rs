//! Reader side of a stream. Reader rank 0 holds the control connection; a
//! handler thread queues arriving step announcements so that the writer
//! never waits on the reader application.

use std::collections::VecDeque;
use std::io::BufReader;
use std::net::TcpStream;
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use super::contact::{resolve, ContactSource};
use crate::codec::{Decoder, Encoder};
use crate::cohort::Comm;
use crate::data_plane::{ReaderPlane, ReaderPlaneStats};
use crate::error::{Error, Result};
use crate::marshal::{decode_full_metadata, FullMetadata};
use crate::model::{EngineParams, PreloadMode, ReaderId, StepDistribution, StepId};
use crate::net::{connect, FrameSink};
use crate::wire::{ControlEnvelope, ControlMessage, Frame, StreamId, PROTOCOL_VERSION, SENDER_UNASSIGNED};

#[derive(Debug, Clone)]
pub struct ReaderOptions {
    pub stream_name: String,
    pub contact: ContactSource,
}

impl ReaderOptions {
    pub fn new(stream_name: impl Into<String>, contact: ContactSource) -> Self {
        ReaderOptions {
            stream_name: stream_name.into(),
            contact,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BeginStatus {
    Step(StepId),
    NotReady,
    EndOfStream,
}

/// The step a reader cohort currently has open.
#[derive(Debug, Clone)]
pub struct OpenStep {
    pub step: StepId,
    pub metadata: FullMetadata,
    pub definitions_locked: bool,
    pub preloaded: bool,
}

struct Announced {
    step: StepId,
    metadata: Vec<u8>,
    definitions_locked: bool,
    preloaded: bool,
}

#[derive(Default)]
struct CtlState {
    queue: VecDeque<Announced>,
    activated: bool,
    final_step: Option<Option<StepId>>,
    eos: bool,
    lost: Option<String>,
    closing: bool,
    replaced: u64,
}

struct Ctl {
    state: Mutex<CtlState>,
    cv: Condvar,
}

struct Root {
    sink: Arc<FrameSink>,
    ctl: Arc<Ctl>,
    request_outstanding: bool,
}

/// One reader rank's handle on a stream.
pub struct ReaderStream {
    comm: Comm,
    params: EngineParams,
    stream: StreamId,
    reader: ReaderId,
    distribution: StepDistribution,
    preload: PreloadMode,
    plane: ReaderPlane,
    root: Option<Root>,
    current: Option<OpenStep>,
    selections_locked: bool,
    learning_step: Option<StepId>,
    eos: bool,
    closed: bool,
}

/// Stream id, assigned reader id, distribution, preload mode, writer contacts.
type Handshake = (StreamId, ReaderId, StepDistribution, PreloadMode, Vec<Vec<u8>>);

fn encode_outcome(r: &Result<Handshake>) -> Vec<u8> {
    let mut e = Encoder::new();
    match r {
        Ok((stream, reader, dist, preload, contacts)) => {
            e.u8(0).raw(&stream.0).u32(reader.0).u8(dist.code()).u8(preload.code());
            e.u32(contacts.len() as u32);
            for c in contacts {
                e.bytes(c);
            }
        }
        Err(Error::OpenTimeout(s)) => {
            e.u8(1).u64(*s);
        }
        Err(err) => {
            e.u8(2).str(&err.to_string());
        }
    }
    e.finish()
}

fn decode_outcome(b: &[u8]) -> Result<Handshake> {
    let mut d = Decoder::new(b);
    match d.u8()? {
        0 => {
            let stream = StreamId(d.raw(16)?.try_into().unwrap());
            let reader = ReaderId(d.u32()?);
            let dist = StepDistribution::from_code(d.u8()?)?;
            let preload = PreloadMode::from_code(d.u8()?)?;
            let n = d.count(4)?;
            let contacts = (0..n).map(|_| d.bytes().map(<[u8]>::to_vec)).collect::<Result<_>>()?;
            d.finish()?;
            Ok((stream, reader, dist, preload, contacts))
        }
        1 => Err(Error::OpenTimeout(d.u64()?)),
        _ => Err(Error::ConnectionLost(format!("reader rank 0: {}", d.str()?))),
    }
}

impl ReaderStream {
    /// Collective. Finds the writer, joins the stream and waits until the
    /// writer has activated this reader.
    pub fn open(mut comm: Comm, params: EngineParams, opts: ReaderOptions) -> Result<Self> {
        let mut root = None;
        let payload = if comm.is_root() {
            let r = Self::join(&params, &opts);
            let enc = encode_outcome(&r.as_ref().map(|(_, info)| info.clone()).map_err(Clone::clone));
            if let Ok((r, _)) = r {
                root = Some(r);
            }
            Some(enc)
        } else {
            None
        };
        let bytes = comm.broadcast_from_root(payload)?;
        let (stream, reader, distribution, preload, contacts) = decode_outcome(&bytes)?;
        let writers = contacts
            .into_iter()
            .map(|c| String::from_utf8_lossy(&c).into_owned())
            .collect();
        let plane = ReaderPlane::new(stream, reader, comm.rank() as u32, writers, preload);
        Ok(ReaderStream {
            comm,
            params,
            stream,
            reader,
            distribution,
            preload,
            plane,
            root,
            current: None,
            selections_locked: false,
            learning_step: None,
            eos: false,
            closed: false,
        })
    }

    #[allow(clippy::type_complexity)]
    fn join(params: &EngineParams, opts: &ReaderOptions) -> Result<(Root, Handshake)> {
        let timeout = Duration::from_secs(params.open_timeout_secs);
        let deadline = Instant::now() + timeout;
        let contact = resolve(&opts.contact, &opts.stream_name, timeout)?;
        let stream = connect(&contact.address())?;
        stream.set_read_timeout(Some(
            deadline
                .saturating_duration_since(Instant::now())
                .max(Duration::from_millis(1)),
        ))?;
        let read_half = stream.try_clone()?;
        let sink = Arc::new(FrameSink::new(stream));
        let join = ControlEnvelope {
            stream: contact.stream,
            sender: SENDER_UNASSIGNED,
            message: ControlMessage::ReaderJoin {
                protocol_version: PROTOCOL_VERSION,
                reader_contacts: Vec::new(),
            },
        };
        sink.send(&join.to_frame())
            .map_err(|e| Error::ConnectionLost(format!("writer: {e}")))?;
        let mut rd = BufReader::new(read_half);
        let timed_out =
            |e: &std::io::Error| matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut);
        let frame = match Frame::read_from(&mut rd) {
            Ok(Some(f)) => f,
            Ok(None) => return Err(Error::ConnectionLost("writer refused the join".into())),
            Err(e) if timed_out(&e) => return Err(Error::OpenTimeout(params.open_timeout_secs)),
            Err(e) => return Err(Error::ConnectionLost(e.to_string())),
        };
        let hs = ControlEnvelope::from_frame(&frame)?;
        let ControlMessage::WriterHandshake {
            protocol_version,
            reader,
            distribution,
            preload,
            writer_contacts,
        } = hs.message
        else {
            return Err(Error::Protocol(format!("expected handshake, got {:?}", hs.message)));
        };
        if protocol_version != PROTOCOL_VERSION || hs.stream != contact.stream {
            return Err(Error::Protocol("handshake mismatch".into()));
        }
        if distribution != params.step_distribution_mode && params.step_distribution_mode != StepDistribution::AllToAll
        {
            log::warn!(
                "writer distributes steps {distribution:?}; reader asked for {:?}",
                params.step_distribution_mode
            );
        }
        rd.get_ref().set_read_timeout(None)?;

        let ctl = Arc::new(Ctl {
            state: Mutex::new(CtlState::default()),
            cv: Condvar::new(),
        });
        {
            let ctl = ctl.clone();
            let sink = sink.clone();
            let latest = params.always_provide_latest;
            let sid = contact.stream;
            thread::Builder::new()
                .name("ctl-reader".into())
                .spawn(move || handle_control(ctl, sink, rd, sid, reader, latest))?;
        }
        let mut st = ctl.state.lock().unwrap();
        while !st.activated && st.lost.is_none() && !st.eos {
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                drop(st);
                sink.shutdown();
                return Err(Error::OpenTimeout(params.open_timeout_secs));
            }
            st = ctl.cv.wait_timeout(st, left).unwrap().0;
        }
        if let Some(e) = st.lost.clone() {
            return Err(Error::ConnectionLost(e));
        }
        drop(st);
        Ok((
            Root {
                sink,
                ctl,
                request_outstanding: false,
            },
            (contact.stream, reader, distribution, preload, writer_contacts),
        ))
    }

    pub fn rank(&self) -> usize {
        self.comm.rank()
    }

    pub fn reader_id(&self) -> ReaderId {
        self.reader
    }

    pub fn stream_id(&self) -> StreamId {
        self.stream
    }

    pub fn distribution(&self) -> StepDistribution {
        self.distribution
    }

    pub fn preload_mode(&self) -> PreloadMode {
        self.preload
    }

    pub fn params(&self) -> &EngineParams {
        &self.params
    }

    pub fn current(&self) -> Option<&OpenStep> {
        self.current.as_ref()
    }

    pub fn plane(&mut self) -> &mut ReaderPlane {
        &mut self.plane
    }

    pub fn plane_stats(&self) -> ReaderPlaneStats {
        self.plane.stats()
    }

    /// Rank 0 only: announcements dropped in favor of newer ones.
    pub fn replaced_steps(&self) -> u64 {
        self.root.as_ref().map_or(0, |r| r.ctl.state.lock().unwrap().replaced)
    }

    /// From the next step on, reads are expected to repeat; enables
    /// preload learning when the writer runs with a preload mode.
    pub fn lock_selections(&mut self) {
        self.selections_locked = true;
    }

    pub fn selections_locked(&self) -> bool {
        self.selections_locked
    }

    pub fn learning_step(&self) -> Option<StepId> {
        self.learning_step
    }

    /// Collective. `None` waits indefinitely; rank 0 alone decides expiry.
    pub fn begin_step(&mut self, timeout: Option<Duration>) -> Result<BeginStatus> {
        if self.closed {
            return Err(Error::StreamClosed);
        }
        if self.current.is_some() {
            return Err(Error::InvalidState("begin_step while a step is open"));
        }
        if self.eos {
            return Ok(BeginStatus::EndOfStream);
        }
        let payload = self.root.as_mut().map(|r| {
            let mut e = Encoder::new();
            match Self::await_step(r, self.stream, self.reader, self.distribution, timeout) {
                Ok(Some(a)) => {
                    let flags = u8::from(a.definitions_locked) | (u8::from(a.preloaded) << 1);
                    e.u8(0).u64(a.step.0).u8(flags).bytes(&a.metadata);
                }
                Ok(None) => {
                    e.u8(1);
                }
                Err(Error::StreamClosed) => {
                    e.u8(2);
                }
                Err(err) => {
                    e.u8(3).str(&err.to_string());
                }
            }
            e.finish()
        });
        let bytes = self.comm.broadcast_from_root(payload)?;
        let mut d = Decoder::new(&bytes);
        match d.u8()? {
            0 => {
                let step = StepId(d.u64()?);
                let flags = d.u8()?;
                let metadata = decode_full_metadata(d.bytes()?)?;
                let open = OpenStep {
                    step,
                    metadata,
                    definitions_locked: flags & 1 != 0,
                    preloaded: flags & 2 != 0,
                };
                if self.preload != PreloadMode::Off
                    && self.selections_locked
                    && open.definitions_locked
                    && self.learning_step.is_none()
                    && self.plane.learned().is_none()
                {
                    self.learning_step = Some(step);
                    self.plane.begin_learning(step);
                }
                if open.preloaded {
                    self.plane.expect_preloaded(step);
                }
                self.current = Some(open);
                Ok(BeginStatus::Step(step))
            }
            1 => Ok(BeginStatus::NotReady),
            2 => {
                self.eos = true;
                Ok(BeginStatus::EndOfStream)
            }
            _ => Err(Error::ConnectionLost(d.str()?.to_string())),
        }
    }

    /// Rank 0: next announced step, `None` on timeout, `StreamClosed` at
    /// end of stream.
    fn await_step(
        r: &mut Root,
        stream: StreamId,
        reader: ReaderId,
        distribution: StepDistribution,
        timeout: Option<Duration>,
    ) -> Result<Option<Announced>> {
        let deadline = timeout.map(|t| Instant::now() + t);
        let mut st = r.ctl.state.lock().unwrap();
        if distribution == StepDistribution::OnDemand && !r.request_outstanding && st.queue.is_empty() && !st.eos {
            let env = ControlEnvelope {
                stream,
                sender: reader.0,
                message: ControlMessage::RequestStep { reader },
            };
            drop(st);
            send_ctl(&r.sink, env, &r.ctl)?;
            r.request_outstanding = true;
            st = r.ctl.state.lock().unwrap();
        }
        loop {
            if let Some(a) = st.queue.pop_front() {
                r.request_outstanding = false;
                return Ok(Some(a));
            }
            if st.eos {
                return Err(Error::StreamClosed);
            }
            if let Some(e) = &st.lost {
                return Err(Error::ConnectionLost(e.clone()));
            }
            match deadline {
                None => st = r.ctl.cv.wait(st).unwrap(),
                Some(dl) => {
                    let left = dl.saturating_duration_since(Instant::now());
                    if left.is_zero() {
                        return Ok(None);
                    }
                    st = r.ctl.cv.wait_timeout(st, left).unwrap().0;
                }
            }
        }
    }

    /// Collective. Frees pushed data, finishes pattern learning on the
    /// learning step, and lets rank 0 release the step to the writer.
    pub fn end_step(&mut self) -> Result<()> {
        if self.closed {
            return Err(Error::StreamClosed);
        }
        let Some(open) = self.current.take() else {
            return Err(Error::InvalidState("end_step without an open step"));
        };
        let step = open.step;
        let mut local = Ok(());
        let learning = self.learning_step == Some(step) && self.plane.is_learning();
        if learning {
            local = self.plane.finish_learning(step);
        }
        self.plane.step_done(step);
        let status = match &local {
            Ok(()) => Vec::new(),
            Err(e) => e.to_string().into_bytes(),
        };
        let all = self.comm.gather_to_root(status)?;
        let mut outcome = Ok(());
        if let (Some(r), Some(all)) = (self.root.as_ref(), all) {
            let failed: Vec<String> = all
                .iter()
                .filter(|s| !s.is_empty())
                .map(|s| String::from_utf8_lossy(s).into_owned())
                .collect();
            if !failed.is_empty() {
                log::warn!("pattern learning failed: {}", failed.join("; "));
            }
            let env = ControlEnvelope {
                stream: self.stream,
                sender: self.reader.0,
                message: ControlMessage::ReleaseStep {
                    step,
                    reader: self.reader,
                    selections_locked: learning && failed.is_empty(),
                },
            };
            outcome = send_ctl(&r.sink, env, &r.ctl);
        }
        let verdict = self
            .comm
            .broadcast_from_root(self.root.as_ref().map(|_| match &outcome {
                Ok(()) => Vec::new(),
                Err(e) => e.to_string().into_bytes(),
            }))?;
        local?;
        if !verdict.is_empty() {
            return Err(Error::ConnectionLost(String::from_utf8_lossy(&verdict).into_owned()));
        }
        Ok(())
    }

    /// Collective. Ends an open step, then tells the writer this reader
    /// is gone.
    pub fn close(&mut self) -> Result<()> {
        if self.closed {
            return Err(Error::StreamClosed);
        }
        let mut res = Ok(());
        if self.current.is_some() {
            res = self.end_step();
        }
        self.closed = true;
        self.comm.barrier()?;
        if let Some(r) = self.root.as_ref() {
            r.ctl.state.lock().unwrap().closing = true;
            let env = ControlEnvelope {
                stream: self.stream,
                sender: self.reader.0,
                message: ControlMessage::ReaderClose { reader: self.reader },
            };
            if !r.ctl.state.lock().unwrap().eos {
                let _ = send_ctl(&r.sink, env, &r.ctl);
            }
            r.sink.shutdown_write();
        }
        self.plane.shutdown();
        res
    }
}

impl Drop for ReaderStream {
    fn drop(&mut self) {
        if !self.closed {
            if let Some(r) = self.root.as_ref() {
                r.ctl.state.lock().unwrap().closing = true;
                r.sink.shutdown();
            }
            self.plane.shutdown();
        }
    }
}

fn send_ctl(sink: &FrameSink, env: ControlEnvelope, ctl: &Ctl) -> Result<()> {
    sink.send(&env.to_frame()).map_err(|e| {
        let msg = format!("control connection: {e}");
        ctl.state.lock().unwrap().lost.get_or_insert(msg.clone());
        Error::ConnectionLost(msg)
    })
}

fn handle_control(
    ctl: Arc<Ctl>,
    sink: Arc<FrameSink>,
    mut rd: BufReader<TcpStream>,
    stream: StreamId,
    reader: ReaderId,
    latest_only: bool,
) {
    loop {
        let frame = match Frame::read_from(&mut rd) {
            Ok(Some(f)) => f,
            Ok(None) => break,
            Err(e) => {
                log::debug!("control connection: {e}");
                break;
            }
        };
        let env = match ControlEnvelope::from_frame(&frame) {
            Ok(env) if env.stream == stream => env,
            Ok(env) => {
                log::warn!("control message for foreign stream {:?}", env.stream);
                continue;
            }
            Err(e) => {
                log::warn!("bad control frame: {e}");
                break;
            }
        };
        let mut st = ctl.state.lock().unwrap();
        match env.message {
            ControlMessage::ReaderActivate => st.activated = true,
            ControlMessage::ProvideMetadata {
                step,
                metadata,
                definitions_locked,
                preloaded,
            } => {
                if latest_only {
                    for old in st.queue.drain(..).collect::<Vec<_>>() {
                        st.replaced += 1;
                        let rel = ControlEnvelope {
                            stream,
                            sender: reader.0,
                            message: ControlMessage::ReleaseStep {
                                step: old.step,
                                reader,
                                selections_locked: false,
                            },
                        };
                        if let Err(e) = sink.send(&rel.to_frame()) {
                            log::debug!("release of replaced step {} failed: {e}", old.step);
                        }
                    }
                }
                st.queue.push_back(Announced {
                    step,
                    metadata,
                    definitions_locked,
                    preloaded,
                });
            }
            ControlMessage::WriterClose { final_step } => st.final_step = Some(final_step),
            ControlMessage::EndOfStream => st.eos = true,
            other => log::warn!("unexpected control message {other:?}"),
        }
        drop(st);
        ctl.cv.notify_all();
    }
    let mut st = ctl.state.lock().unwrap();
    if !st.eos && !st.closing {
        st.lost.get_or_insert_with(|| "writer connection closed".into());
    }
    drop(st);
    ctl.cv.notify_all();
}
