//! Writer side of a stream. Rank 0 owns the control listener, the inbox
//! filled by its connection threads, and the [`WriterProtocol`]. Messages
//! are acted on only inside collective calls: rank 0 drains the inbox,
//! decides, and broadcasts one [`Decision`] that every rank applies.

use std::collections::{HashMap, VecDeque};
use std::io::BufReader;
use std::net::TcpStream;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;

use super::contact::{publish, ContactSink};
use super::protocol::{Delivery, Outgoing, ProtocolConfig, StepOutcome, WriterEvent, WriterProtocol};
use crate::codec::{len_u32, Decoder, Encoder};
use crate::cohort::Comm;
use crate::data_plane::{WriterPlane, WriterPlaneStats};
use crate::error::{Error, Result};
use crate::marshal::{
    aggregate_metadata, decode_local_metadata, encode_full_metadata, encode_local_metadata, LocalMetadata,
};
use crate::model::{EngineParams, PreloadMode, QueueFullPolicy, ReaderId, StepId};
use crate::net::{Acceptor, FrameSink};
use crate::wire::{ContactRecord, ControlEnvelope, ControlMessage, Frame, StreamId, PROTOCOL_VERSION, SENDER_WRITER};

#[derive(Debug, Clone)]
pub struct WriterOptions {
    pub stream_name: String,
    /// Interface the listeners bind to and the host readers are told.
    pub host: String,
    pub contact: ContactSink,
}

impl WriterOptions {
    pub fn new(stream_name: impl Into<String>, contact: ContactSink) -> Self {
        WriterOptions {
            stream_name: stream_name.into(),
            host: "127.0.0.1".into(),
            contact,
        }
    }
}

enum Inbound {
    Joined(ReaderId),
    Message(ReaderId, ControlMessage),
    Disconnected(ReaderId),
}

#[derive(Default)]
struct Inbox {
    q: Mutex<VecDeque<Inbound>>,
    cv: Condvar,
}

impl Inbox {
    fn push(&self, m: Inbound) {
        self.q.lock().unwrap().push_back(m);
        self.cv.notify_all();
    }
}

struct AcceptCtx {
    stream: StreamId,
    inbox: Arc<Inbox>,
    conns: Arc<Mutex<HashMap<ReaderId, Arc<FrameSink>>>>,
    next_id: AtomicU32,
    handshake: (PreloadMode, crate::model::StepDistribution, Vec<Vec<u8>>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Verdict {
    Continue,
    Accept,
    Discard,
    Done,
    Fail(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Decision {
    verdict: Verdict,
    activations: Vec<(ReaderId, StepId)>,
    pushes: Vec<Delivery>,
    freed: Vec<StepId>,
    forgotten: Vec<ReaderId>,
}

impl Decision {
    fn encode(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        match &self.verdict {
            Verdict::Continue => e.u8(0),
            Verdict::Accept => e.u8(1),
            Verdict::Discard => e.u8(2),
            Verdict::Done => e.u8(3),
            Verdict::Fail(m) => e.u8(4).str(m),
        };
        e.u32(len_u32(self.activations.len()));
        for (r, s) in &self.activations {
            e.u32(r.0).u64(s.0);
        }
        e.u32(len_u32(self.pushes.len()));
        for d in &self.pushes {
            e.u64(d.step.0).u32(d.reader.0).u32(d.preload.unwrap_or(0));
        }
        e.u32(len_u32(self.freed.len()));
        for s in &self.freed {
            e.u64(s.0);
        }
        e.u32(len_u32(self.forgotten.len()));
        for r in &self.forgotten {
            e.u32(r.0);
        }
        e.finish()
    }

    fn decode(b: &[u8]) -> Result<Self> {
        let mut d = Decoder::new(b);
        let verdict = match d.u8()? {
            0 => Verdict::Continue,
            1 => Verdict::Accept,
            2 => Verdict::Discard,
            3 => Verdict::Done,
            4 => Verdict::Fail(d.str()?.to_string()),
            v => return Err(Error::Decode(format!("verdict {v}"))),
        };
        let n = d.count(12)?;
        let activations = (0..n)
            .map(|_| Ok((ReaderId(d.u32()?), StepId(d.u64()?))))
            .collect::<Result<_>>()?;
        let n = d.count(16)?;
        let pushes = (0..n)
            .map(|_| {
                Ok(Delivery {
                    step: StepId(d.u64()?),
                    reader: ReaderId(d.u32()?),
                    preload: Some(d.u32()?),
                })
            })
            .collect::<Result<_>>()?;
        let n = d.count(8)?;
        let freed = (0..n).map(|_| Ok(StepId(d.u64()?))).collect::<Result<_>>()?;
        let n = d.count(4)?;
        let forgotten = (0..n).map(|_| Ok(ReaderId(d.u32()?))).collect::<Result<_>>()?;
        d.finish()?;
        Ok(Decision {
            verdict,
            activations,
            pushes,
            freed,
            forgotten,
        })
    }
}

struct Root {
    protocol: WriterProtocol,
    inbox: Arc<Inbox>,
    acceptor: Acceptor,
    conns: Arc<Mutex<HashMap<ReaderId, Arc<FrameSink>>>>,
    contact: ContactRecord,
    contact_file: Option<PathBuf>,
    pending: Vec<Outgoing>,
    reader_waits: u64,
}

impl Root {
    /// Feeds queued reader events to the protocol. With `wait`, blocks
    /// until at least one is available.
    fn pump(&mut self, wait: bool, during_step: Option<StepId>) {
        let items: Vec<Inbound> = {
            let mut q = self.inbox.q.lock().unwrap();
            if wait && q.is_empty() {
                if let Some(s) = during_step {
                    self.reader_waits += 1;
                    self.protocol.log(WriterEvent::AwaitedReaderMessage(s));
                }
                while q.is_empty() {
                    q = self.inbox.cv.wait(q).unwrap();
                }
            }
            q.drain(..).collect()
        };
        for item in items {
            match item {
                Inbound::Joined(id) => self.protocol.on_join(id),
                Inbound::Message(id, m) => self.protocol.on_message(id, m),
                Inbound::Disconnected(id) => {
                    self.protocol.on_disconnect(id);
                    self.conns.lock().unwrap().remove(&id);
                }
            }
        }
    }

    fn send_pending(&mut self, stream: StreamId) {
        for o in std::mem::take(&mut self.pending) {
            let (to, msg) = match o {
                Outgoing::Control(to, m) => (to, m),
                Outgoing::Provide(d) => {
                    let Some((meta, locked)) = self.protocol.metadata(d.step) else {
                        continue;
                    };
                    (
                        d.reader,
                        ControlMessage::ProvideMetadata {
                            step: d.step,
                            metadata: meta.to_vec(),
                            definitions_locked: locked,
                            preloaded: d.preload.is_some(),
                        },
                    )
                }
            };
            let sink = self.conns.lock().unwrap().get(&to).cloned();
            if let Some(sink) = sink {
                let env = ControlEnvelope {
                    stream,
                    sender: SENDER_WRITER,
                    message: msg,
                };
                if let Err(e) = sink.send(&env.to_frame()) {
                    log::debug!("send to reader {} failed: {e}", to.0);
                }
            }
        }
    }
}

/// One writer rank's handle on a stream.
pub struct WriterStream {
    comm: Comm,
    params: EngineParams,
    stream: StreamId,
    plane: WriterPlane,
    root: Option<Root>,
    next_step: u64,
    closed: bool,
}

/// Gathers every rank's status; all ranks fail if any did.
fn agree(comm: &mut Comm, local: Result<()>) -> Result<()> {
    let mine = match &local {
        Ok(()) => Vec::new(),
        Err(e) => format!("rank {}: {e}", comm.rank()).into_bytes(),
    };
    let all = comm.gather_to_root(mine)?;
    let verdict = all.map(|v| {
        v.into_iter()
            .filter(|m| !m.is_empty())
            .collect::<Vec<_>>()
            .join(&b"; "[..])
    });
    let verdict = comm.broadcast_from_root(verdict)?;
    match local {
        Err(e) => Err(e),
        Ok(()) if verdict.is_empty() => Ok(()),
        Ok(()) => Err(Error::Protocol(String::from_utf8_lossy(&verdict).into_owned())),
    }
}

impl WriterStream {
    /// Collective. Publishes the contact record and waits for
    /// `RendezvousReaderCount` readers.
    pub fn open(mut comm: Comm, params: EngineParams, opts: WriterOptions) -> Result<Self> {
        let sid = comm.broadcast_from_root(comm.is_root().then(|| StreamId::random().0.to_vec()))?;
        let stream = StreamId(sid.try_into().map_err(|_| Error::Protocol("bad stream id".into()))?);
        let plane = WriterPlane::bind(stream, comm.rank() as u32, &opts.host);
        let contact = plane.as_ref().map(|p| p.contact()).unwrap_or_default();
        let contacts = comm.gather_to_root(contact)?;
        let plane = match plane {
            Ok(p) => {
                agree(&mut comm, Ok(()))?;
                p
            }
            Err(e) => {
                agree(&mut comm, Err(e.clone()))?;
                return Err(e);
            }
        };

        let mut root = None;
        let mut status = Ok(());
        if let Some(contacts) = contacts {
            match Self::start_root(stream, &params, &opts, contacts) {
                Ok(r) => root = Some(r),
                Err(e) => status = Err(e),
            }
        }
        agree(&mut comm, status)?;

        let mut w = WriterStream {
            comm,
            params,
            stream,
            plane,
            root,
            next_step: 0,
            closed: false,
        };
        if w.params.rendezvous_reader_count > 0 {
            let n = w.params.rendezvous_reader_count as usize;
            w.wait_until(|p| p.active_readers() >= n)?;
        }
        Ok(w)
    }

    fn start_root(
        stream: StreamId,
        params: &EngineParams,
        opts: &WriterOptions,
        contacts: Vec<Vec<u8>>,
    ) -> Result<Root> {
        let inbox = Arc::new(Inbox::default());
        let conns = Arc::new(Mutex::new(HashMap::new()));
        let ctx = Arc::new(AcceptCtx {
            stream,
            inbox: inbox.clone(),
            conns: conns.clone(),
            next_id: AtomicU32::new(0),
            handshake: (params.preload_mode, params.step_distribution_mode, contacts),
        });
        let acceptor = Acceptor::spawn(&opts.host, "ctl-accept", move |s| {
            let ctx = ctx.clone();
            let _ = thread::Builder::new()
                .name("ctl-serve".into())
                .spawn(move || serve_reader(ctx, s));
        })?;
        let contact = ContactRecord::new(stream, opts.host.clone(), acceptor.addr().port());
        let contact_file = publish(&contact, &opts.contact, &opts.stream_name)?;
        Ok(Root {
            protocol: WriterProtocol::new(ProtocolConfig {
                queue_limit: params.queue_limit,
                policy: params.queue_full_policy,
                reserve_limit: params.reserve_queue_limit,
                distribution: params.step_distribution_mode,
                preload: params.preload_mode,
            }),
            inbox,
            acceptor,
            conns,
            contact,
            contact_file,
            pending: Vec::new(),
            reader_waits: 0,
        })
    }

    pub fn rank(&self) -> usize {
        self.comm.rank()
    }

    pub fn stream_id(&self) -> StreamId {
        self.stream
    }

    pub fn params(&self) -> &EngineParams {
        &self.params
    }

    /// Rank 0 only.
    pub fn contact(&self) -> Option<ContactRecord> {
        self.root.as_ref().map(|r| r.contact.clone())
    }

    /// Rank 0 only: protocol event log.
    pub fn events(&self) -> Vec<WriterEvent> {
        self.root
            .as_ref()
            .map(|r| r.protocol.events().to_vec())
            .unwrap_or_default()
    }

    /// Rank 0 only: steps in the main queue.
    pub fn queued_steps(&self) -> Vec<StepId> {
        self.root
            .as_ref()
            .map(|r| r.protocol.queued_steps())
            .unwrap_or_default()
    }

    pub fn reserve_steps(&self) -> Vec<StepId> {
        self.root
            .as_ref()
            .map(|r| r.protocol.reserve_steps())
            .unwrap_or_default()
    }

    /// Rank 0 only: how often end_step had to wait for a reader message.
    pub fn reader_waits(&self) -> u64 {
        self.root.as_ref().map_or(0, |r| r.reader_waits)
    }

    pub fn plane_stats(&self) -> WriterPlaneStats {
        self.plane.stats()
    }

    pub fn registered_steps(&self) -> Vec<StepId> {
        self.plane.registered_steps()
    }

    /// One collective round: rank 0 supplies the verdict, everyone applies
    /// the decision, rank 0 then sends its control messages.
    fn round(&mut self, verdict: Option<Verdict>) -> Result<Decision> {
        let payload = self.root.as_mut().map(|r| {
            let out = r.protocol.take_round();
            r.pending.extend(out.outgoing);
            Decision {
                verdict: verdict.expect("rank 0 supplies the verdict"),
                activations: out.activations,
                pushes: out.pushes,
                freed: out.freed,
                forgotten: out.forgotten,
            }
            .encode()
        });
        let bytes = self.comm.broadcast_from_root(payload)?;
        let d = Decision::decode(&bytes)?;
        for (reader, step) in &d.activations {
            self.plane.learn(*reader, *step, self.params.preload_mode);
        }
        for p in &d.pushes {
            self.plane.push(p.step, p.reader, p.preload.unwrap_or(0));
        }
        for s in &d.freed {
            self.plane.unregister(*s);
        }
        for r in &d.forgotten {
            self.plane.forget(*r);
        }
        let stream = self.stream;
        if let Some(r) = self.root.as_mut() {
            r.send_pending(stream);
        }
        Ok(d)
    }

    fn wait_until(&mut self, pred: impl Fn(&WriterProtocol) -> bool) -> Result<()> {
        let mut first = true;
        loop {
            let verdict = self.root.as_mut().map(|r| {
                r.pump(!first, None);
                if pred(&r.protocol) {
                    Verdict::Done
                } else {
                    Verdict::Continue
                }
            });
            first = false;
            if self.round(verdict)?.verdict == Verdict::Done {
                return Ok(());
            }
        }
    }

    /// Collective. Blocks until at least `n` readers are active.
    pub fn wait_for_readers(&mut self, n: usize) -> Result<()> {
        if self.closed {
            return Err(Error::StreamClosed);
        }
        self.wait_until(|p| p.active_readers() >= n)
    }

    /// Collective. Registers this rank's block, assembles metadata at rank
    /// 0, then admits, discards or (Block policy) waits for queue space.
    pub fn provide(
        &mut self,
        data: Vec<u8>,
        mut local: LocalMetadata,
        definitions_locked: bool,
    ) -> Result<(StepId, StepOutcome)> {
        if self.closed {
            return Err(Error::StreamClosed);
        }
        let step = StepId(self.next_step);
        self.next_step += 1;
        let queued_preload = self.params.preload_mode == PreloadMode::Queued;
        self.plane
            .register(step, Arc::new(data), queued_preload && definitions_locked);

        local.writer_rank = self.comm.rank() as u32;
        local.dp_registration = self.plane.contact();
        let mut payload = vec![u8::from(definitions_locked)];
        payload.extend(encode_local_metadata(&local));
        let gathered = self.comm.gather_to_root(payload)?;

        let mut prepared: Option<Result<(Arc<Vec<u8>>, bool)>> = gathered.map(|parts| {
            let all_locked = parts.iter().all(|p| p.first() == Some(&1));
            let locals = parts
                .iter()
                .map(|p| decode_local_metadata(&p[1..]))
                .collect::<Result<Vec<_>>>()?;
            let full = aggregate_metadata(step, &locals)?;
            Ok((Arc::new(encode_full_metadata(&full)), all_locked))
        });
        if let Some(r) = self.root.as_mut() {
            r.protocol.log(WriterEvent::EndStepBegin(step));
        }

        let mut first = true;
        let mut blocked = false;
        let outcome = loop {
            let verdict = self.root.as_mut().map(|r| {
                r.pump(!first, Some(step));
                match prepared.as_ref().unwrap() {
                    Err(e) => Verdict::Fail(e.to_string()),
                    Ok((meta, locked)) => {
                        if !r.protocol.queue_full() {
                            r.protocol.provide(step, meta.clone(), *locked);
                            Verdict::Accept
                        } else if r.protocol.config().policy == QueueFullPolicy::Discard {
                            Verdict::Discard
                        } else {
                            if !blocked {
                                r.protocol.log(WriterEvent::BlockedOnQueue(step));
                                blocked = true;
                            }
                            Verdict::Continue
                        }
                    }
                }
            });
            first = false;
            let d = self.round(verdict)?;
            match d.verdict {
                Verdict::Continue => continue,
                Verdict::Accept => break StepOutcome::Accepted,
                Verdict::Discard => {
                    self.plane.unregister(step);
                    break StepOutcome::Discarded;
                }
                Verdict::Fail(msg) => {
                    self.plane.unregister(step);
                    return Err(match prepared.take() {
                        Some(Err(e)) => e,
                        _ => Error::Protocol(format!("rank 0: {msg}")),
                    });
                }
                Verdict::Done => return Err(Error::Protocol("unexpected verdict".into())),
            }
        };
        if let Some(r) = self.root.as_mut() {
            r.protocol.log(WriterEvent::EndStepReturn(step, outcome));
        }
        Ok((step, outcome))
    }

    /// Collective. Announces the final step, waits until every queued step
    /// is released (failed readers are force-released), then ends the
    /// stream for all readers.
    pub fn close(&mut self) -> Result<()> {
        if self.closed {
            return Err(Error::StreamClosed);
        }
        self.closed = true;
        if let Some(r) = self.root.as_mut() {
            r.protocol.start_close();
        }
        let mut first = true;
        loop {
            let verdict = self.root.as_mut().map(|r| {
                r.pump(!first, None);
                if r.protocol.close_done() {
                    r.protocol.finish_close();
                    Verdict::Done
                } else {
                    Verdict::Continue
                }
            });
            first = false;
            if self.round(verdict)?.verdict == Verdict::Done {
                break;
            }
        }
        self.shutdown(true);
        Ok(())
    }

    fn shutdown(&mut self, graceful: bool) {
        if let Some(r) = self.root.as_mut() {
            if let Some(f) = r.contact_file.take() {
                let _ = std::fs::remove_file(f);
            }
            r.acceptor.shutdown();
            for (_, c) in r.conns.lock().unwrap().drain() {
                if graceful {
                    c.shutdown_write();
                } else {
                    c.shutdown();
                }
            }
        }
        self.plane.shutdown();
    }
}

impl Drop for WriterStream {
    fn drop(&mut self) {
        if !self.closed {
            self.shutdown(false);
        }
    }
}

fn serve_reader(ctx: Arc<AcceptCtx>, stream: TcpStream) {
    let Ok(read_half) = stream.try_clone() else {
        return;
    };
    let sink = Arc::new(FrameSink::new(stream));
    let mut rd = BufReader::new(read_half);
    let join = match Frame::read_from(&mut rd)
        .ok()
        .flatten()
        .map(|f| ControlEnvelope::from_frame(&f))
    {
        Some(Ok(env)) => env,
        other => {
            log::warn!("control connection without a valid join: {other:?}");
            sink.shutdown();
            return;
        }
    };
    match join.message {
        ControlMessage::ReaderJoin { protocol_version, .. }
            if protocol_version == PROTOCOL_VERSION && join.stream == ctx.stream => {}
        other => {
            log::warn!("rejected join {other:?} for stream {:?}", join.stream);
            sink.shutdown();
            return;
        }
    }
    let id = {
        // id assignment, handshake and queueing happen atomically so that
        // registration order equals id order
        let mut q = ctx.inbox.q.lock().unwrap();
        let id = ReaderId(ctx.next_id.fetch_add(1, Ordering::SeqCst));
        let (preload, distribution, contacts) = &ctx.handshake;
        let hs = ControlEnvelope {
            stream: ctx.stream,
            sender: SENDER_WRITER,
            message: ControlMessage::WriterHandshake {
                protocol_version: PROTOCOL_VERSION,
                reader: id,
                distribution: *distribution,
                preload: *preload,
                writer_contacts: contacts.clone(),
            },
        };
        if sink.send(&hs.to_frame()).is_err() {
            return;
        }
        ctx.conns.lock().unwrap().insert(id, sink.clone());
        q.push_back(Inbound::Joined(id));
        ctx.inbox.cv.notify_all();
        id
    };
    loop {
        match Frame::read_from(&mut rd) {
            Ok(Some(f)) => match ControlEnvelope::from_frame(&f) {
                Ok(env) if env.stream == ctx.stream => ctx.inbox.push(Inbound::Message(id, env.message)),
                Ok(env) => log::warn!("message for foreign stream {:?}", env.stream),
                Err(e) => {
                    log::warn!("bad control frame from reader {}: {e}", id.0);
                    break;
                }
            },
            Ok(None) => break,
            Err(e) => {
                log::debug!("reader {} connection: {e}", id.0);
                break;
            }
        }
    }
    ctx.inbox.push(Inbound::Disconnected(id));
}
