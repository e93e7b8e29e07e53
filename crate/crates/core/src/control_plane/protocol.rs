//! Writer rank 0's queue and reader bookkeeping as a pure state machine.
//! Inputs are reader events; outputs are accumulated per round and taken
//! with [`WriterProtocol::take_round`].

use std::collections::{BTreeSet, VecDeque};
use std::sync::Arc;

use crate::model::{PreloadMode, QueueFullPolicy, ReaderId, StepDistribution, StepId};
use crate::wire::ControlMessage;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Accepted,
    Discarded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WriterEvent {
    EndStepBegin(StepId),
    BlockedOnQueue(StepId),
    EndStepReturn(StepId, StepOutcome),
    /// Rank 0 blocked for a reader-originated message inside end_step.
    AwaitedReaderMessage(StepId),
    Provided {
        step: StepId,
        reader: ReaderId,
    },
    Released {
        step: StepId,
        reader: ReaderId,
    },
    ForceReleased {
        step: StepId,
        reader: ReaderId,
    },
    DuplicateRelease {
        step: StepId,
        reader: ReaderId,
    },
    StepRequested(ReaderId),
    Freed(StepId),
    ToReserve(StepId),
    ReserveEvicted(StepId),
    ReaderJoined(ReaderId),
    ReaderActivated(ReaderId),
    ReaderClosed(ReaderId),
    ReaderFailed(ReaderId),
    PreloadActivated {
        reader: ReaderId,
        learning_step: StepId,
    },
    CloseBegin,
    CloseReturn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReaderState {
    Opening,
    Active,
    Closed,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProtocolConfig {
    pub queue_limit: usize,
    pub policy: QueueFullPolicy,
    pub reserve_limit: usize,
    pub distribution: StepDistribution,
    pub preload: PreloadMode,
}

/// A step handed to one reader, optionally with pushed data (`tag` is the
/// pattern id in queued mode or the buffer slot in double-buffer mode).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Delivery {
    pub step: StepId,
    pub reader: ReaderId,
    pub preload: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outgoing {
    Control(ReaderId, ControlMessage),
    Provide(Delivery),
}

/// What every writer rank must do after a round, plus what rank 0 sends.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RoundOutput {
    pub activations: Vec<(ReaderId, StepId)>,
    pub pushes: Vec<Delivery>,
    pub freed: Vec<StepId>,
    pub forgotten: Vec<ReaderId>,
    pub outgoing: Vec<Outgoing>,
}

#[derive(Debug, Clone)]
struct Entry {
    step: StepId,
    meta: Arc<Vec<u8>>,
    definitions_locked: bool,
    holders: BTreeSet<ReaderId>,
    provided: bool,
    awaiting_slot: Vec<ReaderId>,
}

#[derive(Debug, Clone)]
struct Reader {
    id: ReaderId,
    state: ReaderState,
    learning_step: Option<StepId>,
    slots: [Option<StepId>; 2],
    next_slot: usize,
    pending_requests: u32,
}

#[derive(Debug)]
pub struct WriterProtocol {
    cfg: ProtocolConfig,
    queue: VecDeque<Entry>,
    reserve: VecDeque<Entry>,
    lent: Vec<Entry>,
    readers: Vec<Reader>,
    requests: VecDeque<ReaderId>,
    rr_next: usize,
    closing: bool,
    last_step: Option<StepId>,
    out: RoundOutput,
    events: Vec<WriterEvent>,
}

impl WriterProtocol {
    pub fn new(cfg: ProtocolConfig) -> Self {
        WriterProtocol {
            cfg,
            queue: VecDeque::new(),
            reserve: VecDeque::new(),
            lent: Vec::new(),
            readers: Vec::new(),
            requests: VecDeque::new(),
            rr_next: 0,
            closing: false,
            last_step: None,
            out: RoundOutput::default(),
            events: Vec::new(),
        }
    }

    pub fn config(&self) -> &ProtocolConfig {
        &self.cfg
    }

    pub fn events(&self) -> &[WriterEvent] {
        &self.events
    }

    pub fn log(&mut self, e: WriterEvent) {
        self.events.push(e);
    }

    pub fn take_round(&mut self) -> RoundOutput {
        std::mem::take(&mut self.out)
    }

    pub fn queued_steps(&self) -> Vec<StepId> {
        self.queue.iter().map(|e| e.step).collect()
    }

    pub fn reserve_steps(&self) -> Vec<StepId> {
        self.reserve.iter().map(|e| e.step).collect()
    }

    pub fn active_readers(&self) -> usize {
        self.readers.iter().filter(|r| r.state == ReaderState::Active).count()
    }

    pub fn reader_state(&self, id: ReaderId) -> Option<ReaderState> {
        self.reader(id).map(|r| r.state)
    }

    /// Readers currently holding an unreleased reference to `step`.
    pub fn holders(&self, step: StepId) -> Vec<ReaderId> {
        self.all_entries()
            .find(|e| e.step == step)
            .map(|e| e.holders.iter().copied().collect())
            .unwrap_or_default()
    }

    pub fn pending_requests(&self, id: ReaderId) -> u32 {
        self.reader(id).map_or(0, |r| r.pending_requests)
    }

    pub fn metadata(&self, step: StepId) -> Option<(Arc<Vec<u8>>, bool)> {
        self.all_entries()
            .find(|e| e.step == step)
            .map(|e| (e.meta.clone(), e.definitions_locked))
    }

    fn all_entries(&self) -> impl Iterator<Item = &Entry> {
        self.queue.iter().chain(self.reserve.iter()).chain(self.lent.iter())
    }

    fn reader(&self, id: ReaderId) -> Option<&Reader> {
        self.readers.iter().find(|r| r.id == id)
    }

    fn reader_mut(&mut self, id: ReaderId) -> Option<&mut Reader> {
        self.readers.iter_mut().find(|r| r.id == id)
    }

    fn is_active(&self, id: ReaderId) -> bool {
        self.reader(id).is_some_and(|r| r.state == ReaderState::Active)
    }

    pub fn queue_full(&self) -> bool {
        self.cfg.queue_limit > 0 && self.queue.len() >= self.cfg.queue_limit
    }

    // ---- membership ----

    /// A reader completed its handshake; it becomes active and is caught
    /// up with reserve (and never-claimed) steps, oldest first.
    pub fn on_join(&mut self, id: ReaderId) {
        self.events.push(WriterEvent::ReaderJoined(id));
        self.readers.push(Reader {
            id,
            state: ReaderState::Opening,
            learning_step: None,
            slots: [None, None],
            next_slot: 0,
            pending_requests: 0,
        });
        self.reader_mut(id).unwrap().state = ReaderState::Active;
        self.out
            .outgoing
            .push(Outgoing::Control(id, ControlMessage::ReaderActivate));
        self.events.push(WriterEvent::ReaderActivated(id));

        let mut catchup: Vec<(StepId, bool)> = self.reserve.iter().map(|e| (e.step, true)).collect();
        if self.cfg.distribution != StepDistribution::OnDemand {
            catchup.extend(self.queue.iter().filter(|e| !e.provided).map(|e| (e.step, false)));
        }
        catchup.sort();
        for (step, from_reserve) in catchup {
            let e = if from_reserve {
                self.reserve.iter_mut().find(|e| e.step == step)
            } else {
                self.queue.iter_mut().find(|e| e.step == step)
            }
            .unwrap();
            e.holders.insert(id);
            e.provided = true;
            self.out.outgoing.push(Outgoing::Provide(Delivery {
                step,
                reader: id,
                preload: None,
            }));
            self.events.push(WriterEvent::Provided { step, reader: id });
        }
        if self.closing {
            let final_step = self.last_step;
            self.out
                .outgoing
                .push(Outgoing::Control(id, ControlMessage::WriterClose { final_step }));
        }
    }

    pub fn on_message(&mut self, from: ReaderId, msg: ControlMessage) {
        match msg {
            ControlMessage::ReleaseStep {
                step,
                reader,
                selections_locked,
            } => {
                if reader != from {
                    log::warn!("reader {} released on behalf of {}", from.0, reader.0);
                }
                self.release(step, from, false);
                if selections_locked {
                    self.activate_preload(from, step);
                }
            }
            ControlMessage::RequestStep { .. } => {
                if self.is_active(from) {
                    self.reader_mut(from).unwrap().pending_requests += 1;
                    self.requests.push_back(from);
                    self.events.push(WriterEvent::StepRequested(from));
                    self.serve_requests();
                }
            }
            ControlMessage::ReaderClose { .. } => self.drop_reader(from, ReaderState::Closed),
            other => log::warn!("unexpected control message from reader {}: {other:?}", from.0),
        }
    }

    /// The control connection to `id` was lost.
    pub fn on_disconnect(&mut self, id: ReaderId) {
        if matches!(self.reader_state(id), Some(ReaderState::Active | ReaderState::Opening)) {
            self.drop_reader(id, ReaderState::Failed);
        }
    }

    fn drop_reader(&mut self, id: ReaderId, state: ReaderState) {
        let Some(r) = self.reader_mut(id) else {
            return;
        };
        if matches!(r.state, ReaderState::Closed | ReaderState::Failed) {
            log::warn!("reader {} closed twice", id.0);
            return;
        }
        let preload = r.learning_step.is_some();
        r.state = state;
        r.pending_requests = 0;
        self.requests.retain(|x| *x != id);
        self.events.push(match state {
            ReaderState::Failed => WriterEvent::ReaderFailed(id),
            _ => WriterEvent::ReaderClosed(id),
        });
        let held: Vec<StepId> = self
            .all_entries()
            .filter(|e| e.holders.contains(&id))
            .map(|e| e.step)
            .collect();
        for step in held {
            self.release(step, id, true);
        }
        if preload {
            self.out.forgotten.push(id);
        }
    }

    fn activate_preload(&mut self, id: ReaderId, step: StepId) {
        if self.cfg.preload == PreloadMode::Off {
            return;
        }
        let Some(r) = self.reader_mut(id) else {
            return;
        };
        if r.state != ReaderState::Active || r.learning_step.is_some() {
            return;
        }
        r.learning_step = Some(step);
        self.out.activations.push((id, step));
        self.events.push(WriterEvent::PreloadActivated {
            reader: id,
            learning_step: step,
        });
    }

    // ---- steps ----

    /// Queues an admitted step and distributes it. Caller checks
    /// [`Self::queue_full`] first.
    pub fn provide(&mut self, step: StepId, meta: Arc<Vec<u8>>, definitions_locked: bool) {
        self.last_step = Some(step);
        self.queue.push_back(Entry {
            step,
            meta,
            definitions_locked,
            holders: BTreeSet::new(),
            provided: false,
            awaiting_slot: Vec::new(),
        });
        let targets: Vec<ReaderId> = match self.cfg.distribution {
            StepDistribution::AllToAll => self
                .readers
                .iter()
                .filter(|r| r.state == ReaderState::Active)
                .map(|r| r.id)
                .collect(),
            StepDistribution::RoundRobin => self.next_round_robin().into_iter().collect(),
            StepDistribution::OnDemand => {
                self.serve_requests();
                return;
            }
        };
        if targets.is_empty() {
            if self.cfg.queue_limit == 0 {
                // nobody to hold it and nothing bounds the queue: release now
                let e = self.queue.pop_back().unwrap();
                self.retire(e);
            }
            return;
        }
        for r in targets {
            self.deliver(step, r);
        }
    }

    fn next_round_robin(&mut self) -> Option<ReaderId> {
        let n = self.readers.len();
        for k in 0..n {
            let i = (self.rr_next + k) % n;
            if self.readers[i].state == ReaderState::Active {
                self.rr_next = i + 1;
                return Some(self.readers[i].id);
            }
        }
        None
    }

    fn serve_requests(&mut self) {
        while let Some(&r) = self.requests.front() {
            if !self.is_active(r) {
                self.requests.pop_front();
                continue;
            }
            let Some(step) = self.queue.iter().find(|e| !e.provided).map(|e| e.step) else {
                break;
            };
            self.requests.pop_front();
            self.reader_mut(r).unwrap().pending_requests -= 1;
            self.deliver(step, r);
        }
    }

    /// Hands a queued step to `reader`; in double-buffer mode the hand-off
    /// waits for a free buffer slot.
    fn deliver(&mut self, step: StepId, reader: ReaderId) {
        let preload = self.cfg.preload;
        let learning = self.reader(reader).and_then(|r| r.learning_step);
        let e = self.queue.iter_mut().find(|e| e.step == step).unwrap();
        e.holders.insert(reader);
        e.provided = true;
        match (preload, learning) {
            (PreloadMode::Queued, Some(l)) => self.emit(step, reader, Some(l.0 as u32)),
            (PreloadMode::DoubleBuffer, Some(_)) => {
                e.awaiting_slot.push(reader);
                self.pump_slots(reader);
            }
            _ => self.emit(step, reader, None),
        }
    }

    fn emit(&mut self, step: StepId, reader: ReaderId, preload: Option<u32>) {
        let d = Delivery { step, reader, preload };
        if preload.is_some() {
            self.out.pushes.push(d);
        }
        self.out.outgoing.push(Outgoing::Provide(d));
        self.events.push(WriterEvent::Provided { step, reader });
    }

    /// Moves steps waiting for `reader`'s buffers into free slots, oldest
    /// first, alternating between the two slots.
    fn pump_slots(&mut self, reader: ReaderId) {
        loop {
            let Some(r) = self.reader(reader) else {
                return;
            };
            let slot = [r.next_slot, 1 - r.next_slot]
                .into_iter()
                .find(|&s| r.slots[s].is_none());
            let Some(slot) = slot else {
                return;
            };
            let Some(e) = self.queue.iter_mut().find(|e| e.awaiting_slot.contains(&reader)) else {
                return;
            };
            e.awaiting_slot.retain(|x| *x != reader);
            let step = e.step;
            let r = self.reader_mut(reader).unwrap();
            r.slots[slot] = Some(step);
            r.next_slot = 1 - slot;
            self.emit(step, reader, Some(slot as u32));
        }
    }

    /// Slot occupancy as seen by the writer, for tests and diagnostics.
    pub fn slots(&self, reader: ReaderId) -> [Option<StepId>; 2] {
        self.reader(reader).map_or([None, None], |r| r.slots)
    }

    fn release(&mut self, step: StepId, reader: ReaderId, forced: bool) {
        let found = if let Some(i) = self
            .queue
            .iter()
            .position(|e| e.step == step && e.holders.contains(&reader))
        {
            let e = &mut self.queue[i];
            e.holders.remove(&reader);
            e.awaiting_slot.retain(|x| *x != reader);
            if e.holders.is_empty() {
                let e = self.queue.remove(i).unwrap();
                self.retire(e);
            }
            true
        } else if let Some(e) = self
            .reserve
            .iter_mut()
            .find(|e| e.step == step && e.holders.contains(&reader))
        {
            e.holders.remove(&reader);
            true
        } else if let Some(i) = self
            .lent
            .iter()
            .position(|e| e.step == step && e.holders.contains(&reader))
        {
            self.lent[i].holders.remove(&reader);
            if self.lent[i].holders.is_empty() {
                self.lent.remove(i);
                self.free(step);
            }
            true
        } else {
            false
        };
        if !found {
            log::warn!("duplicate or unknown release of step {step} by reader {}", reader.0);
            self.events.push(WriterEvent::DuplicateRelease { step, reader });
            return;
        }
        self.events.push(if forced {
            WriterEvent::ForceReleased { step, reader }
        } else {
            WriterEvent::Released { step, reader }
        });
        if let Some(r) = self.reader_mut(reader) {
            let mut freed_slot = false;
            for s in &mut r.slots {
                if *s == Some(step) {
                    *s = None;
                    freed_slot = true;
                }
            }
            if freed_slot && r.state == ReaderState::Active {
                self.pump_slots(reader);
            }
        }
    }

    fn free(&mut self, step: StepId) {
        self.out.freed.push(step);
        self.events.push(WriterEvent::Freed(step));
    }

    /// A step nobody holds any more: into the reserve queue or freed.
    fn retire(&mut self, e: Entry) {
        if self.closing || self.cfg.reserve_limit == 0 {
            self.free(e.step);
            return;
        }
        let pos = self
            .reserve
            .iter()
            .position(|x| x.step > e.step)
            .unwrap_or(self.reserve.len());
        self.events.push(WriterEvent::ToReserve(e.step));
        self.reserve.insert(pos, e);
        while self.reserve.len() > self.cfg.reserve_limit {
            let old = self.reserve.pop_front().unwrap();
            self.events.push(WriterEvent::ReserveEvicted(old.step));
            if old.holders.is_empty() {
                self.free(old.step);
            } else {
                self.lent.push(old);
            }
        }
    }

    // ---- close ----

    pub fn start_close(&mut self) {
        self.closing = true;
        self.events.push(WriterEvent::CloseBegin);
        let final_step = self.last_step;
        let ids: Vec<ReaderId> = self
            .readers
            .iter()
            .filter(|r| r.state == ReaderState::Active)
            .map(|r| r.id)
            .collect();
        for id in ids {
            self.out
                .outgoing
                .push(Outgoing::Control(id, ControlMessage::WriterClose { final_step }));
        }
        for e in std::mem::take(&mut self.reserve) {
            if e.holders.is_empty() {
                self.free(e.step);
            } else {
                self.lent.push(e);
            }
        }
    }

    /// No reader holds anything and no active reader could still claim a
    /// queued step.
    pub fn close_done(&self) -> bool {
        let held = self.all_entries().any(|e| !e.holders.is_empty());
        let claimable = self.active_readers() > 0 && self.queue.iter().any(|e| !e.provided);
        !held && !claimable
    }

    pub fn finish_close(&mut self) {
        for e in std::mem::take(&mut self.queue) {
            self.free(e.step);
        }
        for e in std::mem::take(&mut self.lent) {
            self.free(e.step);
        }
        let ids: Vec<ReaderId> = self
            .readers
            .iter()
            .filter(|r| r.state == ReaderState::Active)
            .map(|r| r.id)
            .collect();
        for id in ids {
            self.out
                .outgoing
                .push(Outgoing::Control(id, ControlMessage::EndOfStream));
        }
        self.events.push(WriterEvent::CloseReturn);
    }
}
