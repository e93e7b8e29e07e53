//! Step-oriented writer and reader engines on top of the two planes.
//!
//! A writer rank calls `begin_step`, any number of `put`s, then the
//! collective `end_step`; a reader rank brackets its `get`s the same way.
//! Both sides may lock their access pattern, which from the next step on
//! lets the writer push data before it is asked for.

use std::collections::HashMap;
use std::time::Duration;

use crate::cohort::Comm;
use crate::control_plane::{
    BeginStatus, ReaderOptions, ReaderStream, StepOutcome, WriterEvent, WriterOptions, WriterStream,
};
use crate::data_plane::{ReadHandle, ReaderPlaneStats, WriterPlaneStats};
use crate::error::{Error, Result};
use crate::marshal::{assemble, plan_reads, FullVariable, LocalBlock, LocalMetadata, LocalVariable, ReadPlanEntry};
use crate::model::{block_byte_len, validate_extent, BlockExtent, EngineParams, StepId, VariableDef};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EndStepStatus {
    pub step: StepId,
    pub outcome: StepOutcome,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct PutKey {
    name: String,
    shape: Vec<u64>,
    extent: BlockExtent,
}

/// Tracks a locked put or get sequence: the first complete step after the
/// lock becomes the reference every later step must repeat.
#[derive(Debug)]
struct PatternLock<K> {
    pending: bool,
    active: bool,
    reference: Option<Vec<K>>,
    current: Vec<K>,
}

impl<K> Default for PatternLock<K> {
    fn default() -> Self {
        PatternLock {
            pending: false,
            active: false,
            reference: None,
            current: Vec::new(),
        }
    }
}

impl<K: PartialEq + std::fmt::Debug> PatternLock<K> {
    fn request(&mut self) {
        self.pending = true;
    }

    fn step_boundary(&mut self) {
        if self.pending {
            self.pending = false;
            self.active = true;
        }
        self.current.clear();
    }

    fn check(&self, key: &K) -> Result<()> {
        if let (true, Some(r)) = (self.active, &self.reference) {
            let i = self.current.len();
            if r.get(i) != Some(key) {
                return Err(Error::PatternChangedAfterLock(format!(
                    "access {i} is {key:?}, locked pattern has {:?}",
                    r.get(i)
                )));
            }
        }
        Ok(())
    }

    fn check_complete(&self) -> Result<()> {
        match (&self.reference, self.active) {
            (Some(r), true) if r.len() != self.current.len() => Err(Error::PatternChangedAfterLock(format!(
                "{} accesses this step, locked pattern has {}",
                self.current.len(),
                r.len()
            ))),
            _ => Ok(()),
        }
    }

    fn finish_step(&mut self) {
        if self.active && self.reference.is_none() {
            self.reference = Some(std::mem::take(&mut self.current));
        }
    }
}

pub struct WriterEngine {
    stream: WriterStream,
    in_step: bool,
    data: Vec<u8>,
    vars: Vec<LocalVariable>,
    lock: PatternLock<PutKey>,
}

impl WriterEngine {
    /// Collective over the writer cohort.
    pub fn open(comm: Comm, params: EngineParams, opts: WriterOptions) -> Result<Self> {
        Ok(WriterEngine {
            stream: WriterStream::open(comm, params, opts)?,
            in_step: false,
            data: Vec::new(),
            vars: Vec::new(),
            lock: PatternLock::default(),
        })
    }

    pub fn stream(&self) -> &WriterStream {
        &self.stream
    }

    pub fn rank(&self) -> usize {
        self.stream.rank()
    }

    pub fn begin_step(&mut self) -> Result<()> {
        if self.in_step {
            return Err(Error::InvalidState("begin_step while a step is open"));
        }
        self.lock.step_boundary();
        self.in_step = true;
        Ok(())
    }

    /// Copies `payload` into the step; the caller may reuse its buffer at
    /// once.
    pub fn put(&mut self, def: &VariableDef, extent: &BlockExtent, payload: &[u8]) -> Result<()> {
        if !self.in_step {
            return Err(Error::NotInStep);
        }
        validate_extent(&def.shape, extent)?;
        let len = block_byte_len(def.element_size, extent)?;
        if payload.len() as u64 != len {
            return Err(Error::LengthMismatch {
                expected: len,
                got: payload.len() as u64,
            });
        }
        let key = PutKey {
            name: def.name.clone(),
            shape: def.shape.as_slice().to_vec(),
            extent: extent.clone(),
        };
        self.lock.check(&key)?;
        let var = match self.vars.iter_mut().position(|v| v.def.name == def.name) {
            Some(i) => {
                let v = &mut self.vars[i];
                if v.def != *def {
                    return Err(Error::ShapeMismatch {
                        name: def.name.clone(),
                        rank: self.stream.rank() as u32,
                        expected: v.def.shape.as_slice().to_vec(),
                        got: def.shape.as_slice().to_vec(),
                    });
                }
                v
            }
            None => {
                self.vars.push(LocalVariable {
                    def: def.clone(),
                    blocks: Vec::new(),
                });
                self.vars.last_mut().unwrap()
            }
        };
        var.blocks.push(LocalBlock {
            extent: extent.clone(),
            data_offset: self.data.len() as u64,
        });
        self.data.extend_from_slice(payload);
        self.lock.current.push(key);
        Ok(())
    }

    /// Collective. Hands the step to the stream; under the Block policy
    /// this waits for queue space, under Discard the step may be dropped.
    pub fn end_step(&mut self) -> Result<EndStepStatus> {
        if !self.in_step {
            return Err(Error::NotInStep);
        }
        self.lock.check_complete()?;
        self.in_step = false;
        self.lock.finish_step();
        let local = LocalMetadata {
            writer_rank: self.stream.rank() as u32,
            variables: std::mem::take(&mut self.vars),
            dp_registration: Vec::new(),
        };
        let data = std::mem::take(&mut self.data);
        let (step, outcome) = self.stream.provide(data, local, self.lock.active)?;
        Ok(EndStepStatus { step, outcome })
    }

    /// From the next step on, this rank promises to repeat its put
    /// sequence (names, shapes, extents).
    pub fn lock_writer_definitions(&mut self) {
        self.lock.request();
    }

    pub fn definitions_locked(&self) -> bool {
        self.lock.active
    }

    /// Collective. Waits until at least `n` readers are connected.
    pub fn wait_for_readers(&mut self, n: usize) -> Result<()> {
        self.stream.wait_for_readers(n)
    }

    /// Collective. Returns once every delivered step has been released.
    pub fn close(&mut self) -> Result<()> {
        if self.in_step {
            return Err(Error::InvalidState("close while a step is open"));
        }
        self.stream.close()
    }

    pub fn events(&self) -> Vec<WriterEvent> {
        self.stream.events()
    }

    pub fn queued_steps(&self) -> Vec<StepId> {
        self.stream.queued_steps()
    }

    pub fn reserve_steps(&self) -> Vec<StepId> {
        self.stream.reserve_steps()
    }

    pub fn plane_stats(&self) -> WriterPlaneStats {
        self.stream.plane_stats()
    }
}

/// Identifies a deferred get within its step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GetId(usize);

#[derive(Debug, Clone, PartialEq, Eq)]
struct GetKey {
    name: String,
    selection: BlockExtent,
}

struct PendingGet {
    id: GetId,
    len: usize,
    plan: Vec<ReadPlanEntry>,
    handles: Vec<ReadHandle>,
}

pub struct ReaderEngine {
    stream: ReaderStream,
    step: Option<StepId>,
    next_get: usize,
    pending: Vec<PendingGet>,
    done: HashMap<GetId, Result<Vec<u8>>>,
    lock: PatternLock<GetKey>,
}

impl ReaderEngine {
    /// Collective over the reader cohort.
    pub fn open(comm: Comm, params: EngineParams, opts: ReaderOptions) -> Result<Self> {
        Ok(ReaderEngine {
            stream: ReaderStream::open(comm, params, opts)?,
            step: None,
            next_get: 0,
            pending: Vec::new(),
            done: HashMap::new(),
            lock: PatternLock::default(),
        })
    }

    pub fn stream(&self) -> &ReaderStream {
        &self.stream
    }

    pub fn rank(&self) -> usize {
        self.stream.rank()
    }

    /// Collective. `None` waits without limit.
    pub fn begin_step(&mut self, timeout: Option<Duration>) -> Result<BeginStatus> {
        if self.step.is_some() {
            return Err(Error::InvalidState("begin_step while a step is open"));
        }
        if self.lock.pending {
            self.stream.lock_selections();
        }
        let status = self.stream.begin_step(timeout)?;
        if let BeginStatus::Step(s) = status {
            self.lock.step_boundary();
            self.step = Some(s);
            self.next_get = 0;
            self.done.clear();
        }
        Ok(status)
    }

    pub fn current_step(&self) -> Option<StepId> {
        self.step
    }

    pub fn variables(&self) -> Vec<&FullVariable> {
        self.stream
            .current()
            .map(|o| o.metadata.variables.iter().collect())
            .unwrap_or_default()
    }

    /// Shape and blocks of `name` in the open step.
    pub fn inquire_variable(&self, name: &str) -> Option<&FullVariable> {
        self.stream.current()?.metadata.variable(name)
    }

    /// Starts fetching `selection` of `name`; the bytes are available after
    /// [`Self::perform_gets`] or [`Self::end_step`].
    pub fn get_deferred(&mut self, name: &str, selection: &BlockExtent) -> Result<GetId> {
        let (Some(step), Some(open)) = (self.step, self.stream.current()) else {
            return Err(Error::NotInStep);
        };
        let key = GetKey {
            name: name.to_string(),
            selection: selection.clone(),
        };
        self.lock.check(&key)?;
        let plan = plan_reads(&open.metadata, name, selection)?;
        let var = open.metadata.variable(name).unwrap();
        let len = block_byte_len(var.def.element_size, selection)?;
        let len = usize::try_from(len).map_err(|_| Error::Overflow)?;
        let plane = self.stream.plane();
        let handles = plan
            .iter()
            .map(|e| plane.post_read(step, e.writer_rank, e.source_offset, e.length, e.dest_offset))
            .collect();
        let id = GetId(self.next_get);
        self.next_get += 1;
        self.lock.current.push(key);
        self.pending.push(PendingGet { id, len, plan, handles });
        Ok(id)
    }

    /// Waits for every outstanding get of this step. Returns the first
    /// failure; each get keeps its own outcome for [`Self::take`].
    pub fn perform_gets(&mut self) -> Result<()> {
        let mut first_err = None;
        for mut g in std::mem::take(&mut self.pending) {
            let mut res = Ok(());
            for h in &mut g.handles {
                if let Err(e) = h.wait() {
                    res = Err(e);
                    break;
                }
            }
            let out = res.and_then(|()| {
                let mut buf = vec![0u8; g.len];
                let mut parts = Vec::with_capacity(g.handles.len());
                for h in &mut g.handles {
                    parts.push(h.wait()?);
                }
                assemble(&mut buf, g.plan.iter().zip(parts))?;
                Ok(buf)
            });
            if let Err(e) = &out {
                first_err.get_or_insert_with(|| e.clone());
            }
            self.done.insert(g.id, out);
        }
        first_err.map_or(Ok(()), Err)
    }

    /// Moves out the bytes of a completed get, running pending gets first.
    pub fn take(&mut self, id: GetId) -> Result<Vec<u8>> {
        if !self.done.contains_key(&id) {
            let _ = self.perform_gets();
        }
        self.done
            .remove(&id)
            .unwrap_or(Err(Error::InvalidState("unknown or already taken get")))
    }

    /// Fetches one selection synchronously.
    pub fn get(&mut self, name: &str, selection: &BlockExtent) -> Result<Vec<u8>> {
        let id = self.get_deferred(name, selection)?;
        self.perform_gets()?;
        self.take(id)
    }

    /// Collective. Completes outstanding gets and releases the step.
    pub fn end_step(&mut self) -> Result<()> {
        if self.step.is_none() {
            return Err(Error::NotInStep);
        }
        let gets = self.perform_gets();
        let complete = self.lock.check_complete();
        if complete.is_ok() {
            self.lock.finish_step();
        }
        self.step = None;
        self.stream.end_step()?;
        gets.and(complete)
    }

    /// From the next step on, this rank promises to repeat its get
    /// sequence (variables and selections).
    pub fn lock_reader_selections(&mut self) {
        self.lock.request();
    }

    pub fn selections_locked(&self) -> bool {
        self.lock.active
    }

    pub fn learning_step(&self) -> Option<StepId> {
        self.stream.learning_step()
    }

    /// Collective.
    pub fn close(&mut self) -> Result<()> {
        self.pending.clear();
        self.step = None;
        self.stream.close()
    }

    pub fn stats(&self) -> ReaderPlaneStats {
        self.stream.plane_stats()
    }

    pub fn replaced_steps(&self) -> u64 {
        self.stream.replaced_steps()
    }
}
