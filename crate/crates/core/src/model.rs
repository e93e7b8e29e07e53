//! Domain model shared by every layer: global array geometry, written
//! blocks, step numbering and engine parameters.
//!
//! Element payloads are row-major with the last dimension contiguous.
//! Element types are reduced to a byte size; the type tag travels with the
//! metadata but is never interpreted.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Extents (in elements) of a global array for one step.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GlobalDims(Vec<u64>);

impl GlobalDims {
    pub fn new(dims: Vec<u64>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::InvalidParam(
                "global dims must have at least one dimension".into(),
            ));
        }
        Ok(GlobalDims(dims))
    }

    pub fn as_slice(&self) -> &[u64] {
        &self.0
    }

    pub fn ndims(&self) -> usize {
        self.0.len()
    }

    pub fn element_count(&self) -> Option<u64> {
        self.0.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d))
    }
}

impl FromStr for GlobalDims {
    type Err = Error;

    /// Parses `256x256` style shapes.
    fn from_str(s: &str) -> Result<Self> {
        let dims = s
            .split('x')
            .map(|p| {
                p.trim()
                    .parse::<u64>()
                    .map_err(|_| Error::InvalidParam(format!("bad shape component {p:?} in {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        GlobalDims::new(dims)
    }
}

impl fmt::Display for GlobalDims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(u64::to_string).collect();
        f.write_str(&parts.join("x"))
    }
}

/// A hyper-rectangular region of a global array.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BlockExtent {
    pub start: Vec<u64>,
    pub count: Vec<u64>,
}

impl BlockExtent {
    pub fn new(start: Vec<u64>, count: Vec<u64>) -> Self {
        BlockExtent { start, count }
    }

    /// The extent covering the whole of `shape`.
    pub fn whole(shape: &GlobalDims) -> Self {
        BlockExtent {
            start: vec![0; shape.ndims()],
            count: shape.as_slice().to_vec(),
        }
    }

    pub fn ndims(&self) -> usize {
        self.start.len()
    }

    pub fn element_count(&self) -> Option<u64> {
        self.count.iter().try_fold(1u64, |acc, &c| acc.checked_mul(c))
    }

    pub fn contains(&self, index: &[u64]) -> bool {
        index.len() == self.ndims()
            && index
                .iter()
                .zip(self.start.iter().zip(&self.count))
                .all(|(&i, (&s, &c))| i >= s && i - s < c)
    }
}

/// A variable as declared for one step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VariableDef {
    pub name: String,
    pub element_size: u32,
    /// Opaque element type label, e.g. `f64`.
    pub type_tag: String,
    pub shape: GlobalDims,
}

impl VariableDef {
    pub fn new(
        name: impl Into<String>,
        element_size: u32,
        type_tag: impl Into<String>,
        shape: GlobalDims,
    ) -> Result<Self> {
        if element_size == 0 {
            return Err(Error::InvalidParam("element_size must be at least 1".into()));
        }
        Ok(VariableDef {
            name: name.into(),
            element_size,
            type_tag: type_tag.into(),
            shape,
        })
    }
}

/// One `put` of a block by a writer rank.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PutRecord {
    pub variable: String,
    pub extent: BlockExtent,
    pub payload: Vec<u8>,
}

/// Writer-assigned step number. Discarded steps still consume a number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct StepId(pub u64);

impl StepId {
    pub fn next(self) -> StepId {
        StepId(self.0 + 1)
    }
}

impl fmt::Display for StepId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Identifier a writer assigns to each connected reader cohort, in
/// registration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ReaderId(pub u32);

impl fmt::Display for ReaderId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "reader{}", self.0)
    }
}

/// Checks `e` against `shape`.
pub fn validate_extent(shape: &GlobalDims, e: &BlockExtent) -> Result<()> {
    let nd = shape.ndims();
    if e.start.len() != nd || e.count.len() != nd {
        return Err(Error::DimMismatch {
            expected: nd,
            got: e.start.len().max(e.count.len()),
        });
    }
    for (d, ((&s, &c), &dim)) in e.start.iter().zip(&e.count).zip(shape.as_slice()).enumerate() {
        if c == 0 {
            return Err(Error::ExtentInvalid {
                dim: d,
                reason: "count must be at least 1".into(),
            });
        }
        match s.checked_add(c) {
            Some(end) if end <= dim => {}
            _ => {
                return Err(Error::ExtentInvalid {
                    dim: d,
                    reason: format!("start {s} + count {c} exceeds extent {dim}"),
                })
            }
        }
    }
    Ok(())
}

/// Bytes occupied by a block: product of counts times the element size.
pub fn block_byte_len(element_size: u32, extent: &BlockExtent) -> Result<u64> {
    extent
        .element_count()
        .and_then(|n| n.checked_mul(u64::from(element_size)))
        .ok_or(Error::Overflow)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueueFullPolicy {
    Block,
    Discard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepDistribution {
    AllToAll,
    RoundRobin,
    OnDemand,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PreloadMode {
    Off,
    /// Writers push learned selections as messages queued on the reader.
    Queued,
    /// Writers push into two alternating reader-side buffers.
    DoubleBuffer,
}

impl StepDistribution {
    pub(crate) fn code(self) -> u8 {
        match self {
            StepDistribution::AllToAll => 0,
            StepDistribution::RoundRobin => 1,
            StepDistribution::OnDemand => 2,
        }
    }

    pub(crate) fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(StepDistribution::AllToAll),
            1 => Ok(StepDistribution::RoundRobin),
            2 => Ok(StepDistribution::OnDemand),
            _ => Err(Error::Decode(format!("unknown distribution mode {c}"))),
        }
    }
}

impl PreloadMode {
    pub(crate) fn code(self) -> u8 {
        match self {
            PreloadMode::Off => 0,
            PreloadMode::Queued => 1,
            PreloadMode::DoubleBuffer => 2,
        }
    }

    pub(crate) fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(PreloadMode::Off),
            1 => Ok(PreloadMode::Queued),
            2 => Ok(PreloadMode::DoubleBuffer),
            _ => Err(Error::Decode(format!("unknown preload mode {c}"))),
        }
    }
}

/// Engine parameters, settable by name from `key=value` strings.
#[derive(Debug, Clone, PartialEq)]
pub struct EngineParams {
    /// Maximum queued steps; 0 means unbounded.
    pub queue_limit: usize,
    pub queue_full_policy: QueueFullPolicy,
    pub reserve_queue_limit: usize,
    pub rendezvous_reader_count: usize,
    pub open_timeout_secs: u64,
    pub step_distribution_mode: StepDistribution,
    pub always_provide_latest: bool,
    pub data_transport: String,
    pub preload_mode: PreloadMode,
}

impl Default for EngineParams {
    fn default() -> Self {
        EngineParams {
            queue_limit: 0,
            queue_full_policy: QueueFullPolicy::Block,
            reserve_queue_limit: 0,
            rendezvous_reader_count: 1,
            open_timeout_secs: 60,
            step_distribution_mode: StepDistribution::AllToAll,
            always_provide_latest: false,
            data_transport: "sockets".into(),
            preload_mode: PreloadMode::Off,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::InvalidParam(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::InvalidParam(format!("{key}: expected a non-negative integer, got {v:?}")))
}

impl EngineParams {
    /// Sets one parameter by its external name. Names are matched
    /// case-insensitively, values as documented in the README.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim().to_ascii_lowercase().as_str() {
            "queuelimit" => self.queue_limit = parse_num(key, value)?,
            "queuefullpolicy" => {
                self.queue_full_policy = match value.to_ascii_lowercase().as_str() {
                    "block" => QueueFullPolicy::Block,
                    "discard" => QueueFullPolicy::Discard,
                    _ => return Err(Error::InvalidParam(format!("QueueFullPolicy: {value:?}"))),
                }
            }
            "reservequeuelimit" => self.reserve_queue_limit = parse_num(key, value)?,
            "rendezvousreadercount" => self.rendezvous_reader_count = parse_num(key, value)?,
            "opentimeoutsecs" => self.open_timeout_secs = parse_num(key, value)?,
            "stepdistributionmode" => {
                self.step_distribution_mode = match value.to_ascii_lowercase().as_str() {
                    "stepsalltoall" => StepDistribution::AllToAll,
                    "stepsroundrobin" => StepDistribution::RoundRobin,
                    "stepsondemand" => StepDistribution::OnDemand,
                    _ => return Err(Error::InvalidParam(format!("StepDistributionMode: {value:?}"))),
                }
            }
            "alwaysprovidelatesttimestep" => self.always_provide_latest = parse_bool(key, value)?,
            "datatransport" => match value.to_ascii_lowercase().as_str() {
                "sockets" | "tcp" | "evpath" => self.data_transport = "sockets".into(),
                _ => {
                    return Err(Error::InvalidParam(format!(
                        "DataTransport: {value:?} is not available"
                    )))
                }
            },
            "preloadmode" => {
                self.preload_mode = match value.to_ascii_lowercase().as_str() {
                    "off" => PreloadMode::Off,
                    "queued" => PreloadMode::Queued,
                    "doublebuffer" => PreloadMode::DoubleBuffer,
                    _ => return Err(Error::InvalidParam(format!("PreloadMode: {value:?}"))),
                }
            }
            _ => return Err(Error::InvalidParam(format!("unknown parameter {key:?}"))),
        }
        Ok(())
    }

    /// Applies a `Key=Value` string.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::InvalidParam(format!("expected Key=Value, got {pair:?}")))?;
        self.set(k, v)
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut p = EngineParams::default();
        for pair in pairs {
            p.set_pair(pair)?;
        }
        Ok(p)
    }
}
