//! Step metadata encoding, aggregation and read planning.
//!
//! # Metadata encoding (format version 1)
//!
//! All integers little-endian. `str`/`bytes` are a `u32` length followed by
//! the raw bytes. Shapes, starts and counts are `ndims` consecutive `u64`.
//!
//! Local metadata (one writer rank):
//!
//! ```text
//! u32 version = 1
//! u8  kind    = 1
//! u32 writer_rank
//! u32 nvars
//!   str name | u32 element_size | str type_tag | u32 ndims | u64[ndims] shape
//!   u32 nblocks
//!     u64[ndims] start | u64[ndims] count | u64 data_offset
//! bytes dp_registration
//! ```
//!
//! Full metadata (all ranks of one step):
//!
//! ```text
//! u32 version = 1
//! u8  kind    = 2
//! u64 step
//! u32 nranks
//!   bytes dp_registration            (rank order)
//! u32 nvars
//!   str name | u32 element_size | str type_tag | u32 ndims | u64[ndims] shape
//!   u32 nblocks
//!     u32 writer_rank | u64[ndims] start | u64[ndims] count | u64 data_offset
//! ```
//!
//! `data_offset` is the byte position of the block inside the writer
//! rank's step data block (the concatenation of its puts).

use crate::codec::{len_u32, Decoder, Encoder};
use crate::error::{Error, Result};
use crate::model::{validate_extent, BlockExtent, GlobalDims, StepId, VariableDef};

pub const METADATA_FORMAT_VERSION: u32 = 1;
const KIND_LOCAL: u8 = 1;
const KIND_FULL: u8 = 2;

/// A block written by this rank, located inside the rank's data block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocalBlock {
    pub extent: BlockExtent,
    pub data_offset: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocalVariable {
    pub def: VariableDef,
    pub blocks: Vec<LocalBlock>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LocalMetadata {
    pub writer_rank: u32,
    pub variables: Vec<LocalVariable>,
    pub dp_registration: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FullBlock {
    pub writer_rank: u32,
    pub extent: BlockExtent,
    pub data_offset: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FullVariable {
    pub def: VariableDef,
    /// Ordered by (rank, put-order).
    pub blocks: Vec<FullBlock>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FullMetadata {
    pub step: StepId,
    pub variables: Vec<FullVariable>,
    /// One entry per writer rank, indexed by rank.
    pub dp_registrations: Vec<Vec<u8>>,
}

impl FullMetadata {
    pub fn variable(&self, name: &str) -> Option<&FullVariable> {
        self.variables.iter().find(|v| v.def.name == name)
    }
}

/// One contiguous transfer: `length` bytes from `source_offset` in the
/// writer rank's data block to `dest_offset` in the reader's buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReadPlanEntry {
    pub writer_rank: u32,
    pub source_offset: u64,
    pub length: u64,
    pub dest_offset: u64,
}

fn put_def(e: &mut Encoder, def: &VariableDef) {
    e.str(&def.name)
        .u32(def.element_size)
        .str(&def.type_tag)
        .u32(len_u32(def.shape.ndims()))
        .u64s(def.shape.as_slice());
}

fn get_def(d: &mut Decoder<'_>) -> Result<VariableDef> {
    let name = d.str()?;
    let element_size = d.u32()?;
    let type_tag = d.str()?;
    let nd = d.count(8)?;
    let shape = GlobalDims::new(d.u64s(nd)?).map_err(|_| Error::Decode("zero-dimensional shape".into()))?;
    VariableDef::new(name, element_size, type_tag, shape).map_err(|e| Error::Decode(e.to_string()))
}

fn get_extent(d: &mut Decoder<'_>, shape: &GlobalDims) -> Result<BlockExtent> {
    let nd = shape.ndims();
    let e = BlockExtent::new(d.u64s(nd)?, d.u64s(nd)?);
    validate_extent(shape, &e).map_err(|err| Error::Decode(err.to_string()))?;
    Ok(e)
}

fn check_header(d: &mut Decoder<'_>, kind: u8) -> Result<()> {
    let version = d.u32()?;
    if version != METADATA_FORMAT_VERSION {
        return Err(Error::Decode(format!("unsupported metadata version {version}")));
    }
    let k = d.u8()?;
    if k != kind {
        return Err(Error::Decode(format!("metadata kind {k}, expected {kind}")));
    }
    Ok(())
}

pub fn encode_local_metadata(m: &LocalMetadata) -> Vec<u8> {
    let mut e = Encoder::new();
    e.u32(METADATA_FORMAT_VERSION).u8(KIND_LOCAL).u32(m.writer_rank);
    e.u32(len_u32(m.variables.len()));
    for v in &m.variables {
        put_def(&mut e, &v.def);
        e.u32(len_u32(v.blocks.len()));
        for b in &v.blocks {
            e.u64s(&b.extent.start).u64s(&b.extent.count).u64(b.data_offset);
        }
    }
    e.bytes(&m.dp_registration);
    e.finish()
}

pub fn decode_local_metadata(buf: &[u8]) -> Result<LocalMetadata> {
    let mut d = Decoder::new(buf);
    check_header(&mut d, KIND_LOCAL)?;
    let writer_rank = d.u32()?;
    let nvars = d.count(16)?;
    let mut variables = Vec::with_capacity(nvars);
    for _ in 0..nvars {
        let def = get_def(&mut d)?;
        let nblocks = d.count(8)?;
        let mut blocks = Vec::with_capacity(nblocks);
        for _ in 0..nblocks {
            let extent = get_extent(&mut d, &def.shape)?;
            blocks.push(LocalBlock {
                extent,
                data_offset: d.u64()?,
            });
        }
        variables.push(LocalVariable { def, blocks });
    }
    let dp_registration = d.bytes()?.to_vec();
    d.finish()?;
    Ok(LocalMetadata {
        writer_rank,
        variables,
        dp_registration,
    })
}

pub fn encode_full_metadata(m: &FullMetadata) -> Vec<u8> {
    let mut e = Encoder::new();
    e.u32(METADATA_FORMAT_VERSION).u8(KIND_FULL).u64(m.step.0);
    e.u32(len_u32(m.dp_registrations.len()));
    for r in &m.dp_registrations {
        e.bytes(r);
    }
    e.u32(len_u32(m.variables.len()));
    for v in &m.variables {
        put_def(&mut e, &v.def);
        e.u32(len_u32(v.blocks.len()));
        for b in &v.blocks {
            e.u32(b.writer_rank)
                .u64s(&b.extent.start)
                .u64s(&b.extent.count)
                .u64(b.data_offset);
        }
    }
    e.finish()
}

pub fn decode_full_metadata(buf: &[u8]) -> Result<FullMetadata> {
    let mut d = Decoder::new(buf);
    check_header(&mut d, KIND_FULL)?;
    let step = StepId(d.u64()?);
    let nranks = d.count(4)?;
    let dp_registrations = (0..nranks)
        .map(|_| d.bytes().map(<[u8]>::to_vec))
        .collect::<Result<Vec<_>>>()?;
    let nvars = d.count(16)?;
    let mut variables = Vec::with_capacity(nvars);
    for _ in 0..nvars {
        let def = get_def(&mut d)?;
        let nblocks = d.count(12)?;
        let mut blocks = Vec::with_capacity(nblocks);
        for _ in 0..nblocks {
            let writer_rank = d.u32()?;
            if writer_rank as usize >= nranks {
                return Err(Error::Decode(format!("block from rank {writer_rank} of {nranks}")));
            }
            let extent = get_extent(&mut d, &def.shape)?;
            blocks.push(FullBlock {
                writer_rank,
                extent,
                data_offset: d.u64()?,
            });
        }
        variables.push(FullVariable { def, blocks });
    }
    d.finish()?;
    Ok(FullMetadata {
        step,
        variables,
        dp_registrations,
    })
}

/// Combines one local metadata part per writer rank (in rank order) into
/// the step's full metadata. Variables keep first-appearance order.
pub fn aggregate_metadata(step: StepId, parts: &[LocalMetadata]) -> Result<FullMetadata> {
    let mut variables: Vec<FullVariable> = Vec::new();
    for (rank, part) in parts.iter().enumerate() {
        if part.writer_rank as usize != rank {
            return Err(Error::Protocol(format!(
                "metadata part {rank} claims writer rank {}",
                part.writer_rank
            )));
        }
        for lv in &part.variables {
            let blocks = lv.blocks.iter().map(|b| FullBlock {
                writer_rank: part.writer_rank,
                extent: b.extent.clone(),
                data_offset: b.data_offset,
            });
            match variables.iter_mut().find(|v| v.def.name == lv.def.name) {
                Some(v) => {
                    if v.def.shape != lv.def.shape || v.def.element_size != lv.def.element_size {
                        return Err(Error::ShapeMismatch {
                            name: lv.def.name.clone(),
                            rank: part.writer_rank,
                            expected: v.def.shape.as_slice().to_vec(),
                            got: lv.def.shape.as_slice().to_vec(),
                        });
                    }
                    v.blocks.extend(blocks);
                }
                None => variables.push(FullVariable {
                    def: lv.def.clone(),
                    blocks: blocks.collect(),
                }),
            }
        }
    }
    Ok(FullMetadata {
        step,
        variables,
        dp_registrations: parts.iter().map(|p| p.dp_registration.clone()).collect(),
    })
}

/// Per-dimension overlap of two extents; `None` when they are disjoint.
pub fn intersect_extents(a: &BlockExtent, b: &BlockExtent) -> Result<Option<BlockExtent>> {
    if a.ndims() != b.ndims() {
        return Err(Error::DimMismatch {
            expected: a.ndims(),
            got: b.ndims(),
        });
    }
    let mut start = Vec::with_capacity(a.ndims());
    let mut count = Vec::with_capacity(a.ndims());
    for d in 0..a.ndims() {
        let lo = a.start[d].max(b.start[d]);
        let hi = (a.start[d] + a.count[d]).min(b.start[d] + b.count[d]);
        if hi <= lo {
            return Ok(None);
        }
        start.push(lo);
        count.push(hi - lo);
    }
    Ok(Some(BlockExtent { start, count }))
}

/// Row-major element offset of a global `index` inside `block`.
pub fn linear_offset(block: &BlockExtent, index: &[u64]) -> Result<u64> {
    if index.len() != block.ndims() {
        return Err(Error::DimMismatch {
            expected: block.ndims(),
            got: index.len(),
        });
    }
    if !block.contains(index) {
        return Err(Error::OutOfBlock);
    }
    Ok(index
        .iter()
        .zip(&block.start)
        .zip(&block.count)
        .fold(0u64, |off, ((&i, &s), &c)| off * c + (i - s)))
}

/// Paints `[lo, hi)` owned by `owner` over existing segments; later
/// paints win.
fn paint(segments: &mut Vec<(u64, u64, usize)>, lo: u64, hi: u64, owner: usize) {
    let mut out = Vec::with_capacity(segments.len() + 2);
    for &(a, b, o) in segments.iter() {
        if b <= lo || a >= hi {
            out.push((a, b, o));
            continue;
        }
        if a < lo {
            out.push((a, lo, o));
        }
        if b > hi {
            out.push((hi, b, o));
        }
    }
    out.push((lo, hi, owner));
    out.sort_unstable_by_key(|s| s.0);
    *segments = out;
}

/// Plans the transfers that fill a `selection` of `variable`.
///
/// Entries come out in destination order; each one is a maximal run that is
/// contiguous in both the source block and the destination buffer. Where
/// written blocks overlap, the block later in (rank, put-order) supplies the
/// shared elements.
pub fn plan_reads(meta: &FullMetadata, variable: &str, selection: &BlockExtent) -> Result<Vec<ReadPlanEntry>> {
    let var = meta
        .variable(variable)
        .ok_or_else(|| Error::UnknownVariable(variable.to_string()))?;
    validate_extent(&var.def.shape, selection)?;
    let es = u64::from(var.def.element_size);
    let nd = selection.ndims();
    let last = nd - 1;

    let candidates: Vec<(usize, BlockExtent)> = var
        .blocks
        .iter()
        .enumerate()
        .filter_map(|(i, b)| match intersect_extents(&b.extent, selection) {
            Ok(Some(x)) => Some(Ok((i, x))),
            Ok(None) => None,
            Err(e) => Some(Err(e)),
        })
        .collect::<Result<_>>()?;

    let sel_lo = selection.start[last];
    let sel_hi = sel_lo + selection.count[last];
    let mut entries: Vec<ReadPlanEntry> = Vec::new();
    let mut missing: Vec<BlockExtent> = Vec::new();
    let mut index = selection.start.clone();
    let mut segments = Vec::new();

    loop {
        segments.clear();
        for (bi, x) in &candidates {
            let covers_row = (0..last).all(|d| index[d] >= x.start[d] && index[d] < x.start[d] + x.count[d]);
            if covers_row {
                paint(&mut segments, x.start[last], x.start[last] + x.count[last], *bi);
            }
        }

        let mut cursor = sel_lo;
        for &(lo, hi, bi) in &segments {
            if lo > cursor {
                missing.push(row_extent(&index, last, cursor, lo));
            }
            cursor = hi;
            let block = &var.blocks[bi];
            index[last] = lo;
            let src = block.data_offset + linear_offset(&block.extent, &index)? * es;
            let dst = linear_offset(selection, &index)? * es;
            let len = (hi - lo) * es;
            match entries.last_mut() {
                Some(prev)
                    if prev.writer_rank == block.writer_rank
                        && prev.source_offset + prev.length == src
                        && prev.dest_offset + prev.length == dst =>
                {
                    prev.length += len;
                }
                _ => entries.push(ReadPlanEntry {
                    writer_rank: block.writer_rank,
                    source_offset: src,
                    length: len,
                    dest_offset: dst,
                }),
            }
        }
        if cursor < sel_hi {
            missing.push(row_extent(&index, last, cursor, sel_hi));
        }

        // advance over the leading dimensions
        let mut d = last;
        loop {
            if d == 0 {
                return if missing.is_empty() {
                    Ok(entries)
                } else {
                    Err(Error::UnfilledSelection(missing))
                };
            }
            d -= 1;
            index[d] += 1;
            if index[d] < selection.start[d] + selection.count[d] {
                break;
            }
            index[d] = selection.start[d];
        }
    }
}

fn row_extent(index: &[u64], last: usize, lo: u64, hi: u64) -> BlockExtent {
    let mut start = index.to_vec();
    start[last] = lo;
    let mut count = vec![1; index.len()];
    count[last] = hi - lo;
    BlockExtent { start, count }
}

/// Copies fetched bytes into `dest` at each entry's destination offset.
pub fn assemble<'a>(dest: &mut [u8], parts: impl IntoIterator<Item = (&'a ReadPlanEntry, &'a [u8])>) -> Result<()> {
    for (entry, bytes) in parts {
        if bytes.len() as u64 != entry.length {
            return Err(Error::LengthMismatch {
                expected: entry.length,
                got: bytes.len() as u64,
            });
        }
        let lo = entry.dest_offset as usize;
        let hi = lo
            .checked_add(bytes.len())
            .filter(|&h| h <= dest.len())
            .ok_or(Error::LengthMismatch {
                expected: entry.dest_offset + entry.length,
                got: dest.len() as u64,
            })?;
        dest[lo..hi].copy_from_slice(bytes);
    }
    Ok(())
}
