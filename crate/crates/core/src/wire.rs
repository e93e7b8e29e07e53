//! Wire formats shared by the control and data planes (version 1).
//!
//! # Framing
//!
//! Every message travels as one frame, all integers little-endian:
//!
//! ```text
//! u32 payload_len | u16 message_type | u16 flags | payload[payload_len]
//! ```
//!
//! # Control messages
//!
//! `bytes` is a u32 length followed by that many bytes. Distribution codes:
//! 0 all-to-all, 1 round-robin, 2 on-demand. Preload codes: 0 off,
//! 1 queued, 2 double buffer.
//!
//! Payload = `stream_id[16] | u32 sender | body`. `sender` is the reader id
//! for reader-originated messages, `0xFFFF_FFFF` for the writer, and
//! `0xFFFF_FFFE` for a reader that has not been assigned an id yet.
//!
//! | type   | message          | body                                                                         | flags                                       |
//! |--------|------------------|------------------------------------------------------------------------------|---------------------------------------------|
//! | 0x0001 | ReaderJoin       | u16 protocol, u32 n, n × bytes contact                                       |                                             |
//! | 0x0002 | WriterHandshake  | u16 protocol, u32 reader, u8 distribution, u8 preload, u32 n, n × bytes      |                                             |
//! | 0x0003 | ReaderActivate   | (empty)                                                                      |                                             |
//! | 0x0004 | ProvideMetadata  | u64 step, bytes metadata                                                     | 0x1 definitions locked, 0x2 data preloaded  |
//! | 0x0005 | ReleaseStep      | u64 step, u32 reader                                                         | 0x1 selections locked                       |
//! | 0x0006 | RequestStep      | u32 reader                                                                   |                                             |
//! | 0x0007 | ReaderClose      | u32 reader                                                                   |                                             |
//! | 0x0008 | WriterClose      | u8 has_final, u64 final_step                                                 |                                             |
//! | 0x0009 | EndOfStream      | (empty)                                                                      |                                             |
//!
//! # Data-plane messages
//!
//! | type   | message          | payload                                                      |
//! |--------|------------------|--------------------------------------------------------------|
//! | 0x0101 | DataHello        | stream_id[16], u32 reader, u32 reader_rank                   |
//! | 0x0102 | ReadRequest      | u64 request_id, u64 step, u64 offset, u64 length             |
//! | 0x0103 | RequestResponse  | u64 request_id, u8 status, data (rest of payload)            |
//! | 0x0104 | PreloadData      | u64 step, u32 pattern, data (rest of payload)                |
//! | 0x0105 | RequestLogPublish| u64 request_id, u64 step, u32 n, n × (u64 offset, u64 length)|
//! | 0x0106 | BufferRelease    | u64 step, u32 slot                                           |
//!
//! `RequestResponse` status: 0 ok, 1 stale step, 2 out of range, 3 bad
//! request. A `RequestLogPublish` is acknowledged by a `RequestResponse`
//! with the same request id and an empty body.
//!
//! # Contact record
//!
//! `u16 version | stream_id[16] | u16 host_len | host | u16 port`, shown in
//! text form as `SSTG1:` followed by the standard base64 of those bytes.

use std::fmt;
use std::io::{self, Read, Write};

use base64::Engine as _;
use rand::RngCore;

use crate::codec::{len_u32, Decoder, Encoder};
use crate::error::{Error, Result};
use crate::model::{PreloadMode, ReaderId, StepDistribution, StepId};

pub const PROTOCOL_VERSION: u16 = 1;
pub const FRAME_HEADER_LEN: usize = 8;
/// Frames above this size are rejected as corrupt.
pub const MAX_FRAME_LEN: u32 = 1 << 31;

pub const SENDER_WRITER: u32 = 0xFFFF_FFFF;
pub const SENDER_UNASSIGNED: u32 = 0xFFFF_FFFE;

pub mod msg_type {
    pub const READER_JOIN: u16 = 0x0001;
    pub const WRITER_HANDSHAKE: u16 = 0x0002;
    pub const READER_ACTIVATE: u16 = 0x0003;
    pub const PROVIDE_METADATA: u16 = 0x0004;
    pub const RELEASE_STEP: u16 = 0x0005;
    pub const REQUEST_STEP: u16 = 0x0006;
    pub const READER_CLOSE: u16 = 0x0007;
    pub const WRITER_CLOSE: u16 = 0x0008;
    pub const END_OF_STREAM: u16 = 0x0009;

    pub const DATA_HELLO: u16 = 0x0101;
    pub const READ_REQUEST: u16 = 0x0102;
    pub const REQUEST_RESPONSE: u16 = 0x0103;
    pub const PRELOAD_DATA: u16 = 0x0104;
    pub const REQUEST_LOG_PUBLISH: u16 = 0x0105;
    pub const BUFFER_RELEASE: u16 = 0x0106;
}

pub mod flags {
    pub const DEFINITIONS_LOCKED: u16 = 0x0001;
    pub const PRELOADED: u16 = 0x0002;
    pub const SELECTIONS_LOCKED: u16 = 0x0001;
}

/// 128-bit identifier of one writer stream.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct StreamId(pub [u8; 16]);

impl StreamId {
    pub fn random() -> Self {
        let mut b = [0u8; 16];
        rand::thread_rng().fill_bytes(&mut b);
        StreamId(b)
    }
}

impl fmt::Debug for StreamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: u16,
    pub flags: u16,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(FRAME_HEADER_LEN + self.payload.len());
        out.extend_from_slice(&len_u32(self.payload.len()).to_le_bytes());
        out.extend_from_slice(&self.msg_type.to_le_bytes());
        out.extend_from_slice(&self.flags.to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(&self.encode())
    }

    /// Reads one frame. Returns `Ok(None)` on a clean end of stream at a
    /// frame boundary.
    pub fn read_from(r: &mut impl Read) -> io::Result<Option<Frame>> {
        let mut head = [0u8; FRAME_HEADER_LEN];
        let mut got = 0;
        while got < head.len() {
            match r.read(&mut head[got..]) {
                Ok(0) if got == 0 => return Ok(None),
                Ok(0) => return Err(io::ErrorKind::UnexpectedEof.into()),
                Ok(n) => got += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e),
            }
        }
        let len = u32::from_le_bytes(head[0..4].try_into().unwrap());
        if len > MAX_FRAME_LEN {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("frame of {len} bytes"),
            ));
        }
        let msg_type = u16::from_le_bytes(head[4..6].try_into().unwrap());
        let flags = u16::from_le_bytes(head[6..8].try_into().unwrap());
        let mut payload = vec![0u8; len as usize];
        r.read_exact(&mut payload)?;
        Ok(Some(Frame {
            msg_type,
            flags,
            payload,
        }))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ControlMessage {
    ReaderJoin {
        protocol_version: u16,
        reader_contacts: Vec<Vec<u8>>,
    },
    WriterHandshake {
        protocol_version: u16,
        reader: ReaderId,
        distribution: StepDistribution,
        preload: PreloadMode,
        writer_contacts: Vec<Vec<u8>>,
    },
    ReaderActivate,
    ProvideMetadata {
        step: StepId,
        metadata: Vec<u8>,
        definitions_locked: bool,
        preloaded: bool,
    },
    ReleaseStep {
        step: StepId,
        reader: ReaderId,
        selections_locked: bool,
    },
    RequestStep {
        reader: ReaderId,
    },
    ReaderClose {
        reader: ReaderId,
    },
    WriterClose {
        final_step: Option<StepId>,
    },
    EndOfStream,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ControlEnvelope {
    pub stream: StreamId,
    pub sender: u32,
    pub message: ControlMessage,
}

fn put_blobs(e: &mut Encoder, blobs: &[Vec<u8>]) {
    e.u32(len_u32(blobs.len()));
    for b in blobs {
        e.bytes(b);
    }
}

fn get_blobs(d: &mut Decoder<'_>) -> Result<Vec<Vec<u8>>> {
    let n = d.count(4)?;
    (0..n).map(|_| d.bytes().map(<[u8]>::to_vec)).collect()
}

fn flag(cond: bool, bit: u16) -> u16 {
    if cond {
        bit
    } else {
        0
    }
}

impl ControlEnvelope {
    pub fn to_frame(&self) -> Frame {
        use msg_type::*;
        let mut e = Encoder::new();
        e.raw(&self.stream.0).u32(self.sender);
        let (msg_type, fl) = match &self.message {
            ControlMessage::ReaderJoin {
                protocol_version,
                reader_contacts,
            } => {
                e.u16(*protocol_version);
                put_blobs(&mut e, reader_contacts);
                (READER_JOIN, 0)
            }
            ControlMessage::WriterHandshake {
                protocol_version,
                reader,
                distribution,
                preload,
                writer_contacts,
            } => {
                e.u16(*protocol_version)
                    .u32(reader.0)
                    .u8(distribution.code())
                    .u8(preload.code());
                put_blobs(&mut e, writer_contacts);
                (WRITER_HANDSHAKE, 0)
            }
            ControlMessage::ReaderActivate => (READER_ACTIVATE, 0),
            ControlMessage::ProvideMetadata {
                step,
                metadata,
                definitions_locked,
                preloaded,
            } => {
                e.u64(step.0).bytes(metadata);
                (
                    PROVIDE_METADATA,
                    flag(*definitions_locked, flags::DEFINITIONS_LOCKED) | flag(*preloaded, flags::PRELOADED),
                )
            }
            ControlMessage::ReleaseStep {
                step,
                reader,
                selections_locked,
            } => {
                e.u64(step.0).u32(reader.0);
                (RELEASE_STEP, flag(*selections_locked, flags::SELECTIONS_LOCKED))
            }
            ControlMessage::RequestStep { reader } => {
                e.u32(reader.0);
                (REQUEST_STEP, 0)
            }
            ControlMessage::ReaderClose { reader } => {
                e.u32(reader.0);
                (READER_CLOSE, 0)
            }
            ControlMessage::WriterClose { final_step } => {
                e.u8(u8::from(final_step.is_some())).u64(final_step.map_or(0, |s| s.0));
                (WRITER_CLOSE, 0)
            }
            ControlMessage::EndOfStream => (END_OF_STREAM, 0),
        };
        Frame {
            msg_type,
            flags: fl,
            payload: e.finish(),
        }
    }

    pub fn from_frame(frame: &Frame) -> Result<Self> {
        use msg_type::*;
        let mut d = Decoder::new(&frame.payload);
        let stream = StreamId(d.raw(16)?.try_into().unwrap());
        let sender = d.u32()?;
        let message = match frame.msg_type {
            READER_JOIN => ControlMessage::ReaderJoin {
                protocol_version: d.u16()?,
                reader_contacts: get_blobs(&mut d)?,
            },
            WRITER_HANDSHAKE => ControlMessage::WriterHandshake {
                protocol_version: d.u16()?,
                reader: ReaderId(d.u32()?),
                distribution: StepDistribution::from_code(d.u8()?)?,
                preload: PreloadMode::from_code(d.u8()?)?,
                writer_contacts: get_blobs(&mut d)?,
            },
            READER_ACTIVATE => ControlMessage::ReaderActivate,
            PROVIDE_METADATA => ControlMessage::ProvideMetadata {
                step: StepId(d.u64()?),
                metadata: d.bytes()?.to_vec(),
                definitions_locked: frame.flags & flags::DEFINITIONS_LOCKED != 0,
                preloaded: frame.flags & flags::PRELOADED != 0,
            },
            RELEASE_STEP => ControlMessage::ReleaseStep {
                step: StepId(d.u64()?),
                reader: ReaderId(d.u32()?),
                selections_locked: frame.flags & flags::SELECTIONS_LOCKED != 0,
            },
            REQUEST_STEP => ControlMessage::RequestStep {
                reader: ReaderId(d.u32()?),
            },
            READER_CLOSE => ControlMessage::ReaderClose {
                reader: ReaderId(d.u32()?),
            },
            WRITER_CLOSE => {
                let has = d.u8()?;
                let s = d.u64()?;
                ControlMessage::WriterClose {
                    final_step: match has {
                        0 => None,
                        1 => Some(StepId(s)),
                        _ => return Err(Error::Decode("bad WriterClose marker".into())),
                    },
                }
            }
            END_OF_STREAM => ControlMessage::EndOfStream,
            other => return Err(Error::Protocol(format!("unknown control message type {other:#06x}"))),
        };
        d.finish()?;
        Ok(ControlEnvelope {
            stream,
            sender,
            message,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResponseStatus {
    Ok = 0,
    StaleStep = 1,
    OutOfRange = 2,
    BadRequest = 3,
}

impl ResponseStatus {
    fn from_u8(v: u8) -> Result<Self> {
        Ok(match v {
            0 => ResponseStatus::Ok,
            1 => ResponseStatus::StaleStep,
            2 => ResponseStatus::OutOfRange,
            3 => ResponseStatus::BadRequest,
            _ => return Err(Error::Decode(format!("unknown response status {v}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataMessage {
    Hello {
        stream: StreamId,
        reader: ReaderId,
        reader_rank: u32,
    },
    ReadRequest {
        request_id: u64,
        step: StepId,
        offset: u64,
        length: u64,
    },
    RequestResponse {
        request_id: u64,
        status: ResponseStatus,
        data: Vec<u8>,
    },
    PreloadData {
        step: StepId,
        pattern: u32,
        data: Vec<u8>,
    },
    RequestLogPublish {
        request_id: u64,
        step: StepId,
        entries: Vec<(u64, u64)>,
    },
    BufferRelease {
        step: StepId,
        slot: u32,
    },
}

impl DataMessage {
    pub fn to_frame(&self) -> Frame {
        use msg_type::*;
        let mut e = Encoder::new();
        let msg_type = match self {
            DataMessage::Hello {
                stream,
                reader,
                reader_rank,
            } => {
                e.raw(&stream.0).u32(reader.0).u32(*reader_rank);
                DATA_HELLO
            }
            DataMessage::ReadRequest {
                request_id,
                step,
                offset,
                length,
            } => {
                e.u64(*request_id).u64(step.0).u64(*offset).u64(*length);
                READ_REQUEST
            }
            DataMessage::RequestResponse {
                request_id,
                status,
                data,
            } => {
                e.u64(*request_id).u8(*status as u8).raw(data);
                REQUEST_RESPONSE
            }
            DataMessage::PreloadData { step, pattern, data } => {
                e.u64(step.0).u32(*pattern).raw(data);
                PRELOAD_DATA
            }
            DataMessage::RequestLogPublish {
                request_id,
                step,
                entries,
            } => {
                e.u64(*request_id).u64(step.0).u32(len_u32(entries.len()));
                for &(o, l) in entries {
                    e.u64(o).u64(l);
                }
                REQUEST_LOG_PUBLISH
            }
            DataMessage::BufferRelease { step, slot } => {
                e.u64(step.0).u32(*slot);
                BUFFER_RELEASE
            }
        };
        Frame {
            msg_type,
            flags: 0,
            payload: e.finish(),
        }
    }

    pub fn from_frame(frame: &Frame) -> Result<Self> {
        use msg_type::*;
        let mut d = Decoder::new(&frame.payload);
        let m = match frame.msg_type {
            DATA_HELLO => DataMessage::Hello {
                stream: StreamId(d.raw(16)?.try_into().unwrap()),
                reader: ReaderId(d.u32()?),
                reader_rank: d.u32()?,
            },
            READ_REQUEST => DataMessage::ReadRequest {
                request_id: d.u64()?,
                step: StepId(d.u64()?),
                offset: d.u64()?,
                length: d.u64()?,
            },
            REQUEST_RESPONSE => DataMessage::RequestResponse {
                request_id: d.u64()?,
                status: ResponseStatus::from_u8(d.u8()?)?,
                data: d.rest().to_vec(),
            },
            PRELOAD_DATA => DataMessage::PreloadData {
                step: StepId(d.u64()?),
                pattern: d.u32()?,
                data: d.rest().to_vec(),
            },
            REQUEST_LOG_PUBLISH => {
                let request_id = d.u64()?;
                let step = StepId(d.u64()?);
                let n = d.count(16)?;
                let entries = (0..n).map(|_| Ok((d.u64()?, d.u64()?))).collect::<Result<_>>()?;
                DataMessage::RequestLogPublish {
                    request_id,
                    step,
                    entries,
                }
            }
            BUFFER_RELEASE => DataMessage::BufferRelease {
                step: StepId(d.u64()?),
                slot: d.u32()?,
            },
            other => return Err(Error::Protocol(format!("unknown data message type {other:#06x}"))),
        };
        d.finish()?;
        Ok(m)
    }
}

pub const CONTACT_PREFIX: &str = "SSTG1:";
pub const CONTACT_VERSION: u16 = 1;

/// How a reader reaches writer rank 0 of a stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContactRecord {
    pub version: u16,
    pub stream: StreamId,
    pub host: String,
    pub port: u16,
}

impl ContactRecord {
    pub fn new(stream: StreamId, host: impl Into<String>, port: u16) -> Self {
        ContactRecord {
            version: CONTACT_VERSION,
            stream,
            host: host.into(),
            port,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        let host = self.host.as_bytes();
        e.u16(self.version)
            .raw(&self.stream.0)
            .u16(u16::try_from(host.len()).expect("host name too long"))
            .raw(host)
            .u16(self.port);
        e.finish()
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        let mut d = Decoder::new(b);
        let version = d.u16()?;
        if version != CONTACT_VERSION {
            return Err(Error::Decode(format!("unsupported contact version {version}")));
        }
        let stream = StreamId(d.raw(16)?.try_into().unwrap());
        let n = d.u16()? as usize;
        let host =
            String::from_utf8(d.raw(n)?.to_vec()).map_err(|_| Error::Decode("contact host is not utf-8".into()))?;
        let port = d.u16()?;
        d.finish()?;
        Ok(ContactRecord {
            version,
            stream,
            host,
            port,
        })
    }

    pub fn to_text(&self) -> String {
        format!(
            "{CONTACT_PREFIX}{}",
            base64::engine::general_purpose::STANDARD.encode(self.to_bytes())
        )
    }

    pub fn from_text(s: &str) -> Result<Self> {
        let body = s
            .trim()
            .strip_prefix(CONTACT_PREFIX)
            .ok_or_else(|| Error::Decode(format!("contact string lacks {CONTACT_PREFIX} prefix")))?;
        let raw = base64::engine::general_purpose::STANDARD
            .decode(body)
            .map_err(|e| Error::Decode(format!("contact base64: {e}")))?;
        Self::from_bytes(&raw)
    }

    pub fn address(&self) -> String {
        format!("{}:{}", self.host, self.port)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SID: StreamId = StreamId([0x11; 16]);

    #[test]
    fn frame_layout() {
        let f = Frame {
            msg_type: 0x0102,
            flags: 0x0003,
            payload: vec![0xAA, 0xBB],
        };
        assert_eq!(f.encode(), vec![2, 0, 0, 0, 0x02, 0x01, 0x03, 0x00, 0xAA, 0xBB]);
        let mut r = &f.encode()[..];
        assert_eq!(Frame::read_from(&mut r).unwrap(), Some(f));
        assert_eq!(Frame::read_from(&mut r).unwrap(), None);
    }

    #[test]
    fn truncated_frame_is_an_error() {
        let f = Frame {
            msg_type: 1,
            flags: 0,
            payload: vec![1, 2, 3],
        }
        .encode();
        assert!(Frame::read_from(&mut &f[..5]).is_err());
        assert!(Frame::read_from(&mut &f[..9]).is_err());
    }

    #[test]
    fn release_step_golden() {
        let env = ControlEnvelope {
            stream: SID,
            sender: 2,
            message: ControlMessage::ReleaseStep {
                step: StepId(5),
                reader: ReaderId(2),
                selections_locked: true,
            },
        };
        let mut expected = vec![32, 0, 0, 0, 0x05, 0x00, 0x01, 0x00];
        expected.extend_from_slice(&[0x11; 16]);
        expected.extend_from_slice(&[2, 0, 0, 0]);
        expected.extend_from_slice(&[5, 0, 0, 0, 0, 0, 0, 0]);
        expected.extend_from_slice(&[2, 0, 0, 0]);
        assert_eq!(env.to_frame().encode(), expected);
        assert_eq!(ControlEnvelope::from_frame(&env.to_frame()).unwrap(), env);
    }

    #[test]
    fn unknown_type_and_trailing_bytes_rejected() {
        let mut f = ControlEnvelope {
            stream: SID,
            sender: SENDER_WRITER,
            message: ControlMessage::EndOfStream,
        }
        .to_frame();
        f.payload.push(0);
        assert!(ControlEnvelope::from_frame(&f).is_err());
        f.payload.pop();
        f.msg_type = 0x00FF;
        assert!(matches!(ControlEnvelope::from_frame(&f), Err(Error::Protocol(_))));
        f.msg_type = 0x0107;
        assert!(DataMessage::from_frame(&f).is_err());
    }

    #[test]
    fn contact_text_roundtrip_and_prefix() {
        let c = ContactRecord::new(SID, "127.0.0.1", 4242);
        let t = c.to_text();
        assert!(t.starts_with("SSTG1:"));
        assert_eq!(ContactRecord::from_text(&t).unwrap(), c);
        assert_eq!(ContactRecord::from_text(&format!("  {t}\n")).unwrap(), c);
        assert!(ContactRecord::from_text("SSTG2:AAAA").is_err());
        assert!(ContactRecord::from_text("SSTG1:!!!").is_err());
        assert_eq!(c.address(), "127.0.0.1:4242");
    }
}
