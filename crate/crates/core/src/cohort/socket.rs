//! Star-topology socket collectives. Every non-root rank holds one stream to
//! rank 0; each collective is one request frame per rank followed by one
//! reply frame from rank 0.
//!
//! request: `u8 kind | u64 seq | u32 len | payload`
//! reply:   `u8 status (0 ok, 1 failed) | u32 len | payload`

use std::io::{ErrorKind, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::thread;
use std::time::{Duration, Instant};

use super::{collective_result, Comm, OpKind};
use crate::error::{Error, Result};

pub struct CohortListener {
    listener: TcpListener,
    addr: SocketAddr,
}

impl CohortListener {
    pub fn bind(addr: SocketAddr) -> Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        Ok(CohortListener { listener, addr })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Waits for ranks `1..size` to connect and returns rank 0's handle.
    pub fn accept(self, size: usize, timeout: Duration) -> Result<Comm> {
        let deadline = Instant::now() + timeout;
        let mut peers: Vec<Option<TcpStream>> = (0..size).map(|_| None).collect();
        let mut joined = 1;
        self.listener.set_nonblocking(true)?;
        while joined < size {
            match self.listener.accept() {
                Ok((mut s, _)) => {
                    s.set_nonblocking(false)?;
                    s.set_nodelay(true)?;
                    let mut b = [0u8; 4];
                    s.read_exact(&mut b)?;
                    let rank = u32::from_le_bytes(b) as usize;
                    if rank == 0 || rank >= size || peers[rank].is_some() {
                        return Err(Error::CohortFailed(format!("unexpected rank {rank} joined")));
                    }
                    peers[rank] = Some(s);
                    joined += 1;
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => {
                    if Instant::now() >= deadline {
                        return Err(Error::CohortFailed(format!("only {joined} of {size} ranks joined")));
                    }
                    thread::sleep(Duration::from_millis(5));
                }
                Err(e) => return Err(e.into()),
            }
        }
        let rank = SocketRank {
            rank: 0,
            root_peers: peers
                .into_iter()
                .skip(1)
                .map(|p| p.expect("all ranks joined"))
                .collect(),
            to_root: None,
            broken: None,
        };
        Ok(Comm::from_socket_root(rank, size))
    }
}

pub(super) struct SocketRank {
    rank: usize,
    root_peers: Vec<TcpStream>,
    to_root: Option<TcpStream>,
    broken: Option<String>,
}

fn io_fail(e: std::io::Error) -> Error {
    Error::CohortFailed(format!("peer connection: {e}"))
}

impl SocketRank {
    pub(super) fn connect(addr: SocketAddr, rank: usize, timeout: Duration) -> Result<Self> {
        let deadline = Instant::now() + timeout;
        let mut s = loop {
            match TcpStream::connect(addr) {
                Ok(s) => break s,
                Err(e) if Instant::now() < deadline => {
                    log::debug!("cohort connect to {addr} failed ({e}), retrying");
                    thread::sleep(Duration::from_millis(20));
                }
                Err(e) => return Err(Error::CohortFailed(format!("cannot reach rank 0 at {addr}: {e}"))),
            }
        };
        s.set_nodelay(true)?;
        s.write_all(&(rank as u32).to_le_bytes())?;
        Ok(SocketRank {
            rank,
            root_peers: Vec::new(),
            to_root: Some(s),
            broken: None,
        })
    }

    pub(super) fn collective(&mut self, seq: u64, kind: OpKind, payload: Vec<u8>) -> Result<Option<Vec<Vec<u8>>>> {
        if let Some(why) = &self.broken {
            return Err(Error::CohortFailed(why.clone()));
        }
        let r = if self.rank == 0 {
            self.root_collective(seq, kind, payload)
        } else {
            self.leaf_collective(seq, kind, payload)
        };
        if let Err(Error::CohortFailed(why)) = &r {
            self.broken = Some(why.clone());
        }
        r
    }

    fn leaf_collective(&mut self, seq: u64, kind: OpKind, payload: Vec<u8>) -> Result<Option<Vec<Vec<u8>>>> {
        let s = self.to_root.as_mut().expect("leaf has a root stream");
        let mut frame = Vec::with_capacity(13 + payload.len());
        frame.push(kind as u8);
        frame.extend_from_slice(&seq.to_le_bytes());
        frame.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        frame.extend_from_slice(&payload);
        s.write_all(&frame).map_err(io_fail)?;

        let mut head = [0u8; 5];
        s.read_exact(&mut head).map_err(io_fail)?;
        let len = u32::from_le_bytes(head[1..5].try_into().unwrap()) as usize;
        let mut body = vec![0u8; len];
        s.read_exact(&mut body).map_err(io_fail)?;
        if head[0] != 0 {
            return Err(Error::CohortFailed(String::from_utf8_lossy(&body).into_owned()));
        }
        Ok(match kind {
            OpKind::Broadcast => Some(vec![body]),
            _ => None,
        })
    }

    fn read_request(s: &mut TcpStream, seq: u64, kind: OpKind, rank: usize) -> Result<Vec<u8>> {
        let mut head = [0u8; 13];
        s.read_exact(&mut head).map_err(io_fail)?;
        let got_kind = OpKind::from_u8(head[0]);
        let got_seq = u64::from_le_bytes(head[1..9].try_into().unwrap());
        let len = u32::from_le_bytes(head[9..13].try_into().unwrap()) as usize;
        let mut body = vec![0u8; len];
        s.read_exact(&mut body).map_err(io_fail)?;
        if got_kind != Some(kind) || got_seq != seq {
            return Err(Error::CohortFailed(format!(
                "rank {rank} called {got_kind:?}#{got_seq} while rank 0 called {kind:?}#{seq}"
            )));
        }
        Ok(body)
    }

    fn reply(s: &mut TcpStream, status: u8, body: &[u8]) -> std::io::Result<()> {
        let mut frame = Vec::with_capacity(5 + body.len());
        frame.push(status);
        frame.extend_from_slice(&(body.len() as u32).to_le_bytes());
        frame.extend_from_slice(body);
        s.write_all(&frame)
    }

    fn root_collective(&mut self, seq: u64, kind: OpKind, payload: Vec<u8>) -> Result<Option<Vec<Vec<u8>>>> {
        let mut contributions = vec![payload];
        let mut failure = None;
        for (i, s) in self.root_peers.iter_mut().enumerate() {
            match Self::read_request(s, seq, kind, i + 1) {
                Ok(body) => contributions.push(body),
                Err(e) => {
                    failure = Some(e);
                    break;
                }
            }
        }
        if let Some(e) = failure {
            let msg = e.to_string();
            for s in &mut self.root_peers {
                let _ = Self::reply(s, 1, msg.as_bytes());
            }
            return Err(e);
        }
        let reply_body: &[u8] = match kind {
            OpKind::Broadcast => &contributions[0],
            _ => &[],
        };
        for s in &mut self.root_peers {
            Self::reply(s, 0, reply_body).map_err(io_fail)?;
        }
        Ok(collective_result(kind, 0, &contributions))
    }
}
