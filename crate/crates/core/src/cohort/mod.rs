//! Emulated parallel cohorts: rank numbering plus the three collectives the
//! control plane relies on (broadcast from rank 0, gather to rank 0,
//! barrier).
//!
//! Ranks live either as threads of one process ([`local_cohort`]) or as
//! separate processes joined over loopback sockets ([`CohortListener`],
//! [`Comm::connect`], [`Comm::from_env`]). The collective API is the same
//! in both modes. Every rank must issue the same sequence of collectives;
//! a rank that exits, or calls a different collective, makes the pending
//! collective fail with [`Error::CohortFailed`] on the surviving ranks.

mod local;
mod socket;

use std::net::SocketAddr;
use std::time::Duration;

pub use socket::CohortListener;

use crate::error::{Error, Result};

/// Environment variable carrying this process's rank.
pub const ENV_RANK: &str = "STAGE_RANK";
/// Environment variable carrying the rank-0 rendezvous address.
pub const ENV_COHORT_ADDR: &str = "STAGE_COHORT_ADDR";
/// Environment variable carrying the cohort size.
pub const ENV_COHORT_SIZE: &str = "STAGE_COHORT_SIZE";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum OpKind {
    Broadcast = 1,
    Gather = 2,
    Barrier = 3,
}

impl OpKind {
    fn from_u8(v: u8) -> Option<OpKind> {
        match v {
            1 => Some(OpKind::Broadcast),
            2 => Some(OpKind::Gather),
            3 => Some(OpKind::Barrier),
            _ => None,
        }
    }
}

enum Backend {
    Local(local::LocalRank),
    Socket(socket::SocketRank),
}

/// Per-rank handle onto a cohort. Not shareable between ranks.
pub struct Comm {
    rank: usize,
    size: usize,
    seq: u64,
    backend: Backend,
}

/// Creates `size` in-process ranks; hand one to each thread.
pub fn local_cohort(size: usize) -> Vec<Comm> {
    assert!(size >= 1, "cohort needs at least one rank");
    local::create(size)
        .into_iter()
        .enumerate()
        .map(|(rank, r)| Comm {
            rank,
            size,
            seq: 0,
            backend: Backend::Local(r),
        })
        .collect()
}

impl Comm {
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn is_root(&self) -> bool {
        self.rank == 0
    }

    /// Joins a socket cohort whose rank 0 listens at `addr`.
    pub fn connect(addr: SocketAddr, rank: usize, size: usize, timeout: Duration) -> Result<Comm> {
        if rank == 0 || rank >= size {
            return Err(Error::InvalidParam(format!(
                "rank {rank} cannot connect to a cohort of {size}"
            )));
        }
        let r = socket::SocketRank::connect(addr, rank, timeout)?;
        Ok(Comm {
            rank,
            size,
            seq: 0,
            backend: Backend::Socket(r),
        })
    }

    /// Builds this process's rank from `STAGE_RANK`, `STAGE_COHORT_ADDR` and
    /// `STAGE_COHORT_SIZE`. Rank 0 binds the address and waits for the others.
    pub fn from_env(timeout: Duration) -> Result<Comm> {
        let var = |k: &str| std::env::var(k).map_err(|_| Error::InvalidParam(format!("{k} is not set")));
        let rank: usize = var(ENV_RANK)?
            .parse()
            .map_err(|_| Error::InvalidParam(format!("{ENV_RANK} is not an integer")))?;
        let size: usize = var(ENV_COHORT_SIZE)?
            .parse()
            .map_err(|_| Error::InvalidParam(format!("{ENV_COHORT_SIZE} is not an integer")))?;
        let addr: SocketAddr = var(ENV_COHORT_ADDR)?
            .parse()
            .map_err(|_| Error::InvalidParam(format!("{ENV_COHORT_ADDR} is not a socket address")))?;
        if rank == 0 {
            CohortListener::bind(addr)?.accept(size, timeout)
        } else {
            Comm::connect(addr, rank, size, timeout)
        }
    }

    fn from_socket_root(r: socket::SocketRank, size: usize) -> Comm {
        Comm {
            rank: 0,
            size,
            seq: 0,
            backend: Backend::Socket(r),
        }
    }

    fn collective(&mut self, kind: OpKind, payload: Vec<u8>) -> Result<Option<Vec<Vec<u8>>>> {
        let seq = self.seq;
        self.seq += 1;
        match &mut self.backend {
            Backend::Local(r) => r.collective(seq, kind, payload),
            Backend::Socket(r) => r.collective(seq, kind, payload),
        }
    }

    /// Every rank returns rank 0's payload. Non-root ranks pass `None`.
    pub fn broadcast_from_root(&mut self, payload: Option<Vec<u8>>) -> Result<Vec<u8>> {
        if self.is_root() != payload.is_some() {
            return Err(Error::CohortFailed("only the root supplies a broadcast payload".into()));
        }
        let out = self.collective(OpKind::Broadcast, payload.unwrap_or_default())?;
        out.and_then(|mut v| v.pop())
            .ok_or_else(|| Error::CohortFailed("broadcast produced no payload".into()))
    }

    /// Rank 0 receives every rank's payload in rank order; others get `None`.
    pub fn gather_to_root(&mut self, payload: Vec<u8>) -> Result<Option<Vec<Vec<u8>>>> {
        self.collective(OpKind::Gather, payload)
    }

    pub fn barrier(&mut self) -> Result<()> {
        self.collective(OpKind::Barrier, Vec::new()).map(|_| ())
    }
}

/// Result of a completed collective for one rank.
fn collective_result(kind: OpKind, rank: usize, contributions: &[Vec<u8>]) -> Option<Vec<Vec<u8>>> {
    match kind {
        OpKind::Broadcast => Some(vec![contributions[0].clone()]),
        OpKind::Gather if rank == 0 => Some(contributions.to_vec()),
        OpKind::Gather | OpKind::Barrier => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::{Arc, Mutex};
    use std::thread;
    use std::time::Instant;

    fn run<T: Send + 'static>(comms: Vec<Comm>, f: impl Fn(Comm) -> T + Send + Sync + 'static) -> Vec<T> {
        let f = Arc::new(f);
        let handles: Vec<_> = comms
            .into_iter()
            .map(|c| {
                let f = f.clone();
                thread::spawn(move || f(c))
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    }

    fn socket_cohort(size: usize) -> Vec<Comm> {
        let listener = CohortListener::bind("127.0.0.1:0".parse().unwrap()).unwrap();
        let addr = listener.local_addr();
        let joiners: Vec<_> = (1..size)
            .map(|r| thread::spawn(move || Comm::connect(addr, r, size, Duration::from_secs(5)).unwrap()))
            .collect();
        let mut comms = vec![listener.accept(size, Duration::from_secs(5)).unwrap()];
        comms.extend(joiners.into_iter().map(|h| h.join().unwrap()));
        comms
    }

    fn both_modes(size: usize) -> Vec<Vec<Comm>> {
        vec![local_cohort(size), socket_cohort(size)]
    }

    #[test]
    fn broadcast_size_one_is_identity() {
        for mut comms in both_modes(1) {
            let mut c = comms.pop().unwrap();
            assert_eq!(c.broadcast_from_root(Some(b"self".to_vec())).unwrap(), b"self");
            assert_eq!(c.gather_to_root(b"a".to_vec()).unwrap(), Some(vec![b"a".to_vec()]));
            c.barrier().unwrap();
        }
    }

    #[test]
    fn broadcast_reaches_all_ranks() {
        for comms in both_modes(4) {
            let got = run(comms, |mut c| {
                let p = c.is_root().then(|| b"blob-B".to_vec());
                c.broadcast_from_root(p).unwrap()
            });
            assert!(got.iter().all(|g| g == b"blob-B"));
        }
    }

    #[test]
    fn gather_is_rank_ordered_regardless_of_arrival() {
        for comms in both_modes(3) {
            let got = run(comms, |mut c| {
                // later ranks arrive first
                thread::sleep(Duration::from_millis(30 * (3 - c.rank() as u64)));
                let payload = vec![b'a' + c.rank() as u8];
                c.gather_to_root(payload).unwrap()
            });
            assert_eq!(got[0], Some(vec![b"a".to_vec(), b"b".to_vec(), b"c".to_vec()]));
            assert!(got[1].is_none() && got[2].is_none());
        }
    }

    #[test]
    fn barrier_orders_entry_before_exit() {
        for comms in both_modes(8) {
            let base = Instant::now();
            let times = run(comms, move |mut c| {
                thread::sleep(Duration::from_millis((c.rank() as u64 * 7919) % 40));
                let enter = base.elapsed();
                c.barrier().unwrap();
                (enter, base.elapsed())
            });
            let max_enter = times.iter().map(|t| t.0).max().unwrap();
            let min_exit = times.iter().map(|t| t.1).min().unwrap();
            assert!(max_enter <= min_exit);
        }
    }

    #[test]
    fn repeated_barriers_are_generation_safe() {
        for comms in both_modes(5) {
            let counter = Arc::new(Mutex::new(vec![0usize; 50]));
            let c2 = counter.clone();
            run(comms, move |mut c| {
                for k in 0..50 {
                    c2.lock().unwrap()[k] += 1;
                    c.barrier().unwrap();
                    // every rank has entered barrier k
                    assert_eq!(c2.lock().unwrap()[k], 5);
                }
            });
            assert!(counter.lock().unwrap().iter().all(|&n| n == 5));
        }
    }

    #[test]
    fn exited_rank_fails_the_collective() {
        for mut comms in both_modes(4) {
            let dead = comms.pop().unwrap();
            drop(dead);
            let got = run(comms, |mut c| {
                let p = c.is_root().then(|| b"x".to_vec());
                c.broadcast_from_root(p)
            });
            for g in got {
                assert!(matches!(g, Err(Error::CohortFailed(_))), "got {g:?}");
            }
        }
    }

    #[test]
    fn mismatched_participation_fails() {
        for comms in both_modes(3) {
            let got = run(comms, |mut c| {
                if c.rank() == 2 {
                    c.barrier().map(|_| None)
                } else {
                    c.gather_to_root(vec![1])
                }
            });
            for g in got {
                assert!(matches!(g, Err(Error::CohortFailed(_))), "got {g:?}");
            }
        }
    }
}
