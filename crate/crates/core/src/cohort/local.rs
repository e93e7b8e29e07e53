use std::collections::HashMap;
use std::sync::{Arc, Condvar, Mutex};

use super::{collective_result, OpKind};
use crate::error::{Error, Result};

struct Round {
    kind: OpKind,
    contributions: Vec<Option<Vec<u8>>>,
    arrived: usize,
    departed: usize,
    failed: Option<String>,
}

#[derive(Default)]
struct State {
    rounds: HashMap<u64, Round>,
    exited: Vec<bool>,
}

struct Shared {
    size: usize,
    state: Mutex<State>,
    cv: Condvar,
}

pub(super) struct LocalRank {
    rank: usize,
    shared: Arc<Shared>,
}

pub(super) fn create(size: usize) -> Vec<LocalRank> {
    let shared = Arc::new(Shared {
        size,
        state: Mutex::new(State {
            rounds: HashMap::new(),
            exited: vec![false; size],
        }),
        cv: Condvar::new(),
    });
    (0..size)
        .map(|rank| LocalRank {
            rank,
            shared: shared.clone(),
        })
        .collect()
}

impl LocalRank {
    pub(super) fn collective(&mut self, seq: u64, kind: OpKind, payload: Vec<u8>) -> Result<Option<Vec<Vec<u8>>>> {
        let size = self.shared.size;
        let mut st = self.shared.state.lock().unwrap();
        let round = st.rounds.entry(seq).or_insert_with(|| Round {
            kind,
            contributions: vec![None; size],
            arrived: 0,
            departed: 0,
            failed: None,
        });
        if round.kind != kind {
            round.failed = Some(format!(
                "rank {} called {kind:?} while others called {:?}",
                self.rank, round.kind
            ));
        }
        round.contributions[self.rank] = Some(payload);
        round.arrived += 1;
        self.shared.cv.notify_all();

        loop {
            let exited = st.exited.clone();
            let round = st.rounds.get_mut(&seq).expect("round vanished");
            if let Some(why) = &round.failed {
                return Err(Error::CohortFailed(why.clone()));
            }
            if round.arrived == size {
                let contributions: Vec<Vec<u8>> = round
                    .contributions
                    .iter()
                    .map(|c| c.clone().unwrap_or_default())
                    .collect();
                let out = collective_result(kind, self.rank, &contributions);
                round.departed += 1;
                if round.departed == size {
                    st.rounds.remove(&seq);
                }
                return Ok(out);
            }
            if let Some(dead) = (0..size).find(|&r| exited[r] && round.contributions[r].is_none()) {
                let why = format!("rank {dead} exited before joining collective {seq}");
                round.failed = Some(why.clone());
                self.shared.cv.notify_all();
                return Err(Error::CohortFailed(why));
            }
            st = self.shared.cv.wait(st).unwrap();
        }
    }
}

impl Drop for LocalRank {
    fn drop(&mut self) {
        if let Ok(mut st) = self.shared.state.lock() {
            st.exited[self.rank] = true;
        }
        self.shared.cv.notify_all();
    }
}
