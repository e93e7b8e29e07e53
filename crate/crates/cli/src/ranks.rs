//! Runs one closure per cohort rank: as threads of this process, or as the
//! single rank described by `STAGE_RANK`/`STAGE_COHORT_ADDR`/`STAGE_COHORT_SIZE`.

use std::sync::Arc;
use std::thread;
use std::time::Duration;

use stepstage::cohort::{local_cohort, Comm, ENV_RANK};
use stepstage::{Error, Result};

const JOIN_TIMEOUT: Duration = Duration::from_secs(60);

pub fn process_mode() -> bool {
    std::env::var_os(ENV_RANK).is_some()
}

/// Results in rank order. In process mode there is exactly one.
pub fn run_ranks<T, F>(ranks: usize, f: F) -> Vec<Result<T>>
where
    T: Send + 'static,
    F: Fn(Comm) -> Result<T> + Send + Sync + 'static,
{
    if process_mode() {
        return vec![Comm::from_env(JOIN_TIMEOUT).and_then(f)];
    }
    let f = Arc::new(f);
    let handles: Vec<_> = local_cohort(ranks.max(1))
        .into_iter()
        .map(|c| {
            let f = f.clone();
            thread::spawn(move || f(c))
        })
        .collect();
    handles
        .into_iter()
        .map(|h| {
            h.join()
                .unwrap_or_else(|_| Err(Error::CohortFailed("rank panicked".into())))
        })
        .collect()
}
