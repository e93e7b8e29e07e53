#![allow(dead_code)]

use std::path::Path;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use stepstage::cohort::{local_cohort, Comm};
use stepstage::control_plane::{BeginStatus, ContactSink, ContactSource, ReaderOptions, WriterOptions};
use stepstage::engine::{ReaderEngine, WriterEngine};
use stepstage::model::{BlockExtent, EngineParams, GlobalDims};
use stepstage::workload::{self, Decomposition};

pub const SEED: u64 = 42;

pub fn params(pairs: &[&str]) -> EngineParams {
    EngineParams::from_pairs(pairs.iter().copied()).unwrap()
}

/// Runs `f` once per rank of a fresh in-process cohort and joins them.
pub fn cohort<T: Send + 'static>(size: usize, f: impl Fn(Comm) -> T + Send + Sync + 'static) -> JoinHandle<Vec<T>> {
    let f = std::sync::Arc::new(f);
    thread::spawn(move || {
        let hs: Vec<_> = local_cohort(size)
            .into_iter()
            .map(|c| {
                let f = f.clone();
                thread::spawn(move || f(c))
            })
            .collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    })
}

pub fn open_writer(comm: Comm, p: EngineParams, dir: &Path, name: &str) -> WriterEngine {
    WriterEngine::open(comm, p, WriterOptions::new(name, ContactSink::Dir(dir.into()))).unwrap()
}

pub fn open_reader(comm: Comm, p: EngineParams, dir: &Path, name: &str) -> ReaderEngine {
    ReaderEngine::open(comm, p, ReaderOptions::new(name, ContactSource::Dir(dir.into()))).unwrap()
}

/// Puts this rank's tiles of `var` for `step`.
pub fn put_tiles(w: &mut WriterEngine, shape: &GlobalDims, decomp: Decomposition, ranks: usize, step: u64, var: &str) {
    let def = workload::variable(var, shape);
    for t in &decomp.tiles(shape, ranks)[w.rank()] {
        w.put(&def, t, &workload::fill(SEED, step, var, shape, t)).unwrap();
    }
}

/// Reads `sel` of `var` and compares against the generator.
pub fn check_get(r: &mut ReaderEngine, step: u64, var: &str, sel: &BlockExtent) {
    let shape = r.inquire_variable(var).unwrap().def.shape.clone();
    let got = r.get(var, sel).unwrap();
    assert_eq!(
        got,
        workload::fill(SEED, step, var, &shape, sel),
        "step {step} {var} {sel:?}"
    );
}

pub fn next_step(r: &mut ReaderEngine) -> Option<u64> {
    match r.begin_step(Some(Duration::from_secs(30))).unwrap() {
        BeginStatus::Step(s) => Some(s.0),
        BeginStatus::EndOfStream => None,
        BeginStatus::NotReady => panic!("no step within 30 s"),
    }
}
