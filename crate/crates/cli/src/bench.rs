//! Loopback benchmark: an in-process writer cohort feeds an in-process
//! reader cohort; each reader step is timed from begin_step to end_step.

use std::sync::Arc;
use std::thread;
use std::time::Instant;

use stepstage::bench::{csv_row, fit_overhead, CSV_HEADER};
use stepstage::control_plane::{BeginStatus, ContactSink, ContactSource, ReaderOptions, WriterOptions};
use stepstage::engine::{ReaderEngine, WriterEngine};
use stepstage::model::{EngineParams, GlobalDims};
use stepstage::workload::{self, Decomposition, ELEMENT_SIZE};
use stepstage::{Error, Result};

use crate::ranks::run_ranks;
use crate::{BenchArgs, Exit};

const STREAM: &str = "bench";
const VAR: &str = "payload";
const SEED: u64 = 7;

fn shape_for(bytes: u64) -> Option<GlobalDims> {
    let n = bytes / u64::from(ELEMENT_SIZE);
    (n > 0).then(|| GlobalDims::new(vec![n]).unwrap())
}

/// Per reader rank: (step, bytes, seconds, verified).
type ReaderLog = Vec<(u64, u64, f64, bool)>;

pub fn run(args: &BenchArgs) -> Exit {
    let params = match EngineParams::from_pairs(args.params.iter().map(String::as_str)) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("stepstage bench: {e}");
            return Exit::Usage;
        }
    };
    if crate::ranks::process_mode() {
        eprintln!("stepstage bench: runs in-process only; unset STAGE_RANK");
        return Exit::Usage;
    }
    let dir = match tempfile::tempdir() {
        Ok(d) => d,
        Err(e) => {
            eprintln!("stepstage bench: {e}");
            return Exit::Protocol;
        }
    };
    let schedule: Arc<Vec<u64>> = Arc::new(
        args.sizes
            .iter()
            .flat_map(|&s| std::iter::repeat_n(s, args.repeat as usize))
            .collect(),
    );

    let (wp, wdir, ws, wranks) = (
        params.clone(),
        dir.path().to_path_buf(),
        schedule.clone(),
        args.writer_ranks,
    );
    let writer = thread::spawn(move || {
        run_ranks(wranks, move |comm| {
            let size = comm.size();
            let mut w = WriterEngine::open(
                comm,
                wp.clone(),
                WriterOptions::new(STREAM, ContactSink::Dir(wdir.clone())),
            )?;
            for (step, &bytes) in ws.iter().enumerate() {
                w.begin_step()?;
                if let Some(shape) = shape_for(bytes) {
                    let def = workload::variable(VAR, &shape);
                    for t in &Decomposition::Striped.tiles(&shape, size)[w.rank()] {
                        w.put(&def, t, &workload::fill(SEED, step as u64, VAR, &shape, t))?;
                    }
                }
                w.end_step()?;
            }
            w.close()
        })
    });

    let (rdir, rranks) = (dir.path().to_path_buf(), args.reader_ranks);
    let readers = run_ranks(rranks, move |comm| -> Result<ReaderLog> {
        let size = comm.size();
        let mut r = ReaderEngine::open(
            comm,
            params.clone(),
            ReaderOptions::new(STREAM, ContactSource::Dir(rdir.clone())),
        )?;
        let mut log = Vec::new();
        loop {
            let t0 = Instant::now();
            let step = match r.begin_step(None)? {
                BeginStatus::Step(s) => s.0,
                BeginStatus::EndOfStream => break,
                BeginStatus::NotReady => continue,
            };
            let mut pending = Vec::new();
            if let Some(shape) = r.inquire_variable(VAR).map(|v| v.def.shape.clone()) {
                for sel in Decomposition::Striped.tiles(&shape, size).swap_remove(r.rank()) {
                    pending.push((r.get_deferred(VAR, &sel)?, sel, shape.clone()));
                }
            }
            r.perform_gets()?;
            let got = pending
                .into_iter()
                .map(|(id, sel, shape)| r.take(id).map(|b| (b, sel, shape)))
                .collect::<Result<Vec<_>>>()?;
            r.end_step()?;
            let secs = t0.elapsed().as_secs_f64();
            let bytes = got.iter().map(|g| g.0.len() as u64).sum();
            let ok = got
                .iter()
                .all(|(b, sel, shape)| *b == workload::fill(SEED, step, VAR, shape, sel));
            log.push((step, bytes, secs, ok));
        }
        r.close()?;
        Ok(log)
    });
    let writer = writer
        .join()
        .unwrap_or_else(|_| vec![Err(Error::CohortFailed("writer panicked".into()))]);

    let mut exit = Exit::Ok;
    for e in writer.iter().filter_map(|r| r.as_ref().err()) {
        eprintln!("stepstage bench: writer: {e}");
        exit = Exit::Protocol;
    }
    let mut logs = Vec::new();
    for r in readers {
        match r {
            Ok(l) => logs.push(l),
            Err(e) => {
                eprintln!("stepstage bench: reader: {e}");
                exit = Exit::Protocol;
            }
        }
    }
    if exit != Exit::Ok {
        return exit;
    }

    // one row per step: bytes summed over reader ranks, slowest rank's time
    println!("{CSV_HEADER}");
    let mut points = Vec::new();
    for step in 0..schedule.len() {
        let rows: Vec<_> = logs
            .iter()
            .filter_map(|l| l.iter().find(|r| r.0 == step as u64))
            .collect();
        if rows.len() != logs.len() {
            eprintln!("stepstage bench: step {step} missing on some reader ranks");
            return Exit::Protocol;
        }
        let bytes: u64 = rows.iter().map(|r| r.1).sum();
        let secs = rows.iter().map(|r| r.2).fold(0.0, f64::max);
        if rows.iter().any(|r| !r.3) {
            eprintln!("stepstage bench: step {step} payload mismatch");
            exit = Exit::Verify;
        }
        println!("{}", csv_row(step as u64, bytes, secs));
        points.push((bytes as f64 / 1e9, secs));
    }
    if args.fit {
        match fit_overhead(&points) {
            Ok(f) => eprintln!(
                "fit: 1/throughput = {:.6} s/GB, overhead = {:.6} s, throughput = {:.3} GB/s",
                f.inverse_throughput,
                f.overhead,
                f.throughput()
            ),
            Err(e) => {
                eprintln!("stepstage bench: {e}");
                exit = exit.max(Exit::Usage);
            }
        }
    }
    exit
}
