use std::thread;
use std::time::Instant;

use stepstage::control_plane::{BeginStatus, ReaderOptions};
use stepstage::engine::ReaderEngine;
use stepstage::model::BlockExtent;
use stepstage::workload::{self, Decomposition};

use crate::ranks::run_ranks;
use crate::{Exit, ReadArgs};

#[derive(Debug, Default)]
struct Tally {
    steps: u64,
    verified: u64,
    failed: u64,
    not_ready: u64,
}

pub fn run(args: &ReadArgs) -> Exit {
    let params = match args.common.engine_params() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("stepstage read: {e}");
            return Exit::Usage;
        }
    };
    let a = args.clone();
    let results = run_ranks(args.ranks, move |comm| {
        let size = comm.size();
        let opts = ReaderOptions::new(&a.common.stream, a.source());
        let mut r = ReaderEngine::open(comm, params.clone(), opts)?;
        let rank = r.rank();
        let pre = a.common.prefix();
        let var = a.common.var.as_str();
        let mut tally = Tally::default();
        loop {
            let t0 = Instant::now();
            let step = match r.begin_step(a.begin_step_timeout)? {
                BeginStatus::Step(s) => s,
                BeginStatus::NotReady => {
                    tally.not_ready += 1;
                    continue;
                }
                BeginStatus::EndOfStream => break,
            };
            tally.steps += 1;
            let Some(shape) = r.inquire_variable(var).map(|v| v.def.shape.clone()) else {
                println!("{pre}step {step} rank {rank}: variable {var} missing");
                tally.failed += 1;
                r.end_step()?;
                continue;
            };
            let sels: Vec<BlockExtent> = if a.selections.is_empty() {
                Decomposition::Striped.tiles(&shape, size).swap_remove(rank)
            } else {
                a.selections.clone()
            };
            let ids = sels
                .iter()
                .map(|s| r.get_deferred(var, s))
                .collect::<Result<Vec<_>, _>>()?;
            r.perform_gets()?;
            let mut bytes = 0;
            let mut bad = 0;
            for (id, sel) in ids.into_iter().zip(&sels) {
                let got = r.take(id)?;
                bytes += got.len();
                if got != workload::fill(a.common.seed, step.0, var, &shape, sel) {
                    bad += 1;
                }
            }
            if !a.sleep.is_zero() {
                thread::sleep(a.sleep);
            }
            r.end_step()?;
            let ms = t0.elapsed().as_secs_f64() * 1e3;
            if bad == 0 {
                tally.verified += 1;
                println!("{pre}step {step} rank {rank}: {bytes} bytes verified in {ms:.3} ms");
            } else {
                tally.failed += 1;
                println!(
                    "{pre}step {step} rank {rank}: {bad} of {} selections MISMATCH",
                    sels.len()
                );
            }
        }
        r.close()?;
        println!(
            "{pre}reader rank {rank}: {} steps, {} verified, {} failed, {} not ready",
            tally.steps, tally.verified, tally.failed, tally.not_ready
        );
        Ok(tally)
    });
    let mut exit = Exit::Ok;
    for (rank, r) in results.into_iter().enumerate() {
        match r {
            Ok(t) if t.failed > 0 => exit = exit.max(Exit::Verify),
            Ok(_) => {}
            Err(e) => {
                eprintln!("{}reader rank {rank}: {e}", args.common.prefix());
                exit = exit.max(Exit::Protocol);
            }
        }
    }
    exit
}
