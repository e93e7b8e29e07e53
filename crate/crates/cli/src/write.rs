use std::thread;
use std::time::Instant;

use stepstage::control_plane::{StepOutcome, WriterOptions};
use stepstage::engine::WriterEngine;
use stepstage::workload;

use crate::ranks::run_ranks;
use crate::{Exit, WriteArgs};

#[derive(Debug, Default)]
struct Tally {
    accepted: u64,
    discarded: u64,
}

pub fn run(args: &WriteArgs) -> Exit {
    let params = match args.common.engine_params() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("stepstage write: {e}");
            return Exit::Usage;
        }
    };
    let a = args.clone();
    let results = run_ranks(args.ranks, move |comm| {
        let size = comm.size();
        let opts = WriterOptions::new(&a.common.stream, a.sink());
        let mut w = WriterEngine::open(comm, params.clone(), opts)?;
        let pre = a.common.prefix();
        let def = workload::variable(&a.common.var, &a.shape);
        let tiles = a.decomposition.tiles(&a.shape, size).swap_remove(w.rank());
        let mut tally = Tally::default();
        for step in 0..a.steps {
            let t0 = Instant::now();
            w.begin_step()?;
            for t in &tiles {
                w.put(
                    &def,
                    t,
                    &workload::fill(a.common.seed, step, &a.common.var, &a.shape, t),
                )?;
            }
            let status = w.end_step()?;
            let ms = t0.elapsed().as_secs_f64() * 1e3;
            let outcome = match status.outcome {
                StepOutcome::Accepted => {
                    tally.accepted += 1;
                    "accepted"
                }
                StepOutcome::Discarded => {
                    tally.discarded += 1;
                    "discarded"
                }
            };
            if w.rank() == 0 {
                println!("{pre}step {} {outcome} in {ms:.3} ms", status.step);
            }
            if !a.step_delay.is_zero() {
                thread::sleep(a.step_delay);
            }
        }
        w.close()?;
        if w.rank() == 0 {
            println!(
                "{pre}writer: {} accepted, {} discarded of {} steps",
                tally.accepted, tally.discarded, a.steps
            );
        }
        Ok(tally)
    });
    let mut exit = Exit::Ok;
    for (rank, r) in results.into_iter().enumerate() {
        if let Err(e) = r {
            eprintln!("{}writer rank {rank}: {e}", args.common.prefix());
            exit = Exit::Protocol;
        }
    }
    exit
}
