//! Train FULL, NO_CONTEXT and GIST_POOL (xi = 1) on key-value recall and compare.
//! Training contexts hold 2 to 16 pairs; evaluation always uses 16.
//!
//! `cargo run --release --example recall_compare -- [steps] [seeds]`

use std::time::Instant;

use gistlab::compress::{CompressionConfig, Method};
use gistlab::recall::*;

fn main() -> gistlab::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(1500);
    let seeds: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(1);
    let task = RecallTask::default();
    let data = gen_recall(&task, 0)?;
    let specs: Vec<RunSpec> = [Method::Full, Method::NoContext, Method::GistPool]
        .into_iter()
        .map(|m| {
            let mut c = CompressionConfig::new(m, 1);
            // from scratch, the compression weights train at the base rate
            c.compression_lr_multiplier = 1.0;
            RunSpec {
                steps,
                lr: 2e-3,
                cosine_decay: true,
                ..RunSpec::new(2, 64, c)
            }
        })
        .collect();
    let t = Instant::now();
    let records = train_compare::<f32>(&specs, &data, &(0..seeds).collect::<Vec<_>>())?;
    print!("{}", records_jsonl(&records)?);
    print!("{}", summary_csv(&summarize(&records))?);
    println!("chance {:.4}, {:.0}s", task.chance(), t.elapsed().as_secs_f64());
    Ok(())
}
