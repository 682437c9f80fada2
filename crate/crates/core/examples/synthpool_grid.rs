//! A small pooling grid at toy width: pool vs standard mask, fixed vs variable length.
//! Writes the grid table to stdout.
//!
//! `cargo run --release --example synthpool_grid -- [steps]`

use std::time::Instant;

use gistlab::synthpool::*;

fn main() -> gistlab::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let settings = SynthSettings {
        d_model: 16,
        hidden: 32,
        head_total: 16,
        steps,
        batch: 16,
        lrs: vec![1e-3],
        seeds: 1,
        eval_samples: 16,
        ..SynthSettings::default()
    };
    let mut cells = Vec::new();
    for regime in [Regime::Fixed, Regime::Variable] {
        for mask in [SynthMask::Pool, SynthMask::Standard] {
            cells.push(SynthCell {
                n: 32,
                xi: 4,
                source: Source::Hypersphere,
                regime,
                mask,
                heads: HeadSplit { n_heads: 1, n_kv_heads: 1 },
                gist_positions: GistPositions::Sequential,
            });
        }
    }
    let t = Instant::now();
    let results = run_grid::<f32>(&cells, &settings, 0);
    print!("{}", String::from_utf8_lossy(&grid_csv(&results)?));
    eprintln!("{} cells in {:.1}s", cells.len(), t.elapsed().as_secs_f64());
    Ok(())
}
