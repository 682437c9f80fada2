//! Wall-clock cost of single-layer pooling training steps at a few model widths.
//!
//! `cargo run --release --example synthpool_step_timing -- [steps]`

use std::time::Instant;

use gistlab::synthpool::*;

fn main() {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    for (d, hidden, nh, nkv) in [(128, 512, 8, 4), (64, 256, 1, 1), (32, 128, 1, 1), (32, 128, 8, 4), (16, 64, 1, 1)] {
        for (xi, mask) in [(1, SynthMask::Pool), (8, SynthMask::Pool), (1, SynthMask::Standard), (8, SynthMask::Standard)] {
            let cell = SynthCell {
                n: 128,
                xi,
                source: Source::Hypersphere,
                regime: Regime::Fixed,
                mask,
                heads: HeadSplit { n_heads: nh, n_kv_heads: nkv },
                gist_positions: GistPositions::Sequential,
            };
            let settings = SynthSettings {
                d_model: d,
                hidden,
                head_total: d,
                steps,
                eval_samples: 1,
                ..SynthSettings::default()
            };
            let cfg = SynthConfig { cell, settings };
            let t = Instant::now();
            let (_, rec) = train_layer::<f32>(&cfg, 1e-3, 1).expect("training");
            let ms = t.elapsed().as_secs_f64() * 1e3 / steps as f64;
            println!("d={d:4} h{nh}/{nkv} xi={xi} {mask:<8} {ms:8.1} ms/step  last loss {:.4}", rec.losses.last().unwrap().1);
        }
    }
}
