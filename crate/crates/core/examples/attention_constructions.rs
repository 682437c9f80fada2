//! Copy and pool heads built by hand, and the bounded-norm margin curve.
//!
//! `cargo run --release --example attention_constructions`

use std::time::Instant;

use gistlab::constructions::*;

fn main() -> gistlab::Result<()> {
    let pts = spaced_sphere_points(8, 4, Placement::Regular, 0)?;
    let values = random_values(8, 4, 0);
    let f = copy_scale_for_weight(&pts, 0.999)?;
    let o = copy_attention(&pts, &values, &ConstructionMatrices::copy(4, f), 3)?;
    println!(
        "copy d=4 l=8: eps {:.4}, F {f:.3}, target weight {:.6}, identity residual {:.2e}",
        pts.epsilon, o.weights[3], o.identity_residual
    );
    print!("{}", to_csv(&copy_scale_curve(4, &[4, 8, 16, 32, 64], 0.999, 0)?)?);

    let c = spaced_sphere_points(32, 8, Placement::Clustered { xi: 4, eps_same: 0.05 }, 0)?;
    let win = c.windows.clone().unwrap();
    let f = pool_scale(&win);
    let p = pool_attention(&c, &random_values(32, 8, 0), &ConstructionMatrices::pool(8, f, 4), 2)?;
    println!(
        "pool d=8 l=32 xi=4: eps_same {:.4} eps_diff {:.4} F {f:.2}: leak {:.2e}, uniform deviation {:.2e}",
        win.eps_same, win.eps_diff, p.out_of_window_mass, p.in_window_deviation
    );

    let t = Instant::now();
    let curve = attention_gap_curve(&GapCurveOptions::unit(8, 0))?;
    print!("{}", to_csv(&curve)?);
    println!("first l below 5: {:?} ({:.1}s)", first_below(&curve, 5.0), t.elapsed().as_secs_f64());
    Ok(())
}
