//! Print every mask family on one small layout, plus the GistPool knob ablations that change it.
//!
//! `cargo run --example mask_gallery -- [n_ctx] [xi]`

use gistlab::masks::*;

fn show(title: &str, l: &SequenceLayout, m: &AttentionMask) {
    let roles: String = l
        .roles()
        .iter()
        .map(|r| match r {
            Role::Bos => 'B',
            Role::Context => 'c',
            Role::Gist => 'g',
            Role::Query => 'q',
            Role::Answer => 'a',
        })
        .collect();
    println!("{title}\n  {roles}");
    for (r, line) in roles.chars().zip(m.to_text().lines()) {
        println!("{r} {}", line.replace('0', ".").replace('1', "#"));
    }
    println!();
}

fn main() -> gistlab::Result<()> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(6);
    let xi: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(2);

    let plain = SequenceLayout::plain(n, 1, 1);
    show("causal", &plain, &build_causal(&plain));
    let app = SequenceLayout::appended(n, xi, 1, 1)?;
    show("gist (appended)", &app, &build_gist_mask(&app)?);
    show("pool (appended)", &app, &build_pool_mask(&app)?);
    let mixed = SequenceLayout::interspersed(n, xi, 1, 1)?;
    show("gist-pool, default knobs", &mixed, &build_gistpool_mask(&mixed, &GistPoolKnobs::default())?);

    let base = build_gistpool_mask(&mixed, &GistPoolKnobs::default())?;
    let mut shown = 0;
    for k in GistPoolKnobs::ablation_grid() {
        let m = build_gistpool_mask(&mixed, &k)?;
        if m != base && shown < 3 {
            show(&format!("gist-pool, {k:?}"), &mixed, &m);
            shown += 1;
        }
    }
    Ok(())
}
