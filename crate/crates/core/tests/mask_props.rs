// Mask builders over random layouts, plus the export golden file.

use gistlab::expcli::{build_mask, export_mask, MaskKind, MaskRequest};
use gistlab::masks::*;
use proptest::prelude::*;

/// GistPool rule stated directly on roles, without the library's window helpers.
fn enumerate_gistpool(roles: &[Role], xi: usize, k: &GistPoolKnobs) -> Vec<Vec<bool>> {
    let n = roles.len();
    let mut ctx_seen = 0;
    let mut gist_seen = 0;
    let mut window = vec![usize::MAX; n];
    let mut ordinal = vec![usize::MAX; n];
    for (i, r) in roles.iter().enumerate() {
        match r {
            Role::Context => {
                window[i] = ctx_seen / xi;
                ctx_seen += 1;
            }
            Role::Gist => {
                ordinal[i] = gist_seen;
                gist_seen += 1;
            }
            _ => {}
        }
    }
    let lookback = match k.pooling_windows {
        PoolingWindows::Finite(w) => w,
        PoolingWindows::Unbounded => usize::MAX,
    };
    let mut m = vec![vec![false; n]; n];
    for i in 0..n {
        for j in 0..=i {
            m[i][j] = match (roles[i], roles[j]) {
                (Role::Bos, _) => true,
                (Role::Gist, Role::Bos) => k.gists_attend_bos || ordinal[i] < lookback,
                (_, Role::Bos) => true,
                (Role::Context, Role::Context) => true,
                (Role::Context, Role::Gist) => k.contexts_attend_gists,
                (Role::Context, _) => false,
                (Role::Gist, Role::Context) => lookback == usize::MAX || (window[j] <= ordinal[i] && ordinal[i] - window[j] < lookback),
                (Role::Gist, Role::Gist) if i == j => k.gists_attend_self,
                (Role::Gist, Role::Gist) => k.gists_attend_gists,
                (Role::Gist, _) => false,
                (_, Role::Context) => false,
                _ => true,
            };
        }
    }
    m
}

fn to_text(m: &[Vec<bool>]) -> String {
    m.iter()
        .map(|r| r.iter().map(|&b| if b { '1' } else { '0' }).collect::<String>() + "\n")
        .collect()
}

/// `bos_free_gists`: gist rows may drop BOS when the knobs say so.
fn layout_invariants(m: &AttentionMask, l: &SequenceLayout, bos_free_gists: bool) {
    let n = l.len();
    for i in 0..n {
        if !(bos_free_gists && l.role(i) == Role::Gist) {
            assert!(m.get(i, 0), "row {i} must see BOS");
        }
        for j in i + 1..n {
            assert!(!m.get(i, j), "future entry ({i}, {j})");
        }
    }
    assert_eq!(m.allowed_in_row(0), vec![0]);
}

fn bottleneck(m: &AttentionMask, l: &SequenceLayout) {
    for i in l.indices(Role::Query).into_iter().chain(l.indices(Role::Answer)) {
        for j in l.indices(Role::Context) {
            assert!(!m.get(i, j), "prediction row {i} sees context {j}");
        }
    }
}

#[test]
fn golden_gistpool_export() {
    let fixture = include_str!("fixtures/gist-pool_n4_xi2.txt");
    let roles = SequenceLayout::interspersed(4, 2, 1, 1).unwrap().roles().to_vec();
    assert_eq!(to_text(&enumerate_gistpool(&roles, 2, &GistPoolKnobs::default())), fixture);

    let dir = tempfile::tempdir().unwrap();
    let req = MaskRequest {
        mask: MaskKind::GistPool,
        n_ctx: 4,
        xi: 2,
        n_query: 1,
        n_answer: 1,
        layout: None,
        knobs: GistPoolKnobs::default(),
    };
    let files = export_mask(&req, dir.path(), "gp").unwrap();
    let text = std::fs::read_to_string(&files[0]).unwrap();
    assert_eq!(text, fixture);
    let bits = std::fs::read(&files[1]).unwrap();
    assert_eq!(AttentionMask::from_bitset(&bits).unwrap().to_text(), fixture);
    // a second export leaves identical bytes
    let again = export_mask(&req, dir.path(), "gp").unwrap();
    assert_eq!(std::fs::read(&again[1]).unwrap(), bits);
}

#[test]
fn causal_export_of_three_tokens() {
    let (_, m) = build_mask(&MaskRequest {
        mask: MaskKind::Causal,
        n_ctx: 1,
        xi: 1,
        n_query: 1,
        n_answer: 0,
        layout: None,
        knobs: GistPoolKnobs::default(),
    })
    .unwrap();
    assert_eq!(m.count_allowed(), 6);
}

#[test]
fn unbounded_appended_gistpool_degenerates_to_gist_rows() {
    let k = GistPoolKnobs {
        pooling_windows: PoolingWindows::Unbounded,
        contexts_attend_gists: true,
        gists_attend_gists: true,
        gists_attend_self: true,
        gists_attend_bos: true,
    };
    for (n, xi) in [(1, 1), (7, 2), (16, 4), (33, 8)] {
        let l = SequenceLayout::appended(n, xi, 2, 1).unwrap();
        let a = build_gistpool_mask(&l, &k).unwrap();
        let b = build_gist_mask(&l).unwrap();
        for g in l.indices(Role::Gist) {
            assert_eq!(a.allowed_in_row(g), b.allowed_in_row(g));
        }
    }
}

#[test]
fn every_table_knob_row_is_accepted() {
    let grid = GistPoolKnobs::ablation_grid();
    assert_eq!(grid.len(), 40);
    assert!(grid.contains(&GistPoolKnobs::default()));
}

fn layouts() -> impl Strategy<Value = (usize, usize, usize, usize, usize, bool)> {
    (
        1usize..=256,
        prop::sample::select(vec![1usize, 2, 4, 8]),
        0usize..3,
        0usize..3,
        0usize..40,
        any::<bool>(),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn builders_pass_validation((n, xi, nq, na, knob, appended) in layouts()) {
        let knobs = GistPoolKnobs::ablation_grid()[knob];

        let plain = SequenceLayout::plain(n, nq, na);
        let m = build_causal(&plain);
        prop_assert!(validate_mask(&m, &plain, &MaskMethod::Causal).is_empty());
        layout_invariants(&m, &plain, false);

        let app = SequenceLayout::appended(n, xi, nq, na).unwrap();
        let m = build_gist_mask(&app).unwrap();
        prop_assert!(validate_mask(&m, &app, &MaskMethod::Gist).is_empty());
        layout_invariants(&m, &app, false);
        bottleneck(&m, &app);

        let m = build_pool_mask(&app).unwrap();
        let pool = MaskMethod::Pool { gist_self: true };
        prop_assert!(validate_mask(&m, &app, &pool).is_empty());
        layout_invariants(&m, &app, false);
        bottleneck(&m, &app);
        // each context column belongs to exactly one gist row
        let gists = app.indices(Role::Gist);
        for c in app.indices(Role::Context) {
            prop_assert_eq!(gists.iter().filter(|&&g| m.get(g, c)).count(), 1);
        }

        let l = if appended { app.clone() } else { SequenceLayout::interspersed(n, xi, nq, na).unwrap() };
        let m = build_gistpool_mask(&l, &knobs).unwrap();
        prop_assert!(validate_mask(&m, &l, &MaskMethod::GistPool(knobs)).is_empty());
        prop_assert_eq!(m.to_text(), to_text(&enumerate_gistpool(l.roles(), xi, &knobs)));
        layout_invariants(&m, &l, !knobs.gists_attend_bos);
        bottleneck(&m, &l);
    }

    #[test]
    fn windows_partition_the_context(n in 1usize..=256, xi in prop::sample::select(vec![1usize, 2, 4, 8])) {
        let l = SequenceLayout::interspersed(n, xi, 1, 1).unwrap();
        let w = l.gist_windows();
        prop_assert_eq!(w.len(), n.div_ceil(xi));
        prop_assert_eq!(w.len(), l.n_gists());
        let flat: Vec<usize> = w.concat();
        prop_assert_eq!(flat, l.indices(Role::Context));
        for (k, win) in w.iter().enumerate() {
            let want = if k + 1 < w.len() || n % xi == 0 { xi } else { n % xi };
            prop_assert_eq!(win.len(), want);
            // the gist closing window k sits right after its last token
            prop_assert_eq!(l.role(win[win.len() - 1] + 1), Role::Gist);
        }
    }

    #[test]
    fn text_and_bitset_round_trip(n in 1usize..64, xi in 1usize..9) {
        let l = SequenceLayout::interspersed(n, xi, 2, 2).unwrap();
        let m = build_gistpool_mask(&l, &GistPoolKnobs::default()).unwrap();
        prop_assert_eq!(&AttentionMask::from_text(&m.to_text()).unwrap(), &m);
        prop_assert_eq!(&AttentionMask::from_bitset(&m.to_bitset()).unwrap(), &m);
    }
}
