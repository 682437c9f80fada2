// Layer primitives against plain scalar-loop references.

use gistlab::layers::*;
use gistlab::masks::AttentionMask;
use gistlab::rng::substream;
use gistlab::tape::HeadConfig;
use ndarray::{Array2, Axis};
use proptest::prelude::*;
use rand_distr::{Distribution, Normal};

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

fn max_rel(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b.iter()).map(|(x, y)| if (x - y).abs() < 1e-14 { 0.0 } else { rel(*x, *y) }).fold(0.0, f64::max)
}

fn randn(r: usize, c: usize, seed: &str) -> Array2<f64> {
    let mut rng = substream(11, seed);
    let n = Normal::new(0.0, 1.0).unwrap();
    Array2::from_shape_simple_fn((r, c), || n.sample(&mut rng))
}

fn matmul(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.nrows(), b.ncols()));
    for i in 0..a.nrows() {
        for j in 0..b.ncols() {
            let mut s = 0.0;
            for k in 0..a.ncols() {
                s += a[[i, k]] * b[[k, j]];
            }
            out[[i, j]] = s;
        }
    }
    out
}

fn rms_ref(x: &Array2<f64>, gain: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.outer_iter_mut() {
        let mut ss = 0.0;
        for v in row.iter() {
            ss += v * v;
        }
        let inv = 1.0 / (ss / row.len() as f64 + 1e-6).sqrt();
        for (c, v) in row.iter_mut().enumerate() {
            *v *= inv * gain[[0, c]];
        }
    }
    out
}

fn rope_ref(x: &Array2<f64>, pos: &[usize], hd: usize) -> Array2<f64> {
    let mut out = x.clone();
    for (r, &p) in pos.iter().enumerate() {
        for h in 0..x.ncols() / hd {
            for i in 0..hd / 2 {
                let ang = p as f64 * 10_000f64.powf(-2.0 * i as f64 / hd as f64);
                let (a, b) = (x[[r, h * hd + 2 * i]], x[[r, h * hd + 2 * i + 1]]);
                out[[r, h * hd + 2 * i]] = a * ang.cos() - b * ang.sin();
                out[[r, h * hd + 2 * i + 1]] = a * ang.sin() + b * ang.cos();
            }
        }
    }
    out
}

/// Loop-nest attention: per query head, logits over allowed keys, softmax, weighted values.
fn attention_ref(x: &Array2<f64>, p: &BlockParams<f64>, mask: &AttentionMask, pos: &[usize]) -> Array2<f64> {
    let hd = p.heads.head_dim;
    let group = p.heads.n_heads / p.heads.n_kv_heads;
    let q = rope_ref(&matmul(x, &p.wq), pos, hd);
    let k = rope_ref(&matmul(x, &p.wk), pos, hd);
    let v = matmul(x, &p.wv);
    let n = x.nrows();
    let mut heads = Array2::zeros((n, p.heads.n_heads * hd));
    for h in 0..p.heads.n_heads {
        let kh = h / group;
        for i in 0..n {
            let mut logits = vec![f64::NEG_INFINITY; n];
            for j in 0..n {
                if mask.get(i, j) {
                    let mut s = 0.0;
                    for c in 0..hd {
                        s += q[[i, h * hd + c]] * k[[j, kh * hd + c]];
                    }
                    logits[j] = s / (hd as f64).sqrt();
                }
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for j in 0..n {
                let w = (logits[j] - m).exp() / z;
                for c in 0..hd {
                    heads[[i, h * hd + c]] += w * v[[j, kh * hd + c]];
                }
            }
        }
    }
    matmul(&heads, &p.wo)
}

fn gelu_ref(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn block(d: usize, hidden: usize, heads: HeadConfig, mlp: MlpKind, seed: &str) -> BlockParams<f64> {
    let mut b = BlockParams::<f64>::init(d, hidden, heads, mlp, &mut substream(5, seed)).unwrap();
    // non-unit gains so a swapped norm would show
    for (i, g) in [&mut b.pre_attn_norm, &mut b.post_attn_norm, &mut b.pre_mlp_norm, &mut b.post_mlp_norm]
        .into_iter()
        .enumerate()
    {
        *g = randn(1, d, &format!("{seed}/gain{i}")).mapv(|v| 1.0 + 0.3 * v);
    }
    b
}

#[test]
fn softmax_matches_exponential_sum() {
    let l = Array2::from_shape_vec((1, 3), vec![1.0, 2.0, 3.0]).unwrap();
    let p = softmax_rows(&l, &AttentionMask::full(1, 3)).unwrap();
    let z = 1f64.exp() + 2f64.exp() + 3f64.exp();
    for (j, want) in [1f64.exp() / z, 2f64.exp() / z, 3f64.exp() / z].iter().enumerate() {
        assert!(rel(p[[0, j]], *want) < 1e-14);
    }
}

#[test]
fn rmsnorm_matches_scalar_loop() {
    let x = randn(5, 12, "rms/x");
    let g = randn(1, 12, "rms/g");
    let got = rmsnorm(&x, g.row(0).as_slice().unwrap()).unwrap();
    assert!(max_rel(&got, &rms_ref(&x, &g)) < 1e-12);
}

#[test]
fn rope_position_one_closed_form() {
    let x = Array2::from_shape_vec((1, 2), vec![1.0, 0.0]).unwrap();
    let y = rope_apply(&x, &[1], 2).unwrap();
    assert!((y[[0, 0]] - 1f64.cos()).abs() < 1e-15);
    assert!((y[[0, 1]] - 1f64.sin()).abs() < 1e-15);
    assert!(rope_apply(&x, &[1], 3).is_err());
}

#[test]
fn rope_matches_reference_over_heads() {
    let x = randn(7, 24, "rope/x");
    let pos = [0, 1, 2, 5, 9, 30, 400];
    assert!(max_rel(&rope_apply(&x, &pos, 8).unwrap(), &rope_ref(&x, &pos, 8)) < 1e-12);
}

#[test]
fn three_token_attention_matches_loop_nest() {
    let p = block(6, 12, HeadConfig::new(1, 1, 6).unwrap(), MlpKind::GeGlu, "attn11");
    let x = randn(3, 6, "attn11/x");
    let mask = AttentionMask::causal(3);
    let pos = [0, 1, 2];
    let got = attention_forward(&x, &p, &mask, &pos).unwrap();
    assert!(max_rel(&got, &attention_ref(&x, &p, &mask, &pos)) < 1e-10);
}

#[test]
fn grouped_heads_match_loop_nest() {
    let p = block(16, 32, HeadConfig::new(4, 2, 4).unwrap(), MlpKind::GeGlu, "attn42");
    let x = randn(6, 16, "attn42/x");
    let mut mask = AttentionMask::causal(6);
    mask.set(4, 2, false);
    let pos = [0, 3, 4, 5, 9, 10];
    let got = attention_forward(&x, &p, &mask, &pos).unwrap();
    assert!(max_rel(&got, &attention_ref(&x, &p, &mask, &pos)) < 1e-10);
}

#[test]
fn block_matches_scripted_composition() {
    for mlp in [MlpKind::GeGlu, MlpKind::Gelu] {
        let p = block(8, 20, HeadConfig::new(2, 1, 4).unwrap(), mlp, "blk");
        let x = randn(4, 8, "blk/x");
        let mask = AttentionMask::causal(4);
        let pos = [0, 1, 2, 3];
        let a = attention_ref(&rms_ref(&x, &p.pre_attn_norm), &p, &mask, &pos);
        let h = &x + &rms_ref(&a, &p.post_attn_norm);
        let m = rms_ref(&h, &p.pre_mlp_norm);
        let hidden = match &p.w_gate {
            Some(wg) => matmul(&m, wg).mapv(gelu_ref) * matmul(&m, &p.w_up),
            None => matmul(&m, &p.w_up).mapv(gelu_ref),
        };
        let want = &h + &rms_ref(&matmul(&hidden, &p.w_down), &p.post_mlp_norm);
        let got = block_forward(&x, &p, &mask, &pos).unwrap();
        assert!(max_rel(&got, &want) < 1e-10, "{mlp:?}");
    }
}

#[test]
fn causal_attention_is_batch_permutation_equivariant() {
    // two independent sequences laid side by side under a block-diagonal causal mask
    let p = block(8, 16, HeadConfig::new(2, 2, 4).unwrap(), MlpKind::GeGlu, "perm");
    let a = randn(3, 8, "perm/a");
    let b = randn(4, 8, "perm/b");
    let run = |first: &Array2<f64>, second: &Array2<f64>| {
        let n1 = first.nrows();
        let n = n1 + second.nrows();
        let mut mask = AttentionMask::new(n, n);
        for i in 0..n {
            let start = if i < n1 { 0 } else { n1 };
            for j in start..=i {
                mask.set(i, j, true);
            }
        }
        let x = ndarray::concatenate(Axis(0), &[first.view(), second.view()]).unwrap();
        let pos: Vec<usize> = (0..n1).chain(0..second.nrows()).collect();
        block_forward(&x, &p, &mask, &pos).unwrap()
    };
    let ab = run(&a, &b);
    let ba = run(&b, &a);
    assert_eq!(ab.slice(ndarray::s![0..3, ..]), ba.slice(ndarray::s![4..7, ..]));
    assert_eq!(ab.slice(ndarray::s![3..7, ..]), ba.slice(ndarray::s![0..4, ..]));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn softmax_rows_are_distributions(vals in prop::collection::vec(-50.0f64..50.0, 20), bits in prop::collection::vec(any::<bool>(), 20)) {
        let l = Array2::from_shape_vec((4, 5), vals).unwrap();
        let mut mask = AttentionMask::new(4, 5);
        for i in 0..4 {
            for j in 0..5 {
                mask.set(i, j, bits[i * 5 + j] || j == i);
            }
        }
        let p = softmax_rows(&l, &mask).unwrap();
        for i in 0..4 {
            let s: f64 = (0..5).map(|j| p[[i, j]]).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            for j in 0..5 {
                if !mask.get(i, j) {
                    prop_assert_eq!(p[[i, j]], 0.0);
                }
            }
        }
    }

    #[test]
    fn rope_preserves_pair_norms(vals in prop::collection::vec(-10.0f64..10.0, 16), pos in prop::collection::vec(0usize..5000, 2)) {
        let x = Array2::from_shape_vec((2, 8), vals).unwrap();
        let y = rope_apply(&x, &pos, 4).unwrap();
        for r in 0..2 {
            for c in (0..8).step_by(2) {
                let a = x[[r, c]].hypot(x[[r, c + 1]]);
                let b = y[[r, c]].hypot(y[[r, c + 1]]);
                prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
            }
        }
        let z = rope_apply(&x, &[0, 0], 4).unwrap();
        prop_assert_eq!(z, x);
    }
}
