// Two-phase engine properties: baselines, cache sizes, replay, parameter separation.

use gistlab::compress::*;
use gistlab::layers::MlpKind;
use gistlab::model::ModelSpec;
use gistlab::rng::substream;
use gistlab::tape::HeadConfig;
use ndarray::Array2;
use proptest::prelude::*;
use rand::Rng;

fn spec(n_layers: usize, d: usize) -> ModelSpec {
    ModelSpec {
        vocab: 20,
        d_model: d,
        hidden: 2 * d,
        n_layers,
        heads: HeadConfig::with_total(2, 1, d).unwrap(),
        mlp: MlpKind::GeGlu,
    }
}

fn bundle(s: &ModelSpec, c: &CompressionConfig, max_ctx: usize, seed: &str) -> ModelBundle<f64> {
    ModelBundle::init(s, c, max_ctx, &mut substream(3, seed)).unwrap()
}

fn tokens(rng: &mut impl Rng, n: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(1..20)).collect()
}

fn max_abs(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn avgpool_rate_one_matches_full() {
    for layers in [2, 4] {
        let s = spec(layers, 16);
        let full = CompressionConfig::new(Method::Full, 1);
        let avg = CompressionConfig::new(Method::AvgPool, 1);
        let bf = bundle(&s, &full, 64, "avg1");
        let mut ba = bundle(&s, &avg, 64, "avg1-other");
        ba.theta_p = bf.theta_p.clone();
        let mut rng = substream(layers as u64, "avg1/inputs");
        for _ in 0..50 {
            let n = rng.random_range(1..40);
            let ctx = tokens(&mut rng, n);
            let nq = rng.random_range(1..4);
            let q = tokens(&mut rng, nq);
            let lf = predict_with_cache(&bf, &full, &compress_context(&bf, &full, &ctx).unwrap(), &q).unwrap();
            let la = predict_with_cache(&ba, &avg, &compress_context(&ba, &avg, &ctx).unwrap(), &q).unwrap();
            assert!(max_abs(&lf, &la) < 1e-6, "L={layers} n={n}: {}", max_abs(&lf, &la));
        }
    }
}

#[test]
fn full_prediction_is_one_causal_pass() {
    let s = spec(2, 16);
    let c = CompressionConfig::new(Method::Full, 1);
    let b = bundle(&s, &c, 32, "full");
    let ctx = vec![3, 7, 7, 1, 9, 12];
    let q = vec![4, 5];
    let got = predict_with_cache(&b, &c, &compress_context(&b, &c, &ctx).unwrap(), &q).unwrap();
    let all: Vec<usize> = ctx.iter().chain(&q).copied().collect();
    let want = full_forward_logits(&b.theta_p, &s, &all).unwrap();
    let tail = want.slice(ndarray::s![ctx.len().., ..]).to_owned();
    for (a, w) in got.iter().zip(tail.iter()) {
        assert!((a - w).abs() <= 1e-10 * w.abs().max(1.0));
    }
}

#[test]
fn no_context_ignores_the_context() {
    let s = spec(2, 16);
    let c = CompressionConfig::new(Method::NoContext, 1);
    let b = bundle(&s, &c, 32, "noctx");
    let q = vec![2, 8];
    let a = compress_context(&b, &c, &[3, 4, 5]).unwrap();
    let z = compress_context(&b, &c, &[9, 9, 9, 9, 9, 9, 1]).unwrap();
    assert_eq!(a.n_slots(), 1);
    assert_eq!(predict_with_cache(&b, &c, &a, &q).unwrap(), predict_with_cache(&b, &c, &z, &q).unwrap());
}

#[test]
fn serialized_cache_replays_bit_for_bit() {
    let s = spec(2, 16);
    for m in Method::ALL {
        let c = CompressionConfig::new(m, 3);
        let b = bundle(&s, &c, 32, "replay");
        let cache = compress_context(&b, &c, &[4, 5, 6, 7, 8, 9, 10]).unwrap();
        let back = CompressedCache::<f64>::from_bytes(&cache.to_bytes()).unwrap();
        assert_eq!(back, cache);
        let q = [11, 12];
        assert_eq!(predict_with_cache(&b, &c, &back, &q).unwrap(), predict_with_cache(&b, &c, &cache, &q).unwrap(), "{m}");
    }
}

#[test]
fn single_gist_embedding_handles_unseen_lengths() {
    let s = spec(2, 16);
    let mut c = CompressionConfig::new(Method::GistPool, 2);
    c.single_gist_embedding = true;
    let b = bundle(&s, &c, 8, "single");
    assert_eq!(b.gist_embed.nrows(), 1);
    let ctx: Vec<usize> = (0..50).map(|i| 1 + i % 19).collect();
    let cache = compress_context(&b, &c, &ctx).unwrap();
    assert_eq!(cache.n_compressed(), 25);
}

fn episodes() -> Vec<Episode> {
    vec![
        Episode {
            context: vec![3, 4, 5, 6, 7],
            query: vec![1, 4],
            answer: vec![5],
        },
        Episode {
            context: vec![8, 9, 10],
            query: vec![1, 10],
            answer: vec![2, 3],
        },
    ]
}

#[test]
fn frozen_sets_never_move() {
    let s = spec(2, 16);
    for m in [Method::SepGist, Method::SepOffsetGist, Method::GistPool] {
        let c = CompressionConfig::new(m, 2);
        let b0 = bundle(&s, &c, 8, "freeze");

        let mut b = b0.clone();
        let mut t = Trainer::<f64>::new(1e-2);
        t.freeze = Freeze { theta_p: false, theta_c: true, gists: false };
        for _ in 0..3 {
            train_step(&mut b, &c, &mut t, &episodes()).unwrap();
        }
        assert_eq!(b.theta_c, b0.theta_c, "{m}: frozen compression set moved");
        assert_ne!(b.theta_p, b0.theta_p);

        let mut b = b0.clone();
        let mut t = Trainer::<f64>::new(1e-2);
        t.freeze = Freeze { theta_p: true, theta_c: false, gists: false };
        for _ in 0..3 {
            train_step(&mut b, &c, &mut t, &episodes()).unwrap();
        }
        assert_eq!(b.theta_p, b0.theta_p, "{m}: frozen prediction set moved");
        assert_ne!(b.theta_c, b0.theta_c);
    }
}

#[test]
fn shared_methods_have_no_compression_set() {
    let s = spec(2, 16);
    for m in [Method::Full, Method::NoContext, Method::Gist, Method::OffsetGist, Method::AvgPool] {
        let b = bundle(&s, &CompressionConfig::new(m, 2), 8, "shared");
        assert!(b.theta_c.is_none(), "{m}");
        assert!(b.named_tensors().iter().all(|(n, _)| !n.starts_with("c.")));
    }
}

#[test]
fn one_sample_is_memorized() {
    let s = ModelSpec { vocab: 6, ..spec(1, 16) };
    let c = CompressionConfig::new(Method::Gist, 2);
    let mut b = bundle(&s, &c, 4, "memo");
    let mut t = Trainer::<f64>::new(1e-2);
    let ep = vec![Episode {
        context: vec![2, 3, 4],
        query: vec![1],
        answer: vec![5],
    }];
    let first = train_step(&mut b, &c, &mut t, &ep).unwrap();
    let mut last = first;
    for _ in 0..300 {
        last = train_step(&mut b, &c, &mut t, &ep).unwrap();
    }
    assert!(last < 1e-3 && last < first, "{first} -> {last}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn cache_holds_ceil_slots_plus_bos(n in 1usize..=512, xi in prop::sample::select(vec![1usize, 2, 4, 5, 8, 10]), which in 0usize..8) {
        let m = Method::ALL[which];
        let s = ModelSpec { vocab: 20, d_model: 8, hidden: 8, n_layers: 1, heads: HeadConfig::new(1, 1, 8).unwrap(), mlp: MlpKind::GeGlu };
        let c = CompressionConfig::new(m, xi);
        let b = ModelBundle::<f64>::init(&s, &c, n, &mut substream(1, "slots")).unwrap();
        let ctx: Vec<usize> = (0..n).map(|i| 1 + i % 19).collect();
        let cache = compress_context(&b, &c, &ctx).unwrap();
        let want = match m {
            Method::Full => n,
            Method::NoContext => 0,
            _ => n.div_ceil(xi),
        };
        prop_assert_eq!(cache.n_compressed(), want);
        prop_assert_eq!(c.compressed_slots(n), want);
        prop_assert_eq!(cache.positions.len(), want + 1);
        for l in &cache.layers {
            prop_assert_eq!(l.nrows(), want + 1);
        }
    }
}
