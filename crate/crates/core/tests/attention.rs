use icmf_core::cross::CrossBlockParams;
use icmf_core::params::{Ctx, Manifest, ParamStore};
use icmf_core::transformer::{AttentionParams, BlockParams};
use icmf_core::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const DIM: usize = 8;
const HEADS: usize = 2;
const HIDDEN: usize = 12;

fn randomized(m: &Manifest, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = m.materialize(&mut rng);
    for t in store.tensors_mut() {
        *t = Tensor::rand_uniform(t.shape().to_vec(), -0.5, 0.5, &mut rng);
    }
    store
}

fn tokens(n: usize, seed: u64) -> Tensor {
    Tensor::rand_uniform(vec![n, DIM], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

type Mat = Vec<Vec<f64>>;

fn rows(t: &Tensor) -> Mat {
    let c = t.shape()[1];
    t.data().chunks(c).map(<[f64]>::to_vec).collect()
}

fn affine(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    x.iter()
        .map(|r| {
            (0..b.len())
                .map(|j| b[j] + r.iter().enumerate().map(|(i, v)| v * w[i][j]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn cols(x: &Mat, start: usize, len: usize) -> Mat {
    x.iter().map(|r| r[start..start + len].to_vec()).collect()
}

/// softmax(q kᵀ / sqrt(d)) v for one head.
fn head(q: &Mat, k: &Mat, v: &Mat) -> Mat {
    let d = q[0].len() as f64;
    q.iter()
        .map(|qi| {
            let s: Vec<f64> = k.iter().map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / d.sqrt()).collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            (0..v[0].len()).map(|c| e.iter().zip(v).map(|(p, vr)| p / z * vr[c]).sum()).collect()
        })
        .collect()
}

struct Lin {
    w: Mat,
    b: Vec<f64>,
}

struct AttnWeights {
    qkv: Lin,
    out: Lin,
}

fn lin(store: &ParamStore, l: icmf_core::transformer::LinearParams) -> Lin {
    Lin {
        w: rows(store.get(l.w)),
        b: store.get(l.b).data().to_vec(),
    }
}

fn attn_weights(store: &ParamStore, a: &AttentionParams) -> AttnWeights {
    AttnWeights { qkv: lin(store, a.qkv), out: lin(store, a.out) }
}

fn attention_oracle(a: &AttnWeights, target: &Mat, guide: &Mat) -> Mat {
    let q = affine(target, &cols(&a.qkv.w, 0, DIM), &a.qkv.b[..DIM]);
    let k = affine(guide, &cols(&a.qkv.w, DIM, DIM), &a.qkv.b[DIM..2 * DIM]);
    let v = affine(guide, &cols(&a.qkv.w, 2 * DIM, DIM), &a.qkv.b[2 * DIM..]);
    let hd = DIM / HEADS;
    let mut mixed = vec![vec![0.0; DIM]; target.len()];
    for h in 0..HEADS {
        let o = head(&cols(&q, h * hd, hd), &cols(&k, h * hd, hd), &cols(&v, h * hd, hd));
        for (row, orow) in mixed.iter_mut().zip(o) {
            row[h * hd..(h + 1) * hd].copy_from_slice(&orow);
        }
    }
    affine(&mixed, &a.out.w, &a.out.b)
}

fn layer_norm(x: &Mat, g: &[f64], b: &[f64]) -> Mat {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mu = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            r.iter().enumerate().map(|(i, v)| (v - mu) / (var + 1e-6).sqrt() * g[i] + b[i]).collect()
        })
        .collect()
}

fn plus(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

fn max_diff(a: &Mat, t: &Tensor) -> f64 {
    a.iter().flatten().zip(t.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn run_attention(store: &ParamStore, a: &AttentionParams, target: &Tensor, guide: Option<&Tensor>) -> (Tensor, Tensor) {
    let mut ctx = Ctx::new(store, false);
    let t = ctx.tape.constant(target.clone());
    let out = match guide {
        None => a.self_attention(&mut ctx, t).unwrap(),
        Some(g) => {
            let g = ctx.tape.constant(g.clone());
            a.cross_attention(&mut ctx, t, g).unwrap()
        }
    };
    (ctx.value(out.out).clone(), ctx.value(out.weights).clone())
}

#[test]
fn self_attention_matches_formula() {
    let mut m = Manifest::new();
    let a = AttentionParams::register(&mut m, "a", DIM, HEADS);
    let store = randomized(&m, 1);
    let x = tokens(4, 2);
    let (out, _) = run_attention(&store, &a, &x, None);
    let expect = attention_oracle(&attn_weights(&store, &a), &rows(&x), &rows(&x));
    assert!(max_diff(&expect, &out) < 1e-10);
}

#[test]
fn cross_attention_matches_formula() {
    let mut m = Manifest::new();
    let a = AttentionParams::register(&mut m, "a", DIM, HEADS);
    let store = randomized(&m, 3);
    let (x, g) = (tokens(4, 4), tokens(4, 5));
    let (out, w) = run_attention(&store, &a, &x, Some(&g));
    let expect = attention_oracle(&attn_weights(&store, &a), &rows(&x), &rows(&g));
    assert!(max_diff(&expect, &out) < 1e-10);
    assert_eq!(w.shape(), &[HEADS, 4, 4]);
}

#[test]
fn single_token_attention_returns_value() {
    let mut m = Manifest::new();
    let a = AttentionParams::register(&mut m, "a", DIM, HEADS);
    let store = randomized(&m, 6);
    let (x, g) = (tokens(3, 7), tokens(1, 8));
    let (out, w) = run_attention(&store, &a, &x, Some(&g));
    assert!(w.data().iter().all(|&v| v == 1.0));
    // With all weight on one key every query row is out_proj(v(guide)).
    let aw = attn_weights(&store, &a);
    let v = affine(&rows(&g), &cols(&aw.qkv.w, 2 * DIM, DIM), &aw.qkv.b[2 * DIM..]);
    let expect = affine(&v, &aw.out.w, &aw.out.b);
    let r = rows(&out);
    for row in &r {
        assert_eq!(row, &r[0]);
    }
    assert!(max_diff(&expect, &Tensor::new([1, DIM], r[0].clone()).unwrap()) < 1e-12);

    let (sout, sw) = run_attention(&store, &a, &g, None);
    assert_eq!(sw.data(), &[1.0, 1.0]);
    assert!(max_diff(&expect, &sout) < 1e-12);
}

#[test]
fn cross_block_matches_formula() {
    let mut m = Manifest::new();
    let b = CrossBlockParams::register(&mut m, "x", DIM, HEADS, HIDDEN);
    let s = randomized(&m, 9);
    let (target, guide) = (tokens(4, 10), tokens(4, 11));
    let mut ctx = Ctx::new(&s, false);
    let (t, g) = (ctx.tape.constant(target.clone()), ctx.tape.constant(guide.clone()));
    let out = b.forward(&mut ctx, t, g).unwrap();
    let out = ctx.value(out).clone();

    let v = |id| s.get(id).data().to_vec();
    let ln = |x: &Mat, n: icmf_core::transformer::NormParams| layer_norm(x, &v(n.gamma), &v(n.beta));
    let (tm, gm) = (rows(&target), rows(&guide));
    let g2 = plus(&gm, &attention_oracle(&attn_weights(&s, &b.guide_attn), &ln(&gm, b.guide_norm), &ln(&gm, b.guide_norm)));
    let o = plus(&tm, &attention_oracle(&attn_weights(&s, &b.cross_attn), &ln(&tm, b.target_norm), &ln(&g2, b.kv_norm)));
    let f_in = lin(&s, b.ffn.fc_in);
    let f_out = lin(&s, b.ffn.fc_out);
    let h: Mat = affine(&ln(&o, b.ffn_norm), &f_in.w, &f_in.b)
        .into_iter()
        .map(|r| r.into_iter().map(|x| x.max(0.0)).collect())
        .collect();
    let expect = plus(&o, &affine(&h, &f_out.w, &f_out.b));
    assert!(max_diff(&expect, &out) < 1e-10);
}

#[test]
fn cross_block_single_guide_token() {
    // One guide token: every target row receives the same cross-attention update.
    let mut m = Manifest::new();
    let b = CrossBlockParams::register(&mut m, "x", DIM, HEADS, HIDDEN);
    let s = randomized(&m, 12);
    let mut ctx = Ctx::new(&s, false);
    let t = ctx.tape.constant(tokens(3, 13));
    let g = ctx.tape.constant(tokens(1, 14));
    let gn = b.guide_norm.forward(&mut ctx, g).unwrap();
    let sa = b.guide_attn.self_attention(&mut ctx, gn).unwrap();
    assert_eq!(ctx.value(sa.weights).data(), &[1.0, 1.0]);
    let g2 = ctx.tape.add(g, sa.out).unwrap();
    let q = b.target_norm.forward(&mut ctx, t).unwrap();
    let kv = b.kv_norm.forward(&mut ctx, g2).unwrap();
    let ca = b.cross_attn.cross_attention(&mut ctx, q, kv).unwrap();
    assert!(ctx.value(ca.weights).data().iter().all(|&w| w == 1.0));
    let r = rows(ctx.value(ca.out));
    assert!(r.iter().all(|row| row == &r[0]));
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let c = t.shape()[1];
    let data = perm.iter().flat_map(|&i| t.data()[i * c..(i + 1) * c].to_vec()).collect();
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn softmax_rows_sum_to_one(seed in any::<u64>(), n in 1usize..7, m in 1usize..7) {
        let mut man = Manifest::new();
        let a = AttentionParams::register(&mut man, "a", DIM, HEADS);
        let store = randomized(&man, seed);
        let (_, w) = run_attention(&store, &a, &tokens(n, seed ^ 1), Some(&tokens(m, seed ^ 2)));
        for row in w.data().chunks(m) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn blocks_are_permutation_equivariant(seed in any::<u64>(), perm in Just((0..5usize).collect::<Vec<_>>()).prop_shuffle()) {
        let mut man = Manifest::new();
        let blk = BlockParams::register(&mut man, "b", DIM, HEADS, HIDDEN);
        let cross = CrossBlockParams::register(&mut man, "c", DIM, HEADS, HIDDEN);
        let s = randomized(&man, seed);
        let run = |x: &Tensor, g: &Tensor| {
            let mut ctx = Ctx::new(&s, false);
            let (x, g) = (ctx.tape.constant(x.clone()), ctx.tape.constant(g.clone()));
            let y = blk.forward(&mut ctx, x).unwrap();
            let y = cross.forward(&mut ctx, y, g).unwrap();
            ctx.value(y).clone()
        };
        let (x, g) = (tokens(5, seed ^ 3), tokens(5, seed ^ 4));
        let base = run(&x, &g);
        let moved = run(&permute_rows(&x, &perm), &permute_rows(&g, &perm));
        prop_assert!(moved.max_abs_diff(&permute_rows(&base, &perm)) <= 1e-9);
    }
}
