use icmf_core::autodiff::Tape;
use icmf_core::gradcheck::{check_all, GradCheckReport};
use icmf_core::{Result, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rand(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::rand_uniform(shape.to_vec(), -1.0, 1.0, &mut rng)
}

/// Contracts an arbitrary-shape output with fixed random weights so every
/// output element contributes a distinct gradient.
fn probe_sum(t: &mut Tape, y: Var) -> Result<Var> {
    let shape = t.shape(y).to_vec();
    let w = t.constant(rand(&shape, 999));
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

fn assert_pass(name: &str, r: GradCheckReport) {
    assert!(!r.results.is_empty(), "{name}: no probes");
    assert!(r.passed(), "{name}: max rel err {:e} at {:?}", r.max_rel_err(), r.worst());
}

macro_rules! op_check {
    ($name:ident, [$($shape:expr),*], |$t:ident, $v:ident| $body:expr) => {
        #[test]
        fn $name() {
            let params: Vec<Tensor> = [$($shape.to_vec()),*]
                .iter()
                .enumerate()
                .map(|(i, s): (usize, &Vec<usize>)| rand(s, i as u64 + 1))
                .collect();
            let r = check_all(&params, |$t: &mut Tape, $v: &[Var]| {
                let y: Var = $body?;
                probe_sum($t, y)
            })
            .unwrap();
            assert_pass(stringify!($name), r);
        }
    };
}

op_check!(add, [[2, 3], [2, 3]], |t, v| t.add(v[0], v[1]));
op_check!(sub, [[2, 3], [2, 3]], |t, v| t.sub(v[0], v[1]));
op_check!(mul, [[2, 3], [2, 3]], |t, v| t.mul(v[0], v[1]));
op_check!(scale, [[4]], |t, v| Ok::<_, icmf_core::Error>(t.scale(v[0], -2.5)));
op_check!(add_row, [[3, 4], [4]], |t, v| t.add_row(v[0], v[1]));
op_check!(add_channel, [[2, 3, 3], [2]], |t, v| t.add_channel(v[0], v[1]));
op_check!(matmul, [[3, 4], [4, 2]], |t, v| t.matmul(v[0], v[1]));
op_check!(matmul_batched, [[2, 3, 4], [2, 4, 5]], |t, v| t.matmul(v[0], v[1]));
op_check!(matmul_broadcast_rhs, [[2, 3, 4], [4, 5]], |t, v| t.matmul(v[0], v[1]));
op_check!(linear, [[3, 4], [4, 5], [5]], |t, v| t.linear(v[0], v[1], v[2]));
op_check!(reshape, [[2, 6]], |t, v| t.reshape(v[0], &[3, 4]));
op_check!(permute, [[2, 3, 4]], |t, v| t.permute(v[0], &[2, 0, 1]));
op_check!(transpose2d, [[3, 5]], |t, v| t.transpose2d(v[0]));
op_check!(narrow, [[3, 6]], |t, v| t.narrow(v[0], 1, 2, 3));
op_check!(concat0, [[2, 3], [1, 3]], |t, v| t.concat0(&[v[0], v[1]]));
op_check!(softmax_last, [[3, 5]], |t, v| t.softmax(v[0], 1));
op_check!(softmax_middle, [[2, 3, 4]], |t, v| t.softmax(v[0], 1));
op_check!(layer_norm, [[3, 6], [6], [6]], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-6));
op_check!(relu, [[10]], |t, v| Ok::<_, icmf_core::Error>(t.relu(v[0])));
op_check!(gelu, [[10]], |t, v| Ok::<_, icmf_core::Error>(t.gelu(v[0])));
op_check!(sigmoid, [[10]], |t, v| Ok::<_, icmf_core::Error>(t.sigmoid(v[0])));
op_check!(conv2d_stride1_pad1, [[2, 5, 5], [3, 2, 3, 3], [3]], |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1));
op_check!(conv2d_patchify, [[3, 4, 4], [4, 3, 2, 2], [4]], |t, v| t.conv2d(v[0], v[1], Some(v[2]), 2, 0));
op_check!(conv_transpose2d, [[3, 3, 2], [3, 2, 2, 2], [2]], |t, v| t.conv_transpose2d(v[0], v[1], Some(v[2]), 2));
op_check!(upsample_bilinear, [[2, 3, 4]], |t, v| t.upsample_bilinear(v[0], 2));
op_check!(upsample_bilinear_x4, [[1, 2, 3]], |t, v| t.upsample_bilinear(v[0], 4));
op_check!(mean, [[2, 5]], |t, v| {
    let m = t.mean(v[0]);
    Ok::<_, icmf_core::Error>(m)
});

#[test]
fn dropout_gradient_with_fixed_mask() {
    let params = vec![rand(&[20], 3)];
    let r = check_all(&params, |t, v| {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let y = t.dropout(v[0], 0.3, &mut rng);
        probe_sum(t, y)
    })
    .unwrap();
    assert_pass("dropout", r);
}

#[test]
fn focal_gradient_with_frozen_normalizer() {
    // Probabilities in (0.05, 0.95) so the clamp never engages.
    let logits = rand(&[1, 3, 4], 8);
    let target: Vec<bool> = (0..12).map(|i| i % 3 != 0).collect();
    for gamma in [0.0, 1.0, 2.0] {
        let z = {
            let mut t = Tape::no_grad();
            let l = t.constant(logits.clone());
            let p = t.sigmoid(l);
            let probs = t.value(p).data().to_vec();
            probs
                .iter()
                .zip(&target)
                .map(|(&p, &y)| (1.0 - if y { p } else { 1.0 - p }).powf(gamma))
                .sum::<f64>()
        };
        let r = check_all(&[logits.clone()], |t, v| {
            let p = t.sigmoid(v[0]);
            t.focal_ce(p, &target, gamma, Some(z))
        })
        .unwrap();
        assert_pass("focal_ce", r);

        // The detached form has the same gradient at the base point.
        let grads = |fixed: Option<f64>| {
            let mut t = Tape::new();
            let l = t.param(logits.clone());
            let p = t.sigmoid(l);
            let loss = t.focal_ce(p, &target, gamma, fixed).unwrap();
            t.backward(loss).unwrap();
            t.grad(l).unwrap().to_vec()
        };
        let (a, b) = (grads(None), grads(Some(z)));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-14);
        }
    }
}

/// Direct six-loop convolution.
fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros([cout, oh, ow]);
    for o in 0..cout {
        for r in 0..oh {
            for c in 0..ow {
                let mut acc = b.data()[o];
                for i in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let y = (r * stride + ky) as isize - pad as isize;
                            let xx = (c * stride + kx) as isize - pad as isize;
                            if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < wd {
                                acc += x.get(&[i, y as usize, xx as usize]) * w.get(&[o, i, ky, kx]);
                            }
                        }
                    }
                }
                out.set(&[o, r, c], acc);
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_loop_oracle() {
    for (stride, pad) in [(1, 0), (1, 1), (2, 0), (2, 1)] {
        let x = rand(&[3, 7, 6], 1);
        let w = rand(&[4, 3, 3, 3], 2);
        let b = rand(&[4], 3);
        let mut t = Tape::no_grad();
        let (vx, vw, vb) = (t.constant(x.clone()), t.constant(w.clone()), t.constant(b.clone()));
        let y = t.conv2d(vx, vw, Some(vb), stride, pad);
        // 7 + 2 - 3 is odd: stride 2 without integral output must be refused.
        if (7 + 2 * pad - 3) % stride != 0 || (6 + 2 * pad - 3) % stride != 0 {
            assert!(y.is_err());
            continue;
        }
        let y = y.unwrap();
        assert!(t.value(y).max_abs_diff(&conv_oracle(&x, &w, &b, stride, pad)) < 1e-12);
    }
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    // <conv(x), y> == <x, convT(y)> for stride-2 2x2 kernels with no bias.
    let x = rand(&[3, 6, 4], 1);
    let w = rand(&[2, 3, 2, 2], 2);
    let y = rand(&[2, 3, 2], 3);
    let mut t = Tape::no_grad();
    let (vx, vw, vy) = (t.constant(x.clone()), t.constant(w.clone()), t.constant(y.clone()));
    let cx = t.conv2d(vx, vw, None, 2, 0).unwrap();
    let ty = t.conv_transpose2d(vy, vw, None, 2).unwrap();
    let lhs: f64 = t.value(cx).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
    let rhs: f64 = t.value(ty).data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() < 1e-12);
}

/// Half-pixel bilinear upsampling written per output pixel.
fn bilinear_oracle(x: &Tensor, f: usize) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let src = |o: usize, n: usize| {
        let s = ((o as f64 + 0.5) / f as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, s - i0 as f64)
    };
    Tensor::from_fn([c, h * f, w * f], |i| {
        let (ch, r, col) = (i / (h * f * w * f), (i / (w * f)) % (h * f), i % (w * f));
        let (y0, y1, ly) = src(r, h);
        let (x0, x1, lx) = src(col, w);
        let g = |y: usize, xx: usize| x.get(&[ch, y, xx]);
        (1.0 - ly) * ((1.0 - lx) * g(y0, x0) + lx * g(y0, x1)) + ly * ((1.0 - lx) * g(y1, x0) + lx * g(y1, x1))
    })
}

#[test]
fn bilinear_matches_oracle() {
    for f in [1, 2, 4] {
        let x = rand(&[2, 3, 5], 4);
        let mut t = Tape::no_grad();
        let v = t.constant(x.clone());
        let y = t.upsample_bilinear(v, f).unwrap();
        assert!(t.value(y).max_abs_diff(&bilinear_oracle(&x, f)) < 1e-12, "factor {f}");
    }
}

#[test]
fn gradient_accumulates_over_reuse() {
    // y = x * x + x  =>  dy/dx = 2x + 1.
    let x = rand(&[5], 6);
    let mut t = Tape::new();
    let v = t.param(x.clone());
    let sq = t.mul(v, v).unwrap();
    let y = t.add(sq, v).unwrap();
    let s = t.sum(y);
    t.backward(s).unwrap();
    for (g, xv) in t.grad(v).unwrap().iter().zip(x.data()) {
        assert!((g - (2.0 * xv + 1.0)).abs() < 1e-14);
    }
}
