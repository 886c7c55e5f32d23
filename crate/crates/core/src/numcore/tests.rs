use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{check, GradCheckOptions};
use super::nn::{layer_norm, scaled_dot_attention, Init, Linear};
use super::*;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn matmul_oracle(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    c
}

#[allow(clippy::too_many_arguments)]
fn conv_oracle(x: &[f64], w: &[f64], n: usize, c: usize, h: usize, wd: usize, o: usize, k: usize, stride: usize, pad: usize) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for ni in 0..n {
        for oi in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut s = 0.0;
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                s += x[((ni * c + ci) * h + iy as usize) * wd + ix as usize]
                                    * w[((oi * c + ci) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[((ni * o + oi) * oh + y) * ow + xx] = s;
                }
            }
        }
    }
    (out, oh, ow)
}

fn empty() -> ParamStore<f64> {
    ParamStore::new()
}

#[test]
fn matmul_identity_and_hand_case() {
    let store = empty();
    let mut g = Graph::inference(&store);
    let eye = g.constant(Tensor::new(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap());
    let b = Tensor::new(&[3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap();
    let bv = g.constant(b.clone());
    let out = g.matmul(eye, bv).unwrap();
    assert_eq!(g.value(out), &b);

    let a = g.constant(Tensor::new(&[2, 2], vec![1., 2., 3., 4.]).unwrap());
    let ones = g.constant(Tensor::new(&[2, 1], vec![1., 1.]).unwrap());
    let out = g.matmul(a, ones).unwrap();
    assert_eq!(g.value(out).data(), &[3., 7.]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(1);
    let a = Tensor::<f64>::randn(&[5, 7], &mut r);
    let b = Tensor::<f64>::randn(&[7, 3], &mut r);
    let store = empty();
    let mut g = Graph::inference(&store);
    let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
    let out = g.matmul(av, bv).unwrap();
    let expect = matmul_oracle(a.data(), b.data(), 5, 7, 3);
    let err = g.value(out).data().iter().zip(&expect).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(err < 1e-6, "max abs err {err}");

    // f32 path against the same oracle
    let store32 = ParamStore::<f32>::new();
    let mut g32 = Graph::inference(&store32);
    let (av, bv) = (g32.constant(a.cast()), g32.constant(b.cast()));
    let out = g32.matmul(av, bv).unwrap();
    let err = g32.value(out).data().iter().zip(&expect).map(|(x, y)| (*x as f64 - y).abs()).fold(0.0, f64::max);
    assert!(err < 1e-5, "f32 max abs err {err}");
}

#[test]
fn matmul_rejects_inner_mismatch() {
    let store = empty();
    let mut g = Graph::inference(&store);
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[4, 2]));
    assert!(matches!(g.matmul(a, b), Err(crate::Error::Shape { .. })));
}

#[test]
fn conv_unit_kernel_is_identity() {
    let mut r = rng(2);
    let x = Tensor::<f64>::randn(&[1, 1, 5, 5], &mut r);
    let store = empty();
    let mut g = Graph::inference(&store);
    let xv = g.constant(x.clone());
    let w = g.constant(Tensor::ones(&[1, 1, 1, 1]));
    let y = g.conv2d(xv, w, Conv2dSpec { stride: 1, padding: 0 }).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn conv_all_ones_counts() {
    let store = empty();
    let mut g = Graph::inference(&store);
    let x = g.constant(Tensor::ones(&[1, 1, 5, 5]));
    let w = g.constant(Tensor::ones(&[1, 1, 3, 3]));
    let y = g.conv2d(x, w, Conv2dSpec { stride: 1, padding: 1 }).unwrap();
    let v = g.value(y).data();
    assert_eq!(v[2 * 5 + 2], 9.0);
    assert_eq!(v[0], 4.0);
    assert_eq!(v[24], 4.0);
    assert_eq!(v[2], 6.0);
}

#[test]
fn conv_matches_nested_loop() {
    let mut r = rng(3);
    for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 2)] {
        let x = Tensor::<f64>::randn(&[2, 3, 6, 7], &mut r);
        let w = Tensor::<f64>::randn(&[4, 3, k, k], &mut r);
        let store = empty();
        let mut g = Graph::inference(&store);
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let y = g.conv2d(xv, wv, Conv2dSpec { stride, padding: pad }).unwrap();
        let (expect, oh, ow) = conv_oracle(x.data(), w.data(), 2, 3, 6, 7, 4, k, stride, pad);
        assert_eq!(g.shape(y), &[2, 4, oh, ow]);
        let err = g.value(y).data().iter().zip(&expect).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-5, "stride {stride} pad {pad}: {err}");
    }
}

#[test]
fn conv_rejects_channel_mismatch() {
    let store = empty();
    let mut g = Graph::inference(&store);
    let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let w = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
    assert!(g.conv2d(x, w, Conv2dSpec { stride: 1, padding: 1 }).is_err());
    let w = g.constant(Tensor::zeros(&[1, 2, 7, 7]));
    assert!(g.conv2d(x, w, Conv2dSpec { stride: 1, padding: 1 }).is_err());
}

#[test]
fn layer_norm_cases() {
    let store = empty();
    let mut g = Graph::inference(&store);
    let c = g.constant(Tensor::full(&[1, 6], 3.5));
    let y = layer_norm(&mut g, c, None, None, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let x = g.constant(Tensor::new(&[1, 2], vec![1.0, -1.0]).unwrap());
    let gain = g.constant(Tensor::ones(&[2]));
    let bias = g.constant(Tensor::zeros(&[2]));
    let y = layer_norm(&mut g, x, Some(gain), Some(bias), 1e-12).unwrap();
    let v = g.value(y).data();
    assert!((v[0] - 1.0).abs() < 1e-9 && (v[1] + 1.0).abs() < 1e-9);

    let mut r = rng(4);
    let row = g.constant(Tensor::<f64>::randn(&[1, 64], &mut r).map(|v| v * 3.0 + 2.0));
    let y = layer_norm(&mut g, row, None, None, 1e-5).unwrap();
    let v = g.value(y).data();
    let mean = v.iter().sum::<f64>() / 64.0;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 64.0;
    assert!(mean.abs() < 1e-6);
    assert!((var - 1.0).abs() < 1e-4);
}

#[test]
fn attention_single_key_and_uniform() {
    let store = empty();
    let mut g = Graph::inference(&store);
    let mut r = rng(5);
    let q = g.constant(Tensor::randn(&[1, 3, 4], &mut r));
    let k = g.constant(Tensor::randn(&[1, 1, 4], &mut r));
    let vt = Tensor::<f64>::randn(&[1, 1, 2], &mut r);
    let v = g.constant(vt.clone());
    let (out, w) = scaled_dot_attention(&mut g, q, k, v, None).unwrap();
    assert!(g.value(w).data().iter().all(|&x| x == 1.0));
    for row in g.value(out).data().chunks(2) {
        assert_eq!(row, vt.data());
    }

    let krow = Tensor::<f64>::randn(&[1, 1, 4], &mut r);
    let keys = Tensor::cat0(&[krow.clone(), krow.clone(), krow.clone(), krow]).unwrap().reshape(&[1, 4, 4]).unwrap();
    let k = g.constant(keys);
    let v = g.constant(Tensor::randn(&[1, 4, 2], &mut r));
    let (_, w) = scaled_dot_attention(&mut g, q, k, v, None).unwrap();
    assert!(g.value(w).data().iter().all(|&x| (x - 0.25).abs() < 1e-12));
}

#[test]
fn attention_matches_explicit_oracle() {
    let mut r = rng(6);
    let (nq, nk, d) = (4, 8, 8);
    let qt = Tensor::<f64>::randn(&[1, nq, d], &mut r);
    let kt = Tensor::<f64>::randn(&[1, nk, d], &mut r);
    let vt = Tensor::<f64>::randn(&[1, nk, d], &mut r);
    let store = empty();
    let mut g = Graph::inference(&store);
    let (q, k, v) = (g.constant(qt.clone()), g.constant(kt.clone()), g.constant(vt.clone()));
    let (out, w) = scaled_dot_attention(&mut g, q, k, v, None).unwrap();

    let (qd, kd, vd) = (qt.data(), kt.data(), vt.data());
    let mut max_err: f64 = 0.0;
    for i in 0..nq {
        let logits: Vec<f64> = (0..nk)
            .map(|j| (0..d).map(|c| qd[i * d + c] * kd[j * d + c]).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let m = logits.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let s: f64 = e.iter().sum();
        let p: Vec<f64> = e.iter().map(|x| x / s).collect();
        let rowsum: f64 = g.value(w).data()[i * nk..(i + 1) * nk].iter().sum();
        assert!((rowsum - 1.0).abs() < 1e-12);
        for j in 0..nk {
            max_err = max_err.max((p[j] - g.value(w).data()[i * nk + j]).abs());
        }
        for c in 0..d {
            let o: f64 = (0..nk).map(|j| p[j] * vd[j * d + c]).sum();
            max_err = max_err.max((o - g.value(out).data()[i * d + c]).abs());
        }
    }
    assert!(max_err < 1e-6, "{max_err}");
}

#[test]
fn attention_rejects_mismatched_dims() {
    let store = empty();
    let mut g = Graph::inference(&store);
    let q = g.constant(Tensor::zeros(&[1, 2, 4]));
    let k = g.constant(Tensor::zeros(&[1, 3, 5]));
    let v = g.constant(Tensor::zeros(&[1, 3, 5]));
    assert!(scaled_dot_attention(&mut g, q, k, v, None).is_err());
}

#[test]
fn backward_of_sum_and_square_norm() {
    let store = empty();
    let mut r = rng(7);
    let xt = Tensor::<f64>::randn(&[3, 4], &mut r);
    let mut g = Graph::new(&store);
    let x = g.input(xt.clone(), true);
    let s = g.sum(x).unwrap();
    let grads = g.backward(s).unwrap();
    assert!(grads.wrt(x).unwrap().data().iter().all(|&v| v == 1.0));

    let mut g = Graph::new(&store);
    let x = g.input(xt.clone(), true);
    let sq = g.square(x).unwrap();
    let l = g.sum(sq).unwrap();
    let grads = g.backward(l).unwrap();
    for (gv, xv) in grads.wrt(x).unwrap().data().iter().zip(xt.data()) {
        assert!((gv - 2.0 * xv).abs() < 1e-12);
    }
}

#[test]
fn backward_rejects_non_scalar() {
    let store = empty();
    let mut g = Graph::new(&store);
    let x = g.input(Tensor::ones(&[2, 2]), true);
    assert!(matches!(g.backward(x), Err(crate::Error::NonScalarLoss(_))));
}

#[test]
fn non_finite_values_abort() {
    let store = empty();
    let mut g = Graph::inference(&store);
    let x = g.constant(Tensor::full(&[2], 1e300));
    let err = g.square(x).unwrap_err();
    assert!(matches!(err, crate::Error::NonFinite { op: "mul" }));
}

#[test]
fn frozen_parameters_receive_no_gradient() {
    let mut store = ParamStore::<f64>::new();
    let mut r = rng(8);
    let a = Linear::new(&mut store, &mut r, "a", 4, 4, Init::FanIn).unwrap();
    let b = Linear::new(&mut store, &mut r, "b", 4, 1, Init::FanIn).unwrap();
    store.set_trainable_prefix("a.", false);
    let x = Tensor::randn(&[2, 4], &mut r);
    let grads = {
        let mut g = Graph::new(&store);
        let xv = g.input(x, false);
        let h = a.forward(&mut g, xv).unwrap();
        let y = b.forward(&mut g, h).unwrap();
        let l = g.sum(y).unwrap();
        g.backward(l).unwrap()
    };
    store.accumulate(&grads);
    assert!(store.get(a.w).grad.is_none());
    assert!(store.get(a.b.unwrap()).grad.is_none());
    assert!(store.get(b.w).grad.is_some());
}

#[test]
fn repeated_param_use_accumulates() {
    let mut store = ParamStore::<f64>::new();
    let w = store.add("w", Tensor::new(&[1], vec![3.0]).unwrap()).unwrap();
    let mut g = Graph::new(&store);
    let a = g.param(w);
    let b = g.param(w);
    assert_eq!(a, b);
    let p = g.mul(a, b).unwrap();
    let l = g.sum(p).unwrap();
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.param(w).unwrap().data(), &[6.0]);
}

fn composite_loss(g: &mut Graph<'_, f64>, v: &[Var]) -> crate::Result<Var> {
    // exercises conv, group-norm-style reshape, silu, permute, matmul,
    // softmax, concat, gather, upsample and broadcasting in one graph
    let (x, w, q, table) = (v[0], v[1], v[2], v[3]);
    let h = g.conv2d(x, w, Conv2dSpec { stride: 2, padding: 1 })?;
    let s = g.shape(h).to_vec();
    let grouped = g.reshape(h, &[s[0], 1, s[1] * s[2] * s[3]])?;
    let n = g.norm_last(grouped, 1e-5)?;
    let n = g.reshape(n, &s)?;
    let n = g.silu(n)?;
    let up = g.upsample2x(n)?;
    let tokens = g.reshape(up, &[s[0], s[1], 4 * s[2] * s[3]])?;
    let tokens = g.permute(tokens, &[0, 2, 1])?;
    let emb = g.gather(table, &[2, 0, 2])?;
    let emb = g.reshape(emb, &[1, 3, s[1]])?;
    let kv = g.concat(&[emb, emb], 1)?;
    let (att, _) = scaled_dot_attention(g, q, kv, kv, None)?;
    let bias = g.reshape(table, &[1, 3 * s[1]])?;
    let flat = g.reshape(att, &[1, 2 * s[1]])?;
    let flat = g.concat(&[flat, bias], 1)?;
    let t = g.mean(tokens)?;
    let sq = g.square(flat)?;
    let sc = g.scale(sq, 0.7)?;
    let m = g.sum(sc)?;
    let tm = g.mul(flat, t)?;
    let tm = g.sum(tm)?;
    let out = g.add(m, tm)?;
    g.add_scalar(out, 0.5)
}

#[test]
fn composite_gradient_matches_finite_differences() {
    let mut r = rng(9);
    let inputs = vec![
        Tensor::randn(&[1, 2, 4, 4], &mut r),
        Tensor::randn(&[3, 2, 3, 3], &mut r),
        Tensor::randn(&[1, 2, 3], &mut r),
        Tensor::randn(&[3, 3], &mut r),
    ];
    let report = check(&empty(), &inputs, composite_loss, GradCheckOptions::default()).unwrap();
    assert!(report.max_rel_err < 1e-5, "{report:?}");
}

#[test]
fn training_is_bitwise_deterministic() {
    let run = || {
        let mut store = ParamStore::<f32>::new();
        let mut r = rng(10);
        let lin = Linear::new(&mut store, &mut r, "l", 6, 3, Init::FanIn).unwrap();
        let x = Tensor::<f32>::randn(&[5, 6], &mut r);
        let mut g = Graph::new(&store);
        let xv = g.input(x, false);
        let y = lin.forward(&mut g, xv).unwrap();
        let y = g.silu(y).unwrap();
        let l = g.mean(y).unwrap();
        let grads = g.backward(l).unwrap();
        grads.param(lin.w).unwrap().to_le_bytes()
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn op_gradients_match_finite_differences(
        m in 1usize..5, k in 1usize..6, n in 1usize..5, seed in 0u64..1000,
    ) {
        let mut r = rng(seed);
        let inputs = vec![
            Tensor::randn(&[2, m, k], &mut r),
            Tensor::randn(&[k, n], &mut r),
            Tensor::randn(&[2, n, k], &mut r),
            Tensor::randn(&[n], &mut r),
        ];
        let f = |g: &mut Graph<'_, f64>, v: &[Var]| -> crate::Result<Var> {
            let y = g.matmul(v[0], v[1])?;
            let y = g.add(y, v[3])?;
            let y = g.silu(y)?;
            let z = g.matmul(y, v[2])?;
            let z = g.norm_last(z, 1e-3)?;
            let z = g.softmax(z)?;
            let z2 = g.matmul_ex(z, v[0], true)?;
            let w = g.matmul(z2, y)?;
            let d = g.sub(w, y)?;
            let d = g.mul(d, v[3])?;
            let s = g.square(d)?;
            g.mean(s)
        };
        // The normalize/softmax chain is curved enough that h = 1e-4 leaves
        // ~1e-5 truncation error on unlucky draws.
        let opts = GradCheckOptions { step: 1e-5, ..Default::default() };
        let report = check(&empty(), &inputs, f, opts).unwrap();
        prop_assert!(report.max_rel_err < 1e-5, "{:?}", report);
    }

    #[test]
    fn conv_gradients_match_finite_differences(
        c in 1usize..3, o in 1usize..3, hw in 3usize..7, stride in 1usize..3, seed in 0u64..1000,
    ) {
        let mut r = rng(seed);
        let inputs = vec![
            Tensor::randn(&[2, c, hw, hw + 1], &mut r),
            Tensor::randn(&[o, c, 3, 3], &mut r),
        ];
        let f = move |g: &mut Graph<'_, f64>, v: &[Var]| -> crate::Result<Var> {
            let y = g.conv2d(v[0], v[1], Conv2dSpec { stride, padding: 1 })?;
            let y = g.square(y)?;
            g.mean(y)
        };
        let report = check(&empty(), &inputs, f, GradCheckOptions::default()).unwrap();
        prop_assert!(report.max_rel_err < 1e-5, "{:?}", report);
    }

    #[test]
    fn permute_roundtrip_is_identity(a in 1usize..4, b in 1usize..4, c in 1usize..4, seed in 0u64..100) {
        let mut r = rng(seed);
        let t = Tensor::<f64>::randn(&[a, b, c], &mut r);
        let store = empty();
        let mut g = Graph::inference(&store);
        let x = g.constant(t.clone());
        let p = g.permute(x, &[2, 0, 1]).unwrap();
        let back = g.permute(p, &[1, 2, 0]).unwrap();
        prop_assert_eq!(g.value(back), &t);
    }
}
