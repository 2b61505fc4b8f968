//! Worked examples for the differentiable operations, each checked against a value computed
//! independently here, plus a finite-difference check of every backward rule.

use langseg_core::gradcheck::{grad_check, GradCheckConfig};
use langseg_core::rng::SplitMix64;
use langseg_core::tensor::{bilinear_resize, matmul, softmax_channels};
use langseg_core::{Error, ParamStore, Tape, Tensor, Var};

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = SplitMix64::new(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform(lo, hi)).collect()).unwrap()
}

/// Naive triple-loop product.
fn matmul_oracle(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
            }
        }
    }
    c
}

/// Direct zero-padded cross-correlation.
fn conv_oracle(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; cout * oh * ow];
    for o in 0..cout {
        for i in 0..oh {
            for j in 0..ow {
                let mut s = 0.0;
                for c in 0..cin {
                    for a in 0..kh {
                        for b in 0..kw {
                            let r = (i * stride + a) as isize - pad as isize;
                            let q = (j * stride + b) as isize - pad as isize;
                            if r >= 0 && q >= 0 && (r as usize) < h && (q as usize) < wd {
                                s += x.data()[(c * h + r as usize) * wd + q as usize]
                                    * w.data()[((o * cin + c) * kh + a) * kw + b];
                            }
                        }
                    }
                }
                out[(o * oh + i) * ow + j] = s;
            }
        }
    }
    Tensor::new(&[cout, oh, ow], out).unwrap()
}

#[test]
fn matmul_examples() {
    let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let b = t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
    assert_eq!(matmul(&a, &b).unwrap().data(), &[19.0, 22.0, 43.0, 50.0]);
    let id = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
    assert_eq!(matmul(&id, &b).unwrap().data(), b.data());
    let z = Tensor::zeros(&[3, 2]);
    assert!(matmul(&z, &b).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn matmul_matches_naive_product() {
    for (seed, (m, k, n)) in [(1, (1, 1, 1)), (2, (3, 5, 2)), (3, (17, 9, 33)), (4, (64, 3, 1))] {
        let a = random(&[m, k], seed, -2.0, 2.0);
        let b = random(&[k, n], seed + 100, -2.0, 2.0);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), [m, n]);
        for (x, y) in c.data().iter().zip(matmul_oracle(&a, &b)) {
            assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
        }
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Dimension(_)));
    assert!(msg.contains("[2, 3]"), "{msg}");
}

fn conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor, Error> {
    let mut tape = Tape::new();
    let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
    let y = tape.conv2d(xv, wv, None, stride, pad)?;
    Ok(tape.value(y).clone())
}

#[test]
fn conv_examples() {
    let x = random(&[1, 5, 5], 9, 0.0, 1.0);
    let mut delta = Tensor::zeros(&[1, 1, 3, 3]);
    delta.data_mut()[4] = 1.0;
    assert_eq!(conv(&x, &delta, 1, 1).unwrap(), x);

    let ones = Tensor::full(&[1, 5, 5], 1.0);
    let k = Tensor::full(&[1, 1, 3, 3], 1.0);
    let y = conv(&ones, &k, 1, 1).unwrap();
    assert_eq!(y.data()[2 * 5 + 2], 9.0);
    assert_eq!(y.data()[0], 4.0);

    let z = conv(&x, &Tensor::zeros(&[2, 1, 3, 3]), 1, 1).unwrap();
    assert!(z.data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_matches_direct_sum() {
    let cases = [(3, 8, 8, 4, 3, 1, 1), (3, 8, 8, 4, 3, 2, 1), (2, 7, 5, 3, 1, 1, 0), (1, 9, 9, 2, 5, 2, 2)];
    for (i, &(cin, h, w, cout, k, s, p)) in cases.iter().enumerate() {
        let x = random(&[cin, h, w], i as u64, -1.0, 1.0);
        let wt = random(&[cout, cin, k, k], 50 + i as u64, -1.0, 1.0);
        let got = conv(&x, &wt, s, p).unwrap();
        let want = conv_oracle(&x, &wt, s, p);
        assert_eq!(got.shape(), want.shape());
        assert!(got.max_abs_diff(&want) <= 1e-12);
    }
}

#[test]
fn conv_rejects_bad_geometry() {
    let x = Tensor::zeros(&[1, 2, 2]);
    assert!(matches!(conv(&x, &Tensor::zeros(&[1, 1, 5, 5]), 1, 0), Err(Error::Dimension(_))));
    assert!(conv(&x, &Tensor::zeros(&[1, 1, 2, 2]), 1, 0).is_err());
    assert!(conv(&x, &Tensor::zeros(&[1, 1, 1, 1]), 0, 0).is_err());
}

#[test]
fn resize_examples() {
    let row = t(&[1, 1, 2], &[0.0, 2.0]);
    assert_eq!(bilinear_resize(&row, 1, 3).unwrap().data(), &[0.0, 1.0, 2.0]);
    let c = Tensor::full(&[2, 3, 4], 0.7);
    let up = bilinear_resize(&c, 7, 5).unwrap();
    assert!(up.data().iter().all(|&v| (v - 0.7).abs() <= 1e-15));
    let x = random(&[2, 4, 4], 3, -1.0, 1.0);
    let same = bilinear_resize(&x, 4, 4).unwrap();
    assert_eq!(
        same.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn resize_matches_align_corners_formula() {
    let x = random(&[1, 3, 5], 4, -1.0, 1.0);
    let (oh, ow) = (7, 4);
    let y = bilinear_resize(&x, oh, ow).unwrap();
    let at = |r: usize, c: usize| x.data()[r * 5 + c];
    for i in 0..oh {
        for j in 0..ow {
            let sy = i as f64 * 2.0 / (oh - 1) as f64;
            let sx = j as f64 * 4.0 / (ow - 1) as f64;
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(2), (x0 + 1).min(4));
            let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
            let v = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1))
                + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1));
            assert!((y.data()[i * ow + j] - v).abs() <= 1e-12);
        }
    }
}

#[test]
fn softmax_examples() {
    let eq = softmax_channels(&Tensor::full(&[4, 2, 2], 3.0)).unwrap();
    assert!(eq.data().iter().all(|&v| (v - 0.25).abs() <= 1e-15));
    let two = softmax_channels(&t(&[2, 1, 1], &[0.0, 3f64.ln()])).unwrap();
    assert!((two.data()[0] - 0.25).abs() <= 1e-15 && (two.data()[1] - 0.75).abs() <= 1e-15);
    let x = random(&[3, 2, 2], 5, -5.0, 5.0);
    let shifted = softmax_channels(&x.map(|v| v + 123.0)).unwrap();
    assert!(softmax_channels(&x).unwrap().max_abs_diff(&shifted) <= 1e-12);
    // large logits stay finite
    let big = softmax_channels(&t(&[2, 1, 1], &[1000.0, 0.0])).unwrap();
    assert_eq!(big.data(), &[1.0, 0.0]);
}

#[test]
fn backward_examples() {
    let mut store = ParamStore::new();
    store.insert("theta", random(&[2, 3], 6, -1.0, 1.0)).unwrap();
    store.insert("sq", Tensor::from_vec(vec![1.0, 2.0])).unwrap();
    store.insert("unused", Tensor::from_vec(vec![5.0])).unwrap();

    let mut tape = Tape::new();
    let th = tape.param(&store, "theta").unwrap();
    let sq = tape.param(&store, "sq").unwrap();
    let a = tape.sum(th);
    let s2 = tape.mul(sq, sq).unwrap();
    let b = tape.sum(s2);
    let a = tape.reshape(a, &[1]).unwrap();
    let b = tape.reshape(b, &[1]).unwrap();
    let loss = tape.add(a, b).unwrap();
    let loss = tape.sum(loss);
    tape.backward(loss, &mut store).unwrap();
    assert!(store.grad("theta").unwrap().data().iter().all(|&g| g == 1.0));
    assert_eq!(store.grad("sq").unwrap().data(), &[2.0, 4.0]);
    assert_eq!(store.grad("unused").unwrap().data(), &[0.0]);

    // a second backward accumulates
    tape.backward(loss, &mut store).unwrap();
    assert_eq!(store.grad("sq").unwrap().data(), &[4.0, 8.0]);
}

/// `sum(v * r)` for a fixed random `r`, so every output coordinate carries a distinct weight.
fn probe(tape: &mut Tape, v: Var, seed: u64) -> Var {
    let r = random(tape.value(v).shape(), seed, -1.0, 1.0);
    let r = tape.constant(r);
    let m = tape.mul(v, r).unwrap();
    tape.sum(m)
}

fn check(store: ParamStore, f: impl Fn(&mut Tape, &ParamStore) -> langseg_core::Result<Var>) {
    let mut store = store;
    let rep = grad_check(f, &mut store, &GradCheckConfig::default()).unwrap();
    assert!(rep.pass, "{rep:?}");
    assert!(rep.max_rel_error <= 1e-4);
}

fn store(entries: &[(&str, Tensor)]) -> ParamStore {
    let mut s = ParamStore::new();
    for (n, v) in entries {
        s.insert(n, v.clone()).unwrap();
    }
    s
}

#[test]
fn gradcheck_matmul_add_mul_scale() {
    let s = store(&[("a", random(&[3, 4], 1, -1.0, 1.0)), ("b", random(&[4, 2], 2, -1.0, 1.0)), ("c", random(&[3, 2], 3, -1.0, 1.0))]);
    check(s, |t, s| {
        let (a, b, c) = (t.param(s, "a")?, t.param(s, "b")?, t.param(s, "c")?);
        let ab = t.matmul(a, b)?;
        let x = t.add(ab, c)?;
        let y = t.mul(x, c)?;
        let y = t.scale(y, -1.7);
        let y = t.add_scalar(y, 0.3);
        Ok(probe(t, y, 9))
    });
}

#[test]
fn gradcheck_conv_relu_tanh() {
    let s = store(&[
        ("x", random(&[2, 6, 6], 4, -1.0, 1.0)),
        ("w", random(&[3, 2, 3, 3], 5, -1.0, 1.0)),
        ("b", random(&[3], 6, -0.5, 0.5)),
    ]);
    check(s, |t, s| {
        let (x, w, b) = (t.param(s, "x")?, t.param(s, "w")?, t.param(s, "b")?);
        let y = t.conv2d(x, w, Some(b), 2, 1)?;
        let y = t.tanh(y);
        let z = t.conv2d(x, w, None, 1, 1)?;
        let z = t.relu(z);
        let (p, q) = (probe(t, y, 7), probe(t, z, 8));
        t.add(p, q)
    });
}

#[test]
fn gradcheck_resize_softmax_mean() {
    let s = store(&[("x", random(&[3, 3, 4], 10, -2.0, 2.0))]);
    check(s, |t, s| {
        let x = t.param(s, "x")?;
        let up = t.bilinear_resize(x, 5, 7)?;
        let sm = t.softmax_channels(up)?;
        let m = t.spatial_mean(sm)?;
        let a = probe(t, m, 11);
        let b = t.mean(x);
        t.add(a, b)
    });
}

#[test]
fn gradcheck_fusion_and_weighted_sum() {
    let s = store(&[
        ("feat", random(&[3, 4, 4], 12, -1.0, 1.0)),
        ("text", random(&[2], 13, -1.0, 1.0)),
        ("w", random(&[3, 5], 14, -1.0, 1.0)),
        ("b", random(&[3], 15, -1.0, 1.0)),
        ("logits", random(&[2, 1, 1], 16, -1.0, 1.0)),
    ]);
    check(s, |t, s| {
        let (f, tx, w, b) = (t.param(s, "feat")?, t.param(s, "text")?, t.param(s, "w")?, t.param(s, "b")?);
        let fused = t.fuse_broadcast(f, tx, w, b)?;
        let lg = t.param(s, "logits")?;
        let sw = t.softmax_channels(lg)?;
        let sw = t.reshape(sw, &[2])?;
        let y = t.weighted_sum(&[fused, f], sw)?;
        Ok(probe(t, y, 17))
    });
}

#[test]
fn gradcheck_embedding_nll_cosine() {
    let s = store(&[
        ("table", random(&[6, 3], 18, -1.0, 1.0)),
        ("u", random(&[3], 19, -1.0, 1.0)),
        ("logits", random(&[3, 2, 2], 20, -1.0, 1.0)),
    ]);
    check(s, |t, s| {
        let table = t.param(s, "table")?;
        let e = t.embed_mean(table, &[2, 5, 0, 2, 0], 0)?;
        let u = t.param(s, "u")?;
        let d = t.cosine_distance(e, u)?;
        let lg = t.param(s, "logits")?;
        let p = t.softmax_channels(lg)?;
        let nll = t.pixel_nll(p, &[0, 2, 1, 1], 1e-7)?;
        t.add(d, nll)
    });
}
