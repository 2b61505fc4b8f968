//! Randomised invariants of the tensor algebra, encoders, decoder and losses.

use proptest::prelude::*;

use langseg_core::loss::{cosine_distance, seg_ce, triplet_hinge};
use langseg_core::model::{self, ModelConfig};
use langseg_core::rng::SplitMix64;
use langseg_core::synth;
use langseg_core::tensor::{matmul, softmax_channels};
use langseg_core::text::{self, TokenSequence, PAD};
use langseg_core::{ClassMask, ParamStore, Tape, Tensor};

fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = SplitMix64::new(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform(lo, hi)).collect()).unwrap()
}

fn small_model(levels: usize) -> ModelConfig {
    ModelConfig {
        height: 16,
        width: 16,
        levels,
        classes: 5,
        features: 6,
        text_dim: 5,
        vocab_size: synth::vocabulary().len(),
        max_tokens: 12,
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn conv_output_shape(cin in 1usize..4, h in 1usize..12, w in 1usize..12, cout in 1usize..4,
                         half in 0usize..3, stride in 1usize..4, pad in 0usize..3, seed: u64) {
        let k = 2 * half + 1;
        let mut tape = Tape::new();
        let x = tape.constant(random(&[cin, h, w], seed, -1.0, 1.0));
        let wt = tape.constant(random(&[cout, cin, k, k], seed ^ 1, -1.0, 1.0));
        let r = tape.conv2d(x, wt, None, stride, pad);
        if k > h + 2 * pad || k > w + 2 * pad {
            prop_assert!(r.is_err());
        } else {
            let y = r.unwrap();
            let oh = (h + 2 * pad - k) / stride + 1;
            let ow = (w + 2 * pad - k) / stride + 1;
            prop_assert_eq!(tape.value(y).shape(), &[cout, oh, ow]);
        }
    }

    #[test]
    fn resize_and_matmul_shapes(c in 1usize..4, h in 1usize..9, w in 1usize..9, oh in 1usize..9, ow in 1usize..9,
                                m in 1usize..6, n in 1usize..6) {
        let x = Tensor::zeros(&[c, h, w]);
        let r = langseg_core::tensor::bilinear_resize(&x, oh, ow).unwrap();
        prop_assert_eq!(r.shape(), &[c, oh, ow]);
        let p = matmul(&Tensor::zeros(&[m, h]), &Tensor::zeros(&[h, n])).unwrap();
        prop_assert_eq!(p.shape(), &[m, n]);
    }

    #[test]
    fn softmax_pixels_sum_to_one(c in 1usize..8, h in 1usize..5, w in 1usize..5, seed: u64) {
        let p = softmax_channels(&random(&[c, h, w], seed, -50.0, 50.0)).unwrap();
        let plane = h * w;
        for i in 0..plane {
            let s: f64 = (0..c).map(|ch| p.data()[ch * plane + i]).sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
        }
        prop_assert!(p.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn matmul_is_linear(m in 1usize..6, k in 1usize..6, n in 1usize..6, seed: u64) {
        let a = random(&[m, k], seed, -3.0, 3.0);
        let b = random(&[k, n], seed ^ 2, -3.0, 3.0);
        let c = random(&[k, n], seed ^ 3, -3.0, 3.0);
        let bc = Tensor::new(&[k, n], b.data().iter().zip(c.data()).map(|(x, y)| x + y).collect()).unwrap();
        let lhs = matmul(&a, &bc).unwrap();
        let ab = matmul(&a, &b).unwrap();
        let ac = matmul(&a, &c).unwrap();
        for i in 0..m * n {
            prop_assert!((lhs.data()[i] - ab.data()[i] - ac.data()[i]).abs() <= 1e-10);
        }
    }

    #[test]
    fn level0_is_translation_covariant(seed: u64, dy in 0usize..2, dx in 0usize..2) {
        prop_assume!(dy + dx > 0);
        let cfg = small_model(1);
        let store = model::init_params(&cfg, seed).unwrap();
        let img = random(&[3, 16, 16], seed ^ 5, 0.0, 1.0);
        // shifted[r][c] = img[r - dy][c - dx]
        let mut shifted = Tensor::zeros(&[3, 16, 16]);
        for ch in 0..3 {
            for r in dy..16 {
                for c in dx..16 {
                    shifted.data_mut()[(ch * 16 + r) * 16 + c] = img.data()[(ch * 16 + r - dy) * 16 + c - dx];
                }
            }
        }
        let level0 = |im: &Tensor| {
            let mut t = Tape::new();
            let v = t.constant(im.clone());
            let p = model::encode_image(&mut t, v, &store, 1).unwrap();
            t.value(p[0]).clone()
        };
        let (a, b) = (level0(&img), level0(&shifted));
        let f = cfg.features;
        for ch in 0..f {
            for r in 2..14 {
                for c in 2..14 {
                    let va = a.data()[(ch * 16 + r) * 16 + c];
                    let vb = b.data()[(ch * 16 + r + dy) * 16 + c + dx];
                    prop_assert!((va - vb).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn text_encoder_ignores_order_and_padding(seed: u64, ids in proptest::collection::vec(1usize..15, 1..8), extra in 0usize..4) {
        let store = model::init_params(&small_model(1), seed).unwrap();
        let embed = |ids: &[usize]| {
            let mut t = Tape::new();
            let v = text::encode_text(&mut t, &TokenSequence { ids: ids.to_vec() }, &store).unwrap();
            t.value(v).clone()
        };
        let base = embed(&ids);
        let mut rev = ids.clone();
        rev.reverse();
        prop_assert!(base.max_abs_diff(&embed(&rev)) <= 1e-12);
        let mut padded = ids.clone();
        padded.extend(std::iter::repeat(PAD).take(extra));
        padded.insert(0, PAD);
        prop_assert!(base.max_abs_diff(&embed(&padded)) <= 1e-12);
    }

    #[test]
    fn predicted_distribution_is_normalised(seed: u64, levels in 1usize..4, zero_text: bool) {
        let cfg = small_model(levels);
        let mut store = model::init_params(&cfg, seed).unwrap();
        perturb(&mut store, seed);
        let img = random(&[3, 16, 16], seed ^ 9, 0.0, 1.0);
        let seq = text::tokenize("a scene with red circle", &synth::vocabulary(), cfg.max_tokens);
        let p = model::predict_mask(&store, &cfg, &img, &seq, zero_text).unwrap();
        prop_assert_eq!(p.shape(), &[cfg.classes, 16, 16]);
        for i in 0..256 {
            let s: f64 = (0..cfg.classes).map(|c| p.data()[c * 256 + i]).sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn scale_weights_are_a_distribution(seed: u64, k in 1usize..7) {
        let mut t = Tape::new();
        let logits = t.constant(random(&[k], seed, -20.0, 20.0));
        let w = model::scale_weights(&mut t, logits).unwrap();
        let w = t.value(w);
        prop_assert!(w.data().iter().all(|&v| v > 0.0));
        prop_assert!((w.data().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn combine_scales_is_convex(seed: u64, k in 1usize..4, f in 1usize..4) {
        let mut t = Tape::new();
        let mut levels = Vec::new();
        let mut resized = Vec::new();
        for l in 0..k {
            let s = 8 >> l;
            let v = random(&[f, s, s], seed.wrapping_add(l as u64), -5.0, 5.0);
            resized.push(langseg_core::tensor::bilinear_resize(&v, 8, 8).unwrap());
            levels.push(t.constant(v));
        }
        let logits = t.constant(random(&[k], seed ^ 7, -3.0, 3.0));
        let w = model::scale_weights(&mut t, logits).unwrap();
        let out = model::combine_scales(&mut t, &levels, w).unwrap();
        let out = t.value(out);
        for i in 0..out.len() {
            let lo = resized.iter().map(|r| r.data()[i]).fold(f64::INFINITY, f64::min);
            let hi = resized.iter().map(|r| r.data()[i]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(out.data()[i] >= lo - 1e-12 && out.data()[i] <= hi + 1e-12);
        }
    }

    #[test]
    fn triplet_dead_zone(d_pos in 0.0f64..2.0, gap in 0.0f64..2.0, alpha in 0.01f64..1.0) {
        prop_assert_eq!(triplet_hinge(d_pos, d_pos + alpha + gap, alpha), 0.0);
        prop_assert!(triplet_hinge(d_pos, d_pos, alpha) == alpha);
    }

    #[test]
    fn cosine_distance_range(u in proptest::collection::vec(-10.0f64..10.0, 3), v in proptest::collection::vec(-10.0f64..10.0, 3)) {
        let d = cosine_distance(&u, &v);
        prop_assert!((-1e-12..=2.0 + 1e-12).contains(&d));
        if u.iter().map(|a| a * a).sum::<f64>().sqrt() >= 1e-12 {
            prop_assert!(cosine_distance(&u, &u).abs() <= 1e-12);
        }
    }

    #[test]
    fn seg_ce_falls_as_mass_moves_to_truth(c in 2usize..6, gt in 0usize..6, a in 0.01f64..0.98, step in 0.001f64..0.5) {
        let gt = gt % c;
        let b = (a + step).min(0.99);
        prop_assume!(b > a);
        let ce = |p_true: f64| {
            let mut data = vec![(1.0 - p_true) / (c - 1) as f64; c];
            data[gt] = p_true;
            let mut t = Tape::new();
            let v = t.constant(Tensor::new(&[c, 1, 1], data).unwrap());
            let l = seg_ce(&mut t, v, &ClassMask::filled(1, 1, gt as u8), 1e-7).unwrap();
            t.value(l).item()
        };
        let (la, lb) = (ce(a), ce(b));
        prop_assert!(lb < la);
        prop_assert!(lb >= 0.0);
    }

    #[test]
    fn argmax_ignores_positive_logit_scaling(seed: u64, s in 0.01f64..100.0) {
        let logits = random(&[4, 3, 3], seed, -5.0, 5.0);
        let a = model::argmax_mask(&softmax_channels(&logits).unwrap()).unwrap();
        let b = model::argmax_mask(&softmax_channels(&logits.map(|v| v * s)).unwrap()).unwrap();
        prop_assert_eq!(a, b);
    }
}

fn perturb(store: &mut ParamStore, seed: u64) {
    let mut rng = SplitMix64::new(seed ^ 0xabc);
    for (_, p) in store.iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.uniform(-0.3, 0.3);
        }
    }
}
