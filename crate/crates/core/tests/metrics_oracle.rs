//! Confusion-matrix metrics against brute-force set arithmetic.

use std::collections::BTreeSet;

use langseg_core::metrics::ConfusionMatrix;
use langseg_core::rng::SplitMix64;
use langseg_core::{ClassMask, Error};

fn mask(h: usize, w: usize, ids: &[u8]) -> ClassMask {
    ClassMask::new(h, w, ids.to_vec()).unwrap()
}

fn random_mask(h: usize, w: usize, c: usize, rng: &mut SplitMix64) -> ClassMask {
    ClassMask::new(h, w, (0..h * w).map(|_| rng.below(c) as u8).collect()).unwrap()
}

/// Per-class IoU from pixel index sets, `None` when the class is absent from ground truth,
/// plus pixel accuracy.
fn brute_force(pred: &ClassMask, gt: &ClassMask, c: usize) -> (Vec<Option<f64>>, f64) {
    let ious = (0..c as u8)
        .map(|k| {
            let p: BTreeSet<usize> = (0..pred.ids().len()).filter(|&i| pred.ids()[i] == k).collect();
            let g: BTreeSet<usize> = (0..gt.ids().len()).filter(|&i| gt.ids()[i] == k).collect();
            if g.is_empty() {
                return None;
            }
            let inter = p.intersection(&g).count();
            let union = p.union(&g).count();
            Some(inter as f64 / union as f64)
        })
        .collect();
    let correct = pred.ids().iter().zip(gt.ids()).filter(|(a, b)| a == b).count();
    (ious, correct as f64 / gt.ids().len() as f64)
}

#[test]
fn worked_two_by_two() {
    let gt = mask(2, 2, &[0, 0, 1, 1]);
    let pred = mask(2, 2, &[0, 1, 1, 1]);
    let mut cm = ConfusionMatrix::new(2);
    cm.accumulate(&pred, &gt).unwrap();
    assert_eq!((cm.get(0, 0), cm.get(0, 1), cm.get(1, 0), cm.get(1, 1)), (1, 1, 0, 2));
    let r = cm.metrics().unwrap();
    assert_eq!(r.class_iou, vec![Some(0.5), Some(2.0 / 3.0)]);
    assert!((r.miou - 7.0 / 12.0).abs() <= 1e-15);
    assert_eq!(r.pixel_accuracy, 0.75);
}

#[test]
fn perfect_and_disjoint() {
    let gt = mask(2, 2, &[0, 1, 1, 0]);
    let mut cm = ConfusionMatrix::new(2);
    cm.accumulate(&gt, &gt).unwrap();
    let r = cm.metrics().unwrap();
    assert_eq!((r.miou, r.pixel_accuracy), (1.0, 1.0));
    assert!((0..2).all(|g| (0..2).all(|p| g == p || cm.get(g, p) == 0)));

    let mut cm = ConfusionMatrix::new(2);
    cm.accumulate(&mask(2, 2, &[1, 0, 0, 1]), &gt).unwrap();
    let r = cm.metrics().unwrap();
    assert_eq!(r.miou, 0.0);
    assert_eq!(r.class_iou, vec![Some(0.0), Some(0.0)]);
}

#[test]
fn absent_classes_are_ignored() {
    let mut cm = ConfusionMatrix::new(4);
    cm.accumulate(&mask(1, 3, &[0, 3, 1]), &mask(1, 3, &[0, 1, 1])).unwrap();
    let r = cm.metrics().unwrap();
    assert_eq!(r.ignored_classes, vec![2, 3]);
    assert_eq!(r.class_iou[3], None);
    assert!((r.miou - 0.75).abs() <= 1e-15);
}

#[test]
fn errors() {
    let cm = ConfusionMatrix::new(3);
    assert!(matches!(cm.metrics(), Err(Error::Contract(_))));
    let mut cm = ConfusionMatrix::new(3);
    assert!(cm.accumulate(&mask(1, 2, &[0, 0]), &mask(2, 1, &[0, 0])).is_err());
    assert!(matches!(cm.accumulate(&mask(1, 1, &[3]), &mask(1, 1, &[0])), Err(Error::Data(_))));
}

#[test]
fn matches_brute_force_on_random_pairs() {
    let mut rng = SplitMix64::new(2024);
    for _ in 0..200 {
        let (h, w, c) = (rng.range_inclusive(1, 8), rng.range_inclusive(1, 8), rng.range_inclusive(1, 4));
        let gt = random_mask(h, w, c, &mut rng);
        let pred = random_mask(h, w, c, &mut rng);
        let mut cm = ConfusionMatrix::new(c);
        cm.accumulate(&pred, &gt).unwrap();
        let r = cm.metrics().unwrap();
        let (ious, pa) = brute_force(&pred, &gt, c);
        assert_eq!(r.class_iou, ious);
        assert_eq!(r.pixel_accuracy, pa);
        let present: Vec<f64> = ious.iter().flatten().copied().collect();
        assert_eq!(r.miou, present.iter().sum::<f64>() / present.len() as f64);
        assert_eq!(r.evaluated_pixels, (h * w) as u64);
        assert!(r.class_iou.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn additive_under_sharding() {
    let mut rng = SplitMix64::new(5);
    let (a_p, a_g) = (random_mask(3, 4, 3, &mut rng), random_mask(3, 4, 3, &mut rng));
    let (b_p, b_g) = (random_mask(2, 4, 3, &mut rng), random_mask(2, 4, 3, &mut rng));
    let mut split = ConfusionMatrix::new(3);
    split.accumulate(&a_p, &a_g).unwrap();
    split.accumulate(&b_p, &b_g).unwrap();
    let cat = |x: &ClassMask, y: &ClassMask| {
        let mut ids = x.ids().to_vec();
        ids.extend_from_slice(y.ids());
        mask(5, 4, &ids)
    };
    let mut whole = ConfusionMatrix::new(3);
    whole.accumulate(&cat(&a_p, &b_p), &cat(&a_g, &b_g)).unwrap();
    assert_eq!(split, whole);
    let mut merged = ConfusionMatrix::new(3);
    let mut other = ConfusionMatrix::new(3);
    merged.accumulate(&a_p, &a_g).unwrap();
    other.accumulate(&b_p, &b_g).unwrap();
    merged.merge(&other).unwrap();
    assert_eq!(merged, whole);
}

#[test]
fn relabelling_permutes_class_iou() {
    let mut rng = SplitMix64::new(11);
    for _ in 0..50 {
        let c = 4;
        let gt = random_mask(6, 6, c, &mut rng);
        let pred = random_mask(6, 6, c, &mut rng);
        let mut perm: Vec<u8> = (0..c as u8).collect();
        rng.shuffle(&mut perm);
        let relabel = |m: &ClassMask| mask(6, 6, &m.ids().iter().map(|&i| perm[i as usize]).collect::<Vec<_>>());
        let mut a = ConfusionMatrix::new(c);
        a.accumulate(&pred, &gt).unwrap();
        let mut b = ConfusionMatrix::new(c);
        b.accumulate(&relabel(&pred), &relabel(&gt)).unwrap();
        let (ra, rb) = (a.metrics().unwrap(), b.metrics().unwrap());
        for k in 0..c {
            assert_eq!(ra.class_iou[k], rb.class_iou[perm[k] as usize]);
        }
        assert!((ra.miou - rb.miou).abs() <= 1e-15);
        assert_eq!(ra.pixel_accuracy, rb.pixel_accuracy);
    }
}
