//! Proposal metrics against hand cases and an exhaustive assignment oracle.

mod common;

use common::rng;
use maskrefine_core::metrics::*;
use proptest::prelude::*;
use rand::Rng;

fn block(x0: usize, y0: usize, w: usize, h: usize, side: usize) -> BinaryMask {
    BinaryMask::from_fn(side, side, |x, y| x >= x0 && x < x0 + w && y >= y0 && y < y0 + h)
}

fn set(masks: Vec<BinaryMask>) -> ProposalSet {
    let n = masks.len();
    ProposalSet::new(masks.into_iter().enumerate().map(|(i, mask)| ScoredMask { mask, score: (n - i) as f64 }).collect())
}

/// Best number of GTs covered by a one-to-one assignment, by enumeration.
fn brute_force(ious: &[Vec<f64>], n_gt: usize, n: usize, t: f64) -> usize {
    fn go(g: usize, used: &mut Vec<bool>, ious: &[Vec<f64>], n_gt: usize, t: f64) -> usize {
        if g == n_gt {
            return 0;
        }
        let mut best = go(g + 1, used, ious, n_gt, t);
        for p in 0..used.len() {
            if !used[p] && ious[p][g] + 1e-12 >= t {
                used[p] = true;
                best = best.max(1 + go(g + 1, used, ious, n_gt, t));
                used[p] = false;
            }
        }
        best
    }
    let k = n.min(ious.len());
    go(0, &mut vec![false; k], &ious[..k], n_gt, t)
}

#[test]
fn iou_examples() {
    let a = block(0, 0, 2, 2, 3);
    assert_eq!(iou(&a, &a).unwrap(), 1.0);
    assert_eq!(iou(&a, &block(2, 2, 1, 1, 3)).unwrap(), 0.0);
    assert_eq!(iou(&a, &block(1, 1, 2, 2, 3)).unwrap(), 1.0 / 7.0);
    assert_eq!(iou(&BinaryMask::empty(3, 3), &BinaryMask::empty(3, 3)).unwrap(), 0.0);
    assert!(iou(&a, &BinaryMask::empty(4, 3)).is_err());
}

#[test]
fn binarize_examples() {
    let m = binarize(&[0.1, 0.2, 0.3], 3, 1, 0.2).unwrap();
    assert_eq!(m.bits(), [false, true, true]);
    assert_eq!(binarize(&[0.5; 6], 3, 2, DEFAULT_BINARIZE_THRESHOLD).unwrap().area(), 6);
    let mut r = rng(1);
    let v: Vec<f64> = (0..100).map(|_| r.gen()).collect();
    let mut last = usize::MAX;
    for k in 1..20 {
        let a = binarize(&v, 10, 10, k as f64 / 20.0).unwrap().area();
        assert!(a <= last);
        last = a;
    }
}

#[test]
fn recall_examples() {
    // IoU 0.7: GT is a 1x20 strip, proposal shares 14 of 20 union pixels
    let gt = BinaryMask::from_fn(20, 1, |x, _| x < 17);
    let p = BinaryMask::from_fn(20, 1, |x, _| x >= 3);
    assert_eq!(iou(&gt, &p).unwrap(), 0.7);
    let props = set(vec![p]);
    assert_eq!(match_and_recall(&props, &[gt.clone()], 1, 0.5).unwrap(), Some(1.0));
    assert_eq!(average_recall(&props, &[gt.clone()], 1).unwrap(), Some(0.5));
    assert_eq!(average_recall(&set(vec![gt.clone()]), &[gt.clone()], 10).unwrap(), Some(1.0));

    let low = BinaryMask::from_fn(100, 1, |x, _| x >= 51);
    let gt100 = BinaryMask::from_fn(100, 1, |x, _| x < 100);
    assert_eq!(iou(&low, &gt100).unwrap(), 0.49);
    assert_eq!(average_recall(&set(vec![low]), &[gt100], 10).unwrap(), Some(0.0));

    // one proposal cannot cover two ground truths
    let a = block(0, 0, 10, 10, 10);
    let b = block(0, 0, 10, 10, 10);
    assert_eq!(match_and_recall(&set(vec![a.clone()]), &[a, b], 1, 0.5).unwrap(), Some(0.5));
    assert_eq!(match_and_recall(&set(vec![]), &[], 1, 0.5).unwrap(), None);
}

#[test]
fn matching_equals_exhaustive_oracle() {
    let mut r = rng(2);
    let mut instances = 0;
    while instances < 2000 {
        let np = r.gen_range(0..=5);
        let ng = r.gen_range(1..=5);
        let side = 4;
        let rand_mask = |r: &mut maskrefine_core::rng::StreamRng| {
            // rectangles make overlaps common
            let (x0, y0) = (r.gen_range(0..side), r.gen_range(0..side));
            block(x0, y0, r.gen_range(1..=side - x0), r.gen_range(1..=side - y0), side)
        };
        let props: Vec<BinaryMask> = (0..np).map(|_| rand_mask(&mut r)).collect();
        let gts: Vec<BinaryMask> = (0..ng).map(|_| rand_mask(&mut r)).collect();
        let ps = set(props);
        let ious = iou_matrix(&ps, &gts).unwrap();
        let n = r.gen_range(1..=6);
        for &t in &IOU_THRESHOLDS {
            let got = match_and_recall(&ps, &gts, n, t).unwrap().unwrap();
            let want = brute_force(&ious, ng, n, t) as f64 / ng as f64;
            assert_eq!(got, want, "instance {} t={} ious={:?}", instances, t, ious);
        }
        instances += 1;
    }
}

#[test]
fn max_covered_equals_oracle_on_random_matrices() {
    let mut r = rng(3);
    for _ in 0..3000 {
        let (np, ng) = (r.gen_range(0..=5), r.gen_range(1..=5));
        let ious: Vec<Vec<f64>> = (0..np).map(|_| (0..ng).map(|_| r.gen_range(0.0..1.0)).collect()).collect();
        let order: Vec<usize> = (0..ng).collect();
        let t = r.gen_range(0.0..1.0);
        let n = r.gen_range(1..=5);
        assert_eq!(max_covered(&ious, &order, n, t), brute_force(&ious, ng, n, t));
    }
}

#[test]
fn auc_and_scales() {
    // a perfect proposal for each of three GTs: AR 1 at every count
    let gts = vec![block(0, 0, 2, 2, 64), block(10, 10, 40, 40, 64), block(0, 50, 20, 10, 64)];
    let props = set(gts.clone());
    assert_eq!(auc(&props, &gts, AucGrid::Reported).unwrap(), Some(1.0));
    // the dense grid starts at one proposal, where only n of the three GTs can be covered
    let dense = [1usize, 2, 3, 4, 5, 6, 8, 10, 13, 16, 20, 25, 32, 40, 50, 63, 79, 100, 126, 158, 200, 251, 316, 398, 501, 631, 794, 1000];
    assert_eq!(AucGrid::Dense.counts(), dense);
    let want = dense.iter().map(|&n| n.min(3) as f64 / 3.0).sum::<f64>() / dense.len() as f64;
    assert!((auc(&props, &gts, AucGrid::Dense).unwrap().unwrap() - want).abs() < 1e-12);

    // hand-built: 12 proposals, the only good one at rank 11
    let gt = block(0, 0, 8, 8, 16);
    let mut masks: Vec<BinaryMask> = (0..10).map(|_| block(12, 12, 4, 4, 16)).collect();
    masks.push(gt.clone());
    masks.push(block(12, 0, 4, 4, 16));
    let props = set(masks);
    let ar10 = average_recall(&props, &[gt.clone()], 10).unwrap().unwrap();
    let ar100 = average_recall(&props, &[gt.clone()], 100).unwrap().unwrap();
    assert_eq!((ar10, ar100), (0.0, 1.0));
    assert!((auc(&props, &[gt.clone()], AucGrid::Reported).unwrap().unwrap() - 2.0 / 3.0).abs() < 1e-15);

    let buckets = ScaleBuckets::for_patch_width(64);
    let s = (64.0f64 / 224.0).powi(2);
    assert_eq!(buckets.small_below, 1024.0 * s);
    assert_eq!(buckets.bucket(4), Scale::Small);
    assert_eq!(buckets.bucket(400), Scale::Medium);
    assert_eq!(buckets.bucket(1600), Scale::Large);

    let im = ImageEval::new(&props, &[gt]).unwrap();
    let report = evaluate(&[im], buckets, AucGrid::Reported).unwrap();
    // area 64 is small at W = 64
    assert_eq!(report.auc_s, Some(2.0 / 3.0));
    assert_eq!(report.auc_m, None);
    assert_eq!(report.auc_l, None);
    assert_eq!(report.ar10, 0.0);
    let json = serde_json::to_value(&report).unwrap();
    for key in ["AR10", "AR100", "AR1K", "AUC", "AUC_S", "AUC_M", "AUC_L"] {
        assert!(json.get(key).is_some(), "{}", key);
    }
    assert!(json["AUC_M"].is_null());
    assert!(evaluate(&[], buckets, AucGrid::Reported).is_none());
}

#[test]
fn boxes() {
    let m = block(2, 3, 4, 2, 10);
    assert_eq!(m.tight_box(), Some((2, 3, 6, 5)));
    assert_eq!(BinaryMask::empty(3, 3).tight_box(), None);
    assert_eq!(box_iou((0, 0, 2, 2), (1, 1, 3, 3)), 1.0 / 7.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn recall_monotone(seed in 0u64..100_000) {
        let mut r = rng(seed);
        let side = 6;
        let m = |r: &mut maskrefine_core::rng::StreamRng| BinaryMask::from_fn(side, side, |_, _| r.gen_bool(0.4));
        let props = set((0..r.gen_range(1..8)).map(|_| m(&mut r)).collect());
        let gts: Vec<BinaryMask> = (0..r.gen_range(1..5)).map(|_| m(&mut r)).collect();
        let mut last = 0.0;
        for n in 1..9 {
            let ar = average_recall(&props, &gts, n).unwrap().unwrap();
            prop_assert!(ar >= last && (0.0..=1.0).contains(&ar));
            last = ar;
        }
        let mut prev = 1.0;
        for &t in &IOU_THRESHOLDS {
            let rec = match_and_recall(&props, &gts, 8, t).unwrap().unwrap();
            prop_assert!(rec <= prev);
            prev = rec;
        }
        let (a, b) = (&gts[0], &props.items()[0].mask);
        prop_assert_eq!(iou(a, b).unwrap(), iou(b, a).unwrap());
    }
}
