mod common;

use common::oracle;
use ndarray::Array2;
use partseg::metrics::{
    boundary_iou, harmonic, miou, recall, BoundaryAccumulator, ConfusionAccumulator, LabelGrid, MetricReport,
};
use partseg::taxonomy::Taxonomy;
use partseg::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn grids(seed: u64, n: usize, h: usize, w: usize, classes: u16) -> (Vec<LabelGrid>, Vec<LabelGrid>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = (0..n).map(|_| common::blocky_grid(&mut rng, h, w, classes)).collect();
    let g = (0..n).map(|_| common::blocky_grid(&mut rng, h, w, classes)).collect();
    (p, g)
}

#[test]
fn confusion_counts_match_brute_force() {
    for seed in 0..20 {
        let (p, g) = grids(seed, 4, 9, 13, 5);
        let mut acc = ConfusionAccumulator::new(5);
        for (a, b) in p.iter().zip(&g) {
            acc.accumulate(a, b).unwrap();
        }
        let counts = oracle::class_counts(&p, &g, 5);
        for c in 0..5 {
            assert_eq!(acc.intersection(c), counts[c].0);
            assert_eq!(acc.union(c), counts[c].1);
            assert_eq!(acc.true_positives(c) + acc.false_negatives(c), counts[c].2);
        }
        let all: Vec<usize> = (0..5).collect();
        if let Ok(m) = miou(&acc, &all) {
            assert_eq!(m, oracle::mean_of(&oracle::miou_terms(&p, &g, &all, 5)));
        }
        if let Ok(r) = recall(&acc, &all) {
            assert_eq!(r, oracle::mean_of(&oracle::recall_terms(&p, &g, &all, 5)));
        }
    }
}

#[test]
fn boundary_iou_matches_manhattan_oracle() {
    for seed in 0..20 {
        let (p, g) = grids(seed + 100, 1, 12, 10, 4);
        for d in 1..4 {
            for c in 0..4u16 {
                let (i, u) = oracle::boundary_counts(&p[0], &g[0], c, d);
                match boundary_iou(&p[0], &g[0], c, d) {
                    Ok(v) => assert_eq!(v, i as f64 / u as f64),
                    Err(Error::ClassAbsentEverywhere(_)) => assert_eq!(u, 0),
                    Err(e) => panic!("{e}"),
                }
            }
        }
    }
}

#[test]
fn undefined_classes_and_bad_inputs() {
    let mut acc = ConfusionAccumulator::new(3);
    let g = LabelGrid(Array2::zeros((2, 2)));
    acc.accumulate(&g, &g).unwrap();
    assert_eq!(acc.iou(1), None);
    assert!(matches!(miou(&acc, &[1, 2]), Err(Error::NoDefinedClasses)));
    assert_eq!(miou(&acc, &[0, 1, 2]).unwrap(), 1.0);
    let bad = LabelGrid(Array2::from_elem((2, 2), 7));
    assert!(matches!(acc.accumulate(&bad, &g), Err(Error::LabelOutOfRange { .. })));
    let small = LabelGrid(Array2::zeros((1, 2)));
    assert!(matches!(acc.accumulate(&small, &g), Err(Error::ShapeMismatch(_))));
}

#[test]
fn ground_truth_as_prediction_scores_one() {
    let t = Taxonomy::build(&["a's x", "a's y", "b's x", "b's z"], &["b"]).unwrap();
    let (_, g) = grids(3, 6, 16, 16, 5);
    let mut acc = ConfusionAccumulator::new(5);
    let mut bd = BoundaryAccumulator::new(5, None);
    for x in &g {
        acc.accumulate(x, x).unwrap();
        bd.accumulate(x, x).unwrap();
    }
    let r = MetricReport::build("oracle_obj", g.len(), &t, &acc, &bd, false);
    for s in [r.miou, r.boundary_iou, r.recall] {
        assert_eq!(s.seen, Some(1.0));
        assert_eq!(s.unseen, Some(1.0));
        assert_eq!(s.harmonic, Some(1.0));
    }
}

#[test]
fn harmonic_closed_forms() {
    assert!((harmonic(50.02, 31.67) - 38.79).abs() < 0.02);
    assert_eq!(harmonic(0.0, 0.0), 0.0);
    assert_eq!(harmonic(0.0, 0.7), 0.0);
}

proptest! {
    #[test]
    fn harmonic_lies_between_min_and_mean(s in 0.0f64..1.0, u in 0.0f64..1.0) {
        let h = harmonic(s, u);
        prop_assert!(h >= s.min(u) - 1e-12);
        prop_assert!(h <= (s + u) / 2.0 + 1e-12);
        prop_assert!((h - harmonic(u, s)).abs() < 1e-15);
        prop_assert!((harmonic(s, s) - s).abs() < 1e-12);
    }

    #[test]
    fn accumulation_is_order_free_and_mergeable(seed in 0u64..1000, split in 0usize..6) {
        let (p, g) = grids(seed, 6, 7, 9, 4);
        let mut fwd = ConfusionAccumulator::new(4);
        let mut rev = ConfusionAccumulator::new(4);
        let mut left = ConfusionAccumulator::new(4);
        let mut right = ConfusionAccumulator::new(4);
        let mut bfwd = BoundaryAccumulator::new(4, Some(1));
        let mut bl = BoundaryAccumulator::new(4, Some(1));
        let mut br = BoundaryAccumulator::new(4, Some(1));
        for i in 0..6 {
            fwd.accumulate(&p[i], &g[i]).unwrap();
            rev.accumulate(&p[5 - i], &g[5 - i]).unwrap();
            bfwd.accumulate(&p[i], &g[i]).unwrap();
            if i < split {
                left.accumulate(&p[i], &g[i]).unwrap();
                bl.accumulate(&p[i], &g[i]).unwrap();
            } else {
                right.accumulate(&p[i], &g[i]).unwrap();
                br.accumulate(&p[i], &g[i]).unwrap();
            }
        }
        left.merge(&right);
        bl.merge(&br);
        prop_assert_eq!(&fwd, &rev);
        prop_assert_eq!(&fwd, &left);
        prop_assert_eq!(&bfwd, &bl);
        let mut with_empty = fwd.clone();
        with_empty.merge(&ConfusionAccumulator::new(4));
        prop_assert_eq!(&with_empty, &fwd);
    }

    #[test]
    fn miou_is_invariant_to_label_permutation(seed in 0u64..1000) {
        let (p, g) = grids(seed, 3, 8, 8, 4);
        let perm = [2u16, 0, 3, 1];
        let relabel = |x: &LabelGrid| LabelGrid(x.0.mapv(|v| perm[v as usize]));
        let mut a = ConfusionAccumulator::new(4);
        let mut b = ConfusionAccumulator::new(4);
        for (x, y) in p.iter().zip(&g) {
            a.accumulate(x, y).unwrap();
            b.accumulate(&relabel(x), &relabel(y)).unwrap();
        }
        for c in 0..4 {
            prop_assert_eq!(a.iou(c), b.iou(perm[c] as usize));
        }
    }

    #[test]
    fn wide_boundary_equals_plain_iou(seed in 0u64..1000, c in 0u16..3) {
        let (p, g) = grids(seed, 1, 6, 9, 3);
        let mut acc = ConfusionAccumulator::new(3);
        acc.accumulate(&p[0], &g[0]).unwrap();
        match (boundary_iou(&p[0], &g[0], c, 9), acc.iou(c as usize)) {
            (Ok(b), Some(i)) => prop_assert_eq!(b, i),
            (Err(_), None) => {}
            other => prop_assert!(false, "{:?}", other),
        }
    }
}
