mod common;

use ndarray::{array, Array2};
use partseg::attncontrol::{
    binarize, downsample_mask, enhancement_loss, gaussian_blur, gaussian_kernel, min_max_normalize, overlap_fraction,
    separation_loss_hard, separation_loss_soft, AttnControlConfig,
};
use partseg::model::PartSegModel;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn identical_masks_give_half() {
    let m = array![[true, true], [false, true]];
    assert_eq!(separation_loss_hard(&[m.clone(), m], 2), 0.5);
}

#[test]
fn enhancement_closed_form() {
    let maps: Vec<(Array2<f64>, Array2<bool>)> = [1.0, 0.7, 0.9]
        .iter()
        .map(|&peak| (array![[peak, 0.1], [0.2, 0.0]], Array2::from_elem((2, 2), true)))
        .collect();
    assert!((enhancement_loss(&maps).unwrap() - 0.3).abs() < 1e-15);
}

#[test]
fn enhancement_reads_only_inside_the_mask() {
    let mask = array![[false, true], [true, true]];
    let maps = vec![(array![[1.0, 0.4], [0.2, 0.1]], mask)];
    assert!((enhancement_loss(&maps).unwrap() - 0.6).abs() < 1e-15);
}

#[test]
fn disjoint_masks_have_no_overlap() {
    let a = array![[true, false], [false, false]];
    let b = array![[false, true], [false, false]];
    assert_eq!(overlap_fraction(&[a.clone(), b.clone()]), 0.0);
    assert_eq!(separation_loss_hard(&[a, b], 4), 0.0);
    assert_eq!(overlap_fraction(&[Array2::from_elem((2, 2), false)]), 0.0);
}

#[test]
fn blur_preserves_constant_maps_and_mass() {
    let k = gaussian_kernel(1.0, 3);
    assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    let c = Array2::from_elem((5, 4), 0.37);
    for v in gaussian_blur(c.view(), &k) {
        assert!((v - 0.37).abs() < 1e-15);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Array2::from_shape_fn((6, 7), |_| rng.gen::<f64>());
    assert!((gaussian_blur(x.view(), &k).sum() - x.sum()).abs() < 1e-12);
}

#[test]
fn token_majority_vote() {
    let mut m = Array2::from_elem((4, 4), false);
    m[[0, 0]] = true;
    m[[0, 1]] = true;
    m[[2, 2]] = true;
    let t = downsample_mask(m.view(), 2, 2);
    assert_eq!(t, array![[true, false], [false, false]]);
}

#[test]
fn model_attention_rows_are_distributions() {
    let (tax, train, _) = common::tiny_data(1, 0, 0);
    let model = PartSegModel::new(common::tiny_model()).unwrap();
    let out = model.forward(&train[0].image, &tax).unwrap();
    assert_eq!(out.attention.objects.len(), tax.num_objects());
    assert_eq!(out.attention.parts.len(), tax.num_parts());
    out.attention.validate(1e-9).unwrap();
}

fn grid(seed: u64, h: usize, w: usize) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((h, w), |_| rng.gen::<f64>())
}

proptest! {
    #[test]
    fn normalize_is_affine_invariant(seed in 0u64..1000, a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let x = grid(seed, 5, 6);
        let n1 = min_max_normalize(x.view());
        let n2 = min_max_normalize(x.mapv(|v| a * v + b).view());
        for (p, q) in n1.iter().zip(n2.iter()) {
            prop_assert!((p - q).abs() < 1e-9);
        }
        prop_assert!(n1.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn binarize_is_monotone_in_gamma(seed in 0u64..1000, g1 in 0.01f64..0.99, g2 in 0.01f64..0.99) {
        let x = grid(seed, 6, 6);
        let (lo, hi) = if g1 <= g2 { (g1, g2) } else { (g2, g1) };
        let bl = binarize(x.view(), lo);
        let bh = binarize(x.view(), hi);
        prop_assert!(bl.iter().zip(bh.iter()).all(|(&l, &h)| l || !h));
    }

    #[test]
    fn overlap_is_a_fraction_and_order_free(seed in 0u64..1000, n in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut masks = common::random_masks(&mut rng, n, 5, 7, 0.4);
        let f = overlap_fraction(&masks);
        prop_assert!((0.0..=1.0).contains(&f));
        masks.reverse();
        prop_assert_eq!(f, overlap_fraction(&masks));
    }

    #[test]
    fn soft_separation_tracks_hard(seed in 0u64..1000, n in 1usize..5, extra in 0usize..3) {
        let cfg = AttnControlConfig { tau: 1e-3, ..AttnControlConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let norms: Vec<Array2<f64>> = (0..n)
            .map(|_| Array2::from_shape_fn((8, 8), |_| loop {
                let v: f64 = rng.gen();
                if (v - cfg.gamma).abs() >= 10.0 * cfg.tau {
                    break v;
                }
            }))
            .collect();
        let b: Vec<Array2<bool>> = norms.iter().map(|m| binarize(m.view(), cfg.gamma)).collect();
        let c = n + extra;
        prop_assert!((separation_loss_soft(&norms, c, &cfg) - separation_loss_hard(&b, c)).abs() < 1e-6);
    }
}
