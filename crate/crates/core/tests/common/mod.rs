#![allow(dead_code)]

use ndarray::Array2;
use partseg::data::{generate_samples, Sample, SynthConfig};
use partseg::harness::TrainConfig;
use partseg::metrics::LabelGrid;
use partseg::model::{ImageSpec, ModelConfig};
use partseg::taxonomy::Taxonomy;
use rand::Rng;

/// Small synthetic split at 32x32 for fast harness tests.
pub fn tiny_data(train: usize, val: usize, seed: u64) -> (Taxonomy, Vec<Sample>, Vec<Sample>) {
    let cfg = SynthConfig { height: 32, width: 32, train_samples: train, val_samples: val, seed, ..SynthConfig::default() };
    generate_samples(&cfg).unwrap()
}

pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        image: ImageSpec { height: 32, width: 32, token_h: 8, token_w: 8, embed_dim: 8 },
        hidden_dim: 12,
        num_blocks: 2,
        ..ModelConfig::default()
    }
}

pub fn tiny_train(iters: usize) -> TrainConfig {
    TrainConfig {
        total_iters: iters,
        batch_size: 2,
        warmup_iters: 1,
        base_lr: 3e-3,
        checkpoint_every: 0,
        ..TrainConfig::default()
    }
}

pub fn random_grid<R: Rng>(rng: &mut R, h: usize, w: usize, classes: u16) -> LabelGrid {
    LabelGrid(Array2::from_shape_fn((h, w), |_| rng.gen_range(0..classes)))
}

/// Random grid made of a few rectangles so masks have real boundaries.
pub fn blocky_grid<R: Rng>(rng: &mut R, h: usize, w: usize, classes: u16) -> LabelGrid {
    let mut g = Array2::zeros((h, w));
    for _ in 0..rng.gen_range(1..6) {
        let c = rng.gen_range(0..classes);
        let (y0, x0) = (rng.gen_range(0..h), rng.gen_range(0..w));
        let (y1, x1) = (rng.gen_range(y0..h) + 1, rng.gen_range(x0..w) + 1);
        for y in y0..y1 {
            for x in x0..x1 {
                g[[y, x]] = c;
            }
        }
    }
    LabelGrid(g)
}

pub fn random_masks<R: Rng>(rng: &mut R, n: usize, h: usize, w: usize, p: f64) -> Vec<Array2<bool>> {
    (0..n).map(|_| Array2::from_shape_fn((h, w), |_| rng.gen_bool(p))).collect()
}

pub mod oracle {
    //! Direct counting implementations used to cross-check the library.

    use ndarray::Array2;
    use partseg::metrics::LabelGrid;

    pub fn overlap_counts(masks: &[Array2<bool>]) -> (usize, usize) {
        let (h, w) = masks[0].dim();
        let mut overlap = 0;
        let mut union = 0;
        for y in 0..h {
            for x in 0..w {
                let n = masks.iter().filter(|m| m[[y, x]]).count();
                if n >= 2 {
                    overlap += 1;
                }
                if n >= 1 {
                    union += 1;
                }
            }
        }
        (overlap, union)
    }

    /// Per-class (intersection, union, gt count) over all grid pairs.
    pub fn class_counts(preds: &[LabelGrid], gts: &[LabelGrid], classes: usize) -> Vec<(u64, u64, u64)> {
        let mut out = vec![(0, 0, 0); classes];
        for (p, g) in preds.iter().zip(gts) {
            for (&a, &b) in p.0.iter().zip(g.0.iter()) {
                for (c, o) in out.iter_mut().enumerate() {
                    let (pa, gb) = (a as usize == c, b as usize == c);
                    o.0 += (pa && gb) as u64;
                    o.1 += (pa || gb) as u64;
                    o.2 += gb as u64;
                }
            }
        }
        out
    }

    /// `(numerator, denominator)` pairs of the defined per-class IoUs.
    pub fn miou_terms(preds: &[LabelGrid], gts: &[LabelGrid], classes: &[usize], n: usize) -> Vec<(u64, u64)> {
        let counts = class_counts(preds, gts, n);
        classes.iter().map(|&c| (counts[c].0, counts[c].1)).filter(|&(_, u)| u > 0).collect()
    }

    pub fn recall_terms(preds: &[LabelGrid], gts: &[LabelGrid], classes: &[usize], n: usize) -> Vec<(u64, u64)> {
        let counts = class_counts(preds, gts, n);
        classes.iter().map(|&c| (counts[c].0, counts[c].2)).filter(|&(_, a)| a > 0).collect()
    }

    /// A mask pixel is on the boundary band when some pixel within
    /// Manhattan distance `d` is outside the grid or outside the mask.
    pub fn band(mask: &Array2<bool>, d: usize) -> Array2<bool> {
        let (h, w) = mask.dim();
        let d = d as i64;
        Array2::from_shape_fn((h, w), |(y, x)| {
            if !mask[[y, x]] {
                return false;
            }
            for dy in -d..=d {
                for dx in -d..=d {
                    if dy.abs() + dx.abs() > d {
                        continue;
                    }
                    let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                    if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 || !mask[[yy as usize, xx as usize]] {
                        return true;
                    }
                }
            }
            false
        })
    }

    pub fn boundary_counts(pred: &LabelGrid, gt: &LabelGrid, class: u16, d: usize) -> (u64, u64) {
        let pb = band(&pred.0.mapv(|v| v == class), d);
        let gb = band(&gt.0.mapv(|v| v == class), d);
        let mut i = 0;
        let mut u = 0;
        for (&a, &b) in pb.iter().zip(gb.iter()) {
            i += (a && b) as u64;
            u += (a || b) as u64;
        }
        (i, u)
    }

    pub fn mean_of(terms: &[(u64, u64)]) -> f64 {
        terms.iter().map(|&(a, b)| a as f64 / b as f64).sum::<f64>() / terms.len() as f64
    }
}
