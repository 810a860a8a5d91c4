//! Evaluation: streaming per-class confusion counts, mIoU, recall, harmonic
//! mean of seen and unseen scores, and Boundary IoU.
//!
//! A class whose union is empty (absent from both prediction and ground
//! truth everywhere) is undefined and left out of every mean.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

pub use crate::attncontrol::overlap_fraction;
use crate::error::{Error, Result};
use crate::taxonomy::Taxonomy;

/// `H×W` grid of class indices; 0 is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelGrid(pub Array2<u16>);

impl LabelGrid {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self(Array2::zeros((height, width)))
    }

    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn max_value(&self) -> u16 {
        self.0.iter().copied().max().unwrap_or(0)
    }

    pub fn mask_of(&self, class: u16) -> Array2<bool> {
        self.0.mapv(|v| v == class)
    }
}

fn check_shapes(pred: &LabelGrid, gt: &LabelGrid) -> Result<()> {
    if pred.dim() != gt.dim() {
        return Err(Error::ShapeMismatch(format!("prediction {:?} vs ground truth {:?}", pred.dim(), gt.dim())));
    }
    Ok(())
}

/// Per-class intersection and marginal counts. Mergeable: accumulating two
/// shards separately and merging equals accumulating them in sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionAccumulator {
    intersection: Vec<u64>,
    predicted: Vec<u64>,
    actual: Vec<u64>,
}

impl ConfusionAccumulator {
    /// `num_classes` includes background.
    pub fn new(num_classes: usize) -> Self {
        Self {
            intersection: vec![0; num_classes],
            predicted: vec![0; num_classes],
            actual: vec![0; num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.intersection.len()
    }

    pub fn accumulate(&mut self, pred: &LabelGrid, gt: &LabelGrid) -> Result<()> {
        check_shapes(pred, gt)?;
        let max = self.num_classes();
        for (&p, &g) in pred.0.iter().zip(gt.0.iter()) {
            let (p, g) = (p as usize, g as usize);
            if p >= max || g >= max {
                return Err(Error::LabelOutOfRange { value: p.max(g) as u32, max: max - 1 });
            }
            self.predicted[p] += 1;
            self.actual[g] += 1;
            if p == g {
                self.intersection[p] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) {
        assert_eq!(self.num_classes(), other.num_classes(), "merging accumulators of different widths");
        for (a, b) in self.intersection.iter_mut().zip(&other.intersection) {
            *a += b;
        }
        for (a, b) in self.predicted.iter_mut().zip(&other.predicted) {
            *a += b;
        }
        for (a, b) in self.actual.iter_mut().zip(&other.actual) {
            *a += b;
        }
    }

    pub fn intersection(&self, class: usize) -> u64 {
        self.intersection[class]
    }

    pub fn union(&self, class: usize) -> u64 {
        self.predicted[class] + self.actual[class] - self.intersection[class]
    }

    pub fn true_positives(&self, class: usize) -> u64 {
        self.intersection[class]
    }

    pub fn false_negatives(&self, class: usize) -> u64 {
        self.actual[class] - self.intersection[class]
    }

    pub fn iou(&self, class: usize) -> Option<f64> {
        let u = self.union(class);
        (u > 0).then(|| self.intersection[class] as f64 / u as f64)
    }

    pub fn class_recall(&self, class: usize) -> Option<f64> {
        let a = self.actual[class];
        (a > 0).then(|| self.intersection[class] as f64 / a as f64)
    }
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Result<f64> {
    let defined: Vec<f64> = values.flatten().collect();
    if defined.is_empty() {
        return Err(Error::NoDefinedClasses);
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Mean IoU over the defined classes of `classes`.
pub fn miou(acc: &ConfusionAccumulator, classes: &[usize]) -> Result<f64> {
    mean_defined(classes.iter().map(|&c| acc.iou(c)))
}

/// Mean of `TP / (TP + FN)` over the classes of `classes` present in the
/// ground truth.
pub fn recall(acc: &ConfusionAccumulator, classes: &[usize]) -> Result<f64> {
    mean_defined(classes.iter().map(|&c| acc.class_recall(c)))
}

/// `2su / (s + u)`, or 0 when both are 0.
pub fn harmonic(seen: f64, unseen: f64) -> f64 {
    if seen + unseen == 0.0 {
        0.0
    } else {
        2.0 * seen * unseen / (seen + unseen)
    }
}

/// `max(1, round(0.02 · diagonal))`.
pub fn default_boundary_width(height: usize, width: usize) -> usize {
    let diag = ((height * height + width * width) as f64).sqrt();
    ((0.02 * diag).round() as usize).max(1)
}

/// `d` rounds of 4-connected erosion; pixels outside the grid count as
/// background.
pub fn erode(mask: ArrayView2<bool>, d: usize) -> Array2<bool> {
    let (h, w) = mask.dim();
    let mut cur = mask.to_owned();
    for _ in 0..d {
        let prev = cur.clone();
        for y in 0..h {
            for x in 0..w {
                if !prev[[y, x]] {
                    continue;
                }
                let keep = y > 0
                    && x > 0
                    && y + 1 < h
                    && x + 1 < w
                    && prev[[y - 1, x]]
                    && prev[[y + 1, x]]
                    && prev[[y, x - 1]]
                    && prev[[y, x + 1]];
                cur[[y, x]] = keep;
            }
        }
    }
    cur
}

/// Mask pixels within distance `d` of its contour: `mask ∧ ¬erode(mask, d)`.
pub fn boundary_band(mask: ArrayView2<bool>, d: usize) -> Array2<bool> {
    let eroded = erode(mask, d);
    let mut band = mask.to_owned();
    Zip::from(&mut band).and(&eroded).for_each(|b, &e| *b &= !e);
    band
}

fn band_counts(pred: &LabelGrid, gt: &LabelGrid, class: u16, d: usize) -> (u64, u64) {
    let pb = boundary_band(pred.mask_of(class).view(), d);
    let gb = boundary_band(gt.mask_of(class).view(), d);
    let mut inter = 0;
    let mut union = 0;
    Zip::from(&pb).and(&gb).for_each(|&a, &b| {
        inter += (a && b) as u64;
        union += (a || b) as u64;
    });
    (inter, union)
}

/// IoU of the boundary bands of `class` in the two grids.
pub fn boundary_iou(pred: &LabelGrid, gt: &LabelGrid, class: u16, d: usize) -> Result<f64> {
    check_shapes(pred, gt)?;
    if d == 0 {
        return Err(Error::ShapeMismatch("boundary width must be at least 1".into()));
    }
    let (inter, union) = band_counts(pred, gt, class, d);
    if union == 0 {
        return Err(Error::ClassAbsentEverywhere(class as usize));
    }
    Ok(inter as f64 / union as f64)
}

/// Dataset-level Boundary IoU: band intersections and unions summed over
/// images per class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundaryAccumulator {
    width: Option<usize>,
    intersection: Vec<u64>,
    union: Vec<u64>,
}

impl BoundaryAccumulator {
    /// `width = None` uses [`default_boundary_width`] per image.
    pub fn new(num_classes: usize, width: Option<usize>) -> Self {
        Self { width, intersection: vec![0; num_classes], union: vec![0; num_classes] }
    }

    pub fn accumulate(&mut self, pred: &LabelGrid, gt: &LabelGrid) -> Result<()> {
        check_shapes(pred, gt)?;
        let (h, w) = gt.dim();
        let d = self.width.unwrap_or_else(|| default_boundary_width(h, w));
        let mut present = vec![false; self.intersection.len()];
        for &v in pred.0.iter().chain(gt.0.iter()) {
            if let Some(p) = present.get_mut(v as usize) {
                *p = true;
            } else {
                return Err(Error::LabelOutOfRange { value: v as u32, max: self.intersection.len() - 1 });
            }
        }
        for (c, _) in present.iter().enumerate().filter(|(_, &p)| p) {
            let (i, u) = band_counts(pred, gt, c as u16, d);
            self.intersection[c] += i;
            self.union[c] += u;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) {
        for (a, b) in self.intersection.iter_mut().zip(&other.intersection) {
            *a += b;
        }
        for (a, b) in self.union.iter_mut().zip(&other.union) {
            *a += b;
        }
    }

    pub fn iou(&self, class: usize) -> Option<f64> {
        let u = self.union[class];
        (u > 0).then(|| self.intersection[class] as f64 / u as f64)
    }
}

/// Seen, unseen and harmonic aggregate of one metric. A side with no defined
/// classes is `None`, as is the harmonic mean then.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitScores {
    pub seen: Option<f64>,
    pub unseen: Option<f64>,
    pub harmonic: Option<f64>,
}

impl SplitScores {
    fn from_fn(seen: &[usize], unseen: &[usize], f: impl Fn(&[usize]) -> Result<f64>) -> Self {
        let s = f(seen).ok();
        let u = f(unseen).ok();
        let h = match (s, u) {
            (Some(s), Some(u)) => Some(harmonic(s, u)),
            _ => None,
        };
        Self { seen: s, unseen: u, harmonic: h }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub iou: Option<f64>,
    pub boundary_iou: Option<f64>,
    pub recall: Option<f64>,
    pub unseen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub protocol: String,
    pub samples: usize,
    pub include_background: bool,
    pub miou: SplitScores,
    pub boundary_iou: SplitScores,
    pub recall: SplitScores,
    pub per_class: BTreeMap<String, ClassScores>,
    /// Mean hard overlap fraction of binarized attention maps, when measured.
    pub overlap_fraction: Option<f64>,
}

impl MetricReport {
    pub fn build(
        protocol: &str,
        samples: usize,
        taxonomy: &Taxonomy,
        confusion: &ConfusionAccumulator,
        boundary: &BoundaryAccumulator,
        include_background: bool,
    ) -> Self {
        let (seen_pairs, unseen_pairs) = taxonomy.split_indices();
        let mut seen: Vec<usize> = seen_pairs.iter().map(|k| k + 1).collect();
        let mut unseen: Vec<usize> = unseen_pairs.iter().map(|k| k + 1).collect();
        if include_background {
            seen.insert(0, 0);
            unseen.insert(0, 0);
        }
        let miou_scores = SplitScores::from_fn(&seen, &unseen, |c| miou(confusion, c));
        let recall_scores = SplitScores::from_fn(&seen, &unseen, |c| recall(confusion, c));
        let boundary_scores =
            SplitScores::from_fn(&seen, &unseen, |c| mean_defined(c.iter().map(|&k| boundary.iou(k))));
        let mut per_class = BTreeMap::new();
        if include_background {
            per_class.insert(
                "background".to_string(),
                ClassScores {
                    iou: confusion.iou(0),
                    boundary_iou: boundary.iou(0),
                    recall: confusion.class_recall(0),
                    unseen: false,
                },
            );
        }
        for (k, name) in taxonomy.obj_part_names().iter().enumerate() {
            per_class.insert(
                name.clone(),
                ClassScores {
                    iou: confusion.iou(k + 1),
                    boundary_iou: boundary.iou(k + 1),
                    recall: confusion.class_recall(k + 1),
                    unseen: taxonomy.is_unseen_pair(k),
                },
            );
        }
        Self {
            protocol: protocol.to_string(),
            samples,
            include_background,
            miou: miou_scores,
            boundary_iou: boundary_scores,
            recall: recall_scores,
            per_class,
            overlap_fraction: None,
        }
    }

    /// Seen / Unseen / Harmonic table, scores in percent.
    pub fn table(&self) -> String {
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.2}", 100.0 * v));
        let mut out = format!("{:<14} {:>8} {:>8} {:>9}\n", "Metric", "Seen", "Unseen", "Harmonic");
        for (name, s) in [("mIoU", &self.miou), ("Boundary IoU", &self.boundary_iou), ("Recall", &self.recall)] {
            out += &format!("{:<14} {:>8} {:>8} {:>9}\n", name, pct(s.seen), pct(s.unseen), pct(s.harmonic));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use ndarray::array;

    use super::*;

    #[test]
    fn identical_grids() {
        let g = LabelGrid(array![[0, 1, 1], [2, 2, 0]]);
        let mut acc = ConfusionAccumulator::new(3);
        acc.accumulate(&g, &g).unwrap();
        for c in 0..3 {
            assert_eq!(acc.intersection(c), acc.union(c));
        }
        assert_eq!(miou(&acc, &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(recall(&acc, &[1, 2]).unwrap(), 1.0);
    }

    #[test]
    fn all_background_prediction() {
        let pred = LabelGrid(Array2::zeros((2, 2)));
        let gt = LabelGrid(array![[1, 1], [0, 1]]);
        let mut acc = ConfusionAccumulator::new(2);
        acc.accumulate(&pred, &gt).unwrap();
        assert_eq!((acc.intersection(1), acc.union(1)), (0, 3));
        assert_eq!(recall(&acc, &[1]).unwrap(), 0.0);
    }

    #[test]
    fn hand_counted_miou() {
        let pred = LabelGrid(array![[1, 1], [0, 2]]);
        let gt = LabelGrid(array![[1, 0], [0, 2]]);
        let mut acc = ConfusionAccumulator::new(3);
        acc.accumulate(&pred, &gt).unwrap();
        assert_eq!(acc.iou(0), Some(0.5));
        assert_eq!(acc.iou(1), Some(0.5));
        assert_eq!(acc.iou(2), Some(1.0));
        assert!((miou(&acc, &[0, 1, 2]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(matches!(miou(&acc, &[]), Err(Error::NoDefinedClasses)));
    }

    #[test]
    fn undefined_classes_are_skipped() {
        let g = LabelGrid(array![[1, 1]]);
        let mut acc = ConfusionAccumulator::new(4);
        acc.accumulate(&g, &g).unwrap();
        assert_eq!(acc.iou(3), None);
        assert_eq!(miou(&acc, &[1, 3]).unwrap(), 1.0);
    }

    #[test]
    fn shape_mismatch() {
        let mut acc = ConfusionAccumulator::new(2);
        let err = acc.accumulate(&LabelGrid::zeros(2, 2), &LabelGrid::zeros(2, 3));
        assert!(matches!(err, Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn harmonic_cases() {
        assert!((harmonic(50.02, 31.67) - 38.79).abs() < 0.02);
        assert!((harmonic(0.4, 0.4) - 0.4).abs() < 1e-15);
        assert_eq!(harmonic(0.0, 0.7), 0.0);
        assert_eq!(harmonic(0.0, 0.0), 0.0);
    }

    #[test]
    fn boundary_identical_and_disjoint() {
        let mut a = Array2::zeros((8, 8));
        a.slice_mut(ndarray::s![1..5, 1..5]).fill(1u16);
        let mut b = Array2::zeros((8, 8));
        b.slice_mut(ndarray::s![5..8, 5..8]).fill(1u16);
        let (a, b) = (LabelGrid(a), LabelGrid(b));
        assert_eq!(boundary_iou(&a, &a, 1, 1).unwrap(), 1.0);
        assert_eq!(boundary_iou(&a, &b, 1, 1).unwrap(), 0.0);
        assert!(matches!(boundary_iou(&a, &b, 2, 1), Err(Error::ClassAbsentEverywhere(2))));
    }

    #[test]
    fn default_width() {
        assert_eq!(default_boundary_width(64, 64), 2);
        assert_eq!(default_boundary_width(8, 8), 1);
    }

    #[test]
    fn erosion_of_a_square() {
        let mut m = Array2::from_elem((5, 5), false);
        m.slice_mut(ndarray::s![1..4, 1..4]).fill(true);
        let e = erode(m.view(), 1);
        assert_eq!(e.iter().filter(|&&b| b).count(), 1);
        assert!(e[[2, 2]]);
    }
}
