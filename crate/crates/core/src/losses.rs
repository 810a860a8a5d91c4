//! Mask supervision over object-specific parts, objects and generalized
//! parts, and the weighted total objective.

use ndarray::{s, Array2, Array3, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::LabelGrid;
use crate::model::{ChannelLayout, DecoderOutput};
use crate::taxonomy::Taxonomy;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_obj: f64,
    pub lambda_part: f64,
    pub lambda_sep: f64,
    pub lambda_enh: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_obj: 1.0, lambda_part: 1.0, lambda_sep: 0.1, lambda_enh: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("loss.lambda_obj", self.lambda_obj),
            ("loss.lambda_part", self.lambda_part),
            ("loss.lambda_sep", self.lambda_sep),
            ("loss.lambda_enh", self.lambda_enh),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(key, "must be a finite non-negative number"));
            }
        }
        Ok(())
    }
}

/// Binary targets per logit channel. The last object-specific part channel
/// and the last object channel are the uncategory channels; generalized
/// parts have none.
#[derive(Clone, Debug, PartialEq)]
pub struct SupervisionTargets {
    pub objpart: Vec<Array2<bool>>,
    pub objects: Vec<Array2<bool>>,
    pub parts: Vec<Array2<bool>>,
}

fn complement_of_union(masks: &[Array2<bool>], dim: (usize, usize)) -> Array2<bool> {
    let mut out = Array2::from_elem(dim, true);
    for m in masks {
        Zip::from(&mut out).and(m).for_each(|o, &v| *o &= !v);
    }
    out
}

/// Targets from an obj-part label grid (0 = background, `k` = pair `k - 1`).
pub fn derive_targets(label: &LabelGrid, taxonomy: &Taxonomy) -> Result<SupervisionTargets> {
    let k_total = taxonomy.num_pairs();
    if let Some(&v) = label.0.iter().find(|&&v| v as usize > k_total) {
        return Err(Error::LabelOutOfRange { value: v as u32, max: k_total });
    }
    let dim = label.0.dim();
    let mut objpart: Vec<Array2<bool>> = (0..k_total).map(|_| Array2::from_elem(dim, false)).collect();
    let mut objects: Vec<Array2<bool>> = (0..taxonomy.num_objects()).map(|_| Array2::from_elem(dim, false)).collect();
    let mut parts: Vec<Array2<bool>> = (0..taxonomy.num_parts()).map(|_| Array2::from_elem(dim, false)).collect();
    for ((y, x), &v) in label.0.indexed_iter() {
        if v == 0 {
            continue;
        }
        let k = v as usize - 1;
        let (o, p) = taxonomy.pair(k);
        objpart[k][[y, x]] = true;
        objects[o][[y, x]] = true;
        parts[p][[y, x]] = true;
    }
    objpart.push(complement_of_union(&objpart, dim));
    objects.push(complement_of_union(&objects, dim));
    Ok(SupervisionTargets { objpart, objects, parts })
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Pixel-mean binary cross-entropy with logits.
pub fn bce_masked(logits: ArrayView2<f64>, target: ArrayView2<bool>) -> f64 {
    let n = logits.len() as f64;
    let mut total = 0.0;
    Zip::from(&logits).and(&target).for_each(|&z, &t| {
        // -[t log σ(z) + (1-t) log(1-σ(z))] = softplus(z) - t z
        total += softplus(z) - if t { z } else { 0.0 };
    });
    total / n
}

pub fn bce_masked_grad(logits: ArrayView2<f64>, target: ArrayView2<bool>) -> Array2<f64> {
    let n = logits.len() as f64;
    let mut g = Array2::zeros(logits.raw_dim());
    Zip::from(&mut g).and(&logits).and(&target).for_each(|g, &z, &t| {
        *g = (sigmoid(z) - if t { 1.0 } else { 0.0 }) / n;
    });
    g
}

/// `(channel, weight, target)` for every supervised channel.
fn supervised_channels<'a>(
    layout: &ChannelLayout,
    targets: &'a SupervisionTargets,
    w: &LossWeights,
) -> Result<Vec<(usize, f64, &'a Array2<bool>)>> {
    let expected = (layout.pairs + 1, layout.objects + 1, layout.parts);
    let got = (targets.objpart.len(), targets.objects.len(), targets.parts.len());
    if expected != got {
        return Err(Error::ChannelMismatch {
            expected: layout.total(),
            got: got.0 + got.1 + got.2,
        });
    }
    let mut out = Vec::with_capacity(layout.total());
    for (k, t) in targets.objpart.iter().enumerate() {
        out.push((k, 1.0, t));
    }
    for (o, t) in targets.objects.iter().enumerate() {
        out.push((layout.pairs + 1 + o, w.lambda_obj, t));
    }
    for (p, t) in targets.parts.iter().enumerate() {
        out.push((layout.part(p), w.lambda_part, t));
    }
    Ok(out)
}

fn check_logits(out: &DecoderOutput) -> Result<()> {
    let c = out.mask_logits.dim().0;
    if c != out.layout.total() {
        return Err(Error::ChannelMismatch { expected: out.layout.total(), got: c });
    }
    Ok(())
}

/// Weighted sum of per-channel BCE over the three channel groups.
pub fn mask_loss(out: &DecoderOutput, targets: &SupervisionTargets, w: &LossWeights) -> Result<f64> {
    check_logits(out)?;
    let mut total = 0.0;
    for (c, weight, t) in supervised_channels(&out.layout, targets, w)? {
        if weight != 0.0 {
            total += weight * bce_masked(out.mask_logits.slice(s![c, .., ..]), t.view());
        }
    }
    Ok(total)
}

pub fn mask_loss_grad(out: &DecoderOutput, targets: &SupervisionTargets, w: &LossWeights) -> Result<(f64, Array3<f64>)> {
    check_logits(out)?;
    let mut total = 0.0;
    let mut grad = Array3::zeros(out.mask_logits.raw_dim());
    for (c, weight, t) in supervised_channels(&out.layout, targets, w)? {
        if weight == 0.0 {
            continue;
        }
        let z = out.mask_logits.slice(s![c, .., ..]);
        total += weight * bce_masked(z, t.view());
        grad.slice_mut(s![c, .., ..]).assign(&(bce_masked_grad(z, t.view()) * weight));
    }
    Ok((total, grad))
}

/// `L_mask + λ_sep · L_sep + λ_enh · L_enh`.
pub fn total_loss(mask: f64, sep: f64, enh: f64, w: &LossWeights) -> f64 {
    mask + w.lambda_sep * sep + w.lambda_enh * enh
}
