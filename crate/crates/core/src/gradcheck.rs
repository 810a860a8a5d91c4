//! Central finite-difference checks of every analytic gradient.
//!
//! The error of one instance is `max_i |a_i − n_i| / max(‖a‖∞, ‖n‖∞, 1e-8)`
//! between the analytic gradient `a` and the numeric gradient `n`. Random
//! instances are drawn away from the non-differentiable sets (ReLU kinks,
//! ties in the min-max normalization and in the enhancement peak selection);
//! a draw too close to one is redrawn.

use std::time::Instant;

use ndarray::{Array1, Array2, Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::attncontrol::{
    aggregate_mask_attention, enhancement_loss, enhancement_loss_grad, normalize_and_smooth, separation_loss_soft,
    separation_loss_soft_grad, AttentionStack, AttnControlConfig, EnhanceMap,
};
use crate::harness::{mask_regions, sample_loss_grad, TrainItem};
use crate::losses::{bce_masked, bce_masked_grad, derive_targets, mask_loss, mask_loss_grad, LossWeights};
use crate::metrics::LabelGrid;
use crate::model::{ChannelLayout, DecoderBlock, DecoderOutput, FilmHead, ImageSpec, MaskHead, ModelConfig, PartSegModel, ProjHead};
use crate::taxonomy::Taxonomy;

pub const TOLERANCE: f64 = 1e-4;
pub const STEP: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct CheckSummary {
    pub name: String,
    pub instances: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub seconds: f64,
}

impl CheckSummary {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

pub fn numeric_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = analytic.iter().zip(numeric).fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    diff / inf(analytic).max(inf(numeric)).max(1e-8)
}

fn run(name: &str, instances: usize, seed: u64, mut instance: impl FnMut(&mut ChaCha8Rng) -> f64) -> CheckSummary {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let e = instance(&mut rng);
        worst = if e.is_nan() { f64::INFINITY } else { worst.max(e) };
    }
    CheckSummary {
        name: name.to_string(),
        instances,
        max_rel_error: worst,
        tolerance: TOLERANCE,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Concatenation of arrays into one flat vector, and back.
#[derive(Default)]
struct Packing {
    shapes: Vec<Vec<usize>>,
}

impl Packing {
    fn pack(&mut self, arrays: impl IntoIterator<Item = ArrayD<f64>>) -> Vec<f64> {
        let mut flat = Vec::new();
        self.shapes.clear();
        for a in arrays {
            self.shapes.push(a.shape().to_vec());
            flat.extend(a.iter());
        }
        flat
    }

    fn unpack(&self, flat: &[f64]) -> Vec<ArrayD<f64>> {
        let mut out = Vec::with_capacity(self.shapes.len());
        let mut i = 0;
        for s in &self.shapes {
            let n: usize = s.iter().product();
            out.push(ArrayD::from_shape_vec(IxDyn(s), flat[i..i + n].to_vec()).expect("shape matches"));
            i += n;
        }
        out
    }
}

fn randn2(rng: &mut ChaCha8Rng, r: usize, c: usize, sd: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((r, c), || sd * rng.sample::<f64, _>(StandardNormal))
}

fn randn1(rng: &mut ChaCha8Rng, n: usize, sd: f64) -> Array1<f64> {
    Array1::from_shape_simple_fn(n, || sd * rng.sample::<f64, _>(StandardNormal))
}

fn uniform2(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((r, c), || rng.gen::<f64>())
}

fn random_mask(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<bool> {
    let mut m = Array2::from_shape_simple_fn((r, c), || rng.gen_bool(0.4));
    if !m.iter().any(|&b| b) {
        m[[rng.gen_range(0..r), rng.gen_range(0..c)]] = true;
    }
    m
}

fn d2(a: &ArrayD<f64>) -> Array2<f64> {
    a.clone().into_dimensionality().expect("2-D")
}

fn d1(a: &ArrayD<f64>) -> Array1<f64> {
    a.clone().into_dimensionality().expect("1-D")
}

fn flat_of<'a>(arrays: impl IntoIterator<Item = &'a Array2<f64>>) -> Vec<f64> {
    arrays.into_iter().flat_map(|a| a.iter().copied().collect::<Vec<_>>()).collect()
}

pub fn check_separation_soft(instances: usize, seed: u64) -> CheckSummary {
    run("separation_loss_soft", instances, seed, |rng| {
        let (c, h, w) = (rng.gen_range(2..5), rng.gen_range(3..7), rng.gen_range(3..7));
        let cfg = AttnControlConfig { gamma: rng.gen_range(0.2..0.6), tau: rng.gen_range(0.1..0.3), ..Default::default() };
        let total = c + rng.gen_range(0..3);
        let maps: Vec<Array2<f64>> = (0..c).map(|_| uniform2(rng, h, w)).collect();
        let (_, grads) = separation_loss_soft_grad(&maps, total, &cfg);
        let x = flat_of(&maps);
        let numeric = numeric_gradient(&x, STEP, |v| {
            let m: Vec<Array2<f64>> =
                v.chunks(h * w).map(|s| Array2::from_shape_vec((h, w), s.to_vec()).expect("grid")).collect();
            separation_loss_soft(&m, total, &cfg)
        });
        relative_error(&flat_of(&grads), &numeric)
    })
}

/// Smallest gap between the top two values of `v`.
fn top_gap(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return f64::INFINITY;
    }
    let mut s = v.to_vec();
    s.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
    s[0] - s[1]
}

fn bottom_gap(v: &[f64]) -> f64 {
    let neg: Vec<f64> = v.iter().map(|x| -x).collect();
    top_gap(&neg)
}

/// Distance of an enhancement instance to a tie in the peak selection.
fn enhancement_margin(maps: &[(Array2<f64>, Array2<bool>)]) -> f64 {
    let mut margin = f64::INFINITY;
    let mut peaks = Vec::new();
    for (m, mask) in maps {
        let inside: Vec<f64> = m.iter().zip(mask.iter()).filter(|(_, &b)| b).map(|(&v, _)| v).collect();
        margin = margin.min(top_gap(&inside));
        peaks.push(inside.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)));
    }
    margin.min(bottom_gap(&peaks))
}

pub fn check_enhancement(instances: usize, seed: u64) -> CheckSummary {
    run("enhancement_loss", instances, seed, |rng| {
        let (c, h, w) = (rng.gen_range(1..5), rng.gen_range(3..7), rng.gen_range(3..7));
        let maps = loop {
            let maps: Vec<(Array2<f64>, Array2<bool>)> =
                (0..c).map(|_| (uniform2(rng, h, w), random_mask(rng, h, w))).collect();
            if enhancement_margin(&maps) > 1e-3 {
                break maps;
            }
        };
        let (_, grads) = enhancement_loss_grad(&maps).expect("nonempty masks");
        let x = flat_of(maps.iter().map(|(m, _)| m));
        let numeric = numeric_gradient(&x, STEP, |v| {
            let m: Vec<(Array2<f64>, Array2<bool>)> = v
                .chunks(h * w)
                .zip(&maps)
                .map(|(s, (_, mask))| (Array2::from_shape_vec((h, w), s.to_vec()).expect("grid"), mask.clone()))
                .collect();
            enhancement_loss(&m).expect("nonempty masks")
        });
        relative_error(&flat_of(&grads), &numeric)
    })
}

pub fn check_bce(instances: usize, seed: u64) -> CheckSummary {
    run("bce_masked", instances, seed, |rng| {
        let (h, w) = (rng.gen_range(2..8), rng.gen_range(2..8));
        let logits = randn2(rng, h, w, 3.0);
        let target = random_mask(rng, h, w);
        let g = bce_masked_grad(logits.view(), target.view());
        let numeric = numeric_gradient(logits.as_slice().expect("standard"), STEP, |v| {
            let l = Array2::from_shape_vec((h, w), v.to_vec()).expect("grid");
            bce_masked(l.view(), target.view())
        });
        relative_error(g.as_slice().expect("standard"), &numeric)
    })
}

fn small_taxonomy(rng: &mut ChaCha8Rng) -> Taxonomy {
    let objects = ["cat", "dog", "car"];
    let parts = ["head", "leg", "wheel", "tail"];
    let mut names = Vec::new();
    for o in &objects[..rng.gen_range(1..4)] {
        let mut any = false;
        for p in parts {
            if rng.gen_bool(0.6) {
                names.push(format!("{o}'s {p}"));
                any = true;
            }
        }
        if !any {
            names.push(format!("{o}'s head"));
        }
    }
    Taxonomy::build(&names, &Vec::<String>::new()).expect("valid names")
}

fn random_label(rng: &mut ChaCha8Rng, h: usize, w: usize, block: usize, classes: usize) -> LabelGrid {
    let cells = Array2::from_shape_simple_fn((h.div_ceil(block), w.div_ceil(block)), || rng.gen_range(0..=classes) as u16);
    LabelGrid(Array2::from_shape_fn((h, w), |(y, x)| cells[[y / block, x / block]]))
}

pub fn check_mask_loss(instances: usize, seed: u64) -> CheckSummary {
    run("mask_loss", instances, seed, |rng| {
        let tax = small_taxonomy(rng);
        let layout = ChannelLayout::for_taxonomy(&tax);
        let (h, w) = (rng.gen_range(3..7), rng.gen_range(3..7));
        let label = random_label(rng, h, w, 1, tax.num_pairs());
        let targets = derive_targets(&label, &tax).expect("labels in range");
        let weights = LossWeights {
            lambda_obj: rng.gen_range(0.0..2.0),
            lambda_part: rng.gen_range(0.0..2.0),
            ..Default::default()
        };
        let attention = AttentionStack { token_h: 1, token_w: 1, objects: vec![], parts: vec![] };
        let logits = Array3::from_shape_simple_fn((layout.total(), h, w), || 2.0 * rng.sample::<f64, _>(StandardNormal));
        let out = DecoderOutput { layout, mask_logits: logits.clone(), attention };
        let (_, g) = mask_loss_grad(&out, &targets, &weights).expect("matching channels");
        let numeric = numeric_gradient(logits.as_slice().expect("standard"), STEP, |v| {
            let mut o = out.clone();
            o.mask_logits = Array3::from_shape_vec(logits.raw_dim(), v.to_vec()).expect("shape");
            mask_loss(&o, &targets, &weights).expect("matching channels")
        });
        relative_error(g.as_slice().expect("standard"), &numeric)
    })
}

fn tiny_model(rng: &mut ChaCha8Rng) -> PartSegModel {
    let cfg = ModelConfig {
        image: ImageSpec { height: 8, width: 8, token_h: 4, token_w: 4, embed_dim: 4 },
        hidden_dim: 6,
        num_blocks: 2,
        encoder_seed: rng.gen(),
        init_seed: rng.gen(),
    };
    let mut model = PartSegModel::new(cfg).expect("valid config");
    // move away from the zero-initialized biases so every parameter matters
    for (_, mut t) in model.params.named_mut() {
        t.mapv_inplace(|v| v + 0.1 * rng.sample::<f64, _>(StandardNormal));
    }
    model
}

/// Distance of the attention pipeline to its kinks: ties at the min and max
/// of each raw map and in the enhancement peak selection.
fn attention_margin(model: &PartSegModel, item: &TrainItem, tax: &Taxonomy, cfg: &AttnControlConfig) -> f64 {
    let Ok((out, trace)) = model.forward_features(&item.features, tax) else {
        return 0.0;
    };
    let mut margin = trace.relu_margin();
    let mut enh = Vec::new();
    for r in &item.regions {
        let raw = aggregate_mask_attention(&out.attention, r.mask.view(), r.object, r.part).expect("valid region");
        let v: Vec<f64> = raw.iter().copied().collect();
        margin = margin.min(top_gap(&v)).min(bottom_gap(&v));
        let map = match cfg.enhance_map {
            EnhanceMap::Normalized => normalize_and_smooth(raw.view(), cfg),
            EnhanceMap::Raw => raw,
        };
        enh.push((map, r.mask.clone()));
    }
    if !enh.is_empty() {
        margin = margin.min(enhancement_margin(&enh));
    }
    margin
}

/// Total loss of one sample, end to end through the model, with respect to
/// a random subset of the trainable parameters.
pub fn check_total_loss(instances: usize, seed: u64) -> CheckSummary {
    run("total_loss (end to end)", instances, seed, |rng| loop {
        let model = tiny_model(rng);
        let tax = small_taxonomy(rng);
        let spec = model.spec();
        let image = ndarray::Array3::from_shape_simple_fn((spec.height, spec.width, 3), || rng.gen::<f64>());
        let label = random_label(rng, spec.height, spec.width, spec.patch_h(), tax.num_pairs());
        let item = TrainItem::new(&model, &image, &label, &tax).expect("valid sample");
        if item.regions.is_empty() || mask_regions(&label, &tax, spec.token_h, spec.token_w).len() != item.regions.len() {
            continue;
        }
        let weights = LossWeights {
            lambda_obj: rng.gen_range(0.5..1.5),
            lambda_part: rng.gen_range(0.5..1.5),
            lambda_sep: rng.gen_range(0.2..1.0),
            lambda_enh: rng.gen_range(0.2..1.0),
        };
        let attn = AttnControlConfig {
            tau: 0.2,
            enhance_map: if rng.gen_bool(0.5) { EnhanceMap::Normalized } else { EnhanceMap::Raw },
            ..Default::default()
        };
        if attention_margin(&model, &item, &tax, &attn) < 1e-5 {
            continue;
        }
        let (_, grads) = sample_loss_grad(&model, &item, &tax, &weights, &attn).expect("forward succeeds");
        let theta = model.params.to_flat();
        let analytic = grads.to_flat();
        let coords: Vec<usize> = (0..24).map(|_| rng.gen_range(0..theta.len())).collect();
        let mut probe = model.clone();
        let mut f = |t: &[f64]| {
            probe.params.set_flat(t);
            sample_loss_grad(&probe, &item, &tax, &weights, &attn).expect("forward succeeds").0.total
        };
        let mut numeric = Vec::with_capacity(coords.len());
        let mut x = theta.clone();
        for &i in &coords {
            x[i] = theta[i] + STEP;
            let up = f(&x);
            x[i] = theta[i] - STEP;
            let down = f(&x);
            x[i] = theta[i];
            numeric.push((up - down) / (2.0 * STEP));
        }
        let picked: Vec<f64> = coords.iter().map(|&i| analytic[i]).collect();
        break relative_error(&picked, &numeric);
    })
}

pub fn check_film_head(instances: usize, seed: u64) -> CheckSummary {
    run("FiLM head", instances, seed, |rng| {
        let (d, n) = (rng.gen_range(2..6), rng.gen_range(2..6));
        let head = FilmHead {
            scale_w: randn2(rng, d, d, 0.5),
            scale_b: randn1(rng, d, 0.5),
            shift_w: randn2(rng, d, d, 0.5),
            shift_b: randn1(rng, d, 0.5),
        };
        let feat = randn2(rng, n, d, 1.0);
        let text = randn1(rng, d, 1.0);
        let g = randn2(rng, n, d, 1.0);
        let grads = head.backward(feat.view(), text.view(), g.view());
        let mut p = Packing::default();
        let x = p.pack([
            head.scale_w.clone().into_dyn(),
            head.scale_b.clone().into_dyn(),
            head.shift_w.clone().into_dyn(),
            head.shift_b.clone().into_dyn(),
            feat.into_dyn(),
            text.into_dyn(),
        ]);
        let analytic = p.pack([
            grads.head.scale_w.into_dyn(),
            grads.head.scale_b.into_dyn(),
            grads.head.shift_w.into_dyn(),
            grads.head.shift_b.into_dyn(),
            grads.feat.into_dyn(),
            grads.text.into_dyn(),
        ]);
        let numeric = numeric_gradient(&x, STEP, |v| {
            let a = p.unpack(v);
            let h = FilmHead { scale_w: d2(&a[0]), scale_b: d1(&a[1]), shift_w: d2(&a[2]), shift_b: d1(&a[3]) };
            (h.forward(d2(&a[4]).view(), d1(&a[5]).view()).expect("shapes") * &g).sum()
        });
        relative_error(&analytic, &numeric)
    })
}

pub fn check_proj_head(instances: usize, seed: u64) -> CheckSummary {
    run("projection head", instances, seed, |rng| {
        let (d, n) = (rng.gen_range(2..6), rng.gen_range(1..6));
        let head = ProjHead { weight: randn2(rng, 2 * d, d, 0.5), bias: randn1(rng, d, 0.5) };
        let (obj, part) = (randn2(rng, n, d, 1.0), randn2(rng, n, d, 1.0));
        let g = randn2(rng, n, d, 1.0);
        let grads = head.backward(obj.view(), part.view(), g.view());
        let mut p = Packing::default();
        let x = p.pack([head.weight.clone().into_dyn(), head.bias.clone().into_dyn(), obj.into_dyn(), part.into_dyn()]);
        let analytic =
            p.pack([grads.head.weight.into_dyn(), grads.head.bias.into_dyn(), grads.obj.into_dyn(), grads.part.into_dyn()]);
        let numeric = numeric_gradient(&x, STEP, |v| {
            let a = p.unpack(v);
            let h = ProjHead { weight: d2(&a[0]), bias: d1(&a[1]) };
            (h.forward(d2(&a[2]).view(), d2(&a[3]).view()).expect("shapes") * &g).sum()
        });
        relative_error(&analytic, &numeric)
    })
}

pub fn check_decoder_block(instances: usize, seed: u64) -> CheckSummary {
    run("decoder block", instances, seed, |rng| loop {
        let (d, hid, n) = (rng.gen_range(2..5), rng.gen_range(2..7), rng.gen_range(2..6));
        let block = DecoderBlock {
            wq: randn2(rng, d, d, 0.7),
            wk: randn2(rng, d, d, 0.7),
            wv: randn2(rng, d, d, 0.7),
            wo: randn2(rng, d, d, 0.7),
            w1: randn2(rng, d, hid, 0.7),
            b1: randn1(rng, hid, 0.3),
            w2: randn2(rng, hid, d, 0.7),
            b2: randn1(rng, d, 0.3),
        };
        let x = randn2(rng, n, d, 1.0);
        let (_, cache) = block.forward(x.view());
        if cache.relu_margin() < 1e-4 {
            continue;
        }
        let g = randn2(rng, n, d, 1.0);
        let ga = randn2(rng, n, n, 1.0);
        let (gb, dx) = block.backward(&cache, g.view(), Some(ga.view()));
        let mut p = Packing::default();
        let parts = |b: &DecoderBlock| {
            [
                b.wq.clone().into_dyn(),
                b.wk.clone().into_dyn(),
                b.wv.clone().into_dyn(),
                b.wo.clone().into_dyn(),
                b.w1.clone().into_dyn(),
                b.b1.clone().into_dyn(),
                b.w2.clone().into_dyn(),
                b.b2.clone().into_dyn(),
            ]
        };
        let analytic = p.pack(parts(&gb).into_iter().chain([dx.into_dyn()]));
        let xs = p.pack(parts(&block).into_iter().chain([x.into_dyn()]));
        let numeric = numeric_gradient(&xs, STEP, |v| {
            let a = p.unpack(v);
            let b = DecoderBlock {
                wq: d2(&a[0]),
                wk: d2(&a[1]),
                wv: d2(&a[2]),
                wo: d2(&a[3]),
                w1: d2(&a[4]),
                b1: d1(&a[5]),
                w2: d2(&a[6]),
                b2: d1(&a[7]),
            };
            let (y, c) = b.forward(d2(&a[8]).view());
            (y * &g).sum() + (&c.attention * &ga).sum()
        });
        break relative_error(&analytic, &numeric);
    })
}

pub fn check_mask_head(instances: usize, seed: u64) -> CheckSummary {
    run("mask head", instances, seed, |rng| {
        let (d, n) = (rng.gen_range(2..6), rng.gen_range(2..8));
        let head = MaskHead { weight: randn1(rng, d, 1.0), bias: randn1(rng, 1, 1.0) };
        let feat = randn2(rng, n, d, 1.0);
        let g = randn1(rng, n, 1.0);
        let (gh, df) = head.backward(feat.view(), g.view());
        let mut p = Packing::default();
        let analytic = p.pack([gh.weight.into_dyn(), gh.bias.into_dyn(), df.into_dyn()]);
        let x = p.pack([head.weight.clone().into_dyn(), head.bias.clone().into_dyn(), feat.into_dyn()]);
        let numeric = numeric_gradient(&x, STEP, |v| {
            let a = p.unpack(v);
            let h = MaskHead { weight: d1(&a[0]), bias: d1(&a[1]) };
            (h.forward(d2(&a[2]).view()) * &g).sum()
        });
        relative_error(&analytic, &numeric)
    })
}

/// Every check with `instances` random instances each.
pub fn run_suite(instances: usize, seed: u64) -> Vec<CheckSummary> {
    vec![
        check_separation_soft(instances, seed),
        check_enhancement(instances, seed + 1),
        check_bce(instances, seed + 2),
        check_mask_loss(instances, seed + 3),
        check_total_loss(instances, seed + 4),
        check_film_head(instances, seed + 5),
        check_proj_head(instances, seed + 6),
        check_decoder_block(instances, seed + 7),
        check_mask_head(instances, seed + 8),
    ]
}

pub fn render_table(results: &[CheckSummary]) -> String {
    let mut out = format!("{:<26} {:>9} {:>13} {:>8} {:>6}\n", "check", "instances", "max rel err", "time s", "result");
    for r in results {
        out += &format!(
            "{:<26} {:>9} {:>13.3e} {:>8.2} {:>6}\n",
            r.name,
            r.instances,
            r.max_rel_error,
            r.seconds,
            if r.passed() { "pass" } else { "FAIL" }
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numeric_gradient_of_a_quadratic() {
        let g = numeric_gradient(&[1.0, -2.0], 1e-5, |v| v[0] * v[0] + 3.0 * v[1]);
        assert!((g[0] - 2.0).abs() < 1e-8 && (g[1] - 3.0).abs() < 1e-8);
        assert_eq!(relative_error(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
    }

    #[test]
    fn quick_suite_passes() {
        for r in run_suite(3, 11) {
            assert!(r.passed(), "{}: {}", r.name, r.max_rel_error);
        }
    }
}
