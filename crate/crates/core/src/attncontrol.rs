//! Attention control: per-mask aggregation of decoder self-attention,
//! min-max normalization with Gaussian smoothing, threshold binarization, and
//! the separation and enhancement losses built on top.
//!
//! Every differentiable step has a matching `*_backward`. Hard variants use
//! the exact indicator; the soft separation loss replaces it with sigmoid
//! memberships so gradients reach the attention maps.

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-category self-attention, one `(N, N)` row-stochastic matrix per
/// object channel and per generalized-part channel. Row `h * token_w + w`
/// is the attention of token `(h, w)` over the whole grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionStack {
    pub token_h: usize,
    pub token_w: usize,
    pub objects: Vec<Array2<f64>>,
    pub parts: Vec<Array2<f64>>,
}

impl AttentionStack {
    pub fn num_tokens(&self) -> usize {
        self.token_h * self.token_w
    }

    /// Checks that every row is a probability distribution.
    pub fn validate(&self, tol: f64) -> Result<()> {
        let n = self.num_tokens();
        for a in self.objects.iter().chain(&self.parts) {
            if a.dim() != (n, n) {
                return Err(Error::ShapeMismatch(format!("attention {:?}, expected ({n}, {n})", a.dim())));
            }
            for row in a.rows() {
                if row.iter().any(|&p| p < 0.0) || (row.sum() - 1.0).abs() > tol {
                    return Err(Error::ShapeMismatch("attention row is not a distribution".into()));
                }
            }
        }
        Ok(())
    }
}

/// Gradient with respect to every matrix of an [`AttentionStack`].
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionGrads {
    pub objects: Vec<Array2<f64>>,
    pub parts: Vec<Array2<f64>>,
}

impl AttentionGrads {
    pub fn zeros_like(stack: &AttentionStack) -> Self {
        Self {
            objects: stack.objects.iter().map(|a| Array2::zeros(a.raw_dim())).collect(),
            parts: stack.parts.iter().map(|a| Array2::zeros(a.raw_dim())).collect(),
        }
    }
}

/// Which map the enhancement loss reads its per-mask maxima from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnhanceMap {
    /// Smoothed min-max normalized map (bounded in `[0, 1]`).
    Normalized,
    /// Raw aggregated attention.
    Raw,
}

/// Denominator `|C|` of the separation loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SepCategories {
    /// Every object-specific part in the taxonomy.
    Taxonomy,
    /// Only categories present in the image.
    Present,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttnControlConfig {
    pub gamma: f64,
    pub gaussian_sigma: f64,
    pub gaussian_kernel: usize,
    pub tau: f64,
    pub eps: f64,
    pub enhance_map: EnhanceMap,
    pub sep_categories: SepCategories,
}

impl Default for AttnControlConfig {
    fn default() -> Self {
        Self {
            gamma: 0.3,
            gaussian_sigma: 1.0,
            gaussian_kernel: 3,
            tau: 0.05,
            eps: 1e-8,
            enhance_map: EnhanceMap::Normalized,
            sep_categories: SepCategories::Taxonomy,
        }
    }
}

impl AttnControlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::config("attn.gamma", "must lie in (0, 1)"));
        }
        if self.gaussian_kernel % 2 == 0 {
            return Err(Error::config("attn.gaussian_kernel", "must be odd"));
        }
        if self.gaussian_sigma <= 0.0 {
            return Err(Error::config("attn.gaussian_sigma", "must be positive"));
        }
        if self.tau <= 0.0 {
            return Err(Error::config("attn.tau", "must be positive"));
        }
        if self.eps <= 0.0 {
            return Err(Error::config("attn.eps", "must be positive"));
        }
        Ok(())
    }
}

/// Downsample a pixel mask to the token grid: a token is in the mask when at
/// least half of its pixels are.
pub fn downsample_mask(mask: ArrayView2<bool>, token_h: usize, token_w: usize) -> Array2<bool> {
    let (h, w) = mask.dim();
    let (ph, pw) = (h / token_h, w / token_w);
    Array2::from_shape_fn((token_h, token_w), |(th, tw)| {
        let count = mask
            .slice(ndarray::s![th * ph..(th + 1) * ph, tw * pw..(tw + 1) * pw])
            .iter()
            .filter(|&&b| b)
            .count();
        2 * count >= ph * pw
    })
}

/// Mean over the masked tokens of the summed object and part attention rows.
pub fn aggregate_mask_attention(
    stack: &AttentionStack,
    mask: ArrayView2<bool>,
    object: usize,
    part: usize,
) -> Result<Array2<f64>> {
    if mask.dim() != (stack.token_h, stack.token_w) {
        return Err(Error::ShapeMismatch(format!(
            "mask {:?} does not match token grid {}x{}",
            mask.dim(),
            stack.token_h,
            stack.token_w
        )));
    }
    let a_obj = stack.objects.get(object).ok_or(Error::UnknownObject(object))?;
    let a_part = stack
        .parts
        .get(part)
        .ok_or_else(|| Error::ShapeMismatch(format!("no attention for part {part}")))?;
    let tokens: Vec<usize> = mask.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect();
    if tokens.is_empty() {
        return Err(Error::EmptyMask);
    }
    let n = stack.num_tokens();
    let mut acc = ndarray::Array1::<f64>::zeros(n);
    for &t in &tokens {
        acc += &a_obj.row(t);
        acc += &a_part.row(t);
    }
    acc /= tokens.len() as f64;
    Ok(acc.into_shape_with_order((stack.token_h, stack.token_w)).expect("token vector reshapes"))
}

/// Scatter the gradient of an aggregated map back onto the attention rows.
pub fn aggregate_mask_attention_backward(
    grads: &mut AttentionGrads,
    mask: ArrayView2<bool>,
    object: usize,
    part: usize,
    grad_map: ArrayView2<f64>,
) {
    let count = mask.iter().filter(|&&b| b).count();
    if count == 0 {
        return;
    }
    let g = grad_map.iter().map(|v| v / count as f64).collect::<Vec<_>>();
    let g = ndarray::ArrayView1::from(&g);
    for (t, _) in mask.iter().enumerate().filter(|(_, &b)| b) {
        let mut row = grads.objects[object].row_mut(t);
        row += &g;
        let mut row = grads.parts[part].row_mut(t);
        row += &g;
    }
}

fn argmin_argmax(x: ArrayView2<f64>) -> (usize, usize) {
    let mut lo = 0;
    let mut hi = 0;
    let flat: Vec<f64> = x.iter().copied().collect();
    for (i, &v) in flat.iter().enumerate() {
        if v < flat[lo] {
            lo = i;
        }
        if v > flat[hi] {
            hi = i;
        }
    }
    (lo, hi)
}

/// `(x - min) / (max - min)`; a constant map normalizes to all zeros.
pub fn min_max_normalize(raw: ArrayView2<f64>) -> Array2<f64> {
    let (lo, hi) = argmin_argmax(raw);
    let flat: Vec<f64> = raw.iter().copied().collect();
    let (min, max) = (flat[lo], flat[hi]);
    let range = max - min;
    if range <= 0.0 {
        return Array2::zeros(raw.raw_dim());
    }
    raw.mapv(|v| (v - min) / range)
}

pub fn min_max_normalize_backward(raw: ArrayView2<f64>, grad_out: ArrayView2<f64>) -> Array2<f64> {
    let (lo, hi) = argmin_argmax(raw);
    let flat: Vec<f64> = raw.iter().copied().collect();
    let (min, max) = (flat[lo], flat[hi]);
    let range = max - min;
    if range <= 0.0 {
        return Array2::zeros(raw.raw_dim());
    }
    let mut grad = grad_out.mapv(|g| g / range);
    let mut d_min = 0.0;
    let mut d_max = 0.0;
    Zip::from(&raw).and(&grad_out).for_each(|&x, &g| {
        let n = (x - min) / range;
        d_min += g * (n - 1.0) / range;
        d_max -= g * n / range;
    });
    let cols = raw.ncols();
    grad[[lo / cols, lo % cols]] += d_min;
    grad[[hi / cols, hi % cols]] += d_max;
    grad
}

/// Normalized 1-D Gaussian weights of odd length `size`.
pub fn gaussian_kernel(sigma: f64, size: usize) -> Vec<f64> {
    let r = (size / 2) as isize;
    let w: Vec<f64> = (-r..=r).map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = w.iter().sum();
    w.into_iter().map(|v| v / sum).collect()
}

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m >= n { period - 1 - m } else { m }) as usize
}

fn blur_matrix(kernel: &[f64], n: usize) -> Array2<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut m = Array2::zeros((n, n));
    for i in 0..n {
        for (j, &w) in kernel.iter().enumerate() {
            let src = reflect(i as isize + j as isize - r, n);
            m[[i, src]] += w;
        }
    }
    m
}

/// Separable Gaussian blur with reflect padding.
pub fn gaussian_blur(x: ArrayView2<f64>, kernel: &[f64]) -> Array2<f64> {
    let (h, w) = x.dim();
    blur_matrix(kernel, h).dot(&x).dot(&blur_matrix(kernel, w).t())
}

pub fn gaussian_blur_backward(grad_out: ArrayView2<f64>, kernel: &[f64]) -> Array2<f64> {
    let (h, w) = grad_out.dim();
    blur_matrix(kernel, h).t().dot(&grad_out).dot(&blur_matrix(kernel, w))
}

/// Min-max normalization followed by Gaussian smoothing.
pub fn normalize_and_smooth(raw: ArrayView2<f64>, cfg: &AttnControlConfig) -> Array2<f64> {
    let kernel = gaussian_kernel(cfg.gaussian_sigma, cfg.gaussian_kernel);
    gaussian_blur(min_max_normalize(raw).view(), &kernel)
}

pub fn normalize_and_smooth_backward(
    raw: ArrayView2<f64>,
    grad_out: ArrayView2<f64>,
    cfg: &AttnControlConfig,
) -> Array2<f64> {
    let kernel = gaussian_kernel(cfg.gaussian_sigma, cfg.gaussian_kernel);
    let g = gaussian_blur_backward(grad_out, &kernel);
    min_max_normalize_backward(raw, g.view())
}

/// `1` exactly where `norm >= gamma`.
pub fn binarize(norm: ArrayView2<f64>, gamma: f64) -> Array2<bool> {
    norm.mapv(|v| v >= gamma)
}

fn coverage_counts(binaries: &[Array2<bool>]) -> (usize, usize) {
    let Some(first) = binaries.first() else {
        return (0, 0);
    };
    let mut cover = Array2::<usize>::zeros(first.raw_dim());
    for b in binaries {
        Zip::from(&mut cover).and(b).for_each(|c, &v| *c += v as usize);
    }
    let overlap = cover.iter().filter(|&&c| c > 1).count();
    let union = cover.iter().filter(|&&c| c >= 1).count();
    (overlap, union)
}

/// `|{Σ B > 1}| / |{Σ B ≥ 1}|`, or 0 on an empty union.
pub fn overlap_fraction(binaries: &[Array2<bool>]) -> f64 {
    let (overlap, union) = coverage_counts(binaries);
    if union == 0 {
        0.0
    } else {
        overlap as f64 / union as f64
    }
}

/// Hard separation loss: overlap fraction of the binarized maps over `|C|`.
pub fn separation_loss_hard(binaries: &[Array2<bool>], num_categories: usize) -> f64 {
    if num_categories == 0 {
        return 0.0;
    }
    overlap_fraction(binaries) / num_categories as f64
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Probabilities that none / exactly one of the memberships is active,
/// skipping index `skip`.
fn none_and_one(b: &[f64], skip: Option<usize>) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = 0.0;
    for (c, &v) in b.iter().enumerate() {
        if Some(c) == skip {
            continue;
        }
        p1 = p1 * (1.0 - v) + p0 * v;
        p0 *= 1.0 - v;
    }
    (p0, p1)
}

/// Soft separation loss and its gradient with respect to each normalized map.
///
/// With memberships `b_c = σ((norm_c − γ)/τ)`, the per-pixel union is
/// `1 − Π(1 − b_c)` and the per-pixel overlap is the probability that at
/// least two memberships are active. Both equal the hard indicator counts
/// when every `b_c ∈ {0, 1}`.
pub fn separation_loss_soft_grad(
    norms: &[Array2<f64>],
    num_categories: usize,
    cfg: &AttnControlConfig,
) -> (f64, Vec<Array2<f64>>) {
    let mut grads: Vec<Array2<f64>> = norms.iter().map(|n| Array2::zeros(n.raw_dim())).collect();
    if norms.is_empty() || num_categories == 0 {
        return (0.0, grads);
    }
    let dim = norms[0].raw_dim();
    let pixels = norms[0].len();
    let memberships: Vec<Vec<f64>> = (0..pixels)
        .map(|i| norms.iter().map(|n| sigmoid((n.as_slice().expect("standard layout")[i] - cfg.gamma) / cfg.tau)).collect())
        .collect();
    let mut overlap = 0.0;
    let mut union = 0.0;
    for b in &memberships {
        let (p0, p1) = none_and_one(b, None);
        union += 1.0 - p0;
        overlap += 1.0 - p0 - p1;
    }
    let scale = 1.0 / num_categories as f64;
    let denom = union + cfg.eps;
    let loss = scale * overlap / denom;

    for (i, b) in memberships.iter().enumerate() {
        for (j, &bj) in b.iter().enumerate() {
            let (others_none, others_one) = none_and_one(b, Some(j));
            let d_b = scale * (others_one / denom - overlap * others_none / (denom * denom));
            let d_norm = d_b * bj * (1.0 - bj) / cfg.tau;
            grads[j].as_slice_mut().expect("standard layout")[i] = d_norm;
        }
    }
    debug_assert!(grads.iter().all(|g| g.raw_dim() == dim));
    (loss, grads)
}

pub fn separation_loss_soft(norms: &[Array2<f64>], num_categories: usize, cfg: &AttnControlConfig) -> f64 {
    separation_loss_soft_grad(norms, num_categories, cfg).0
}

/// `(category, flat index)` of the weakest per-mask peak.
fn weakest_peak(maps: &[(Array2<f64>, Array2<bool>)]) -> Result<(f64, usize, usize)> {
    if maps.is_empty() {
        return Err(Error::EmptyCategoryList);
    }
    let mut best: Option<(f64, usize, usize)> = None;
    for (c, (map, mask)) in maps.iter().enumerate() {
        if map.dim() != mask.dim() {
            return Err(Error::ShapeMismatch(format!("map {:?} vs mask {:?}", map.dim(), mask.dim())));
        }
        let mut peak: Option<(f64, usize)> = None;
        for (i, (&v, &m)) in map.iter().zip(mask.iter()).enumerate() {
            if m && peak.map_or(true, |(p, _)| v > p) {
                peak = Some((v, i));
            }
        }
        let (v, i) = peak.ok_or(Error::EmptyMask)?;
        if best.map_or(true, |(b, _, _)| v < b) {
            best = Some((v, c, i));
        }
    }
    Ok(best.expect("at least one category"))
}

/// `1 − min_c max_{(h,w) ∈ M_c} map_c(h, w)`.
pub fn enhancement_loss(maps: &[(Array2<f64>, Array2<bool>)]) -> Result<f64> {
    Ok(1.0 - weakest_peak(maps)?.0)
}

/// Enhancement loss and its subgradient: `-1` at the selected peak.
pub fn enhancement_loss_grad(maps: &[(Array2<f64>, Array2<bool>)]) -> Result<(f64, Vec<Array2<f64>>)> {
    let (v, c, i) = weakest_peak(maps)?;
    let mut grads: Vec<Array2<f64>> = maps.iter().map(|(m, _)| Array2::zeros(m.raw_dim())).collect();
    grads[c].as_slice_mut().expect("standard layout")[i] = -1.0;
    Ok((1.0 - v, grads))
}

/// One object-specific part present in an image, with its token-grid mask.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskRegion {
    pub pair: usize,
    pub object: usize,
    pub part: usize,
    pub mask: Array2<bool>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttnLosses {
    pub sep_soft: f64,
    pub sep_hard: f64,
    pub enh: f64,
    pub overlap_fraction: f64,
    pub present: usize,
}

struct PipelineMaps {
    raw: Vec<Array2<f64>>,
    norm: Vec<Array2<f64>>,
}

fn pipeline_maps(stack: &AttentionStack, regions: &[MaskRegion], cfg: &AttnControlConfig) -> Result<PipelineMaps> {
    let mut raw = Vec::with_capacity(regions.len());
    let mut norm = Vec::with_capacity(regions.len());
    for r in regions {
        let a = aggregate_mask_attention(stack, r.mask.view(), r.object, r.part)?;
        norm.push(normalize_and_smooth(a.view(), cfg));
        raw.push(a);
    }
    Ok(PipelineMaps { raw, norm })
}

fn sep_denominator(total_categories: usize, regions: &[MaskRegion], cfg: &AttnControlConfig) -> usize {
    match cfg.sep_categories {
        SepCategories::Taxonomy => total_categories,
        SepCategories::Present => regions.len(),
    }
}

/// Smoothed normalized maps, one per region.
pub fn normalized_maps(stack: &AttentionStack, regions: &[MaskRegion], cfg: &AttnControlConfig) -> Result<Vec<Array2<f64>>> {
    Ok(pipeline_maps(stack, regions, cfg)?.norm)
}

/// Full attention-control pipeline for one image. Regions with empty masks
/// must be filtered out by the caller.
pub fn attention_losses(
    stack: &AttentionStack,
    regions: &[MaskRegion],
    total_categories: usize,
    cfg: &AttnControlConfig,
) -> Result<AttnLosses> {
    Ok(attention_losses_grad(stack, regions, total_categories, cfg, 0.0, 0.0)?.0)
}

/// Like [`attention_losses`], also returning the gradient of
/// `w_sep · sep_soft + w_enh · enh` with respect to the attention stack.
pub fn attention_losses_grad(
    stack: &AttentionStack,
    regions: &[MaskRegion],
    total_categories: usize,
    cfg: &AttnControlConfig,
    w_sep: f64,
    w_enh: f64,
) -> Result<(AttnLosses, AttentionGrads)> {
    let mut grads = AttentionGrads::zeros_like(stack);
    if regions.is_empty() {
        return Ok((AttnLosses::default(), grads));
    }
    let maps = pipeline_maps(stack, regions, cfg)?;
    let n_sep = sep_denominator(total_categories, regions, cfg);
    let binaries: Vec<Array2<bool>> = maps.norm.iter().map(|m| binarize(m.view(), cfg.gamma)).collect();
    let (sep_soft, d_sep) = separation_loss_soft_grad(&maps.norm, n_sep, cfg);

    let enh_source = match cfg.enhance_map {
        EnhanceMap::Normalized => &maps.norm,
        EnhanceMap::Raw => &maps.raw,
    };
    let enh_inputs: Vec<(Array2<f64>, Array2<bool>)> =
        enh_source.iter().zip(regions).map(|(m, r)| (m.clone(), r.mask.clone())).collect();
    let (enh, d_enh) = enhancement_loss_grad(&enh_inputs)?;

    let losses = AttnLosses {
        sep_soft,
        sep_hard: separation_loss_hard(&binaries, n_sep),
        enh,
        overlap_fraction: overlap_fraction(&binaries),
        present: regions.len(),
    };

    if w_sep != 0.0 || w_enh != 0.0 {
        for (i, r) in regions.iter().enumerate() {
            let mut d_norm = &d_sep[i] * w_sep;
            let mut d_raw = Array2::zeros(maps.raw[i].raw_dim());
            match cfg.enhance_map {
                EnhanceMap::Normalized => d_norm.scaled_add(w_enh, &d_enh[i]),
                EnhanceMap::Raw => d_raw.scaled_add(w_enh, &d_enh[i]),
            }
            d_raw += &normalize_and_smooth_backward(maps.raw[i].view(), d_norm.view(), cfg);
            aggregate_mask_attention_backward(&mut grads, r.mask.view(), r.object, r.part, d_raw.view());
        }
    }
    Ok((losses, grads))
}
