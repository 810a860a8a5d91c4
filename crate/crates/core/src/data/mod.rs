//! Dataset ingestion and evaluation-protocol decoding.
//!
//! A dataset directory holds `images/` (RGB PNG), `labels/` (single-channel
//! 16-bit PNG, 0 = background, k = object-part index k, 1-based),
//! `manifest.tsv` with one `image<TAB>label` row per sample (paths relative
//! to the manifest), and `taxonomy.json`. The synthetic generator also writes
//! `train.tsv` and `val.tsv` in the same format.

mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use ndarray::{Array2, Array3, ArrayView2};

use crate::error::{Error, Result};
use crate::metrics::LabelGrid;
use crate::model::DecoderOutput;
use crate::taxonomy::Taxonomy;

pub use synth::{generate_samples, generate_synthetic, Shape, SynthConfig, SynthObject, SyntheticDataset, SYNTH_PARTS};

/// One image with its object-part labels and the derived object labels
/// (object index + 1, 0 = background).
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `(H, W, 3)` in `[0, 1]`.
    pub image: Array3<f64>,
    pub label: LabelGrid,
    pub object_label: LabelGrid,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Array3<f64>, label: LabelGrid, taxonomy: &Taxonomy) -> Result<Self> {
        let (h, w, c) = image.dim();
        if (h, w) != label.dim() || c != 3 {
            return Err(Error::ShapeMismatch(format!("image {:?} vs label {:?}", image.dim(), label.dim())));
        }
        let object_label = object_labels(&label, taxonomy)?;
        Ok(Self { id: id.into(), image, label, object_label })
    }

    /// Object indices present, ascending.
    pub fn objects(&self) -> Vec<usize> {
        let mut seen = std::collections::BTreeSet::new();
        for &v in self.object_label.0.iter() {
            if v > 0 {
                seen.insert(v as usize - 1);
            }
        }
        seen.into_iter().collect()
    }
}

/// Object label grid implied by an object-part label grid.
pub fn object_labels(label: &LabelGrid, taxonomy: &Taxonomy) -> Result<LabelGrid> {
    let k = taxonomy.num_pairs();
    let mut out = Array2::zeros(label.dim());
    for (o, &v) in out.iter_mut().zip(label.0.iter()) {
        if v == 0 {
            continue;
        }
        let idx = v as usize - 1;
        if idx >= k {
            return Err(Error::LabelOutOfRange { value: v as u32, max: k });
        }
        *o = (taxonomy.pair(idx).0 + 1) as u16;
    }
    Ok(LabelGrid(out))
}

/// Remap object-part labels through `remap` (old index to new index); pairs
/// mapped to `None` become background.
pub fn remap_labels(label: &LabelGrid, remap: &[Option<usize>]) -> LabelGrid {
    LabelGrid(label.0.mapv(|v| {
        if v == 0 {
            0
        } else {
            remap.get(v as usize - 1).copied().flatten().map_or(0, |k| (k + 1) as u16)
        }
    }))
}

/// A manifest row, loaded on demand.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleRef {
    /// 1-based manifest row.
    pub row: usize,
    pub image: PathBuf,
    pub label: PathBuf,
}

impl SampleRef {
    pub fn id(&self) -> String {
        self.image.file_stem().map_or_else(|| format!("row{}", self.row), |s| s.to_string_lossy().into_owned())
    }

    pub fn load(&self, taxonomy: &Taxonomy) -> Result<Sample> {
        for p in [&self.image, &self.label] {
            if !p.is_file() {
                return Err(Error::MissingFile { path: p.clone(), row: self.row });
            }
        }
        let image = read_image(&self.image)?;
        let label = read_label(&self.label)?;
        let max = taxonomy.num_pairs();
        let top = label.max_value();
        if top as usize > max {
            return Err(Error::BadLabelRange { path: self.label.clone(), value: top as u32, max });
        }
        Sample::new(self.id(), image, label, taxonomy)
    }
}

/// Parse a manifest; blank lines and `#` comments are skipped. Every named
/// file must exist.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<SampleRef>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut refs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let row = i + 1;
        let trimmed = line.trim_end_matches('\r');
        if trimmed.trim().is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut cols = trimmed.split('\t');
        let (Some(img), Some(lbl), None) = (cols.next(), cols.next(), cols.next()) else {
            return Err(Error::BadManifestRow { row, line: line.to_string() });
        };
        let r = SampleRef { row, image: base.join(img), label: base.join(lbl) };
        for p in [&r.image, &r.label] {
            if !p.is_file() {
                return Err(Error::MissingFile { path: p.clone(), row });
            }
        }
        refs.push(r);
    }
    Ok(refs)
}

pub fn load_samples(refs: &[SampleRef], taxonomy: &Taxonomy) -> Result<Vec<Sample>> {
    refs.iter().map(|r| r.load(taxonomy)).collect()
}

pub fn write_manifest(path: impl AsRef<Path>, rows: &[(String, String)]) -> Result<()> {
    let mut text = String::new();
    for (img, lbl) in rows {
        text.push_str(img);
        text.push('\t');
        text.push_str(lbl);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Array3<f64>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::zeros((h as usize, w as usize, 3));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[y as usize, x as usize, c]] = px.0[c] as f64 / 255.0;
        }
    }
    Ok(out)
}

/// Values are clamped to `[0, 1]` and rounded to 8 bits.
pub fn write_image(path: impl AsRef<Path>, image: &Array3<f64>) -> Result<()> {
    let (h, w, _) = image.dim();
    let buf = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px = |c| quantize(image[[y as usize, x as usize, c]]);
        Rgb([px(0), px(1), px(2)])
    });
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub(crate) fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Reads 8- or 16-bit single-channel PNGs without rescaling values.
pub fn read_label(path: impl AsRef<Path>) -> Result<LabelGrid> {
    let path = path.as_ref();
    let (w, h, data): (u32, u32, Vec<u16>) = match image::open(path)? {
        DynamicImage::ImageLuma16(b) => (b.width(), b.height(), b.into_raw()),
        DynamicImage::ImageLuma8(b) => (b.width(), b.height(), b.into_raw().into_iter().map(u16::from).collect()),
        other => {
            return Err(Error::ShapeMismatch(format!(
                "label {} must be single-channel, found {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    let grid = Array2::from_shape_vec((h as usize, w as usize), data)
        .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    Ok(LabelGrid(grid))
}

pub fn write_label(path: impl AsRef<Path>, label: &LabelGrid) -> Result<()> {
    let (h, w) = label.dim();
    let data: Vec<u16> = label.0.iter().copied().collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, data).expect("buffer length matches dimensions");
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// First index of the largest value among `channels` at pixel `(y, x)`.
fn argmax_at(out: &DecoderOutput, channels: impl Iterator<Item = usize>, y: usize, x: usize) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for c in channels {
        let v = out.mask_logits[[c, y, x]];
        if best.map_or(true, |(_, b)| v > b) {
            best = Some((c, v));
        }
    }
    best.map(|(c, _)| c)
}

fn check_output(out: &DecoderOutput, taxonomy: &Taxonomy) -> Result<()> {
    let expected = crate::model::ChannelLayout::for_taxonomy(taxonomy).total();
    if out.layout.total() != expected || out.mask_logits.dim().0 != expected {
        return Err(Error::ChannelMismatch { expected, got: out.mask_logits.dim().0 });
    }
    Ok(())
}

/// Oracle-Obj: inside the ground-truth object mask, argmax over only that
/// object's pair channels; background elsewhere.
pub fn oracle_obj_restrict(
    out: &DecoderOutput,
    object_mask: ArrayView2<bool>,
    object: usize,
    taxonomy: &Taxonomy,
) -> Result<LabelGrid> {
    check_output(out, taxonomy)?;
    let (_, h, w) = out.mask_logits.dim();
    if object_mask.dim() != (h, w) {
        return Err(Error::ShapeMismatch(format!("mask {:?} vs logits {:?}", object_mask.dim(), (h, w))));
    }
    taxonomy.parts_of_object(object)?;
    let pairs: Vec<usize> = (0..taxonomy.num_pairs()).filter(|&k| taxonomy.pair(k).0 == object).collect();
    if !object_mask.iter().any(|&m| m) || pairs.is_empty() {
        return Err(Error::EmptyMask);
    }
    let mut grid = Array2::zeros((h, w));
    for ((y, x), &m) in object_mask.indexed_iter() {
        if m {
            let k = argmax_at(out, pairs.iter().map(|&k| out.layout.pair(k)), y, x).expect("nonempty");
            grid[[y, x]] = (k + 1) as u16;
        }
    }
    Ok(LabelGrid(grid))
}

/// Oracle-Obj over every ground-truth object of an image.
pub fn oracle_obj_decode(out: &DecoderOutput, object_label: &LabelGrid, taxonomy: &Taxonomy) -> Result<LabelGrid> {
    let mut grid = LabelGrid(Array2::zeros(object_label.dim()));
    let top = object_label.max_value() as usize;
    if top > taxonomy.num_objects() {
        return Err(Error::UnknownObject(top - 1));
    }
    for o in 1..=top {
        let mask = object_label.mask_of(o as u16);
        if !mask.iter().any(|&m| m) {
            continue;
        }
        let part = oracle_obj_restrict(out, mask.view(), o - 1, taxonomy)?;
        for (g, (&p, &m)) in grid.0.iter_mut().zip(part.0.iter().zip(mask.iter())) {
            if m {
                *g = p;
            }
        }
    }
    Ok(grid)
}

/// Pred-All: argmax over every pair channel and the object-part uncategory
/// channel; an uncategory win is background.
pub fn pred_all_decode(out: &DecoderOutput) -> LabelGrid {
    let (_, h, w) = out.mask_logits.dim();
    let k = out.layout.pairs;
    let mut grid = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let c = argmax_at(out, 0..=k, y, x).expect("at least the uncategory channel");
            grid[[y, x]] = if c < k { (c + 1) as u16 } else { 0 };
        }
    }
    LabelGrid(grid)
}

#[cfg(test)]
mod tests {
    use ndarray::array;

    use super::*;
    use crate::attncontrol::AttentionStack;
    use crate::model::ChannelLayout;

    fn tax() -> Taxonomy {
        Taxonomy::build(&["a's x", "a's y", "b's x", "b's z"], &["b"]).unwrap()
    }

    fn output(t: &Taxonomy, logits: Array3<f64>) -> DecoderOutput {
        let attention = AttentionStack { token_h: 1, token_w: 1, objects: vec![], parts: vec![] };
        DecoderOutput { layout: ChannelLayout::for_taxonomy(t), mask_logits: logits, attention }
    }

    #[test]
    fn uncategory_wins_everywhere() {
        let t = tax();
        let mut l = Array3::zeros((ChannelLayout::for_taxonomy(&t).total(), 2, 2));
        l.index_axis_mut(ndarray::Axis(0), 4).fill(1.0);
        assert!(pred_all_decode(&output(&t, l)).0.iter().all(|&v| v == 0));
    }

    #[test]
    fn one_pair_wins_everywhere() {
        let t = tax();
        let mut l = Array3::zeros((ChannelLayout::for_taxonomy(&t).total(), 2, 3));
        l.index_axis_mut(ndarray::Axis(0), 2).fill(5.0);
        assert!(pred_all_decode(&output(&t, l)).0.iter().all(|&v| v == 3));
    }

    #[test]
    fn oracle_excludes_other_objects() {
        let t = tax();
        let mut l = Array3::zeros((ChannelLayout::for_taxonomy(&t).total(), 1, 2));
        l[[2, 0, 0]] = 9.0;
        l[[1, 0, 0]] = 1.0;
        l[[0, 0, 1]] = 2.0;
        let mask = array![[true, true]];
        let g = oracle_obj_restrict(&output(&t, l), mask.view(), 0, &t).unwrap();
        assert_eq!(g.0, array![[2, 1]]);
    }

    #[test]
    fn oracle_errors() {
        let t = tax();
        let l = Array3::zeros((ChannelLayout::for_taxonomy(&t).total(), 1, 2));
        let out = output(&t, l);
        let empty = array![[false, false]];
        assert!(matches!(oracle_obj_restrict(&out, empty.view(), 0, &t), Err(Error::EmptyMask)));
        let full = array![[true, true]];
        assert!(matches!(oracle_obj_restrict(&out, full.view(), 7, &t), Err(Error::UnknownObject(7))));
    }

    #[test]
    fn object_labels_follow_pairs() {
        let t = tax();
        let l = LabelGrid(array![[0, 1, 2], [3, 4, 0]]);
        assert_eq!(object_labels(&l, &t).unwrap().0, array![[0, 1, 1], [2, 2, 0]]);
        assert!(object_labels(&LabelGrid(array![[5]]), &t).is_err());
    }

    #[test]
    fn remap_drops_unseen() {
        let t = tax();
        let (_, remap) = t.seen_only();
        let l = LabelGrid(array![[0, 1, 2, 3, 4]]);
        assert_eq!(remap_labels(&l, &remap).0, array![[0, 1, 2, 0, 0]]);
    }
}
