//! Synthetic object/part benchmark: one parameterized shape per image, split
//! into a dark "cap" band at the top, a bright small "dot" inside, and the
//! remaining "body".

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{quantize, write_image, write_label, write_manifest, Sample, SampleRef};
use crate::error::{Error, Result};
use crate::metrics::LabelGrid;
use crate::taxonomy::{format_category, Taxonomy};

pub const SYNTH_PARTS: [&str; 3] = ["cap", "body", "dot"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Ellipse,
    Rectangle,
    Diamond,
}

impl Shape {
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            Shape::Ellipse => u * u + v * v <= 1.0,
            Shape::Rectangle => u.abs() <= 1.0 && v.abs() <= 1.0,
            Shape::Diamond => u.abs() + v.abs() <= 1.0,
        }
    }
}

impl std::str::FromStr for Shape {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "ellipse" => Ok(Shape::Ellipse),
            "rectangle" => Ok(Shape::Rectangle),
            "diamond" => Ok(Shape::Diamond),
            _ => Err(format!("unknown shape {s:?} (ellipse, rectangle, diamond)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthObject {
    pub name: String,
    pub shape: Shape,
    pub color: [f64; 3],
    pub unseen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub objects: Vec<SynthObject>,
    /// Fraction of the object's bounding-box height taken by the cap band.
    pub cap_ratio: f64,
    /// Upper bound on dot area as a fraction of object area.
    pub small_part_ratio: f64,
    /// Object extent range as a fraction of the image side.
    pub size_min: f64,
    pub size_max: f64,
    /// Half-width of uniform per-pixel intensity noise.
    pub noise: f64,
    pub train_samples: usize,
    pub val_samples: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let obj = |name: &str, shape, color, unseen| SynthObject { name: name.into(), shape, color, unseen };
        Self {
            height: 64,
            width: 64,
            objects: vec![
                obj("blobA", Shape::Ellipse, [0.85, 0.3, 0.2], false),
                obj("blobB", Shape::Rectangle, [0.2, 0.75, 0.3], false),
                obj("blobC", Shape::Diamond, [0.25, 0.35, 0.9], true),
            ],
            cap_ratio: 0.35,
            small_part_ratio: 0.05,
            size_min: 0.5,
            size_max: 0.8,
            noise: 0.03,
            train_samples: 500,
            val_samples: 100,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(Error::config("synth.height", "images must be at least 8x8"));
        }
        if self.objects.is_empty() {
            return Err(Error::config("synth.objects", "at least one object is required"));
        }
        if self.objects.iter().all(|o| o.unseen) {
            return Err(Error::config("synth.unseen", "at least one object must be seen"));
        }
        if !(self.small_part_ratio > 0.0 && self.small_part_ratio <= 0.2) {
            return Err(Error::config("synth.small_part_ratio", "must lie in (0, 0.2]"));
        }
        if !(self.cap_ratio > 0.0 && self.cap_ratio < 1.0) {
            return Err(Error::config("synth.cap_ratio", "must lie in (0, 1)"));
        }
        if !(self.size_min > 0.0 && self.size_min <= self.size_max && self.size_max <= 1.0) {
            return Err(Error::config("synth.size_min", "need 0 < size_min <= size_max <= 1"));
        }
        if !(0.0..0.5).contains(&self.noise) {
            return Err(Error::config("synth.noise", "must lie in [0, 0.5)"));
        }
        Ok(())
    }

    pub fn taxonomy(&self) -> Result<Taxonomy> {
        let names: Vec<String> =
            self.objects.iter().flat_map(|o| SYNTH_PARTS.iter().map(move |p| format_category(&o.name, p))).collect();
        let unseen: Vec<String> = self.objects.iter().filter(|o| o.unseen).map(|o| o.name.clone()).collect();
        Taxonomy::build(&names, &unseen)
    }
}

fn render(cfg: &SynthConfig, object: usize, rng: &mut ChaCha8Rng) -> (Array3<f64>, Array2<u16>) {
    let (h, w) = (cfg.height, cfg.width);
    let spec = &cfg.objects[object];
    let (ry, rx) = (
        0.5 * h as f64 * rng.gen_range(cfg.size_min..=cfg.size_max),
        0.5 * w as f64 * rng.gen_range(cfg.size_min..=cfg.size_max),
    );
    let cy = rng.gen_range(ry..=(h as f64 - ry).max(ry));
    let cx = rng.gen_range(rx..=(w as f64 - rx).max(rx));
    let cap_limit = -1.0 + 2.0 * cfg.cap_ratio;

    // 0 outside, 1 cap, 2 body; dot (3) carved out of the body below.
    let mut part = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let u = (y as f64 + 0.5 - cy) / ry;
            let v = (x as f64 + 0.5 - cx) / rx;
            if spec.shape.contains(u, v) {
                part[[y, x]] = if u < cap_limit { 1 } else { 2 };
            }
        }
    }
    let area = part.iter().filter(|&&p| p > 0).count();
    let body: Vec<(usize, usize)> = part.indexed_iter().filter(|(_, &p)| p == 2).map(|(i, _)| i).collect();
    if !body.is_empty() {
        let budget = (cfg.small_part_ratio * area as f64).floor() as usize;
        let mut radius = (0.9 * budget as f64 / std::f64::consts::PI).sqrt();
        let inside = |cy: usize, cx: usize, r: f64| {
            let ri = r.ceil() as isize;
            (-ri..=ri).all(|dy| {
                (-ri..=ri).all(|dx| {
                    let (y, x) = (cy as isize + dy, cx as isize + dx);
                    (dy * dy + dx * dx) as f64 > r * r
                        || (y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && part[[y as usize, x as usize]] == 2)
                })
            })
        };
        let mut centre = body[rng.gen_range(0..body.len())];
        for _ in 0..64 {
            let c = body[rng.gen_range(0..body.len())];
            if inside(c.0, c.1, radius) {
                centre = c;
                break;
            }
        }
        loop {
            let disc: Vec<(usize, usize)> = body
                .iter()
                .copied()
                .filter(|&(y, x)| {
                    let (dy, dx) = (y as f64 - centre.0 as f64, x as f64 - centre.1 as f64);
                    dy * dy + dx * dx <= radius * radius
                })
                .collect();
            if disc.len() <= budget.max(1) {
                for (y, x) in disc {
                    part[[y, x]] = 3;
                }
                break;
            }
            radius -= 0.25;
        }
    }

    let base = spec.color;
    let mut image = Array3::zeros((h, w, 3));
    let mut label = Array2::zeros((h, w));
    for ((y, x), &p) in part.indexed_iter() {
        let colour = match p {
            0 => [0.5, 0.5, 0.5],
            1 => base.map(|c| 0.45 * c),
            2 => base,
            _ => base.map(|c| 0.35 * c + 0.65),
        };
        for (c, v) in colour.iter().enumerate() {
            let n = if cfg.noise > 0.0 { rng.gen_range(-cfg.noise..=cfg.noise) } else { 0.0 };
            image[[y, x, c]] = quantize(v + n) as f64 / 255.0;
        }
        if p > 0 {
            label[[y, x]] = (object * SYNTH_PARTS.len() + p as usize) as u16;
        }
    }
    (image, label)
}

/// Generate both splits in memory. Train draws only seen objects; val cycles
/// through every object, so it contains each unseen object at least once
/// whenever it has at least as many samples as there are objects.
pub fn generate_samples(cfg: &SynthConfig) -> Result<(Taxonomy, Vec<Sample>, Vec<Sample>)> {
    cfg.validate()?;
    let taxonomy = cfg.taxonomy()?;
    let seen: Vec<usize> = (0..cfg.objects.len()).filter(|&o| !cfg.objects[o].unseen).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut train = Vec::with_capacity(cfg.train_samples);
    for i in 0..cfg.train_samples {
        let o = seen[rng.gen_range(0..seen.len())];
        let (image, label) = render(cfg, o, &mut rng);
        train.push(Sample::new(format!("train_{i:05}"), image, LabelGrid(label), &taxonomy)?);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut val = Vec::with_capacity(cfg.val_samples);
    for i in 0..cfg.val_samples {
        let o = i % cfg.objects.len();
        let (image, label) = render(cfg, o, &mut rng);
        val.push(Sample::new(format!("val_{i:05}"), image, LabelGrid(label), &taxonomy)?);
    }
    Ok((taxonomy, train, val))
}

/// Paths of a generated dataset.
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub root: PathBuf,
    pub taxonomy: Taxonomy,
    pub train: Vec<SampleRef>,
    pub val: Vec<SampleRef>,
}

/// Write both splits under `root`: `images/`, `labels/`, `manifest.tsv`,
/// `train.tsv`, `val.tsv`, `taxonomy.json` and `synth.json`.
pub fn generate_synthetic(cfg: &SynthConfig, root: impl AsRef<Path>) -> Result<SyntheticDataset> {
    let root = root.as_ref().to_path_buf();
    let (taxonomy, train, val) = generate_samples(cfg)?;
    fs::create_dir_all(root.join("images"))?;
    fs::create_dir_all(root.join("labels"))?;
    let mut all = Vec::new();
    let mut refs = (Vec::new(), Vec::new());
    for (split, samples) in [(0, &train), (1, &val)] {
        let mut rows = Vec::new();
        for s in samples {
            let img = format!("images/{}.png", s.id);
            let lbl = format!("labels/{}.png", s.id);
            write_image(root.join(&img), &s.image)?;
            write_label(root.join(&lbl), &s.label)?;
            rows.push((img, lbl));
        }
        let name = if split == 0 { "train.tsv" } else { "val.tsv" };
        write_manifest(root.join(name), &rows)?;
        let parsed = super::load_manifest(root.join(name))?;
        if split == 0 {
            refs.0 = parsed;
        } else {
            refs.1 = parsed;
        }
        all.extend(rows);
    }
    write_manifest(root.join("manifest.tsv"), &all)?;
    taxonomy.save(root.join("taxonomy.json"))?;
    fs::write(root.join("synth.json"), serde_json::to_string_pretty(cfg)? + "\n")?;
    Ok(SyntheticDataset { root, taxonomy, train: refs.0, val: refs.1 })
}
