//! Flat `key = value` run configuration with dotted keys.
//!
//! A config file holds one `key = value` per line; `#` starts a comment.
//! Overrides use the same syntax (`--set train.total_iters=100`). Unknown
//! keys and unparsable values are rejected with the offending key. The
//! effective configuration renders back to the same text format, sorted by
//! key, and its SHA-256 is the config hash stamped on every artifact.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::attncontrol::{EnhanceMap, SepCategories};
use crate::data::{Shape, SynthConfig, SynthObject};
use crate::error::{Error, Result};
use crate::harness::{EvalOptions, TrainConfig};
use crate::model::{hex_digest, ImageSpec, ModelConfig};

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("train.base_lr", "peak learning rate"),
    ("train.total_iters", "optimizer steps"),
    ("train.batch_size", "samples per step"),
    ("train.warmup_iters", "linear warmup steps"),
    ("train.poly_power", "poly decay exponent"),
    ("train.grad_clip_norm", "global gradient-norm cap"),
    ("train.checkpoint_every", "steps between checkpoints (0 = only last)"),
    ("train.beta1", "AdamW first-moment decay"),
    ("train.beta2", "AdamW second-moment decay"),
    ("train.adam_eps", "AdamW epsilon"),
    ("train.weight_decay", "decoupled weight decay"),
    ("train.seed", "batch order and parameter init seed"),
    ("loss.lambda_obj", "object mask loss weight"),
    ("loss.lambda_part", "generalized part mask loss weight"),
    ("loss.lambda_sep", "separation loss weight"),
    ("loss.lambda_enh", "enhancement loss weight"),
    ("attn.gamma", "binarization threshold"),
    ("attn.gaussian_sigma", "smoothing sigma in tokens"),
    ("attn.gaussian_kernel", "smoothing kernel size (odd)"),
    ("attn.tau", "soft binarization temperature"),
    ("attn.eps", "separation denominator guard"),
    ("attn.enhance_map", "normalized | raw"),
    ("attn.sep_categories", "taxonomy | present"),
    ("model.height", "input image height"),
    ("model.width", "input image width"),
    ("model.token_h", "token grid height"),
    ("model.token_w", "token grid width"),
    ("model.embed_dim", "embedding width"),
    ("model.hidden_dim", "decoder MLP width"),
    ("model.num_blocks", "decoder blocks"),
    ("model.encoder_seed", "frozen encoder seed"),
    ("synth.height", "synthetic image height"),
    ("synth.width", "synthetic image width"),
    ("synth.objects", "comma list of name:shape (ellipse, rectangle, diamond)"),
    ("synth.unseen", "comma list of unseen object names"),
    ("synth.cap_ratio", "cap band height fraction"),
    ("synth.small_part_ratio", "max dot area fraction"),
    ("synth.size_min", "min object extent fraction"),
    ("synth.size_max", "max object extent fraction"),
    ("synth.noise", "pixel noise half-width"),
    ("synth.train_samples", "train split size"),
    ("synth.val_samples", "val split size"),
    ("synth.seed", "generator seed"),
    ("data.dir", "dataset directory"),
    ("data.train", "train manifest, relative to data.dir"),
    ("data.val", "validation manifest, relative to data.dir"),
    ("eval.protocol", "pred_all | oracle_obj"),
    ("eval.include_background", "count background in means"),
    ("eval.boundary_width", "Boundary IoU band width in pixels (0 = auto)"),
];

const PALETTE: [[f64; 3]; 6] = [
    [0.85, 0.3, 0.2],
    [0.2, 0.75, 0.3],
    [0.25, 0.35, 0.9],
    [0.85, 0.75, 0.2],
    [0.7, 0.3, 0.8],
    [0.2, 0.75, 0.8],
];

#[derive(Clone, Debug, PartialEq)]
pub struct DataPaths {
    pub dir: PathBuf,
    pub train: String,
    pub val: String,
}

impl Default for DataPaths {
    fn default() -> Self {
        Self { dir: PathBuf::from("data/synth"), train: "train.tsv".into(), val: "val.tsv".into() }
    }
}

impl DataPaths {
    pub fn train_manifest(&self) -> PathBuf {
        self.dir.join(&self.train)
    }

    pub fn val_manifest(&self) -> PathBuf {
        self.dir.join(&self.val)
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub synth: SynthConfig,
    pub data: DataPaths,
    pub eval: EvalOptions,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value.trim().parse::<T>().map_err(|e| Error::config(key, format!("cannot parse {value:?}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::config(key, format!("expected true or false, got {other:?}"))),
    }
}

fn split_list(value: &str) -> Vec<String> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
}

impl RunConfig {
    /// Set one dotted key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let t = &mut self.train;
        let m = &mut self.model;
        let s = &mut self.synth;
        match key {
            "train.base_lr" => t.base_lr = parse(key, v)?,
            "train.total_iters" => t.total_iters = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.warmup_iters" => t.warmup_iters = parse(key, v)?,
            "train.poly_power" => t.poly_power = parse(key, v)?,
            "train.grad_clip_norm" => t.grad_clip_norm = parse(key, v)?,
            "train.checkpoint_every" => t.checkpoint_every = parse(key, v)?,
            "train.beta1" => t.optimizer.beta1 = parse(key, v)?,
            "train.beta2" => t.optimizer.beta2 = parse(key, v)?,
            "train.adam_eps" => t.optimizer.eps = parse(key, v)?,
            "train.weight_decay" => t.optimizer.weight_decay = parse(key, v)?,
            "train.seed" => t.seed = parse(key, v)?,
            "loss.lambda_obj" => t.loss.lambda_obj = parse(key, v)?,
            "loss.lambda_part" => t.loss.lambda_part = parse(key, v)?,
            "loss.lambda_sep" => t.loss.lambda_sep = parse(key, v)?,
            "loss.lambda_enh" => t.loss.lambda_enh = parse(key, v)?,
            "attn.gamma" => t.attn.gamma = parse(key, v)?,
            "attn.gaussian_sigma" => t.attn.gaussian_sigma = parse(key, v)?,
            "attn.gaussian_kernel" => t.attn.gaussian_kernel = parse(key, v)?,
            "attn.tau" => t.attn.tau = parse(key, v)?,
            "attn.eps" => t.attn.eps = parse(key, v)?,
            "attn.enhance_map" => {
                t.attn.enhance_map = match v {
                    "normalized" => EnhanceMap::Normalized,
                    "raw" => EnhanceMap::Raw,
                    _ => return Err(Error::config(key, format!("expected normalized or raw, got {v:?}"))),
                }
            }
            "attn.sep_categories" => {
                t.attn.sep_categories = match v {
                    "taxonomy" => SepCategories::Taxonomy,
                    "present" => SepCategories::Present,
                    _ => return Err(Error::config(key, format!("expected taxonomy or present, got {v:?}"))),
                }
            }
            "model.height" => m.image.height = parse(key, v)?,
            "model.width" => m.image.width = parse(key, v)?,
            "model.token_h" => m.image.token_h = parse(key, v)?,
            "model.token_w" => m.image.token_w = parse(key, v)?,
            "model.embed_dim" => m.image.embed_dim = parse(key, v)?,
            "model.hidden_dim" => m.hidden_dim = parse(key, v)?,
            "model.num_blocks" => m.num_blocks = parse(key, v)?,
            "model.encoder_seed" => m.encoder_seed = parse(key, v)?,
            "synth.height" => s.height = parse(key, v)?,
            "synth.width" => s.width = parse(key, v)?,
            "synth.objects" => {
                let unseen: Vec<String> = s.objects.iter().filter(|o| o.unseen).map(|o| o.name.clone()).collect();
                let mut objects = Vec::new();
                for (i, item) in split_list(v).iter().enumerate() {
                    let (name, shape) = item
                        .split_once(':')
                        .ok_or_else(|| Error::config(key, format!("expected name:shape, got {item:?}")))?;
                    let shape: Shape = parse(key, shape)?;
                    objects.push(SynthObject {
                        name: name.trim().to_string(),
                        shape,
                        color: PALETTE[i % PALETTE.len()],
                        unseen: unseen.iter().any(|u| u == name.trim()),
                    });
                }
                s.objects = objects;
            }
            "synth.unseen" => {
                let names = split_list(v);
                for n in &names {
                    if !s.objects.iter().any(|o| &o.name == n) {
                        return Err(Error::config(key, format!("unknown synthetic object {n:?}")));
                    }
                }
                for o in &mut s.objects {
                    o.unseen = names.contains(&o.name);
                }
            }
            "synth.cap_ratio" => s.cap_ratio = parse(key, v)?,
            "synth.small_part_ratio" => s.small_part_ratio = parse(key, v)?,
            "synth.size_min" => s.size_min = parse(key, v)?,
            "synth.size_max" => s.size_max = parse(key, v)?,
            "synth.noise" => s.noise = parse(key, v)?,
            "synth.train_samples" => s.train_samples = parse(key, v)?,
            "synth.val_samples" => s.val_samples = parse(key, v)?,
            "synth.seed" => s.seed = parse(key, v)?,
            "data.dir" => self.data.dir = PathBuf::from(v),
            "data.train" => self.data.train = v.to_string(),
            "data.val" => self.data.val = v.to_string(),
            "eval.protocol" => self.eval.protocol = v.parse().map_err(|e: String| Error::config(key, e))?,
            "eval.include_background" => self.eval.include_background = parse_bool(key, v)?,
            "eval.boundary_width" => {
                let w: usize = parse(key, v)?;
                self.eval.boundary_width = (w > 0).then_some(w);
            }
            _ => return Err(Error::config(key, "unknown key")),
        }
        self.model.init_seed = self.train.seed;
        Ok(())
    }

    /// The effective configuration, one entry per key.
    pub fn entries(&self) -> BTreeMap<String, String> {
        let t = &self.train;
        let m = &self.model;
        let s = &self.synth;
        let mut e = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            e.insert(k.to_string(), v);
        };
        put("train.base_lr", t.base_lr.to_string());
        put("train.total_iters", t.total_iters.to_string());
        put("train.batch_size", t.batch_size.to_string());
        put("train.warmup_iters", t.warmup_iters.to_string());
        put("train.poly_power", t.poly_power.to_string());
        put("train.grad_clip_norm", t.grad_clip_norm.to_string());
        put("train.checkpoint_every", t.checkpoint_every.to_string());
        put("train.beta1", t.optimizer.beta1.to_string());
        put("train.beta2", t.optimizer.beta2.to_string());
        put("train.adam_eps", t.optimizer.eps.to_string());
        put("train.weight_decay", t.optimizer.weight_decay.to_string());
        put("train.seed", t.seed.to_string());
        put("loss.lambda_obj", t.loss.lambda_obj.to_string());
        put("loss.lambda_part", t.loss.lambda_part.to_string());
        put("loss.lambda_sep", t.loss.lambda_sep.to_string());
        put("loss.lambda_enh", t.loss.lambda_enh.to_string());
        put("attn.gamma", t.attn.gamma.to_string());
        put("attn.gaussian_sigma", t.attn.gaussian_sigma.to_string());
        put("attn.gaussian_kernel", t.attn.gaussian_kernel.to_string());
        put("attn.tau", t.attn.tau.to_string());
        put("attn.eps", t.attn.eps.to_string());
        put(
            "attn.enhance_map",
            match t.attn.enhance_map {
                EnhanceMap::Normalized => "normalized",
                EnhanceMap::Raw => "raw",
            }
            .into(),
        );
        put(
            "attn.sep_categories",
            match t.attn.sep_categories {
                SepCategories::Taxonomy => "taxonomy",
                SepCategories::Present => "present",
            }
            .into(),
        );
        put("model.height", m.image.height.to_string());
        put("model.width", m.image.width.to_string());
        put("model.token_h", m.image.token_h.to_string());
        put("model.token_w", m.image.token_w.to_string());
        put("model.embed_dim", m.image.embed_dim.to_string());
        put("model.hidden_dim", m.hidden_dim.to_string());
        put("model.num_blocks", m.num_blocks.to_string());
        put("model.encoder_seed", m.encoder_seed.to_string());
        put("synth.height", s.height.to_string());
        put("synth.width", s.width.to_string());
        let shape = |sh: Shape| match sh {
            Shape::Ellipse => "ellipse",
            Shape::Rectangle => "rectangle",
            Shape::Diamond => "diamond",
        };
        put("synth.objects", s.objects.iter().map(|o| format!("{}:{}", o.name, shape(o.shape))).collect::<Vec<_>>().join(","));
        put("synth.unseen", s.objects.iter().filter(|o| o.unseen).map(|o| o.name.as_str()).collect::<Vec<_>>().join(","));
        put("synth.cap_ratio", s.cap_ratio.to_string());
        put("synth.small_part_ratio", s.small_part_ratio.to_string());
        put("synth.size_min", s.size_min.to_string());
        put("synth.size_max", s.size_max.to_string());
        put("synth.noise", s.noise.to_string());
        put("synth.train_samples", s.train_samples.to_string());
        put("synth.val_samples", s.val_samples.to_string());
        put("synth.seed", s.seed.to_string());
        put("data.dir", self.data.dir.display().to_string());
        put("data.train", self.data.train.clone());
        put("data.val", self.data.val.clone());
        put("eval.protocol", self.eval.protocol.to_string());
        put("eval.include_background", self.eval.include_background.to_string());
        put("eval.boundary_width", self.eval.boundary_width.unwrap_or(0).to_string());
        e
    }

    pub fn render(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.render().as_bytes());
        hex_digest(h)
    }

    /// Apply every `key = value` line of `text`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", i + 1), format!("expected key = value, got {line:?}")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Apply one `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(assignment, "override must have the form key=value"))?;
        self.set(k.trim(), v)
    }

    /// Defaults, then the optional file, then overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::config("--config", format!("cannot read {}: {e}", p.display())))?;
            cfg.apply_text(&text)?;
        }
        for o in overrides {
            cfg.apply_override(o)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.synth.validate()?;
        let i = self.model.image;
        ImageSpec::new(i.height, i.width, i.token_h, i.token_w, i.embed_dim)
            .map_err(|e| Error::config("model.token_h", e.to_string()))?;
        if self.model.num_blocks == 0 || self.model.hidden_dim == 0 {
            return Err(Error::config("model.num_blocks", "decoder needs at least one block and hidden unit"));
        }
        Ok(())
    }
}
